"""Command line entry point: run scripts, serve workers, generate data, bench."""
from __future__ import annotations

import argparse
import sys

from . import federated, tensorio
from .errors import LinealError, ScriptRuntimeError, ScriptSyntaxError
from .interpreter import LINEAGE_MODES, Session


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--cache-bytes", type=int, default=256 * 1024 * 1024)
    p.add_argument("--stats", action="store_true")
    p.add_argument("--lineage", choices=LINEAGE_MODES, default="none")
    p.add_argument("--lineage-out", default=None)
    p.add_argument("--seed", type=int, default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="lineal",
                                     description="declarative tensor scripts "
                                                 "with lineage-based reuse")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", parents=[common], help="execute a script")
    runp.add_argument("script")
    runp.add_argument("-nvargs", nargs="*", default=[], metavar="k=v")

    workp = sub.add_parser("worker", parents=[common],
                           help="serve a federated worker")
    workp.add_argument("port", type=int)

    genp = sub.add_parser("gendata", parents=[common],
                          help="write a random regression dataset")
    genp.add_argument("--rows", type=int, required=True)
    genp.add_argument("--cols", type=int, required=True)
    genp.add_argument("--sparsity", type=float, default=1.0)
    genp.add_argument("--out", required=True)

    benchp = sub.add_parser("bench", parents=[common],
                            help="run a reuse benchmark")
    benchp.add_argument("kind", choices=("hpo", "cv"))
    benchp.add_argument("--models", type=int, default=40)
    benchp.add_argument("--folds", type=int, default=10)
    benchp.add_argument("--rows", type=int, default=None)
    benchp.add_argument("--cols", type=int, default=None)
    benchp.add_argument("--out-dir", default=".")
    return parser


def _parse_nvargs(pairs) -> dict:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise SystemExit(f"bad -nvargs entry {p!r}; expected k=v")
        k, v = p.split("=", 1)
        out[k] = v
    return out


def _cmd_run(args) -> int:
    try:
        with open(args.script) as f:
            text = f.read()
    except OSError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 1
    session = Session(threads=args.threads, cache_bytes=args.cache_bytes,
                      lineage=args.lineage, seed=args.seed)
    try:
        session.run(text, nvargs=_parse_nvargs(args.nvargs))
    except (ScriptSyntaxError, ScriptRuntimeError, LinealError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 1
    finally:
        session.close()
    if args.lineage_out and session.store is not None:
        with open(args.lineage_out, "w") as f:
            f.write(session.lineage_text())
    if args.stats:
        print(session.stats.table(session.cache, session.store))
    return 0


def _cmd_worker(args) -> int:
    w = federated.Worker(port=args.port)
    print(f"worker listening on {w.endpoint}", flush=True)
    w.serve_blocking()
    return 0


def _cmd_gendata(args) -> int:
    from .builtins import gen_data
    X, y = gen_data(args.rows, args.cols, args.sparsity, args.seed)
    x_path = args.out
    root, ext = (x_path.rsplit(".", 1) + ["csv"])[:2] if "." in x_path \
        else (x_path, "csv")
    y_path = f"{root}_y.{ext}"
    tensorio.write_any(X, x_path)
    tensorio.write_any(y, y_path)
    print(f"wrote {x_path} and {y_path}")
    return 0


def _cmd_bench(args) -> int:
    from . import bench
    if args.kind == "hpo":
        lineage = args.lineage if args.lineage != "none" else "reuse_full"
        path = bench.bench_hpo(models=args.models,
                               rows=args.rows or 20000, cols=args.cols or 200,
                               lineage=lineage, seed=args.seed,
                               out_dir=args.out_dir)
    else:
        lineage = args.lineage if args.lineage != "none" else "reuse_partial"
        path = bench.bench_cv(folds=args.folds,
                              rows=args.rows or 5000, cols=args.cols or 50,
                              lineage=lineage, seed=args.seed,
                              out_dir=args.out_dir)
    print(f"results: {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "worker":
            return _cmd_worker(args)
        if args.command == "gendata":
            return _cmd_gendata(args)
        return _cmd_bench(args)
    except LinealError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
