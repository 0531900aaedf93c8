"""Reuse benchmarks behind the `bench` CLI subcommand.

Each bench runs one workload under `none` plus a reuse mode, writes a
delimited results file, and renders the timing comparison to a PNG next to
it.  Sizes default to the demo scale; tests shrink them via the flags.
"""
from __future__ import annotations

import csv
import os
import time

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .builtins import cvlm_fit, gen_data, grid_search_lm
from .interpreter import Session


def _lambda_grid(k: int) -> list:
    return [0.1 * (i + 1) for i in range(k)]


def bench_hpo(models: int = 40, rows: int = 20000, cols: int = 200,
              lineage: str = "reuse_full", seed: int = 13,
              out_dir: str = ".") -> str:
    """Grid-search timing as the model count grows, with and without reuse."""
    X, y = gen_data(rows, cols, 1.0, seed)
    ks = sorted({1, max(2, models // 4), max(3, models // 2), models})
    rowsout = []
    for mode in ("none", lineage):
        for k in ks:
            s = Session(lineage=mode, echo=False)
            t0 = time.perf_counter()
            grid_search_lm(X, y, _lambda_grid(k), s)
            dt = time.perf_counter() - t0
            cstats = s.cache.stats_dict() if s.cache else {}
            rowsout.append({
                "mode": mode, "models": k, "seconds": f"{dt:.6f}",
                "tsmm_exec": s.stats.counts.get("tsmm", 0),
                "matmul_exec": s.stats.counts.get("matmul", 0),
                "cache_hits": sum(cstats.get("hits", {}).values()),
            })
    return _emit(rowsout, "hpo", "models", out_dir)


def bench_cv(folds: int = 10, rows: int = 5000, cols: int = 50,
             lineage: str = "reuse_partial", seed: int = 7,
             out_dir: str = ".") -> str:
    """Cross-validation timing: fold Grams are recomputed k-1 times without
    reuse and once with it."""
    X, y = gen_data(rows, cols, 1.0, seed)
    rowsout = []
    for mode in ("none", lineage):
        s = Session(lineage=mode, echo=False)
        t0 = time.perf_counter()
        cvlm_fit(X, y, folds, 1e-3, s)
        dt = time.perf_counter() - t0
        cstats = s.cache.stats_dict() if s.cache else {}
        rowsout.append({
            "mode": mode, "folds": folds, "seconds": f"{dt:.6f}",
            "tsmm_exec": s.stats.counts.get("tsmm", 0),
            "matmul_exec": s.stats.counts.get("matmul", 0),
            "cache_hits": sum(cstats.get("hits", {}).values()),
        })
    return _emit(rowsout, "cv", "folds", out_dir)


def _emit(rows: list, kind: str, xkey: str, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"bench_{kind}.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)

    fig, ax = plt.subplots(figsize=(6, 4))
    modes = []
    for r in rows:
        if r["mode"] not in modes:
            modes.append(r["mode"])
    for mode in modes:
        pts = [(int(r[xkey]), float(r["seconds"])) for r in rows
               if r["mode"] == mode]
        pts.sort()
        if len(pts) > 1:
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker="o", label=mode)
        else:
            ax.bar([f"{mode}"], [pts[0][1]], label=mode)
    ax.set_xlabel(xkey)
    ax.set_ylabel("seconds")
    ax.set_title(f"lineal bench {kind}")
    ax.legend()
    fig.tight_layout()
    png_path = os.path.join(out_dir, f"bench_{kind}.png")
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return csv_path
