"""End-to-end script execution: semantics, lineage modes, reuse, federated."""
import numpy as np
import pytest

from lineal import compiler as C
from lineal import federated as fed
from lineal import lineage as L
from lineal.blocks import BasicTensorBlock
from lineal.builtins import gen_data
from lineal.errors import ScriptRuntimeError
from lineal.interpreter import Session
from lineal.vtypes import Scalar, ValueType


def blk(arr):
    return BasicTensorBlock.from_array(np.asarray(arr, dtype=np.float64))


def run(src, mode="none", **kw):
    s = Session(lineage=mode, echo=False, **{k: v for k, v in kw.items()
                                             if k not in ("inputs", "keep", "nvargs")})
    out = s.run(src, inputs=kw.get("inputs"), keep=kw.get("keep", ()),
                nvargs=kw.get("nvargs"))
    return s, out


# ------------------------------------------------------------------ scalars

def test_scalar_arithmetic_and_precedence():
    _, out = run("a = 2 + 3 * 4 ^ 2\nb = -2 ^ 2\nc = 7 / 2\nd = (2 + 3) * 4\n",
                 keep=("a", "b", "c", "d"))
    assert out["a"].value == 50.0  # ^ promotes to FP64, then + * stay FP64
    assert out["b"].value == -4.0
    assert out["c"].vtype is ValueType.FP64 and out["c"].value == 3.5
    assert out["d"].vtype is ValueType.INT64 and out["d"].value == 20


def test_scalar_types_and_strings():
    _, out = run('i = 3 + 4\nf = 3.0 + 4\ns = "n=" + 7\nb = 2 < 3\n'
                 'l = TRUE & FALSE\nm = min(3, 2.5)\n',
                 keep=("i", "f", "s", "b", "l", "m"))
    assert out["i"].vtype is ValueType.INT64
    assert out["f"].vtype is ValueType.FP64
    assert out["s"].value == "n=7"
    assert out["b"].vtype is ValueType.BOOLEAN and out["b"].value is True
    assert out["l"].value is False
    assert out["m"].vtype is ValueType.FP64 and out["m"].value == 2.5


def test_division_never_raises_on_zero():
    _, out = run("a = 1 / 0\nb = 0.0 / 0\n", keep=("a", "b"))
    assert out["a"].value == np.inf
    assert np.isnan(out["b"].value)


# ------------------------------------------------------------------ tensors

def test_matrix_ops_match_numpy():
    rng = np.random.default_rng(0)
    A, B = rng.uniform(size=(6, 4)), rng.uniform(size=(4, 5))
    _, out = run("""
C = A %*% B
G = tsmm(A)
T = t(A)
rs = rowSums(A)
cs = colSums(A)
s = sum(A)
mn = mean(A)
e = A * 2 + 1
""", inputs={"A": blk(A), "B": blk(B)},
        keep=("C", "G", "T", "rs", "cs", "s", "mn", "e"))
    assert np.allclose(out["C"].to_array(), A @ B, atol=1e-12)
    assert np.allclose(out["G"].to_array(), A.T @ A, atol=1e-12)
    assert np.allclose(out["T"].to_array(), A.T)
    assert np.allclose(out["rs"].to_array(), A.sum(1, keepdims=True))
    assert np.allclose(out["cs"].to_array(), A.sum(0, keepdims=True))
    assert abs(out["s"].value - A.sum()) < 1e-10
    assert abs(out["mn"].value - A.mean()) < 1e-12
    assert np.allclose(out["e"].to_array(), A * 2 + 1)


def test_indexing_is_one_based_inclusive():
    M = np.arange(1.0, 13.0).reshape(3, 4)
    _, out = run("""
a = X[2, 3]
r = X[2, ]
c = X[, 4]
w = X[2:3, 1:2]
X[1, 1] = 99
X[3, ] = matrix(7, 1, 4)
""", inputs={"X": blk(M)}, keep=("a", "r", "c", "w", "X"))
    assert out["a"].to_array()[0, 0] == 7.0
    assert np.allclose(out["r"].to_array(), M[1:2, :])
    assert np.allclose(out["c"].to_array(), M[:, 3:4])
    assert np.allclose(out["w"].to_array(), M[1:3, 0:2])
    got = out["X"].to_array()
    assert got[0, 0] == 99 and np.all(got[2] == 7)


def test_index_out_of_bounds_reports_line():
    with pytest.raises(ScriptRuntimeError, match="line 2"):
        run("X = matrix(1, 2, 2)\ny = X[5, 1]\n", keep=("y",))


# ------------------------------------------------------------------ control

def test_for_bounds_evaluate_once():
    _, out = run("n = 3\ns = 0\nfor (i in 1:n) {\n  n = 10\n  s = s + i\n}\n",
                 keep=("s", "n"))
    assert out["s"].value == 6
    assert out["n"].value == 10


def test_descending_for():
    _, out = run('s = ""\nfor (i in 3:1) { s = s + i }\n', keep=("s",))
    assert out["s"].value == "321"


def test_while_and_if():
    _, out = run("""
i = 0
even = 0
while (i < 10) {
  i = i + 1
  if (i == 2 * floor(i / 2)) { even = even + 1 }
}
""", keep=("i", "even"))
    assert out["i"].value == 10
    assert out["even"].value == 5


def test_function_scoping_params_only():
    with pytest.raises(ScriptRuntimeError, match="undefined variable 'g'"):
        run("""
g = 5
f = function(Integer x) return (Integer y) { y = x + g }
z = f(1)
""", keep=("z",))


def test_function_defaults_see_earlier_params():
    _, out = run("""
f = function(Integer a, Integer b = 10, Integer c = 2) return (Integer r) {
  r = a + b * c
}
u = f(1)
v = f(1, 3)
w = f(1, 3, 4)
""", keep=("u", "v", "w"))
    assert out["u"].value == 21
    assert out["v"].value == 7
    assert out["w"].value == 13


def test_print_capture_and_tostring():
    s, _ = run('x = matrix(2, 1, 2)\nprint("v " + 1.5)\nprint(toString(x))\n')
    assert s.prints == ["v 1.5", "2 2"]


def test_nvargs_coercion():
    _, out = run("a = $a\nb = $b\nc = $c\nd = $d\ne = a + b\n",
                 nvargs={"a": "3", "b": "2.5", "c": "TRUE", "d": "hi"},
                 keep=("a", "b", "c", "d", "e"))
    assert out["a"].vtype is ValueType.INT64
    assert out["b"].vtype is ValueType.FP64
    assert out["c"].value is True
    assert out["d"].value == "hi"
    assert out["e"].value == 5.5


def test_runtime_errors_carry_script_line():
    with pytest.raises(ScriptRuntimeError, match="line 3"):
        run("x = matrix(1, 2, 2)\ny = matrix(1, 3, 3)\nz = x %*% y\n",
            keep=("z",))


# --------------------------------------------------------------------- rand

def test_rand_deterministic_per_session_seed():
    src = "a = rand(rows=4, cols=3)\nb = rand(rows=4, cols=3)\n"
    _, o1 = run(src, seed=5, keep=("a", "b"))
    _, o2 = run(src, seed=5, keep=("a", "b"))
    _, o3 = run(src, seed=6, keep=("a", "b"))
    assert np.array_equal(o1["a"].to_array(), o2["a"].to_array())
    assert np.array_equal(o1["b"].to_array(), o2["b"].to_array())
    assert not np.array_equal(o1["a"].to_array(), o1["b"].to_array())
    assert not np.array_equal(o1["a"].to_array(), o3["a"].to_array())


def test_rand_explicit_seed_overrides_session():
    src = "a = rand(rows=3, cols=3, seed=42)\n"
    _, o1 = run(src, seed=1, keep=("a",))
    _, o2 = run(src, seed=2, keep=("a",))
    assert np.array_equal(o1["a"].to_array(), o2["a"].to_array())


def test_gendata_two_outputs():
    _, out = run("[X, y] = genData(50, 4, 1.0, 9)\ns = sum(X)\n",
                 keep=("X", "y", "s"))
    X2, y2 = gen_data(50, 4, 1.0, 9)
    assert np.array_equal(out["X"].to_array(), X2.to_array())
    assert np.array_equal(out["y"].to_array(), y2.to_array())


# ----------------------------------------------------------------- rewrites

def test_dce_removes_dead_work():
    src = "x = rand(rows=40, cols=40)\ndead = tsmm(x)\ns = sum(x)\n"
    s1, _ = run(src, keep=("s",))
    assert "tsmm" not in s1.stats.counts
    s2 = Session(echo=False, rewrites=C.Rewrites(dce=False))
    s2.run(src, keep=("s",))
    assert s2.stats.counts["tsmm"] == 1


def test_const_branch_folds_at_compile_time():
    s, out = run("if (TRUE) { a = 1 } else { a = 2 }\n", keep=("a",))
    assert out["a"].value == 1
    assert not any(isinstance(b, C.CIf) for b in s.program.main)


def test_single_call_site_is_inlined():
    src = ("f = function(Matrix[Double] A) return (Matrix[Double] B) "
           "{ B = A + 1 }\nX = matrix(1, 2, 2)\nY = f(X)\n")
    s, out = run(src, keep=("Y",))
    assert np.all(out["Y"].to_array() == 2)
    instrs = [i.opcode for b in s.program.main if isinstance(b, C.Basic)
              for i in b.instrs]
    assert "fcall" not in instrs


def test_rewrite_toggles_do_not_change_results():
    src = """
[X, y] = genData(120, 6, 1.0, 3)
G = tsmm(X)
beta = solve(G + diag(matrix(0.1, ncol(X), 1)), t(X) %*% y)
r = y - X %*% beta
rss = sum(r * r)
"""
    _, o1 = run(src, keep=("beta", "rss"))
    s2 = Session(echo=False, rewrites=C.Rewrites(dce=False, const_branch=False,
                                                 inline=False, cv_rbind=False,
                                                 tsmm_fuse=False))
    o2 = s2.run(src, keep=("beta", "rss"))
    assert np.allclose(o1["beta"].to_array(), o2["beta"].to_array(),
                       rtol=1e-12, atol=1e-14)
    assert abs(o1["rss"].value - o2["rss"].value) <= 1e-12 * max(1.0, o1["rss"].value)


def test_thread_count_does_not_change_results():
    from lineal import kernels
    src = "G = tsmm(X)\nC2 = X %*% t(X)\ns = sum(G) + sum(C2)\n"
    X = gen_data(300, 40, 1.0, 8)[0]
    saved = kernels.get_num_threads()
    try:
        s1 = Session(threads=1, echo=False)
        o1 = s1.run(src, inputs={"X": X}, keep=("G", "C2", "s"))
        s4 = Session(threads=4, echo=False)
        o4 = s4.run(src, inputs={"X": X}, keep=("G", "C2", "s"))
    finally:
        kernels.set_num_threads(saved)
    assert np.allclose(o1["G"].to_array(), o4["G"].to_array(),
                       rtol=1e-12, atol=1e-14)
    assert np.allclose(o1["C2"].to_array(), o4["C2"].to_array(),
                       rtol=1e-12, atol=1e-14)


# -------------------------------------------------------------------- reuse

def test_full_reuse_skips_repeated_work():
    X = gen_data(2000, 100, 1.0, 42)[0]
    src = "a = tsmm(X)\nb = tsmm(X)\nd = sum(a + b)\n"
    s, out = run(src, mode="reuse_full", inputs={"X": X}, keep=("d",))
    assert s.stats.counts["tsmm"] == 1
    assert s.cache.stats_dict()["hits"]["tsmm"] == 1
    s0, out0 = run(src, inputs={"X": X}, keep=("d",))
    assert s0.stats.counts["tsmm"] == 2
    assert abs(out["d"].value - out0["d"].value) <= 1e-9 * abs(out0["d"].value)


def test_reuse_modes_agree_with_none():
    src = """
[X, y] = genData(400, 20, 1.0, 17)
G = tsmm(X)
beta = solve(G + diag(matrix(0.5, ncol(X), 1)), t(X) %*% y)
"""
    outs = {}
    for mode in ("none", "trace", "reuse_full", "reuse_partial"):
        _, o = run(src, mode=mode, keep=("beta",))
        outs[mode] = o["beta"].to_array()
    for mode in ("trace", "reuse_full", "reuse_partial"):
        assert np.allclose(outs[mode], outs["none"], rtol=1e-9, atol=1e-12)


def test_partial_reuse_composes_gram_from_cached_core():
    X = gen_data(2000, 100, 1.0, 42)[0]
    src = """
G1 = tsmm(X)
z = rand(rows=2000, cols=1, seed=7)
A = cbind(X, z)
G2 = tsmm(A)
d = sum(G2)
"""
    sp, op = run(src, mode="reuse_partial", inputs={"X": X},
                 keep=("G1", "G2", "d"))
    assert sp.cache.stats_dict()["partial_plans"] >= 1
    s0, o0 = run(src, inputs={"X": X}, keep=("G1", "G2", "d"))
    assert np.allclose(op["G2"].to_array(), o0["G2"].to_array(),
                       rtol=1e-12, atol=1e-12)


def test_cache_respects_cost_floor():
    src = "a = tsmm(X)\nb = tsmm(X)\n"
    X = gen_data(20, 3, 1.0, 1)[0]  # far below the cost floor
    s, _ = run(src, mode="reuse_full", inputs={"X": X}, keep=("a", "b"))
    assert s.stats.counts["tsmm"] == 2
    assert s.cache.puts == 0
    s2 = Session(lineage="reuse_full", echo=False, cost_floor=0.0)
    s2.run(src, inputs={"X": X}, keep=("a", "b"))
    assert s2.stats.counts["tsmm"] == 1


# -------------------------------------------------------------- loop dedup

def test_dedup_expansion_matches_eager_digests():
    src = """
acc = matrix(0, rows=3, cols=3)
for (i in 1:6) {
  t1 = acc + i
  acc = t1 %*% t1
}
"""
    sd, _ = run(src, mode="trace", keep=("acc",))
    se = Session(lineage="trace", dedup=False, echo=False)
    se.run(src, keep=("acc",))
    proj = sd.lineage_of("acc")
    assert proj.opcode == "PROJ"
    expanded = sd.store.expand_path(proj.children[0])
    assert expanded["acc"] == se.lineage_of("acc").digest


def test_dedup_with_branches_matches_eager():
    src = """
acc = matrix(1, rows=2, cols=2)
for (i in 1:8) {
  if (i <= 4) { acc = acc + i }
  else { acc = acc * i }
}
"""
    sd, od = run(src, mode="trace", keep=("acc",))
    se = Session(lineage="trace", dedup=False, echo=False)
    oe = se.run(src, keep=("acc",))
    assert np.array_equal(od["acc"].to_array(), oe["acc"].to_array())
    expanded = sd.store.expand_path(sd.lineage_of("acc").children[0])
    assert expanded["acc"] == se.lineage_of("acc").digest


def test_dedup_node_growth_is_per_iteration_not_per_instruction():
    body = 4  # instructions traced per iteration
    iters = 200
    src = """
acc = matrix(0, rows=2, cols=2)
for (i in 1:200) {
  a = acc + i
  b = a * 0.5
  c = b + a
  acc = c * 0.1
}
"""
    sd, _ = run(src, mode="trace", keep=("acc",))
    se = Session(lineage="trace", dedup=False, echo=False)
    se.run(src, keep=("acc",))
    assert sd.store.node_count() <= body + iters + 10
    assert se.store.node_count() >= body * iters


def test_path_budget_overflow_falls_back_to_eager():
    branches = "\n".join(
        f"  if (i == {j}) {{ acc = acc + {j} }}" for j in range(1, 11))
    src = ("acc = matrix(0, rows=2, cols=2)\nfor (i in 1:10) {\n"
           + branches + "\n}\ns = sum(acc)\n")
    sd, od = run(src, mode="trace", keep=("acc", "s"))
    se = Session(lineage="trace", dedup=False, echo=False)
    oe = se.run(src, keep=("acc", "s"))
    assert od["s"].value == oe["s"].value
    assert sd.store.fallback_loops
    assert sd.lineage_of("acc").digest == se.lineage_of("acc").digest


def test_function_called_from_recorded_loop():
    src = """
f = function(Matrix[Double] A, Integer k) return (Matrix[Double] B) {
  B = A + k
}
acc = matrix(0, rows=2, cols=2)
for (i in 1:5) {
  acc = f(acc, i) %*% f(acc, i)
}
"""
    sd, od = run(src, mode="trace", keep=("acc",))
    se = Session(lineage="trace", dedup=False, echo=False)
    oe = se.run(src, keep=("acc",))
    assert np.array_equal(od["acc"].to_array(), oe["acc"].to_array())
    expanded = sd.store.expand_path(sd.lineage_of("acc").children[0])
    assert expanded["acc"] == se.lineage_of("acc").digest


def test_deduped_trace_serializes_and_reparses():
    src = """
acc = matrix(0, rows=2, cols=2)
for (i in 1:4) { acc = acc + i }
"""
    sd, _ = run(src, mode="trace", keep=("acc",))
    text = sd.lineage_text(("acc",))
    items = L.parse(text)
    assert items[-1].digest == sd.lineage_of("acc").digest


# ------------------------------------------------------------------ lineage

def test_reuse_across_runs_in_one_session():
    X = gen_data(2000, 100, 1.0, 42)[0]
    s = Session(lineage="reuse_full", echo=False)
    s.run("G = tsmm(X)\n", inputs={"X": X}, keep=("G",))
    s.run("G = tsmm(X)\n", inputs={"X": X}, keep=("G",))
    assert s.stats.counts["tsmm"] == 1
    assert s.cache.stats_dict()["hits"]["tsmm"] == 1


def test_input_rebinding_changes_lineage():
    X1 = gen_data(2000, 100, 1.0, 1)[0]
    X2 = gen_data(2000, 100, 1.0, 2)[0]
    s = Session(lineage="reuse_full", echo=False)
    o1 = s.run("G = tsmm(X)\n", inputs={"X": X1}, keep=("G",))
    o2 = s.run("G = tsmm(X)\n", inputs={"X": X2}, keep=("G",))
    assert s.stats.counts["tsmm"] == 2
    assert not np.allclose(o1["G"].to_array(), o2["G"].to_array())


# ----------------------------------------------------------------- file I/O

def test_read_write_round_trip_counts_bytes(tmp_path):
    p = str(tmp_path / "m.csv")
    src = f'X = rand(rows=5, cols=3, seed=1)\nwrite(X, "{p}")\nY = read("{p}")\nd = sum(X - Y)\n'
    s, out = run(src, keep=("d",))
    assert out["d"].value == 0.0
    assert s.stats.bytes_written > 0
    assert s.stats.bytes_read == s.stats.bytes_written


def test_write_binary_format(tmp_path):
    p = str(tmp_path / "m.bin")
    src = (f'X = rand(rows=6, cols=2, seed=3)\n'
           f'write(X, "{p}", format="binary")\nY = read("{p}")\ns = sum(X - Y)\n')
    _, out = run(src, keep=("s",))
    assert out["s"].value == 0.0


# ---------------------------------------------------------------- federated

@pytest.fixture(scope="module")
def workers():
    ws = [fed.Worker().start() for _ in range(3)]
    yield ws
    for w in ws:
        w.stop()


def test_federated_script_ops_route_to_workers(workers):
    eps = ",".join(w.endpoint for w in workers)
    rng = np.random.default_rng(4)
    Xa, va = rng.uniform(size=(60, 5)), rng.uniform(size=(5, 1))
    wa = rng.uniform(size=(60, 1))
    s = Session(echo=False)
    out = s.run("""
F = fed_init(X, eps)
r = F %*% v
u = t(w) %*% F
cs = colSums(F)
tot = sum(F)
""", inputs={"X": blk(Xa), "eps": eps, "v": blk(va), "w": blk(wa)},
        keep=("r", "u", "cs", "tot"))
    assert np.allclose(out["r"].to_array(), Xa @ va, atol=1e-12)
    assert np.allclose(out["u"].to_array(), wa.T @ Xa, atol=1e-12)
    assert np.allclose(out["cs"].to_array(), Xa.sum(0, keepdims=True), atol=1e-12)
    assert abs(out["tot"].value - Xa.sum()) < 1e-9
    assert s.stats.fed_collects == 0
    s.close()


def test_federated_unsupported_op_collects_with_warning(workers):
    eps = ",".join(w.endpoint for w in workers)
    Xa = np.random.default_rng(5).uniform(size=(40, 4))
    s = Session(echo=False)
    with pytest.warns(RuntimeWarning, match="collecting"):
        out = s.run("F = fed_init(X, eps)\nG = tsmm(F)\n",
                    inputs={"X": blk(Xa), "eps": eps}, keep=("G",))
    assert np.allclose(out["G"].to_array(), Xa.T @ Xa, atol=1e-10)
    assert s.stats.fed_collects == 1
    s.close()
