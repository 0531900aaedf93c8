"""Built-in algorithms: script-bodied regression builtins plus two natives.

The regression family (lmDS, lm, steplm, cvlm, gridSearchLM, aic) is written
in the scripting language itself and preloaded into every session's function
table, so builtin calls flow through the same compile/execute/lineage path as
user code.  detectSchema and genData are native (they produce or inspect
data tensors, which the language itself cannot).

The module also exposes thin Python wrappers that run the builtins in a
fresh or caller-supplied session and repackage results as ModelFit records.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import parser as P
from .blocks import BasicTensorBlock, DataTensorBlock
from .errors import ShapeError, ValueTypeError
from .vtypes import Scalar, ValueType

RSS_FLOOR = 1e-300

# Candidate loops use strict `<`, so AIC ties resolve to the lowest index,
# and a round without strict improvement terminates the selection.
BUILTIN_SOURCE = """
aic = function(Double rss, Integer m, Integer p) return (Double a) {
  a = m * log(max(rss, 1e-300) / m) + 2 * (p + 1)
}

lmDS = function(Matrix[Double] X, Matrix[Double] y, Double reg = 0.0)
    return (Matrix[Double] beta) {
  G = tsmm(X) + diag(matrix(reg, ncol(X), 1))
  beta = solve(G, t(X) %*% y)
}

lm = function(Matrix[Double] X, Matrix[Double] y, Double reg = 0.0)
    return (Matrix[Double] beta) {
  beta = lmDS(X, y, reg)
}

steplm = function(Matrix[Double] X, Matrix[Double] y, Double reg = 0.0)
    return (Matrix[Double] beta, Matrix[Double] selected, Matrix[Double] aictrace) {
  m = nrow(X)
  n = ncol(X)
  used = matrix(0, n, 1)
  sel = matrix(0, n, 1)
  nsel = 0
  beta = matrix(0, n, 1)
  Xsel = matrix(0, m, 1)
  best_aic = aic(as.scalar(t(y) %*% y), m, 0)
  aictrace = matrix(best_aic, 1, 1)
  keep_going = TRUE
  while (keep_going) {
    best_j = 0
    round_aic = best_aic
    for (j in 1:n) {
      if (as.scalar(used[j, 1]) == 0) {
        if (nsel == 0) {
          Xc = X[, j]
        } else {
          Xc = cbind(Xsel, X[, j])
        }
        bc = lmDS(Xc, y, reg)
        r = y - Xc %*% bc
        ac = aic(as.scalar(t(r) %*% r), m, ncol(Xc))
        if (ac < round_aic) {
          round_aic = ac
          best_j = j
        }
      }
    }
    if (best_j == 0) {
      keep_going = FALSE
    } else {
      if (nsel == 0) {
        Xsel = X[, best_j]
      } else {
        Xsel = cbind(Xsel, X[, best_j])
      }
      nsel = nsel + 1
      used[best_j, 1] = 1
      sel[nsel, 1] = best_j
      beta = lmDS(Xsel, y, reg)
      best_aic = round_aic
      aictrace = cbind(aictrace, matrix(best_aic, 1, 1))
    }
  }
  if (nsel == 0) {
    selected = matrix(0, 1, 1)
  } else {
    selected = sel[1:nsel, ]
  }
}

cvlm = function(Matrix[Double] X, Matrix[Double] y, Integer k, Double reg = 0.0)
    return (Matrix[Double] B) {
  m = nrow(X)
  n = ncol(X)
  B = matrix(0, n, k)
  for (i in 1:k) {
    G = matrix(0, n, n)
    c = matrix(0, n, 1)
    # fold slices depend only on (f, m, k), so their Grams are shared
    # across models by the reuse cache
    for (f in 1:k) {
      if (f != i) {
        lo = floor((f - 1) * m / k) + 1
        hi = floor(f * m / k)
        Xf = X[lo:hi, ]
        yf = y[lo:hi, ]
        G = G + tsmm(Xf)
        c = c + t(Xf) %*% yf
      }
    }
    A = G + diag(matrix(reg, n, 1))
    beta = solve(A, c)
    B[, i] = beta
  }
}

gridSearchLM = function(Matrix[Double] X, Matrix[Double] y, Matrix[Double] lambdas)
    return (Matrix[Double] B) {
  n = ncol(X)
  k = nrow(lambdas)
  B = matrix(0, n, k)
  for (j in 1:k) {
    beta = lmDS(X, y, as.scalar(lambdas[j, 1]))
    B[, j] = beta
  }
}
"""

_builtin_cache: list | None = None


def builtin_functions() -> tuple:
    """Function definitions preloaded into each session's table."""
    global _builtin_cache
    if _builtin_cache is None:
        program = P.parse(BUILTIN_SOURCE)
        _builtin_cache = [s for s in program.stmts if isinstance(s, P.SFunc)]
    return tuple(_builtin_cache)


def aic(rss: float, m: int, p: int) -> float:
    """Gaussian-likelihood AIC with p coefficients plus a variance term."""
    if m <= 0:
        raise ValueError("aic requires m > 0")
    if p < 0:
        raise ValueError("aic requires p >= 0")
    return m * math.log(max(rss, RSS_FLOOR) / m) + 2 * (p + 1)


# ------------------------------------------------------------------ natives

_INT_MAX = 2 ** 63 - 1
_INT_MIN = -(2 ** 63)


def _is_int_text(s: str) -> bool:
    body = s[1:] if s[:1] in "+-" else s
    if not body or not body.isdigit():
        return False
    return _INT_MIN <= int(s) <= _INT_MAX


def _is_float_text(s: str) -> bool:
    if "_" in s:
        return False
    try:
        float(s)
    except ValueError:
        return False
    return True


def _cell_type(s: str) -> ValueType:
    if s.lower() in ("true", "false"):
        return ValueType.BOOLEAN
    if _is_int_text(s):
        return ValueType.INT64
    if _is_float_text(s):
        return ValueType.FP64
    return ValueType.STRING


_WIDEN = {ValueType.BOOLEAN: 0, ValueType.INT64: 1, ValueType.FP64: 2,
          ValueType.STRING: 3}
_ORDER = [ValueType.BOOLEAN, ValueType.INT64, ValueType.FP64, ValueType.STRING]


def detect_schema(frame) -> DataTensorBlock:
    """Narrowest parseable type per column, as a 1 x n row of type names.

    Empty cells carry no type evidence; an all-empty column reports STRING.
    """
    if isinstance(frame, BasicTensorBlock):
        if frame.vtype is not ValueType.STRING:
            # already typed columns: the answer is the block's own type
            if frame.rank != 2:
                raise ShapeError("detectSchema requires a rank-2 input")
            names = [frame.vtype.value] * frame.dims[1]
            return _schema_row(names)
        cols = [frame.to_array()[:, j] for j in range(frame.dims[1])]
    elif isinstance(frame, DataTensorBlock):
        if frame.rank != 2:
            raise ShapeError("detectSchema requires a rank-2 input")
        cols = [frame.column(j) for j in range(frame.dims[1])]
    else:
        raise ValueTypeError(
            f"detectSchema expects a data tensor, got {type(frame).__name__}")

    names = []
    for col in cols:
        width = -1
        for cell in col:
            text = cell if isinstance(cell, str) else str(cell)
            if text == "":
                continue
            width = max(width, _WIDEN[_cell_type(text)])
            if width == 3:
                break
        names.append(_ORDER[width].value if width >= 0 else ValueType.STRING.value)
    return _schema_row(names)


def _schema_row(names: list) -> DataTensorBlock:
    cols = [np.array([n], dtype=object) for n in names]
    return DataTensorBlock.from_columns(cols, [ValueType.STRING] * len(names))


def gen_data(m: int, n: int, sparsity: float = 1.0, seed: int = 0):
    """Synthetic regression pair: uniform X at the given retention density,
    y = X w + 0.01 * noise for a seeded weight vector.  Deterministic in seed."""
    m, n = int(m), int(n)
    if m < 1 or n < 1:
        raise ShapeError(f"genData dims ({m},{n}) invalid")
    root = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    s_x, s_w, s_e = (int(s.generate_state(1, np.uint64)[0]) for s in root.spawn(3))
    X = kernels.rand_block(m, n, 0.0, 1.0, float(sparsity), s_x)
    w = kernels.rand_block(n, 1, 0.0, 1.0, 1.0, s_w)
    noise = np.random.default_rng(s_e).standard_normal((m, 1))
    y_arr = (X.to_array() @ w.to_array()) + 0.01 * noise
    y = BasicTensorBlock.from_array(np.asarray(y_arr, dtype=np.float64))
    return X, y


# ----------------------------------------------------------- Python wrappers

@dataclass
class ModelFit:
    """Fitted coefficients plus the fit statistics tests key on."""

    beta: np.ndarray
    rss: float
    aic: float
    selected: list = field(default_factory=list)


def _as_block(x) -> BasicTensorBlock:
    if isinstance(x, BasicTensorBlock):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return BasicTensorBlock.from_array(arr)


def _session(session):
    if session is not None:
        return session
    from .interpreter import Session
    return Session()


def _fit_stats(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> tuple:
    r = y.reshape(-1) - X @ beta.reshape(-1)
    rss = float(r @ r)
    return rss, aic(rss, X.shape[0], X.shape[1])


def lm_ds(X, y, reg: float = 0.0, session=None) -> ModelFit:
    Xb, yb = _as_block(X), _as_block(y)
    s = _session(session)
    env = s.run("beta = lmDS(X, y, reg)",
                inputs={"X": Xb, "y": yb, "reg": Scalar(ValueType.FP64, float(reg))},
                keep=("beta",))
    beta = env["beta"].to_array().reshape(-1)
    rss, a = _fit_stats(Xb.to_array(), yb.to_array().reshape(-1, 1), beta)
    return ModelFit(beta, rss, a)


def steplm_fit(X, y, reg: float = 0.0, session=None) -> ModelFit:
    Xb, yb = _as_block(X), _as_block(y)
    s = _session(session)
    env = s.run("[beta, selected, aictrace] = steplm(X, y, reg)",
                inputs={"X": Xb, "y": yb, "reg": Scalar(ValueType.FP64, float(reg))},
                keep=("beta", "selected", "aictrace"))
    raw = env["selected"].to_array().reshape(-1)
    selected = [] if (len(raw) == 1 and raw[0] == 0) else [int(v) - 1 for v in raw]
    trace = env["aictrace"].to_array().reshape(-1)
    beta = env["beta"].to_array().reshape(-1)
    if not selected:
        fit = ModelFit(np.zeros(0), float(yb.to_array().reshape(-1) @
                                          yb.to_array().reshape(-1)),
                       float(trace[-1]), [])
        fit.aictrace = trace
        return fit
    Xsel = Xb.to_array()[:, selected]
    rss, _ = _fit_stats(Xsel, yb.to_array().reshape(-1, 1), beta)
    fit = ModelFit(beta, rss, float(trace[-1]), selected)
    fit.aictrace = trace  # full accepted-step sequence, base AIC first
    return fit


def fold_bounds(m: int, k: int) -> list:
    """Half-open row intervals of the k contiguous folds."""
    return [(i * m // k, (i + 1) * m // k) for i in range(k)]


def cvlm_fit(X, y, k: int, reg: float = 0.0, session=None,
             shuffle: bool = False, shuffle_seed: int = 0) -> list:
    """One ModelFit per fold; model i is trained with fold i held out.

    Folds are contiguous row ranges; ``shuffle`` permutes the rows first
    (seeded) for callers that need randomized folds.
    """
    Xa = _as_block(X).to_array()
    ya = _as_block(y).to_array().reshape(-1, 1)
    m = Xa.shape[0]
    if k < 2 or k > m:
        raise ShapeError(f"cvlm requires 2 <= k <= rows, got k={k}, rows={m}")
    if shuffle:
        perm = np.random.default_rng(shuffle_seed).permutation(m)
        Xa, ya = Xa[perm], ya[perm]
    s = _session(session)
    env = s.run("B = cvlm(X, y, k, reg)",
                inputs={"X": BasicTensorBlock.from_array(Xa),
                        "y": BasicTensorBlock.from_array(ya),
                        "k": Scalar(ValueType.INT64, int(k)),
                        "reg": Scalar(ValueType.FP64, float(reg))},
                keep=("B",))
    B = env["B"].to_array()
    fits = []
    for i, (lo, hi) in enumerate(fold_bounds(m, k)):
        keep_rows = np.r_[0:lo, hi:m]
        rss, a = _fit_stats(Xa[keep_rows], ya[keep_rows], B[:, i])
        fits.append(ModelFit(B[:, i].copy(), rss, a))
    return fits


def grid_search_lm(X, y, lambdas, session=None) -> np.ndarray:
    """Coefficient matrix with one column per regularization value."""
    lam = np.asarray(list(lambdas), dtype=np.float64).reshape(-1, 1)
    if lam.size == 0:
        raise ShapeError("gridSearchLM requires at least one lambda")
    s = _session(session)
    env = s.run("B = gridSearchLM(X, y, lambdas)",
                inputs={"X": _as_block(X), "y": _as_block(y),
                        "lambdas": BasicTensorBlock.from_array(lam)},
                keep=("B",))
    return env["B"].to_array()
