"""Deliberately naive reference implementations used to cross-check kernels.

Everything here is written loop-by-loop against the mathematical definitions,
independent of the library's dispatch paths, so a shared bug is unlikely.
"""
import numpy as np


def naive_matmul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_tsmm(x):
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            acc = 0.0
            for t in range(m):
                acc += x[t, i] * x[t, j]
            out[i, j] = acc
            out[j, i] = acc
    return out


def gaussian_solve(a, b):
    """Gaussian elimination with partial pivoting (no Cholesky anywhere)."""
    a = np.asarray(a, dtype=float).copy()
    b = np.asarray(b, dtype=float).reshape(-1).copy()
    n = len(b)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) < 1e-14:
            raise ZeroDivisionError(f"singular at column {col}")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[col], b[piv] = b[piv], b[col]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row, col:] -= f * a[col, col:]
            b[row] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


def naive_aggregate(kind, arr):
    arr = np.asarray(arr, dtype=float)
    flat = [float(v) for v in arr.ravel()]
    if kind == "sum":
        total = 0.0
        for v in flat:
            total += v
        return total
    if kind == "mean":
        return naive_aggregate("sum", arr) / len(flat)
    if kind == "min":
        return min(flat)
    if kind == "max":
        return max(flat)
    if kind == "rowSums":
        return [naive_aggregate("sum", row) for row in arr]
    if kind == "colSums":
        return [naive_aggregate("sum", arr[:, j]) for j in range(arr.shape[1])]
    raise ValueError(kind)


def lm_direct(x, y, reg):
    """Ridge normal equations solved by the elimination oracle."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    g = naive_tsmm(x) if x.shape[1] <= 64 else x.T @ x
    a = g + reg * np.eye(x.shape[1])
    return gaussian_solve(a, x.T @ y)
