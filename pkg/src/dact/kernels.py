"""Hot inner-loop kernels, each with a numba and a numpy implementation.

The numba versions are plain loops compiled with ``@njit``; the numpy versions
are vectorised and serve as the fallback when numba is disabled through the
``DACT_DISABLE_NUMBA`` environment variable. Both must agree exactly on integer
outputs (bins, indices, tokens) and to rounding on float outputs.

Callers use the module-level dispatchers (``digitize``, ``max_and_gap``, ...),
which route to the backend chosen at import time or via :func:`use_backend`.
"""
from __future__ import annotations

import numpy as np

from ._accel import njit, numba_enabled

# --------------------------------------------------------------------------
# numba implementations


@njit(cache=True)
def _nb_digitize(values, edges):
    nb = edges.shape[0] - 1
    out = np.empty(values.shape[0], dtype=np.int64)
    for n in range(values.shape[0]):
        x = values[n]
        lo = 0
        hi = edges.shape[0]
        # first edge index strictly greater than x
        while lo < hi:
            mid = (lo + hi) // 2
            if edges[mid] <= x:
                lo = mid + 1
            else:
                hi = mid
        b = lo - 1
        if b < 0:
            b = 0
        elif b > nb - 1:
            b = nb - 1
        out[n] = b
    return out


@njit(cache=True)
def _nb_max_and_gap(probs):
    L, K = probs.shape
    s = np.empty(L)
    g = np.empty(L)
    for i in range(L):
        first = -np.inf
        second = -np.inf
        for k in range(K):
            v = probs[i, k]
            if v > first:
                second = first
                first = v
            elif v > second:
                second = v
        s[i] = first
        g[i] = first - second if K > 1 else first
    return s, g


@njit(cache=True)
def _nb_select_top(scores, candidates, n):
    idx = np.flatnonzero(candidates)
    m = idx.shape[0]
    if n > m:
        n = m
    # stable sort by descending score keeps ascending index among ties
    order = np.argsort(-scores[idx], kind="mergesort")
    picked = np.empty(n, dtype=np.int64)
    for j in range(n):
        picked[j] = idx[order[j]]
    return np.sort(picked)


@njit(cache=True)
def _nb_gumbel_argmax(logp, noise, tau):
    n, K = logp.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = -np.inf
        arg = 0
        found = False
        for k in range(K):
            if tau == 0.0:
                v = logp[i, k]
            else:
                v = logp[i, k] / tau + noise[i, k]
            if not found or v > best:
                best = v
                arg = k
                found = True
        out[i] = arg
    return out


@njit(cache=True)
def _nb_softmax_rows(x):
    n, K = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for k in range(1, K):
            if x[i, k] > m:
                m = x[i, k]
        total = 0.0
        for k in range(K):
            e = np.exp(x[i, k] - m)
            out[i, k] = e
            total += e
        for k in range(K):
            out[i, k] /= total
    return out


@njit(cache=True)
def _nb_layernorm_fwd(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


@njit(cache=True)
def _nb_layernorm_bwd(dy, xhat, rstd, gain):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgain = np.zeros(d)
    dbias = np.zeros(d)
    for i in range(n):
        mean_dxh = 0.0
        mean_dxh_xh = 0.0
        for j in range(d):
            dxh = dy[i, j] * gain[j]
            mean_dxh += dxh
            mean_dxh_xh += dxh * xhat[i, j]
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
        mean_dxh /= d
        mean_dxh_xh /= d
        for j in range(d):
            dxh = dy[i, j] * gain[j]
            dx[i, j] = rstd[i] * (dxh - mean_dxh - xhat[i, j] * mean_dxh_xh)
    return dx, dgain, dbias


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


@njit(cache=True)
def _nb_gelu_fwd(x):
    y = np.empty_like(x)
    t = np.empty_like(x)
    for i in range(x.shape[0]):
        v = x[i]
        th = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        t[i] = th
        y[i] = 0.5 * v * (1.0 + th)
    return y, t


@njit(cache=True)
def _nb_gelu_bwd(dy, x, t):
    dx = np.empty_like(x)
    for i in range(x.shape[0]):
        v = x[i]
        th = t[i]
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        dx[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner)
    return dx


# --------------------------------------------------------------------------
# numpy implementations


def _np_digitize(values, edges):
    nb = edges.shape[0] - 1
    b = np.searchsorted(edges, values, side="right") - 1
    return np.clip(b, 0, nb - 1).astype(np.int64)


def _np_max_and_gap(probs):
    K = probs.shape[1]
    if K == 1:
        s = probs[:, 0].copy()
        return s, s.copy()
    top2 = -np.partition(-probs, 1, axis=1)[:, :2]
    return top2[:, 0].copy(), top2[:, 0] - top2[:, 1]


def _np_select_top(scores, candidates, n):
    idx = np.flatnonzero(candidates)
    order = np.lexsort((idx, -scores[idx]))
    return np.sort(idx[order[: min(n, idx.size)]]).astype(np.int64)


def _np_gumbel_argmax(logp, noise, tau):
    if tau == 0.0:
        return np.argmax(logp, axis=1).astype(np.int64)
    return np.argmax(logp / tau + noise, axis=1).astype(np.int64)


def _np_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _np_layernorm_bwd(dy, xhat, rstd, gain):
    dxh = dy * gain
    dx = rstd[:, None] * (
        dxh - dxh.mean(axis=1, keepdims=True) - xhat * (dxh * xhat).mean(axis=1, keepdims=True)
    )
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _np_gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _np_gelu_bwd(dy, x, t):
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# --------------------------------------------------------------------------
# dispatch

_IMPLS = {
    "numba": {
        "digitize": _nb_digitize,
        "max_and_gap": _nb_max_and_gap,
        "select_top": _nb_select_top,
        "gumbel_argmax": _nb_gumbel_argmax,
        "softmax_rows": _nb_softmax_rows,
        "layernorm_fwd": _nb_layernorm_fwd,
        "layernorm_bwd": _nb_layernorm_bwd,
        "gelu_fwd": _nb_gelu_fwd,
        "gelu_bwd": _nb_gelu_bwd,
    },
    "numpy": {
        "digitize": _np_digitize,
        "max_and_gap": _np_max_and_gap,
        "select_top": _np_select_top,
        "gumbel_argmax": _np_gumbel_argmax,
        "softmax_rows": _np_softmax_rows,
        "layernorm_fwd": _np_layernorm_fwd,
        "layernorm_bwd": _np_layernorm_bwd,
        "gelu_fwd": _np_gelu_fwd,
        "gelu_bwd": _np_gelu_bwd,
    },
}

_active = _IMPLS["numba" if numba_enabled() else "numpy"]


def backend() -> str:
    return "numba" if _active is _IMPLS["numba"] else "numpy"


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previous one."""
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    previous = backend()
    _active = _IMPLS[name]
    return previous


def implementation(name: str, kernel: str):
    return _IMPLS[name][kernel]


def digitize(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index of each value under half-open intervals, clipped to the end bins."""
    return _active["digitize"](
        np.ascontiguousarray(values, dtype=np.float64), np.ascontiguousarray(edges, dtype=np.float64)
    )


def max_and_gap(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row top probability and the gap between the two largest entries."""
    return _active["max_and_gap"](np.ascontiguousarray(probs, dtype=np.float64))


def select_top(scores: np.ndarray, candidates: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` best-scoring candidates (ties to the lower index), ascending."""
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    return _active["select_top"](
        np.ascontiguousarray(scores, dtype=np.float64), np.ascontiguousarray(candidates, dtype=np.bool_), int(n)
    )


def gumbel_argmax(logp: np.ndarray, noise: np.ndarray, tau: float) -> np.ndarray:
    return _active["gumbel_argmax"](
        np.ascontiguousarray(logp, dtype=np.float64), np.ascontiguousarray(noise, dtype=np.float64), float(tau)
    )


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shape = x.shape
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, shape[-1])
    return _active["softmax_rows"](flat).reshape(shape)


def layernorm_fwd(x, gain, bias, eps=1e-5):
    shape = x.shape
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, shape[-1])
    y, xhat, rstd = _active["layernorm_fwd"](flat, gain, bias, float(eps))
    return y.reshape(shape), xhat, rstd


def layernorm_bwd(dy, xhat, rstd, gain):
    shape = dy.shape
    flat = np.ascontiguousarray(dy, dtype=np.float64).reshape(-1, shape[-1])
    dx, dgain, dbias = _active["layernorm_bwd"](flat, xhat, rstd, gain)
    return dx.reshape(shape), dgain, dbias


def gelu_fwd(x):
    """Tanh-approximated GELU; also returns the tanh term for the backward pass."""
    shape = x.shape
    y, t = _active["gelu_fwd"](np.ascontiguousarray(x, dtype=np.float64).reshape(-1))
    return y.reshape(shape), t.reshape(shape)


def gelu_bwd(dy, x, t):
    shape = x.shape
    flat = lambda a: np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    return _active["gelu_bwd"](flat(dy), flat(x), flat(t)).reshape(shape)
