"""Hot inner loops: point-to-set distances and pairwise ratio sums.

Each kernel has a numba implementation and a pure-numpy twin with the same
signature. The numba path is used when numba imports cleanly and the
environment variable ``BDSG_DISABLE_NUMBA`` is unset (or ``0``); otherwise the
numpy path is bound. Both are always importable as ``numpy_impl`` /
``numba_impl`` so tests and benchmarks can compare them directly.
"""

import os
from types import SimpleNamespace

import numpy as np

_CHUNK = 256


def _flag_disabled():
    return os.environ.get("BDSG_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def _np_nearest(points, ref):
    n = points.shape[0]
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for start in range(0, n, _CHUNK):
        block = points[start:start + _CHUNK]
        d = np.sqrt(((block[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2))
        j = np.argmin(d, axis=1)  # first occurrence on ties
        idx[start:start + _CHUNK] = j
        dist[start:start + _CHUNK] = d[np.arange(block.shape[0]), j]
    return dist, idx


def _np_pair_ratio(z, x, eps):
    n = x.shape[0]
    dz = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=2))
    diff = x[:, None, :] - x[None, :, :]
    dx = np.sqrt((diff ** 2).sum(axis=2))
    off = ~np.eye(n, dtype=bool)
    denom = dx + eps
    ratio = np.where(off, dz / denom, 0.0)
    value = ratio.sum() / (n * (n - 1))
    # d ratio_ij / d x_i = -dz_ij / denom^2 * (x_i - x_j) / dx_ij; each pair appears twice
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(off & (dx > 0), -dz / (denom * denom * dx), 0.0)
    grad = 2.0 * (coef[:, :, None] * diff).sum(axis=1) / (n * (n - 1))
    return value, grad


def _np_mean_pairwise(x):
    n = x.shape[0]
    total = 0.0
    for start in range(0, n, _CHUNK):
        block = x[start:start + _CHUNK]
        d = np.sqrt(((block[:, None, :] - x[None, :, :]) ** 2).sum(axis=2))
        total += d.sum()
    return total / (n * (n - 1))


numpy_impl = SimpleNamespace(
    nearest=_np_nearest,
    pair_ratio=_np_pair_ratio,
    mean_pairwise=_np_mean_pairwise,
    name="numpy",
)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def nearest(points, ref):
        n, d = points.shape
        m = ref.shape[0]
        dist = np.empty(n)
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = np.inf
            best_j = 0
            for j in range(m):
                s = 0.0
                for k in range(d):
                    t = points[i, k] - ref[j, k]
                    s += t * t
                if s < best:
                    best = s
                    best_j = j
            dist[i] = np.sqrt(best)
            idx[i] = best_j
        return dist, idx

    @njit(cache=True)
    def pair_ratio(z, x, eps):
        n, d = x.shape
        dzdim = z.shape[1]
        grad = np.zeros((n, d))
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                sz = 0.0
                for k in range(dzdim):
                    t = z[i, k] - z[j, k]
                    sz += t * t
                sx = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    sx += t * t
                dz = np.sqrt(sz)
                dx = np.sqrt(sx)
                denom = dx + eps
                total += 2.0 * dz / denom
                if dx > 0.0:
                    c = -2.0 * dz / (denom * denom * dx)
                    for k in range(d):
                        t = c * (x[i, k] - x[j, k])
                        grad[i, k] += t
                        grad[j, k] -= t
        scale = 1.0 / (n * (n - 1))
        return total * scale, grad * scale

    @njit(cache=True)
    def mean_pairwise(x):
        n, d = x.shape
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    s += t * t
                total += 2.0 * np.sqrt(s)
        return total / (n * (n - 1))

    return SimpleNamespace(nearest=nearest, pair_ratio=pair_ratio,
                           mean_pairwise=mean_pairwise, name="numba")


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

active = numpy_impl if (numba_impl is None or _flag_disabled()) else numba_impl
BACKEND = active.name


def nearest(points, ref):
    """Distance from each row of ``points`` to its closest row of ``ref``.

    Returns ``(dist, idx)``; ties resolve to the lowest reference index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    return active.nearest(points, ref)


def pair_ratio(z, x, eps):
    """Mean over ordered pairs i != j of |z_i - z_j| / (|x_i - x_j| + eps), with d/dx."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return active.pair_ratio(z, x, float(eps))


def mean_pairwise(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return float(active.mean_pairwise(x))
