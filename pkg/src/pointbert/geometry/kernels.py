"""Hot point-cloud loops, each in a numba flavour and a numpy flavour.

Squared distances are always accumulated coordinate by coordinate in
index order, so both flavours round identically and return bit-identical
results. The module-level names (``sqdist``, ``fps``, ...) are bound to
one flavour according to ``POINTBERT_NUMBA``.
"""

import numpy as np

from .._jit import USE_NUMBA, njit

# -- numpy ------------------------------------------------------------------------


def sqdist_numpy(a, b):
    acc = np.zeros((a.shape[0], b.shape[0]))
    for d in range(a.shape[1]):
        diff = a[:, None, d] - b[None, :, d]
        acc += diff * diff
    return acc


def sqdist_batch_numpy(a, b):
    acc = np.zeros((a.shape[0], a.shape[1], b.shape[1]))
    for d in range(a.shape[2]):
        diff = a[:, :, None, d] - b[:, None, :, d]
        acc += diff * diff
    return acc


def fps_numpy(points, g, start):
    n = points.shape[0]
    out = np.empty(g, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for i in range(g):
        out[i] = cur
        acc = np.zeros(n)
        for d in range(points.shape[1]):
            diff = points[:, d] - points[cur, d]
            acc += diff * diff
        np.minimum(mind, acc, out=mind)
        mind[out[: i + 1]] = -1.0  # chosen points never win, even among duplicates
        cur = int(np.argmax(mind))
    return out


def knn_numpy(query, ref, k):
    d = sqdist_numpy(query, ref)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def knn_batch_numpy(query, ref, k):
    d = sqdist_batch_numpy(query, ref)
    return np.argsort(d, axis=2, kind="stable")[:, :, :k].astype(np.int64)


def nearest_batch_numpy(a, b):
    """For each row of ``a[i]`` the index and squared distance of its nearest row in ``b[i]``."""
    d = sqdist_batch_numpy(a, b)
    idx = np.argmin(d, axis=2)
    return idx.astype(np.int64), np.take_along_axis(d, idx[..., None], axis=2)[..., 0]


# -- numba ------------------------------------------------------------------------


@njit
def sqdist_numba(a, b):
    na, nb, dim = a.shape[0], b.shape[0], a.shape[1]
    out = np.zeros((na, nb))
    for i in range(na):
        for j in range(nb):
            acc = 0.0
            for d in range(dim):
                diff = a[i, d] - b[j, d]
                acc += diff * diff
            out[i, j] = acc
    return out


@njit
def sqdist_batch_numba(a, b):
    out = np.zeros((a.shape[0], a.shape[1], b.shape[1]))
    for s in range(a.shape[0]):
        out[s] = sqdist_numba(a[s], b[s])
    return out


@njit
def fps_numba(points, g, start):
    n, dim = points.shape[0], points.shape[1]
    out = np.empty(g, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for i in range(g):
        out[i] = cur
        best = -1.0
        best_j = 0
        for j in range(n):
            acc = 0.0
            for d in range(dim):
                diff = points[j, d] - points[cur, d]
                acc += diff * diff
            if acc < mind[j]:
                mind[j] = acc
            if j == cur:
                mind[j] = -1.0
            if mind[j] > best:
                best = mind[j]
                best_j = j
        cur = best_j
    return out


@njit
def _knn_rows(dist, k):
    out = np.empty((dist.shape[0], k), dtype=np.int64)
    for i in range(dist.shape[0]):
        order = np.argsort(dist[i], kind="mergesort")
        for j in range(k):
            out[i, j] = order[j]
    return out


@njit
def knn_numba(query, ref, k):
    return _knn_rows(sqdist_numba(query, ref), k)


@njit
def knn_batch_numba(query, ref, k):
    out = np.empty((query.shape[0], query.shape[1], k), dtype=np.int64)
    for s in range(query.shape[0]):
        out[s] = _knn_rows(sqdist_numba(query[s], ref[s]), k)
    return out


@njit
def nearest_batch_numba(a, b):
    bsz, na, nb, dim = a.shape[0], a.shape[1], b.shape[1], a.shape[2]
    idx = np.empty((bsz, na), dtype=np.int64)
    dist = np.empty((bsz, na))
    for s in range(bsz):
        for i in range(na):
            best = np.inf
            best_j = 0
            for j in range(nb):
                acc = 0.0
                for d in range(dim):
                    diff = a[s, i, d] - b[s, j, d]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    best_j = j
            idx[s, i] = best_j
            dist[s, i] = best
    return idx, dist


if USE_NUMBA:
    sqdist, sqdist_batch, fps = sqdist_numba, sqdist_batch_numba, fps_numba
    knn_rows, knn_batch, nearest_batch = knn_numba, knn_batch_numba, nearest_batch_numba
else:
    sqdist, sqdist_batch, fps = sqdist_numpy, sqdist_batch_numpy, fps_numpy
    knn_rows, knn_batch, nearest_batch = knn_numpy, knn_batch_numpy, nearest_batch_numpy
