"""Pure numpy versions of the compiled point-set kernels.

All three functions take C-contiguous float64 arrays and return int64 / float64
arrays. Tie rules match the Cython module exactly.
"""

import numpy as np


def fps(pts, m, start):
    n = pts.shape[0]
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    mind = np.full(n, np.inf)
    cur = start
    out[0] = cur
    mind[cur] = -1.0
    for i in range(1, m):
        d = ((pts - pts[cur]) ** 2).sum(axis=1)
        np.minimum(mind, d, out=mind)
        cur = int(np.argmax(mind))  # first occurrence on ties
        out[i] = cur
        mind[cur] = -1.0
    return out


def knn(pts, centers, k):
    d = ((centers[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    order = np.argsort(d, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64, copy=False)


def nn_sqdist(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return d.min(axis=1)
