"""Point-set kernels: normalization, farthest point sampling, kNN grouping, Chamfer.

The index-producing kernels (FPS, kNN) run on float64 numpy arrays through the
compiled ``_geomkern`` extension when it is importable, otherwise through the
numpy fallback in ``_geomkern_py``. Set ``POINTDENOISE_PURE=1`` to force the
fallback. ``chamfer_l2`` accepts numpy arrays (kernel path) or torch tensors
(differentiable path, arbitrary leading batch dims).
"""

import os

import numpy as np
import torch

from . import _geomkern_py

if os.environ.get("POINTDENOISE_PURE") == "1":
    _kern = _geomkern_py
else:
    try:
        from . import _geomkern as _kern
    except ImportError:
        _kern = _geomkern_py

BACKEND = "cython" if _kern is not _geomkern_py else "numpy"


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its preconditions."""


def as_cloud(points):
    """Return ``points`` as a C-contiguous (N, 3) float64 array, validating it."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise InvalidInputError("point cloud is empty")
    if not np.isfinite(pts).all():
        raise InvalidInputError("point cloud contains non-finite coordinates")
    return pts


def normalize_unit_sphere(points):
    """Center a cloud at the origin and scale its farthest point to norm 1.

    Returns ``(normalized, degenerate)``. A cloud whose points all coincide
    maps to zeros with ``degenerate=True``.
    """
    pts = as_cloud(points)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius == 0.0:
        return np.zeros_like(pts), True
    return centered / radius, False


def farthest_point_sample(points, m, start=0):
    """Select ``m`` indices by farthest point sampling beginning at ``start``.

    Each new index maximizes the squared distance to its nearest already
    selected point among the unselected ones; ties go to the lowest index.
    """
    pts = as_cloud(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise InvalidInputError(f"cannot sample m={m} points from a cloud of {n}")
    if not 0 <= start < n:
        raise InvalidInputError(f"start index {start} out of range for {n} points")
    return _kern.fps(pts, int(m), int(start))


def knn_indices(points, centers, k):
    """Indices (G, K) of the ``k`` nearest cloud points to each center, ties by index."""
    pts = as_cloud(points)
    ctr = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    if ctr.shape[0] == 0:
        raise InvalidInputError("no centers given")
    if not 1 <= k <= pts.shape[0]:
        raise InvalidInputError(f"k={k} invalid for a cloud of {pts.shape[0]} points")
    return _kern.knn(pts, ctr, int(k))


def knn_group(points, centers, k):
    """Group the ``k`` nearest points around each center, as offsets from it.

    ``centers`` is either an integer index array into ``points`` or an explicit
    (G, 3) coordinate array. Returns ``(offsets, indices)`` with shapes
    (G, k, 3) and (G, k).
    """
    pts = as_cloud(points)
    centers = np.asarray(centers)
    if np.issubdtype(centers.dtype, np.integer):
        if centers.ndim != 1 or centers.size == 0:
            raise InvalidInputError("center indices must be a non-empty 1-D array")
        ctr = pts[centers]
    else:
        ctr = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    idx = knn_indices(pts, ctr, k)
    return pts[idx] - ctr[:, None, :], idx


def _chamfer_torch(a, b):
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise InvalidInputError("chamfer distance of an empty set")
    # explicit differences rather than the |a|^2+|b|^2-2ab expansion: exact at coincident points
    d = ((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1)
    return d.min(dim=-1).values.mean(-1) + d.min(dim=-2).values.mean(-1)


def chamfer_l2(a, b):
    """Symmetric squared-L2 Chamfer distance with mean reduction in each direction.

    Numpy inputs must be single (N, 3) / (M, 3) clouds and give a float.
    Torch inputs may carry leading batch dims (..., N, 3) and stay differentiable.
    """
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return _chamfer_torch(torch.as_tensor(a), torch.as_tensor(b))
    pa, pb = as_cloud(a), as_cloud(b)
    return float(_kern.nn_sqdist(pa, pb).mean() + _kern.nn_sqdist(pb, pa).mean())
