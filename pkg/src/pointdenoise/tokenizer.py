"""Paired clean/noisy point tokens and the masking demo."""

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import InvalidInputError, as_cloud, farthest_point_sample, knn_indices
from .schedule import diffuse


@dataclass
class TokenPairBatch:
    """Clean and noisy neighborhoods grouped around shared FPS centers.

    Token arrays are (G, K, 3) offsets. Clean tokens are expressed relative to
    the clean center, noisy tokens relative to the noised position of the same
    center index.
    """

    center_indices: np.ndarray
    clean_tokens: np.ndarray
    noisy_tokens: np.ndarray
    clean_centers: np.ndarray
    noisy_centers: np.ndarray
    clean_neighbors: np.ndarray
    noisy_neighbors: np.ndarray
    t: int
    t_merged: int
    eps: np.ndarray


def _check_sizes(n, G, K):
    if not 1 <= G <= n:
        raise InvalidInputError(f"G={G} centers invalid for {n} points")
    if not 1 <= K <= n:
        raise InvalidInputError(f"K={K} neighbors invalid for {n} points")


def tokenize_pair(clean, sched, t, G, K, rng, start=0):
    clean = as_cloud(clean)
    _check_sizes(clean.shape[0], G, K)
    noised = diffuse(clean, sched, t, rng)
    z = noised.z_t
    centers = farthest_point_sample(clean, G, start)
    c_clean = clean[centers]
    c_noisy = z[centers]
    nb_clean = knn_indices(clean, c_clean, K)
    nb_noisy = knn_indices(z, c_noisy, K)
    return TokenPairBatch(
        center_indices=centers,
        clean_tokens=clean[nb_clean] - c_clean[:, None],
        noisy_tokens=z[nb_noisy] - c_noisy[:, None],
        clean_centers=c_clean,
        noisy_centers=c_noisy,
        clean_neighbors=nb_clean,
        noisy_neighbors=nb_noisy,
        t=int(t),
        t_merged=sched.merge(t),
        eps=noised.eps,
    )


def gather_tokens(cloud, centers, neighbors):
    """Differentiable token gather from a torch cloud given precomputed indices.

    ``cloud`` is (..., N, 3); ``centers`` (..., G) and ``neighbors`` (..., G, K)
    are integer tensors. Returns ``(tokens, center_xyz)``.
    """
    ctr = torch.gather(cloud, -2, centers.unsqueeze(-1).expand(*centers.shape, 3))
    flat = neighbors.reshape(*neighbors.shape[:-2], -1)
    nb = torch.gather(cloud, -2, flat.unsqueeze(-1).expand(*flat.shape, 3))
    nb = nb.reshape(*neighbors.shape, 3)
    return nb - ctr.unsqueeze(-2), ctr


def mask_tokens(clean, G, K, mask_ratio, rng, start=0):
    """Drop ``floor(mask_ratio * G)`` random groups and return the remaining points.

    Overlapping neighborhoods are de-duplicated, so the output holds at most
    ``(G - dropped) * K`` points, in ascending source-index order.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise InvalidInputError(f"mask_ratio {mask_ratio} outside [0, 1]")
    clean = as_cloud(clean)
    _check_sizes(clean.shape[0], G, K)
    centers = farthest_point_sample(clean, G, start)
    nb = knn_indices(clean, clean[centers], K)
    n_drop = int(np.floor(mask_ratio * G))
    keep = np.sort(rng.permutation(G)[n_drop:])
    idx = np.unique(nb[keep].ravel())
    return clean[idx]
