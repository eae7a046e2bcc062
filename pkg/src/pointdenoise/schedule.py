"""Linear noise schedule, loss weighting and time-step merging."""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import InvalidInputError, as_cloud


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise level grows linearly from 0 at ``t=0`` to ``s`` at ``t=T-1``.

    ``delta`` is the merging interval used for the conditioning step fed to the
    network; the noise itself always uses the unmerged ``t``.
    """

    T: int = 1000
    s: float = 0.08
    delta: int = 200

    def __post_init__(self):
        if self.T < 2:
            raise InvalidInputError("schedule needs T >= 2")
        if self.s < 0:
            raise InvalidInputError("noise scale s must be non-negative")
        if self.delta < 1:
            raise InvalidInputError("merging interval must be >= 1")

    @property
    def n_merged(self):
        """Number of distinct merged steps, ceil(T / delta)."""
        return math.ceil(self.T / self.delta)

    def check_step(self, t):
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer) or (t < 0).any() or (t >= self.T).any():
            raise InvalidInputError(f"time step {t!r} outside [0, {self.T})")
        return t

    def sigma(self, t):
        t = self.check_step(t)
        out = self.s * (t / (self.T - 1))
        return float(out) if out.ndim == 0 else out

    def loss_weight(self, t):
        sig = np.asarray(self.sigma(t))
        out = 1.0 / (1.0 + sig**2)
        return float(out) if out.ndim == 0 else out

    def merge(self, t):
        t = self.check_step(t)
        out = t // self.delta
        return int(out) if out.ndim == 0 else out


def sigma_at(sched, t):
    return sched.sigma(t)


def loss_weight(sched, t):
    """lambda_t = 1 / (1 + sigma_t^2)."""
    return sched.loss_weight(t)


def merge_step(sched, t):
    return sched.merge(t)


@dataclass
class NoisedCloud:
    z_t: np.ndarray
    t: int
    eps: np.ndarray


def diffuse(cloud, sched, t, rng):
    """Add ``sigma_t``-scaled standard normal noise to every coordinate.

    The draw is kept on the result so the perturbation can be reproduced. At
    ``sigma_t == 0`` the returned cloud is an exact copy of the input.
    """
    z0 = as_cloud(cloud)
    sig = sched.sigma(t)
    eps = rng.standard_normal(z0.shape)
    z_t = z0.copy() if sig == 0.0 else z0 + sig * eps
    return NoisedCloud(z_t=z_t, t=int(t), eps=eps)
