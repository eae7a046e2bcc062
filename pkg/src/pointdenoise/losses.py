"""Reconstruction, distillation and combined training losses."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import InvalidInputError, chamfer_l2


@dataclass
class LossReport:
    l_p: float
    l_f: float
    lambda_t: float
    alpha: float
    total: float

    def as_record(self):
        return " ".join(f"{k}={v!r}" for k, v in vars(self).items())


def reconstruction_loss(pred, target, reduce=True):
    """Mean Chamfer distance over tokens; (..., G, K, 3) inputs.

    With ``reduce=False`` the token mean is taken but leading batch dims are
    kept, giving one value per sample.
    """
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    per_sample = chamfer_l2(pred, target).mean(-1)
    return per_sample.mean() if reduce else per_sample


def distillation_loss(student, teacher, beta=1.0):
    """Smooth-L1 between matched feature vectors, averaged over all coordinates."""
    student, teacher = torch.as_tensor(student), torch.as_tensor(teacher)
    if student.shape[-1] != teacher.shape[-1]:
        raise InvalidInputError(f"feature widths differ: {student.shape[-1]} vs {teacher.shape[-1]}")
    return F.smooth_l1_loss(student, teacher.expand_as(student), beta=beta)


def combined_loss(l_p, l_f, sched, t, alpha=1.0):
    """Weight per-sample reconstruction losses by lambda_t and add ``alpha * l_f``.

    ``l_p`` holds one reconstruction loss per sample and ``t`` the matching
    time steps (a scalar applies to all). Returns the differentiable total and
    a LossReport whose ``lambda_t`` is the effective weight, so that
    ``total == lambda_t * l_p + alpha * l_f`` with ``l_p`` the batch mean.
    """
    l_p = torch.as_tensor(l_p).reshape(-1)
    lam = torch.as_tensor(np.broadcast_to(sched.loss_weight(t), l_p.shape).copy(), dtype=l_p.dtype)
    weighted = (lam * l_p).mean()
    total = weighted + alpha * l_f
    lp_mean = float(l_p.detach().mean())
    lam_eff = float(weighted.detach()) / lp_mean if lp_mean > 0 else float(lam.mean())
    report = LossReport(
        l_p=lp_mean,
        l_f=float(torch.as_tensor(l_f).detach()),
        lambda_t=lam_eff,
        alpha=float(alpha),
        total=float(total.detach()),
    )
    return total, report
