"""Targeted zero-shot attacks on point clouds: IFGM, PGD (L-inf) and C&W (L2).

All attacks run on a batch of clouds at once and act on a
``ZeroShotClassifier``. The target of each cloud is the runner-up class on the
clean input. Unless ``fixed_noise`` is set, the classifier's diffusion and
feature noise is redrawn at every iteration (expectation over the defense's
randomness). Success and per-checkpoint predictions are judged with one
evaluation draw per cloud that is held fixed for the whole attack.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import InvalidInputError

log = logging.getLogger(__name__)

METHODS = ("ifgm", "pgd", "cw")
PAPER_EPS = (0.01, 0.025, 0.05, 0.075)


class NumericalError(RuntimeError):
    pass


@dataclass
class AttackBudget:
    method: str = "pgd"
    eps: float = 0.01
    steps: int = 50
    step_size: float = None
    cw_binary_steps: int = 10
    cw_iters: int = 500
    cw_step: float = 0.01
    cw_lambda_range: tuple = (10.0, 80.0)
    eot_paths: int = None
    fixed_noise: bool = False
    checkpoint_every: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown attack method {self.method!r}")
        if self.step_size is None:
            self.step_size = self.eps / 10
        if self.eps < 0 or self.step_size < 0 or (self.eps > 0 and self.step_size == 0):
            raise InvalidInputError("eps and step_size must be non-negative, step_size > 0 when eps > 0")
        lo, hi = self.cw_lambda_range
        if not 0 < lo < hi or self.cw_step <= 0 or self.steps < 0 or self.cw_iters < 1 or self.cw_binary_steps < 1:
            raise InvalidInputError("invalid C&W / iteration settings")
        if self.checkpoint_every < 1:
            raise InvalidInputError("checkpoint_every must be >= 1")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    target: int
    success: bool
    prediction: int
    linf: float
    l2: float
    iterations_used: int
    checkpoints: list = field(default_factory=list)  # [(step, predicted label)]
    lambdas: list = field(default_factory=list)  # C&W probe per bisection round
    round_l2: list = field(default_factory=list)  # C&W best successful L2 per round, or None


def project_linf(x, clean, eps):
    """Clip every coordinate of ``x`` into ``[clean - eps, clean + eps]``."""
    # clamping against the bounds themselves keeps the projection exactly idempotent
    return torch.minimum(torch.maximum(x, clean - eps), clean + eps)


def sign_step(x, clean, grad, step_size, eps):
    """One targeted descent step followed by projection onto the L-inf ball."""
    return project_linf(x - step_size * torch.sign(grad), clean, eps)


def _as_tensor(clouds, clf):
    x = torch.as_tensor(np.asarray(clouds), dtype=clf.dtype)
    return x.unsqueeze(0) if x.dim() == 2 else x


def _slice_noise(noise, idx):
    return type(noise)(noise.eps1[idx], noise.eps2[idx])


def select_targets(clf, clouds, rng=None, eval_noise=None):
    """Runner-up label index for each clean cloud (ties ranked by label order)."""
    if len(clf.label_names) < 2:
        raise InvalidInputError("targeted attacks need at least two labels")
    x = _as_tensor(clouds, clf)
    if eval_noise is None:
        eval_noise = clf.draw(rng, x.shape[0], x.shape[1])
    with torch.no_grad():
        logits = clf.logits(x, eval_noise).numpy().astype(np.float64)
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, 1]


def select_target(clf, cloud, rng):
    return int(select_targets(clf, cloud, rng)[0])


def _grad(clf, x, noise, loss_fn):
    x = x.detach().requires_grad_(True)
    logits = clf.logits(x, noise)
    loss = loss_fn(logits)
    (g,) = torch.autograd.grad(loss.sum(), x)
    return g, loss.detach(), logits.detach()


def _setup(clf, clouds, targets, budget, rng, eval_noise):
    grad_clf = clf.with_paths(budget.eot_paths)
    clean = _as_tensor(clouds, clf)
    B, P, _ = clean.shape
    targets = torch.as_tensor(np.asarray(targets).reshape(-1), dtype=torch.long)
    if targets.shape[0] != B:
        raise InvalidInputError(f"{targets.shape[0]} targets for {B} clouds")
    if eval_noise is None:
        eval_noise = clf.draw(rng, B, P)
    fixed = None
    if budget.fixed_noise:
        fixed = eval_noise if grad_clf is clf else grad_clf.draw(rng, B, P)
    return grad_clf, fixed, clean, targets, eval_noise


def _finish(x, clean, targets, preds, iters, checkpoints, **extra):
    diff = (x - clean).detach().to(torch.float64)
    out = []
    for b in range(x.shape[0]):
        out.append(
            AttackResult(
                adversarial=x[b].detach().numpy().copy(),
                target=int(targets[b]),
                success=bool(preds[b] == targets[b]),
                prediction=int(preds[b]),
                linf=float(diff[b].abs().max()),
                l2=float(torch.linalg.vector_norm(diff[b])),
                iterations_used=int(iters[b]) if np.ndim(iters) else int(iters),
                checkpoints=[(s, int(p[b])) for s, p in checkpoints],
                **{k: v[b] for k, v in extra.items()},
            )
        )
    return out


def linf_attack(clf, clouds, targets, budget, rng, eval_noise=None, init_radius=None):
    """Batched IFGM / PGD. Returns one AttackResult per cloud.

    PGD starts from a uniform draw in the eps-ball (``init_radius`` overrides the
    radius), IFGM from the clean cloud.
    The step-0 checkpoint is always the clean input.
    """
    if budget.method not in ("ifgm", "pgd"):
        raise InvalidInputError(f"{budget.method} is not an L-inf attack")
    grad_clf, fixed, clean, targets, eval_noise = _setup(clf, clouds, targets, budget, rng, eval_noise)
    B, P, _ = clean.shape
    eps = budget.eps
    if init_radius is None:
        init_radius = eps if budget.method == "pgd" else 0.0
    # drawn for both methods so IFGM equals PGD with a zero-radius start
    u = torch.as_tensor(rng.uniform(-1.0, 1.0, clean.shape), dtype=clf.dtype)
    x = clean.clone() if init_radius == 0 else project_linf(clean + init_radius * u, clean, eps)
    checkpoints = [(0, clf.predict(clean, eval_noise))]

    def loss_fn(logits):
        return F.cross_entropy(logits, targets, reduction="none")

    for step in range(1, budget.steps + 1):
        noise = fixed if fixed is not None else grad_clf.draw(rng, B, P)
        g, _, _ = _grad(grad_clf, x, noise, loss_fn)
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient at step {step}")
        x = sign_step(x, clean, g, budget.step_size, eps).detach()
        if step % budget.checkpoint_every == 0 or step == budget.steps:
            checkpoints.append((step, clf.predict(x, eval_noise)))
    preds = checkpoints[-1][1]
    return _finish(x, clean, targets.numpy(), preds, budget.steps, checkpoints)


def pgd_attack(clf, cloud, target, budget, rng):
    return linf_attack(clf, cloud, [target], budget, rng, init_radius=budget.eps)[0]


def ifgm_attack(clf, cloud, target, budget, rng):
    return linf_attack(clf, cloud, [target], budget, rng, init_radius=0.0)[0]


def _l2(x, clean):
    return torch.linalg.vector_norm((x - clean).to(torch.float64).reshape(x.shape[0], -1), dim=1).numpy()


def cw_hinge(logits, targets):
    """(max over non-target logits - target logit)^+ per sample."""
    tgt = logits.gather(1, targets[:, None])[:, 0]
    others = logits.masked_fill(F.one_hot(targets, logits.shape[1]).bool(), float("-inf"))
    return torch.relu(others.max(dim=1).values - tgt)


def cw_attack_batch(clf, clouds, targets, budget, rng, eval_noise=None):
    """Batched C&W perturbation attack with bisection over the L2 weight.

    Each round restarts from the clean cloud and runs ``cw_iters`` plain
    gradient steps on ``hinge + lam * ||delta||_2``. An iterate counts as a
    success when the evaluation draw ranks the target first. On success the
    weight is raised (lower bound moves up), otherwise lowered.
    """
    grad_clf, fixed, clean, targets, eval_noise = _setup(clf, clouds, targets, budget, rng, eval_noise)
    B, P, _ = clean.shape
    # with fixed noise on the defender's own path count the forward pass doubles as evaluation
    reuse = fixed is not None and grad_clf is clf
    tgt_np = targets.numpy()
    lo = np.full(B, float(budget.cw_lambda_range[0]))
    hi = np.full(B, float(budget.cw_lambda_range[1]))
    best_x = clean.clone()
    best_l2 = np.full(B, np.inf)
    last_x = clean.clone()
    lambdas = [[] for _ in range(B)]
    round_l2 = [[] for _ in range(B)]
    iters = np.zeros(B, dtype=np.int64)
    all_idx = np.arange(B)

    for _ in range(budget.cw_binary_steps):
        lam = (lo + hi) / 2
        for b in range(B):
            lambdas[b].append(float(lam[b]))
        lam_t = torch.as_tensor(lam, dtype=clf.dtype)
        delta = torch.zeros_like(clean)
        r_best = np.full(B, np.inf)
        r_x = clean.clone()
        alive = np.ones(B, dtype=bool)

        def loss_fn(logits, d):
            return cw_hinge(logits, targets) + lam_t * torch.linalg.vector_norm(d.reshape(B, -1), dim=1)

        for _ in range(budget.cw_iters):
            noise = fixed if fixed is not None else grad_clf.draw(rng, B, P)
            d = delta.detach().requires_grad_(True)
            logits = grad_clf.logits(clean + d, noise)
            loss = loss_fn(logits, d)
            (g,) = torch.autograd.grad(loss.sum(), d)
            bad = ~(torch.isfinite(loss.detach()).numpy() & torch.isfinite(g.reshape(B, -1)).all(dim=1).numpy())
            alive &= ~bad
            r_best[bad] = np.inf  # a non-finite round counts as a failure
            iters += alive
            # success of the current iterate under the evaluation draw
            cur = clean + delta
            pred = logits.detach().argmax(dim=1).numpy() if reuse else clf.predict(cur, eval_noise)
            ok = alive & (pred == tgt_np)
            l2 = _l2(cur, clean)
            better = ok & (l2 < r_best)
            if better.any():
                r_best[better] = l2[better]
                r_x[better] = cur[better]
            step = torch.where(torch.as_tensor(alive)[:, None, None], budget.cw_step * g, torch.zeros_like(g))
            delta = (delta - step).detach()
            if not alive.any():
                break
        # the final iterate is also a candidate
        cur = clean + delta
        ok = alive & (clf.predict(cur, eval_noise) == tgt_np)
        l2 = _l2(cur, clean)
        better = ok & (l2 < r_best)
        r_best[better] = l2[better]
        r_x[better] = cur[better]
        last_x = torch.where(torch.as_tensor(alive)[:, None, None], cur, last_x)

        success = np.isfinite(r_best)
        for b in all_idx:
            round_l2[b].append(float(r_best[b]) if success[b] else None)
        improve = success & (r_best < best_l2)
        best_l2[improve] = r_best[improve]
        best_x[improve] = r_x[improve]
        lo = np.where(success, lam, lo)
        hi = np.where(success, hi, lam)

    found = np.isfinite(best_l2)
    final = torch.where(torch.as_tensor(found)[:, None, None], best_x, last_x)
    preds = clf.predict(final, eval_noise)
    results = _finish(final, clean, targets.numpy(), preds, iters, [(0, clf.predict(clean, eval_noise))],
                      lambdas=lambdas, round_l2=round_l2)
    for r, f in zip(results, found):
        r.success = bool(f) and r.success
    return results


def cw_attack(clf, cloud, target, budget, rng):
    return cw_attack_batch(clf, cloud, [target], budget, rng)[0]


def run_attack(clf, clouds, targets, budget, rng, eval_noise=None):
    if budget.method == "cw":
        return cw_attack_batch(clf, clouds, targets, budget, rng, eval_noise)
    return linf_attack(clf, clouds, targets, budget, rng, eval_noise)


@dataclass
class SweepResult:
    clean_accuracy: float
    robust: dict  # (method, eps) -> final robust accuracy
    curves: dict  # (method, eps) -> [(step, robust accuracy)]
    results: dict  # (method, eps) -> [AttackResult]


def robustness_sweep(clf, clouds, labels, budgets, rng, batch_size=64):
    """Robust accuracy (fraction still predicting the true label) per budget and checkpoint.

    One evaluation draw per sample is shared by the clean pass and every
    budget, so step 0 reproduces clean accuracy exactly.
    """
    clouds = np.asarray(clouds)
    labels = np.asarray(labels)
    if len(clouds) == 0:
        raise InvalidInputError("empty evaluation set")
    n, P = clouds.shape[0], clouds.shape[1]
    eval_noise = clf.draw(rng, n, P)
    clean_pred = clf.predict(torch.as_tensor(clouds, dtype=clf.dtype), eval_noise)
    targets = select_targets(clf, clouds, eval_noise=eval_noise)
    robust, curves, all_results = {}, {}, {}
    for budget in budgets:
        res = []
        for i in range(0, n, batch_size):
            sl = slice(i, i + batch_size)
            res += run_attack(clf, clouds[sl], targets[sl], budget, rng, _slice_noise(eval_noise, sl))
        key = (budget.method, budget.eps)
        steps = [s for s, _ in res[0].checkpoints]
        curves[key] = [(s, float(np.mean([r.checkpoints[j][1] == y for r, y in zip(res, labels)])))
                       for j, s in enumerate(steps)]
        robust[key] = float(np.mean([r.prediction == y for r, y in zip(res, labels)]))
        all_results[key] = res
        log.info("%s eps=%g robust accuracy %.4f", budget.method, budget.eps, robust[key])
    return SweepResult(float((clean_pred == labels).mean()), robust, curves, all_results)
