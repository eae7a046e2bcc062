"""Zero-shot classification with parallel noise inference.

A cloud is diffused ``n_paths`` times at step ``t``; each path gets its own
feature-branch draw, and the unit-norm branch outputs are averaged per feature
type. Class scores are cosine similarities against text embeddings, combined
over feature types with ``ensemble_weights`` and scaled by ``logit_scale``.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import InvalidInputError, farthest_point_sample, knn_indices
from .model import ConfigError
from .tokenizer import gather_tokens


@dataclass
class InferenceConfig:
    n_paths: int = 8
    t: int = 600
    logit_scale: float = 100.0
    ensemble_weights: tuple = None
    renormalize: bool = True
    feature_space_ensemble: bool = False

    def weights(self, k_types):
        w = np.full(k_types, 1.0 / k_types) if self.ensemble_weights is None else np.asarray(self.ensemble_weights, float)
        if self.n_paths < 1:
            raise InvalidInputError("n_paths must be >= 1")
        if w.shape != (k_types,) or abs(w.sum() - 1.0) > 1e-6 or (w < 0).any():
            raise InvalidInputError(f"ensemble weights {w} must be {k_types} non-negative values summing to 1")
        return w


@dataclass
class PathNoise:
    """Per-path draws: ``eps1`` (B, N, P, 3) diffusion, ``eps2`` (B, N, k, D) feature queries."""

    eps1: np.ndarray
    eps2: np.ndarray


def draw_noise(rng, batch, n_paths, n_points, k_types, teacher_dim):
    eps1 = rng.standard_normal((batch, n_paths, n_points, 3))
    eps2 = rng.standard_normal((batch, n_paths, k_types, teacher_dim))
    return PathNoise(eps1, eps2)


def _param(model):
    return next(model.parameters())


def path_features(model, x, t, noise):
    """Unit-norm branch outputs for every path, shape (B, N, k, D).

    ``x`` is a (B, P, 3) tensor and may require grad; token indices are chosen
    on detached values (FPS on ``x``, kNN within each noised copy) and the
    gather stays differentiable.
    """
    sched, cfg = model.sched, model.cfg
    p = _param(model)
    B, P, _ = x.shape
    eps1 = torch.as_tensor(noise.eps1, dtype=p.dtype)
    eps2 = torch.as_tensor(noise.eps2, dtype=p.dtype)
    N = eps1.shape[1]
    if eps1.shape != (B, N, P, 3) or eps2.shape[:2] != (B, N):
        raise ConfigError(f"noise shapes {tuple(eps1.shape)}/{tuple(eps2.shape)} mismatch input {tuple(x.shape)}")
    sig = sched.sigma(t)
    z = x.unsqueeze(1) + sig * eps1 if sig > 0 else x.unsqueeze(1).expand(B, N, P, 3)
    x_np = x.detach().to(torch.float64).numpy()
    z_np = z.detach().to(torch.float64).numpy()
    centers = np.empty((B, N, cfg.G), dtype=np.int64)
    nbrs = np.empty((B, N, cfg.G, cfg.K), dtype=np.int64)
    for b in range(B):
        c = farthest_point_sample(x_np[b], cfg.G)
        centers[b] = c
        for j in range(N):
            nbrs[b, j] = knn_indices(z_np[b, j], z_np[b, j][c], cfg.K)
    tokens, ctr = gather_tokens(z.reshape(B * N, P, 3), torch.from_numpy(centers).reshape(B * N, -1),
                                torch.from_numpy(nbrs).reshape(B * N, cfg.G, cfg.K))
    t_merged = torch.full((B * N,), sched.merge(t), dtype=torch.long)
    layers = model.encode(tokens, ctr, t_merged)
    feats = model.denoise_features(layers, eps2.reshape(B * N, *eps2.shape[2:]))
    return feats.reshape(B, N, *feats.shape[1:])


def averaged_features(model, x, cfg, noise):
    """Path-averaged features (B, k, D), renormalized when ``cfg.renormalize``."""
    avg = path_features(model, x, cfg.t, noise).mean(dim=1)
    return F.normalize(avg, dim=-1, eps=1e-12) if cfg.renormalize else avg


def zero_shot_logits(model, x, text, cfg, noise):
    """Differentiable logits (B, C) against the unit text matrix ``text`` (C, D)."""
    p = _param(model)
    if not isinstance(text, torch.Tensor):
        text = torch.from_numpy(np.array(text, dtype=np.float64))  # tables are read-only arrays
    text = text.to(p.dtype)
    if text.shape[-1] != model.cfg.teacher_dim:
        raise ConfigError(f"label table width {text.shape[-1]} != teacher_dim {model.cfg.teacher_dim}")
    w = torch.as_tensor(cfg.weights(model.cfg.k_types), dtype=p.dtype)
    feats = averaged_features(model, x, cfg, noise)
    if cfg.feature_space_ensemble:
        f = F.normalize((w[:, None] * feats).sum(dim=1), dim=-1, eps=1e-12)
        scores = f @ text.T
    else:
        scores = torch.einsum("k,bkc->bc", w, F.normalize(feats, dim=-1, eps=1e-12) @ text.T)
    return cfg.logit_scale * scores


def _as_batch(clouds, model):
    x = torch.as_tensor(np.asarray(clouds), dtype=_param(model).dtype)
    return x.unsqueeze(0) if x.dim() == 2 else x


def infer_feature(model, cloud, cfg, type_id, rng, noise=None):
    """Parallel-noise feature of one cloud for one feature type, as a (D,) array."""
    if not 0 <= type_id < model.cfg.k_types:
        raise InvalidInputError(f"feature type {type_id} outside [0, {model.cfg.k_types})")
    x = _as_batch(cloud, model)
    if noise is None:
        noise = draw_noise(rng, 1, cfg.n_paths, x.shape[1], model.cfg.k_types, model.cfg.teacher_dim)
    with torch.no_grad():
        feats = averaged_features(model, x, cfg, noise)
    return feats[0, type_id].numpy()


def predict_logits(model, clouds, text, cfg, rng, chunk=16):
    """Logits (B, C) for a stack of clouds, drawing noise per chunk from ``rng``."""
    x = _as_batch(clouds, model)
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], chunk):
            xb = x[i : i + chunk]
            noise = draw_noise(rng, xb.shape[0], cfg.n_paths, xb.shape[1], model.cfg.k_types, model.cfg.teacher_dim)
            out.append(zero_shot_logits(model, xb, text, cfg, noise))
    return torch.cat(out).numpy()


def rank(logits, label_names):
    """(label, logit, probability) triples ordered by logit, ties by label order."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    order = np.argsort(-logits, kind="stable")
    return [(label_names[i], float(logits[i]), float(probs[i])) for i in order]


def classify(model, cloud, label_table, cfg, rng):
    if len(label_table) == 0:
        raise InvalidInputError("label table is empty")
    logits = predict_logits(model, cloud, label_table.matrix(), cfg, rng)[0]
    return rank(logits, label_table.names)


def accuracy(model, dataset, label_table, cfg, rng):
    logits = predict_logits(model, dataset.clouds(), label_table.matrix(dataset.label_names), cfg, rng)
    return float((logits.argmax(axis=1) == dataset.label_index()).mean())


class ZeroShotClassifier:
    """A frozen model bound to a label set and inference settings.

    This is the object attacks operate on; it never updates model parameters.
    """

    def __init__(self, model, label_table, cfg=None, label_names=None):
        self.model = model.eval()
        self.cfg = cfg or InferenceConfig()
        self.label_names = list(label_names) if label_names is not None else list(label_table.names)
        text = label_table.matrix(self.label_names)
        if text.shape[-1] != model.cfg.teacher_dim:
            raise ConfigError(f"label table width {text.shape[-1]} != teacher_dim {model.cfg.teacher_dim}")
        self.text = torch.from_numpy(np.array(text)).to(_param(model).dtype)
        self.cfg.weights(model.cfg.k_types)

    @property
    def dtype(self):
        return _param(self.model).dtype

    def draw(self, rng, batch, n_points):
        return draw_noise(rng, batch, self.cfg.n_paths, n_points, self.model.cfg.k_types, self.model.cfg.teacher_dim)

    def logits(self, x, noise):
        return zero_shot_logits(self.model, x, self.text, self.cfg, noise)

    def predict(self, x, noise):
        with torch.no_grad():
            return self.logits(torch.as_tensor(x, dtype=self.dtype), noise).argmax(dim=1).numpy()

    def with_paths(self, n_paths):
        """Same classifier with a different parallel path count."""
        if n_paths is None or n_paths == self.cfg.n_paths:
            return self
        cfg = InferenceConfig(**{**vars(self.cfg), "n_paths": n_paths})
        other = object.__new__(ZeroShotClassifier)
        other.model, other.cfg, other.label_names, other.text = self.model, cfg, self.label_names, self.text
        return other
