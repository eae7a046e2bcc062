"""Pretraining loop: diffuse and tokenize, run both branches, apply the combined loss."""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .checkpoint import load_checkpoint, read_container, save_checkpoint
from .losses import combined_loss, distillation_loss, reconstruction_loss
from .tokenizer import tokenize_pair

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    epochs: int = None  # when set, overrides ``steps`` via the dataset size
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 0
    alpha: float = 1.0
    beta_h: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or not 0 <= self.warmup_frac < 1:
            raise ValueError("invalid training configuration")

    def total_steps(self, n_samples):
        if self.epochs is not None:
            return self.epochs * math.ceil(n_samples / self.batch_size)
        return self.steps


def lr_factor(step, total, warmup):
    """Linear warmup to 1, then cosine decay to 0 over the remaining steps."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))


def make_optimizer(model, cfg):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


class Teachers:
    """Per-sample targets: type 0 from the image table, type 1 from the text table.

    Image entries are looked up by sample id first, then by label.
    """

    def __init__(self, image_table, text_table):
        self.image = image_table
        self.text = text_table

    def targets(self, ids, labels):
        img = [self.image.get(i) if i in self.image else self.image.get(lbl) for i, lbl in zip(ids, labels)]
        txt = [self.text.get(lbl) for lbl in labels]
        return np.stack([np.stack(img), np.stack(txt)], axis=1)


def prepare_batch(clouds, sched, t, G, K, rng, dtype=torch.float32):
    pairs = [tokenize_pair(c, sched, int(ti), G, K, rng) for c, ti in zip(clouds, t)]

    def stack(attr):
        return torch.as_tensor(np.stack([getattr(p, attr) for p in pairs]), dtype=dtype)

    return {
        "noisy_tokens": stack("noisy_tokens"),
        "noisy_centers": stack("noisy_centers"),
        "clean_tokens": stack("clean_tokens"),
        "t": np.asarray(t),
        "t_merged": torch.as_tensor([p.t_merged for p in pairs], dtype=torch.long),
    }


def forward_losses(model, batch, targets, eps2, cfg, sched):
    """Differentiable total loss and its LossReport for a prepared batch."""
    layers = model.encode(batch["noisy_tokens"], batch["noisy_centers"], batch["t_merged"])
    pred = model.decode(layers[-1], batch["noisy_centers"], batch["t_merged"])
    l_p = reconstruction_loss(pred, batch["clean_tokens"], reduce=False)
    feats = model.denoise_features(layers, eps2)
    # equal-sized types, so the global mean is the mean over types
    l_f = distillation_loss(feats, targets, beta=cfg.beta_h)
    return combined_loss(l_p, l_f, sched, batch["t"], cfg.alpha)


def train_step(model, optimizer, clouds, ids, labels, teachers, cfg, rng, lr=None):
    """One AdamW update on a batch; returns the LossReport."""
    sched, mcfg = model.sched, model.cfg
    dtype = next(model.parameters()).dtype
    B = len(clouds)
    t = rng.integers(0, sched.T, size=B)
    batch = prepare_batch(clouds, sched, t, mcfg.G, mcfg.K, rng, dtype)
    eps2 = torch.as_tensor(rng.standard_normal((B, mcfg.k_types, mcfg.teacher_dim)), dtype=dtype)
    targets = torch.as_tensor(teachers.targets(ids, labels), dtype=dtype)
    model.train()
    total, report = forward_losses(model, batch, targets, eps2, cfg, sched)
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite loss: {report.as_record()} t={t.tolist()}")
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return report


class Trainer:
    def __init__(self, model, cfg, teachers, optimizer=None, step=0, rng=None):
        self.model = model
        self.cfg = cfg
        self.teachers = teachers
        self.optimizer = optimizer or make_optimizer(model, cfg)
        self.step = step
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self._order = None

    def _batch_indices(self, n):
        # epoch-wise shuffling; the permutation position is derived from the step counter
        per_epoch = math.ceil(n / self.cfg.batch_size)
        k = self.step % per_epoch
        if k == 0 or self._order is None:
            self._order = self.rng.permutation(n)
        return self._order[k * self.cfg.batch_size : (k + 1) * self.cfg.batch_size]

    def fit(self, dataset, total_steps=None, log_file=None, log_every=1):
        total = total_steps or self.cfg.total_steps(len(dataset))
        clouds = dataset.clouds()
        ids, labels = dataset.ids(), dataset.labels()
        warmup = int(self.cfg.warmup_frac * total)
        reports = []
        while self.step < total:
            idx = self._batch_indices(len(dataset))
            lr = self.cfg.lr * lr_factor(self.step, total, warmup)
            rep = train_step(self.model, self.optimizer, clouds[idx], [ids[i] for i in idx],
                             [labels[i] for i in idx], self.teachers, self.cfg, self.rng, lr=lr)
            self.step += 1
            reports.append(rep)
            if log_file is not None and self.step % log_every == 0:
                log_file.write(f"step={self.step} lr={lr!r} {rep.as_record()}\n")
            if self.step % 100 == 0:
                log.info("step %d total %.5f l_p %.5f l_f %.5f", self.step, rep.total, rep.l_p, rep.l_f)
        return reports

    def save(self, path, extra=None):
        order = None if self._order is None else self._order.tolist()
        meta = {"step": self.step, "rng_state": self.rng.bit_generator.state, "train": asdict(self.cfg), "order": order}
        meta.update(extra or {})
        save_checkpoint(path, self.model, self.optimizer, meta)

    @classmethod
    def resume(cls, path, teachers, cfg=None):
        """Restore model, optimizer moments, step counter, shuffling order and data RNG."""
        saved = read_container(path)[0]
        cfg = cfg or TrainConfig(**saved["meta.train"])
        model, opt, meta = load_checkpoint(path, lambda m: make_optimizer(m, cfg))
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        trainer = cls(model, cfg, teachers, opt, step=meta["step"], rng=rng)
        if meta.get("order") is not None:
            trainer._order = np.asarray(meta["order"], dtype=np.int64)
        return trainer
