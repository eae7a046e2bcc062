"""Dual-branch network: point denoising autoencoder plus feature denoising branch.

Shapes use B for batch (or parallel paths), G for tokens, K for points per
token, C for the embedding width and D for the teacher feature width.
"""

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import InvalidInputError
from .schedule import NoiseSchedule


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 384
    enc_blocks: int = 12
    dec_blocks: int = 4
    heads: int = 6
    k_types: int = 2
    teacher_dim: int = 512
    G: int = 64
    K: int = 32
    time_steps: int = 5
    mlp_ratio: float = 4.0
    patch_width: int = 128
    freq_dim: int = 256

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for f in ("dim", "enc_blocks", "dec_blocks", "heads", "k_types", "teacher_dim", "G", "K", "time_steps"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    @property
    def feat_blocks(self):
        return self.enc_blocks

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    """Multi-head attention; ``ctx`` supplies keys/values when given."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, ctx=None):
        ctx = x if ctx is None else ctx
        B, Lq, C = x.shape
        h = self.heads
        q = self.q(x).reshape(B, Lq, h, C // h).transpose(1, 2)
        k, v = self.kv(ctx).reshape(B, ctx.shape[1], 2, h, C // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (C // h) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, Lq, C))


class PatchEmbed(nn.Module):
    """Tiny PointNet: shared per-point layers with two max-pools per token."""

    def __init__(self, dim, width):
        super().__init__()
        self.first = nn.Sequential(nn.Linear(3, width), nn.GELU(), nn.Linear(width, 2 * width))
        self.second = nn.Sequential(nn.Linear(4 * width, 4 * width), nn.GELU(), nn.Linear(4 * width, dim))

    def forward(self, tokens):
        # tokens: (B, G, K, 3) -> (B, G, C)
        f = self.first(tokens)
        g = f.max(dim=-2, keepdim=True).values.expand_as(f)
        f = self.second(torch.cat([g, f], dim=-1))
        return f.max(dim=-2).values


class TimestepEmbedder(nn.Module):
    def __init__(self, dim, freq_dim=256, max_period=10000):
        super().__init__()
        self.freq_dim = freq_dim
        self.max_period = max_period
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def sinusoid(self, t):
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(self.max_period) * torch.arange(half, dtype=torch.float64) / half)
        args = t.to(torch.float64)[:, None] * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return emb.to(self.mlp[0].weight.dtype)

    def forward(self, t):
        return self.mlp(self.sinusoid(t))


def _zero_linear(dim_in, dim_out):
    lin = nn.Linear(dim_in, dim_out)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


class DenoiseBlock(nn.Module):
    """Transformer block with AdaLN-Zero on both attention and feedforward."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ada = nn.Sequential(nn.SiLU(), _zero_linear(dim, 6 * dim))

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).unsqueeze(1).chunk(6, dim=-1)
        x = x + g1 * self.attn(modulate(self.norm1(x), sh1, sc1))
        x = x + g2 * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class FeatureBlock(nn.Module):
    """Cross-attention from feature queries into point tokens, then an
    AdaLN-Zero feedforward conditioned on the feature type.

    Each query token is processed independently; there is no self-attention
    between feature types.
    """

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim, eps=1e-6)
        self.norm_ctx = nn.LayerNorm(dim, eps=1e-6)
        self.cross = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ada = nn.Sequential(nn.SiLU(), _zero_linear(dim, 3 * dim))

    def forward(self, x, ctx, c):
        # x: (B, k, C) queries, ctx: (B, G, C), c: (B, k, C)
        x = x + self.cross(self.norm_q(x), self.norm_ctx(ctx))
        sh, sc, g = self.ada(c).chunk(3, dim=-1)
        return x + g * self.mlp(modulate(self.norm2(x), sh, sc))


class DualDenoiser(nn.Module):
    def __init__(self, cfg: ModelConfig, sched: NoiseSchedule = None):
        super().__init__()
        self.cfg = cfg
        self.sched = sched if sched is not None else NoiseSchedule()
        if self.sched.n_merged > cfg.time_steps:
            raise ConfigError(f"schedule has {self.sched.n_merged} merged steps, embedder covers {cfg.time_steps}")
        C = cfg.dim
        self.stop_gradient = True
        self.patch_embed = PatchEmbed(C, cfg.patch_width)
        self.pos_embed = nn.Sequential(nn.Linear(3, 128), nn.GELU(), nn.Linear(128, C))
        self.t_embed = TimestepEmbedder(C, cfg.freq_dim)
        self.encoder = nn.ModuleList(DenoiseBlock(C, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.enc_blocks))
        self.dec_pos = nn.Sequential(nn.Linear(3, 128), nn.GELU(), nn.Linear(128, C))
        self.decoder = nn.ModuleList(DenoiseBlock(C, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dec_blocks))
        self.dec_norm = nn.LayerNorm(C, eps=1e-6)
        self.recon_head = nn.Linear(C, cfg.K * 3)

        self.noise_proj = nn.Linear(cfg.teacher_dim, C)
        self.type_embed = nn.Embedding(cfg.k_types, C)
        self.type_mlp = nn.Sequential(nn.Linear(C, C), nn.SiLU(), nn.Linear(C, C))
        self.feature_blocks = nn.ModuleList(FeatureBlock(C, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.feat_blocks))
        self.feat_norm = nn.LayerNorm(C, eps=1e-6)
        self.feat_head = nn.Linear(C, cfg.teacher_dim)

    def encoder_modules(self):
        """Modules whose parameters belong to the point (encoder-side) branch."""
        return [self.patch_embed, self.pos_embed, self.t_embed, self.encoder]

    def condition(self, t_merged):
        t_merged = torch.as_tensor(t_merged).reshape(-1)
        if (t_merged < 0).any() or (t_merged >= self.cfg.time_steps).any():
            raise ConfigError(f"merged step outside embedder range [0, {self.cfg.time_steps})")
        return self.t_embed(t_merged)

    def embed(self, tokens, centers):
        if tokens.shape[-3:] != (tokens.shape[-3], self.cfg.K, 3) or centers.shape[-1] != 3:
            raise ConfigError(f"token shape {tuple(tokens.shape)} does not match K={self.cfg.K}")
        return self.patch_embed(tokens) + self.pos_embed(centers)

    def encode(self, tokens, centers, t_merged):
        """Run the encoder; returns every block's output, each (B, G, C)."""
        c = self.condition(t_merged)
        x = self.embed(tokens, centers)
        layers = []
        for blk in self.encoder:
            x = blk(x, c)
            layers.append(x)
        return layers

    def decode(self, encoded, centers, t_merged):
        """Predict clean-frame offsets (B, G, K, 3) from the final encoder output."""
        c = self.condition(t_merged)
        x = encoded + self.dec_pos(centers)
        for blk in self.decoder:
            x = blk(x, c)
        out = self.recon_head(self.dec_norm(x))
        return out.reshape(*out.shape[:-1], self.cfg.K, 3)

    def _check_types(self, type_ids):
        type_ids = torch.as_tensor(type_ids, dtype=torch.long).reshape(-1)
        if (type_ids < 0).any() or (type_ids >= self.cfg.k_types).any():
            raise InvalidInputError(f"feature type must lie in [0, {self.cfg.k_types})")
        return type_ids

    def denoise_features(self, layers, eps2, type_ids=None, normalize=True):
        """Map gaussian draws ``eps2`` (B, k, D) to teacher-space features (B, k, D).

        ``type_ids`` (length k) selects the feature type of each query; it
        defaults to ``0..k_types-1``.
        """
        if len(layers) != self.cfg.feat_blocks:
            raise ConfigError(f"expected {self.cfg.feat_blocks} context layers, got {len(layers)}")
        if type_ids is None:
            type_ids = torch.arange(self.cfg.k_types)
        type_ids = self._check_types(type_ids)
        if eps2.shape[-2:] != (len(type_ids), self.cfg.teacher_dim):
            raise ConfigError(f"feature noise shape {tuple(eps2.shape)} mismatches types/teacher_dim")
        c = self.type_mlp(self.type_embed(type_ids.to(eps2.device)))
        c = c.unsqueeze(0).expand(eps2.shape[0], -1, -1)
        x = self.noise_proj(eps2)
        for blk, ctx in zip(self.feature_blocks, layers):
            # training-time only: attacks still need input gradients through the context
            if self.stop_gradient and self.training:
                ctx = ctx.detach()
            x = blk(x, ctx, c)
        out = self.feat_head(self.feat_norm(x))
        if normalize:
            out = F.normalize(out, dim=-1, eps=1e-12)
        return out

    def denoise_feature(self, layers, type_id, eps2):
        """Single feature type: ``eps2`` is (B, D); returns unit-norm (B, D)."""
        return self.denoise_features(layers, eps2.unsqueeze(1), [int(type_id)])[:, 0]


def encoder_parameters(model):
    for m in model.encoder_modules():
        yield from m.named_parameters(prefix=type(m).__name__)


def stop_gradient_check(model, seed=0):
    """Backpropagate only the feature loss on a random toy batch and confirm that
    no encoder-side parameter receives gradient. Parameter grads are restored."""
    from .losses import distillation_loss

    cfg = model.cfg
    p = next(model.parameters())
    g = torch.Generator().manual_seed(seed)
    tokens = 0.05 * torch.randn(2, cfg.G, cfg.K, 3, generator=g, dtype=p.dtype)
    centers = torch.randn(2, cfg.G, 3, generator=g, dtype=p.dtype)
    eps2 = torch.randn(2, cfg.k_types, cfg.teacher_dim, generator=g, dtype=p.dtype)
    target = F.normalize(torch.randn(2, cfg.k_types, cfg.teacher_dim, generator=g, dtype=p.dtype), dim=-1)
    saved = {n: q.grad for n, q in model.named_parameters()}
    was_training = model.training
    model.zero_grad(set_to_none=True)
    model.train()
    try:
        layers = model.encode(tokens, centers, torch.zeros(2, dtype=torch.long))
        distillation_loss(model.denoise_features(layers, eps2), target).backward()
        return all(q.grad is None or not q.grad.any() for _, q in encoder_parameters(model))
    finally:
        model.train(was_training)
        for n, q in model.named_parameters():
            q.grad = saved[n]
