"""Multimodal part-transformation sampler and its best-of-K training machinery.

A self-attention network maps (style latents, amplified noise code) to one
shift/log-scale pair per part. Training follows conditional implicit maximum
likelihood: draw K noise codes, keep the one whose output best fits the
observed transforms, and descend only on that code.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn as nn

from .data import DataError, PartTransform, TransformSet
from .stylizer import LATENT_DIM, StyleLatentSet

NOISE_DIM = 32


@dataclasses.dataclass(frozen=True)
class NoiseCode:
    """A 32-dim standard-normal draw steering the transformation sampler."""

    y: torch.Tensor

    def __post_init__(self):
        if self.y.shape != (NOISE_DIM,) or not torch.isfinite(self.y).all():
            raise ValueError(f"noise code must be a finite ({NOISE_DIM},) vector")


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    lambda_scale: float = 10.0  # class-specific noise amplifier
    layers: int = 5
    heads: int = 8
    head_dim: int = 32
    dropout: float = 0.0
    token_dim: int = 256
    noise_dim: int = NOISE_DIM

    def __post_init__(self):
        if self.lambda_scale <= 0:
            raise ValueError("lambda_scale must be positive")


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads, head_dim, dropout):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.norm1 = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, 3 * inner)
        self.proj = nn.Linear(inner, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask):
        # x: (B, m, dim); key_mask: (B, m) bool, False entries are never attended.
        B, m, _ = x.shape
        h = self.norm1(x)
        q, k, v = self.to_qkv(h).chunk(3, dim=-1)
        q = q.view(B, m, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, m, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, m, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        attn = attn.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, m, -1)
        x = x + self.drop(self.proj(out))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x


class TransformSampler(nn.Module):
    """Tokens are concat(z_j, lambda * y) projected to token_dim plus a learnable
    part-label embedding; per-token heads emit shift and log-scale (scale = exp)."""

    def __init__(self, m: int, config: SamplerConfig | None = None, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.m = m
        self.config = config or SamplerConfig()
        c = self.config
        self.proj = nn.Linear(latent_dim + c.noise_dim, c.token_dim)
        self.label_embed = nn.Parameter(torch.zeros(m, c.token_dim))
        nn.init.normal_(self.label_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [SelfAttentionBlock(c.token_dim, c.heads, c.head_dim, c.dropout) for _ in range(c.layers)]
        )
        self.out_norm = nn.LayerNorm(c.token_dim)
        self.head = nn.Linear(c.token_dim, 6)

    def forward(self, z: torch.Tensor, y: torch.Tensor, present: torch.Tensor):
        """z: (B, m, D); y: (B, noise_dim); present: (B, m) bool.

        Returns (shift, log_scale): (B, m, 3) each. Outputs at absent slots are
        placeholders and must be masked by the caller.
        """
        lam = self.config.lambda_scale
        tokens = torch.cat([z, (lam * y).unsqueeze(1).expand(-1, self.m, -1)], dim=-1)
        x = self.proj(tokens) + self.label_embed
        for block in self.blocks:
            x = block(x, present)
        out = self.head(self.out_norm(x))
        return out[..., :3], out[..., 3:]


def transforms_to_tensors(tau: TransformSet, device=None, dtype=torch.float32):
    shift = torch.as_tensor(np.stack([t.shift for t in tau.transforms]), dtype=dtype, device=device)
    log_scale = torch.as_tensor(np.log(np.stack([t.scale for t in tau.transforms])),
                                dtype=dtype, device=device)
    present = torch.tensor(tau.present, dtype=torch.bool, device=device)
    return shift, log_scale, present


def tensors_to_transforms(shift: torch.Tensor, log_scale: torch.Tensor, present) -> TransformSet:
    transforms = []
    flags = []
    for j in range(shift.shape[0]):
        ok = bool(present[j])
        flags.append(ok)
        if ok:
            transforms.append(PartTransform(
                shift[j].detach().double().numpy(),
                torch.exp(log_scale[j]).detach().double().numpy(),
            ))
        else:
            transforms.append(PartTransform.identity())
    return TransformSet(tuple(transforms), tuple(flags))


def sample_transforms(sampler: TransformSampler, latents: StyleLatentSet, y: NoiseCode) -> TransformSet:
    """Run the sampler on one latent set; absent parts come back flagged absent."""
    with torch.no_grad():
        shift, log_scale = sampler(latents.z.unsqueeze(0), y.y.unsqueeze(0),
                                   latents.present.unsqueeze(0))
    return tensors_to_transforms(shift[0], log_scale[0], latents.present)


def fit_loss(tau: TransformSet, tau_ref: TransformSet) -> float:
    """Sum over present parts of ||c - c_ref||^2 + ||log s - log s_ref||^2."""
    if tau.m != tau_ref.m or tau.present != tau_ref.present:
        raise DataError("fit_loss requires matching part counts and presence masks")
    total = 0.0
    for j in range(tau.m):
        if not tau.present[j]:
            continue
        a, b = tau.transforms[j], tau_ref.transforms[j]
        total += float(np.sum((a.shift - b.shift) ** 2))
        total += float(np.sum((np.log(a.scale) - np.log(b.scale)) ** 2))
    return total


def fit_loss_terms(shift, log_scale, ref_shift, ref_log_scale, present):
    """Batched tensor version: (B,) per-shape fit losses. present: (B, m) bool."""
    mask = present.unsqueeze(-1)
    d_shift = ((shift - ref_shift) ** 2 * mask).sum(dim=(-2, -1))
    d_scale = ((log_scale - ref_log_scale) ** 2 * mask).sum(dim=(-2, -1))
    return d_shift + d_scale


def cimle_select(sampler: TransformSampler, latents: StyleLatentSet, tau_ref: TransformSet,
                 K: int, rng: torch.Generator) -> NoiseCode:
    """Draw K noise codes and return the one whose output best fits tau_ref.
    Ties break toward the lowest index."""
    if K < 1:
        raise ValueError("K must be >= 1")
    noise_dim = sampler.config.noise_dim
    y = torch.randn(K, noise_dim, generator=rng)
    ref_shift, ref_log_scale, present = transforms_to_tensors(tau_ref)
    with torch.no_grad():
        shift, log_scale = sampler(latents.z.unsqueeze(0).expand(K, -1, -1), y,
                                   present.unsqueeze(0).expand(K, -1))
        losses = fit_loss_terms(shift, log_scale,
                                ref_shift.unsqueeze(0), ref_log_scale.unsqueeze(0),
                                present.unsqueeze(0).expand(K, -1))
    best = int(np.argmin(losses.numpy()))
    return NoiseCode(y[best])
