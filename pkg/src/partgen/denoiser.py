"""Noise approximator: each noisy point cross-attends to per-part context tokens.

Point tokens are concat(x_t, tau_label, one-hot(label)) projected to 128 dims.
Context tokens are concat(z_j, tau_j, one-hot(j), sinusoidal t-embedding). There
is no point-to-point attention, so the network is exactly permutation
equivariant over points.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn

from .data import DataError, SegmentedCloud, TransformSet
from .kernel import DiffusionSchedule, KernelCondition, forward_marginal
from .stylizer import LATENT_DIM, StyleLatentSet
from .transform_sampler import transforms_to_tensors


@dataclasses.dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 5
    heads: int = 8
    head_dim: int = 16
    dropout: float = 0.2
    point_token_dim: int = 128
    time_embed_dim: int = 64

    def __post_init__(self):
        if min(self.layers, self.heads, self.head_dim, self.point_token_dim,
               self.time_embed_dim) <= 0:
            raise ValueError("denoiser dimensions must be positive")


def timestep_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of an integer timestep."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = float(t) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=emb.dtype)])
    return emb.to(dtype)


class CrossAttentionBlock(nn.Module):
    def __init__(self, dim, ctx_dim, heads, head_dim, dropout):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.norm1 = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, inner)
        self.to_k = nn.Linear(ctx_dim, inner)
        self.to_v = nn.Linear(ctx_dim, inner)
        self.proj = nn.Linear(inner, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, ctx, ctx_mask):
        # x: (B, N, dim); ctx: (B, m, ctx_dim); ctx_mask: (B, m) bool.
        B, N, _ = x.shape
        m = ctx.shape[1]
        q = self.to_q(self.norm1(x)).view(B, N, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(ctx).view(B, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(ctx).view(B, m, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        attn = attn.masked_fill(~ctx_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, -1)
        x = x + self.drop(self.proj(out))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x


class CrossDenoiser(nn.Module):
    def __init__(self, m: int, config: DenoiserConfig | None = None, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.m = m
        self.config = config or DenoiserConfig()
        c = self.config
        ctx_dim = latent_dim + 6 + m + c.time_embed_dim
        self.point_proj = nn.Linear(3 + 6 + m, c.point_token_dim)
        self.ctx_proj = nn.Linear(ctx_dim, c.point_token_dim)
        self.blocks = nn.ModuleList(
            [CrossAttentionBlock(c.point_token_dim, c.point_token_dim, c.heads, c.head_dim,
                                 c.dropout) for _ in range(c.layers)]
        )
        self.out_norm = nn.LayerNorm(c.point_token_dim)
        self.head = nn.Linear(c.point_token_dim, 3)

    def forward(self, x_t: torch.Tensor, labels: torch.Tensor, z: torch.Tensor,
                shift: torch.Tensor, scale: torch.Tensor, present: torch.Tensor, t,
                alpha_bar) -> torch.Tensor:
        """x_t: (B, N, 3); labels: (B, N) long; z: (B, m, D); shift/scale: (B, m, 3);
        present: (B, m) bool; t: int or (B,) long; alpha_bar: float or (B,) matching t.
        Returns (B, N, 3) noise estimates.

        The head emits a residual on top of the analytic estimate
        sqrt(1 - abar_t) * (x_t - c) / s, which is the posterior-optimal
        prediction when a part's points are summarized by their first two
        moments (mean c, per-axis std s, exact by construction of the
        canonicalization). The residual carries the style-specific detail, and
        the reverse step contracts for any bounded residual.
        """
        B, N, _ = x_t.shape
        tau = torch.cat([shift, scale], dim=-1)                       # (B, m, 6)
        onehot = torch.eye(self.m, dtype=x_t.dtype, device=x_t.device)
        tau_per_point = torch.gather(tau, 1, labels.unsqueeze(-1).expand(-1, -1, 6))
        label_onehot = onehot[labels]                                  # (B, N, m)
        points = self.point_proj(torch.cat([x_t, tau_per_point, label_onehot], dim=-1))

        if isinstance(t, int):
            t_emb = timestep_embedding(t, self.config.time_embed_dim, x_t.dtype)
            t_emb = t_emb.unsqueeze(0).expand(B, -1)
        else:
            t_emb = torch.stack([timestep_embedding(int(tb), self.config.time_embed_dim,
                                                    x_t.dtype) for tb in t])
        ctx = torch.cat([
            z, tau, onehot.unsqueeze(0).expand(B, -1, -1),
            t_emb.unsqueeze(1).expand(-1, self.m, -1),
        ], dim=-1)
        ctx = self.ctx_proj(ctx)
        for block in self.blocks:
            points = block(points, ctx, present)

        if torch.is_tensor(alpha_bar):
            ab = alpha_bar.to(x_t.dtype).view(-1, 1, 1)
        else:
            ab = torch.as_tensor(float(alpha_bar), dtype=x_t.dtype)
        mu = tau_per_point[..., :3]
        sigma = tau_per_point[..., 3:]
        baseline = torch.sqrt(1.0 - ab) * (x_t - mu) / sigma
        return baseline + self.head(self.out_norm(points))


def predict_noise(denoiser: CrossDenoiser, x_t, labels, tau: TransformSet,
                  latents: StyleLatentSet, t: int, sched: DiffusionSchedule):
    """Single-shape convenience wrapper. x_t: (N, 3) array or tensor; labels: (N,).
    Raises if any label references an absent part."""
    x = x_t if torch.is_tensor(x_t) else torch.tensor(np.asarray(x_t), dtype=torch.float32)
    lab = labels if torch.is_tensor(labels) else torch.tensor(np.asarray(labels), dtype=torch.long)
    shift, log_scale, present = transforms_to_tensors(tau)
    referenced = torch.zeros(denoiser.m, dtype=torch.bool)
    referenced[lab] = True
    if (referenced & ~present).any() or (referenced & ~latents.present).any():
        raise DataError("labels reference an absent part")
    with torch.no_grad():
        eps = denoiser(x.unsqueeze(0), lab.unsqueeze(0), latents.z.unsqueeze(0),
                       shift.unsqueeze(0), torch.exp(log_scale).unsqueeze(0),
                       latents.present.unsqueeze(0), t, float(sched.alpha_bar[t - 1]))
    out = eps[0]
    return out.numpy().astype(np.float64) if not torch.is_tensor(x_t) else out


def per_point_condition(shift: torch.Tensor, scale: torch.Tensor, labels: torch.Tensor) -> KernelCondition:
    """Gather each point's part prior (mu = shift_label, sigma = scale_label)."""
    mu = torch.gather(shift, 1, labels.unsqueeze(-1).expand(-1, -1, 3))
    sigma = torch.gather(scale, 1, labels.unsqueeze(-1).expand(-1, -1, 3))
    return KernelCondition(mu, sigma)


def part_mean_error(err_sq: torch.Tensor, labels: torch.Tensor, m: int, present: torch.Tensor):
    """err_sq: (B, N) per-point squared errors -> (B,) of (1/m) sum_j mean_{S_j}."""
    B, N = err_sq.shape
    onehot = torch.zeros(B, N, m, dtype=err_sq.dtype, device=err_sq.device)
    onehot.scatter_(2, labels.unsqueeze(-1), 1.0)
    counts = onehot.sum(dim=1)                                   # (B, m)
    sums = (err_sq.unsqueeze(-1) * onehot).sum(dim=1)            # (B, m)
    means = sums / counts.clamp(min=1.0)
    means = means * present.to(means.dtype)
    return means.sum(dim=1) / m


def diffusion_loss(predict_fn, shape: SegmentedCloud, latents: StyleLatentSet,
                   tau_ref: TransformSet, sched: DiffusionSchedule, rng: torch.Generator) -> float:
    """One-draw estimate of the denoising objective for a single shape.

    Draws t ~ Uniform{1..T} and per-point eps ~ N(0, I), forms x_t under each
    point's part prior, and averages ||eps - eps_hat||^2 per part then over parts.
    predict_fn has the predict_noise signature (x_t, labels, tau, latents, t).
    """
    x0 = torch.tensor(shape.points, dtype=torch.float32).unsqueeze(0)
    labels = torch.tensor(shape.labels, dtype=torch.long).unsqueeze(0)
    shift, log_scale, present = transforms_to_tensors(tau_ref)
    t = int(torch.randint(1, sched.T + 1, (1,), generator=rng))
    eps = torch.randn(x0.shape, generator=rng)
    cond = per_point_condition(shift.unsqueeze(0), torch.exp(log_scale).unsqueeze(0), labels)
    x_t = forward_marginal(x0, t, cond, sched, eps)
    eps_hat = predict_fn(x_t[0], labels[0], tau_ref, latents, t)

    if not torch.is_tensor(eps_hat):
        eps_hat = torch.as_tensor(np.asarray(eps_hat), dtype=torch.float32)
    err_sq = ((eps[0] - eps_hat) ** 2).sum(dim=-1, keepdim=False).unsqueeze(0)
    loss = part_mean_error(err_sq, labels, shape.m, present.unsqueeze(0))
    return float(loss[0])


def diffusion_loss_batch(denoiser: CrossDenoiser, x0: torch.Tensor, labels: torch.Tensor,
                         z: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor,
                         present: torch.Tensor, sched: DiffusionSchedule,
                         rng: torch.Generator) -> torch.Tensor:
    """Differentiable batch objective; one t per shape, independent eps per point.
    Returns the scalar mean over the batch."""
    B = x0.shape[0]
    ts = torch.randint(1, sched.T + 1, (B,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng)
    cond = per_point_condition(shift, scale, labels)
    ab = torch.as_tensor(sched.alpha_bar, dtype=x0.dtype)[ts - 1].view(B, 1, 1)
    x_t = torch.sqrt(ab) * x0 + (1 - torch.sqrt(ab)) * cond.mu + torch.sqrt(1 - ab) * cond.sigma * eps
    eps_hat = denoiser(x_t, labels, z, shift, scale, present, ts, ab.view(-1))
    err_sq = ((eps - eps_hat) ** 2).sum(dim=-1)
    return part_mean_error(err_sq, labels, denoiser.m, present).mean()
