"""Per-part variational style encoders and learnable flow priors.

The encoder is a shared per-point MLP (3-128-256-512) max-pooled per part, with
per-part heads emitting a 256-dim mean and diagonal std. Each part owns an
independent prior: a stack of affine coupling layers with moving batch
normalization, initialized to the identity map.
"""
from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn as nn

LATENT_DIM = 256
LOG2PI = math.log(2.0 * math.pi)
LOGVAR_RANGE = 16.0  # keeps exp(0.5 * logvar) finite and strictly positive


class FlowOverflowError(RuntimeError):
    """Raised when a flow pass produces non-finite intermediates."""


@dataclasses.dataclass
class StyleLatentSet:
    """Per-part style latents with presence mask and the posterior stats that
    produced them (retained for the KL term). Absent parts carry the zero
    dummy latent and are excluded from losses via the mask."""

    z: torch.Tensor        # (m, D)
    present: torch.Tensor  # (m,) bool
    mu: torch.Tensor       # (m, D)
    sigma: torch.Tensor    # (m, D)

    def __post_init__(self):
        if not (self.z.shape == self.mu.shape == self.sigma.shape):
            raise ValueError("z, mu, sigma must share shape")
        if self.present.shape[0] != self.z.shape[0]:
            raise ValueError("presence mask length mismatch")
        if self.present.any() and (self.sigma[self.present] <= 0).any():
            raise ValueError("sigma must be positive for present parts")

    @property
    def m(self) -> int:
        return self.z.shape[0]

    def clone(self) -> "StyleLatentSet":
        return StyleLatentSet(self.z.clone(), self.present.clone(),
                              self.mu.clone(), self.sigma.clone())


def reparam_sample(mu: torch.Tensor, sigma: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """z = mu + sigma * noise."""
    return mu + sigma * noise


def gaussian_entropy(sigma: torch.Tensor) -> torch.Tensor:
    """Entropy of N(mu, Diag(sigma^2)) summed over the last dim."""
    d = sigma.shape[-1]
    return torch.log(sigma).sum(dim=-1) + 0.5 * d * (1.0 + LOG2PI)


def standard_normal_logprob(x: torch.Tensor) -> torch.Tensor:
    return (-0.5 * x * x - 0.5 * LOG2PI).sum(dim=-1)


class PartEncoder(nn.Module):
    """Shared per-point feature net, per-part max pool, per-part mean/log-var heads.

    No cross-point normalization anywhere, so permutation and duplication
    invariance of the pooled feature are bit-exact.
    """

    def __init__(self, m: int, latent_dim: int = LATENT_DIM, point_dims=(3, 128, 256, 512),
                 head_dims=(512, 256, 128)):
        super().__init__()
        self.m = m
        self.latent_dim = latent_dim
        layers = []
        for i in range(len(point_dims) - 1):
            layers.append(nn.Linear(point_dims[i], point_dims[i + 1]))
            if i < len(point_dims) - 2:
                layers.append(nn.ReLU())
        self.point_net = nn.Sequential(*layers)
        self.mean_heads = nn.ModuleList([self._head(head_dims, latent_dim) for _ in range(m)])
        self.logvar_heads = nn.ModuleList([self._head(head_dims, latent_dim) for _ in range(m)])

    @staticmethod
    def _head(dims, out_dim):
        layers = []
        for i in range(len(dims) - 1):
            layers += [nn.Linear(dims[i], dims[i + 1]), nn.ReLU()]
        layers.append(nn.Linear(dims[-1], out_dim))
        return nn.Sequential(*layers)

    def forward(self, points: torch.Tensor, mask: torch.Tensor):
        """points: (B, m, K, 3) canonicalized parts padded to K; mask: (B, m, K) bool.

        Returns (mu, sigma): (B, m, D) each. Entries of all-empty parts are
        meaningless and must be masked by the caller.
        """
        feat = self.point_net(points)
        feat = feat.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        pooled = feat.max(dim=2).values
        pooled = torch.where(mask.any(dim=2, keepdim=True), pooled, torch.zeros_like(pooled))
        mus = []
        sigmas = []
        for j in range(self.m):
            mus.append(self.mean_heads[j](pooled[:, j]))
            logvar = self.logvar_heads[j](pooled[:, j]).clamp(-LOGVAR_RANGE, LOGVAR_RANGE)
            sigmas.append(torch.exp(0.5 * logvar))
        return torch.stack(mus, dim=1), torch.stack(sigmas, dim=1)

    def encode_part(self, points: torch.Tensor, j: int):
        """Single canonicalized part (K, 3) -> (mu, sigma), each (D,)."""
        if points.ndim != 2 or points.shape[0] < 1:
            raise ValueError("encode_part requires a non-empty (K, 3) part")
        pooled = self.point_net(points).max(dim=0).values
        mu = self.mean_heads[j](pooled)
        sigma = torch.exp(0.5 * self.logvar_heads[j](pooled).clamp(-LOGVAR_RANGE, LOGVAR_RANGE))
        return mu, sigma


class MovingBatchNorm(nn.Module):
    """Invertible normalization with moving statistics (frozen at eval time).

    The canonical (statistics-collecting) direction is `normalize`, applied on
    the data side of the flow; `denormalize` is its exact inverse. Variances are
    clamped from below so a fresh layer is exactly the identity with log-det 0.
    """

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.log_gamma = nn.Parameter(torch.zeros(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def _stats(self):
        var = torch.clamp(self.running_var, min=self.eps)
        return self.running_mean, var

    def normalize(self, x: torch.Tensor):
        if self.training and x.shape[0] > 1:
            with torch.no_grad():
                bm = x.mean(dim=0)
                bv = x.var(dim=0, unbiased=False)
                self.running_mean.mul_(self.momentum).add_((1 - self.momentum) * bm)
                self.running_var.mul_(self.momentum).add_((1 - self.momentum) * bv)
        mean, var = self._stats()
        y = (x - mean) / torch.sqrt(var) * torch.exp(self.log_gamma) + self.beta
        logdet = (self.log_gamma - 0.5 * torch.log(var)).sum().expand(x.shape[0])
        return y, logdet

    def denormalize(self, y: torch.Tensor):
        mean, var = self._stats()
        x = (y - self.beta) * torch.exp(-self.log_gamma) * torch.sqrt(var) + mean
        logdet = (0.5 * torch.log(var) - self.log_gamma).sum().expand(y.shape[0])
        return x, logdet


class AffineCoupling(nn.Module):
    """Affine coupling over a contiguous half split; the conditioner half is kept.

    Scale/translate subnetworks are zero-initialized at the output so a fresh
    layer is the identity with log-det 0.
    """

    def __init__(self, dim: int, hidden: int, keep_first_half: bool):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("coupling dimension must be even")
        self.half = dim // 2
        self.keep_first_half = keep_first_half
        self.scale_net = self._net(self.half, hidden)
        self.translate_net = self._net(self.half, hidden)

    @staticmethod
    def _net(half, hidden):
        net = nn.Sequential(
            nn.Linear(half, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, half),
        )
        nn.init.zeros_(net[-1].weight)
        nn.init.zeros_(net[-1].bias)
        return net

    def _split(self, x):
        if self.keep_first_half:
            return x[:, :self.half], x[:, self.half:]
        return x[:, self.half:], x[:, :self.half]

    def _join(self, kept, moved):
        if self.keep_first_half:
            return torch.cat([kept, moved], dim=1)
        return torch.cat([moved, kept], dim=1)

    def forward_map(self, x: torch.Tensor):
        kept, moved = self._split(x)
        s = self.scale_net(kept)
        t = self.translate_net(kept)
        out = self._join(kept, moved * torch.exp(s) + t)
        return out, s.sum(dim=1)

    def inverse_map(self, y: torch.Tensor):
        kept, moved = self._split(y)
        s = self.scale_net(kept)
        t = self.translate_net(kept)
        out = self._join(kept, (moved - t) * torch.exp(-s))
        return out, -s.sum(dim=1)


class PriorFlow(nn.Module):
    """Invertible map from a standard Gaussian base to the part style prior.

    forward: base sample xi -> latent z; inverse: z -> xi. Log-determinants of
    the two directions negate each other.
    """

    def __init__(self, dim: int = LATENT_DIM, n_layers: int = 14, hidden: int | None = None,
                 momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        hidden = hidden if hidden is not None else dim
        self.dim = dim
        self.couplings = nn.ModuleList(
            [AffineCoupling(dim, hidden, keep_first_half=(i % 2 == 0)) for i in range(n_layers)]
        )
        self.norms = nn.ModuleList(
            [MovingBatchNorm(dim, momentum=momentum, eps=eps) for _ in range(n_layers)]
        )

    @staticmethod
    def _guard(x):
        if not torch.isfinite(x).all():
            raise FlowOverflowError("flow overflow")
        return x

    def forward_map(self, xi: torch.Tensor):
        """xi -> z with log |det dz/dxi|. Accepts (D,) or (B, D)."""
        squeeze = xi.ndim == 1
        x = xi.unsqueeze(0) if squeeze else xi
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for coupling, norm in zip(self.couplings, self.norms):
            x, ld = coupling.forward_map(x)
            logdet = logdet + ld
            x, ld = norm.denormalize(x)
            logdet = logdet + ld
            self._guard(x)
        return (x[0], logdet[0]) if squeeze else (x, logdet)

    def inverse_map(self, z: torch.Tensor):
        """z -> xi with log |det dxi/dz|."""
        squeeze = z.ndim == 1
        x = z.unsqueeze(0) if squeeze else z
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for coupling, norm in zip(reversed(self.couplings), reversed(self.norms)):
            x, ld = norm.normalize(x)
            logdet = logdet + ld
            x, ld = coupling.inverse_map(x)
            logdet = logdet + ld
            self._guard(x)
        return (x[0], logdet[0]) if squeeze else (x, logdet)

    def log_prob(self, z: torch.Tensor):
        """log density of z under the flow prior: base log-density plus the
        inverse-direction log-determinant."""
        squeeze = z.ndim == 1
        zz = z.unsqueeze(0) if squeeze else z
        xi, logdet = self.inverse_map(zz)
        lp = standard_normal_logprob(xi) + logdet
        return lp[0] if squeeze else lp


def flow_forward(flow: PriorFlow, xi: torch.Tensor):
    return flow.forward_map(xi)


def flow_inverse(flow: PriorFlow, z: torch.Tensor):
    return flow.inverse_map(z)


def flow_logprob(flow: PriorFlow, z: torch.Tensor):
    return flow.log_prob(z)


def kl_loss(latents: StyleLatentSet, flows) -> torch.Tensor:
    """Sum over present parts of -E_q[log P_flow(z)] - H(q), with the expectation
    estimated by the single reparameterized sample carried in `latents`."""
    total = latents.z.new_zeros(())
    for j in range(latents.m):
        if not bool(latents.present[j]):
            continue
        lp = flows[j].log_prob(latents.z[j])
        ent = gaussian_entropy(latents.sigma[j])
        total = total - lp - ent
    return total


def kl_loss_batch(z: torch.Tensor, sigma: torch.Tensor, present: torch.Tensor, flows) -> torch.Tensor:
    """Batched KL objective. z, sigma: (B, m, D); present: (B, m) bool.
    Returns the mean over shapes of the per-shape sum over present parts."""
    B, m, _ = z.shape
    total = z.new_zeros(())
    for j in range(m):
        sel = present[:, j]
        if not bool(sel.any()):
            continue
        lp = flows[j].log_prob(z[sel, j])
        ent = gaussian_entropy(sigma[sel, j])
        total = total + (-lp - ent).sum()
    return total / B
