"""Closed-form math of the generalized forward diffusion kernel.

The single-step kernel targets a shifted and scaled Gaussian instead of N(0, I):

    q(x_t | x_{t-1}) = N( sqrt(a_t) x_{t-1} + (1 - sqrt(a_t)) mu,  (1 - a_t) Sigma )

so that the terminal distribution is N(mu, Sigma). Sigma is diagonal and carried
around as its per-axis standard deviation (sigma below), squared wherever the
math needs a variance. All functions are pure and operate elementwise, so they
accept numpy arrays or torch tensors alike; schedule coefficients are float64.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or out-of-range timesteps."""


@dataclasses.dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step alpha values with cached cumulative products and posterior variances.

    Arrays are float64 and 0-indexed: alpha[t-1] is the step-t coefficient.
    eta2[t-1] is the posterior variance factor; eta2 at t=1 is defined as 0.
    """

    T: int
    alpha: np.ndarray
    beta: np.ndarray
    alpha_bar: np.ndarray
    eta2: np.ndarray

    def alpha_bar_prev(self, t: int) -> float:
        """Cumulative product through step t-1, with the t=1 convention of 1."""
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def make_schedule(T: int, a_start: float = 0.9999, a_end: float = 0.08) -> DiffusionSchedule:
    """Linear alpha schedule from a_start (t=1) down to a_end (t=T)."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < a_end <= a_start < 1.0):
        raise ScheduleError(f"need 0 < a_end <= a_start < 1, got ({a_start}, {a_end})")
    alpha = np.linspace(a_start, a_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(alpha)
    beta = 1.0 - alpha
    eta2 = np.zeros(T, dtype=np.float64)
    if T > 1:
        eta2[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return DiffusionSchedule(T=T, alpha=alpha, beta=beta, alpha_bar=alpha_bar, eta2=eta2)


@dataclasses.dataclass(frozen=True)
class KernelCondition:
    """Diagonal-Gaussian prior of the forward process: shift mu and per-axis
    standard deviation sigma (the square root of Sigma's diagonal)."""

    mu: object
    sigma: object

    def __post_init__(self):
        sig = self.sigma
        positive = (sig > 0) if hasattr(sig, "all") else np.asarray(sig) > 0
        if not bool(positive.all()):
            raise ScheduleError("sigma must be strictly positive")

    @staticmethod
    def standard(d: int = 3) -> "KernelCondition":
        return KernelCondition(np.zeros(d), np.ones(d))


def _check_t(t: int, sched: DiffusionSchedule, lo: int = 1) -> None:
    if not (lo <= t <= sched.T):
        raise ScheduleError(f"timestep {t} outside [{lo}, {sched.T}]")


def forward_marginal(x0, t: int, cond: KernelCondition, sched: DiffusionSchedule, noise):
    """Sample x_t | x0 by reparameterization:

    x_t = sqrt(abar_t) x0 + (1 - sqrt(abar_t)) mu + sqrt(1 - abar_t) sigma * noise
    """
    _check_t(t, sched)
    ab = float(sched.alpha_bar[t - 1])
    sab = math.sqrt(ab)
    return sab * x0 + (1.0 - sab) * cond.mu + math.sqrt(1.0 - ab) * cond.sigma * noise


def posterior_params(x0, x_t, t: int, cond: KernelCondition, sched: DiffusionSchedule):
    """Gaussian posterior q(x_{t-1} | x_t, x0) = N(Xi_t, eta2_t * Sigma) for t >= 2."""
    _check_t(t, sched, lo=2)
    a_t = float(sched.alpha[t - 1])
    ab = float(sched.alpha_bar[t - 1])
    ab_prev = sched.alpha_bar_prev(t)
    beta = 1.0 - a_t
    c_x0 = beta * math.sqrt(ab_prev) / (1.0 - ab)
    c_xt = (1.0 - ab_prev) * math.sqrt(a_t) / (1.0 - ab)
    c_mu = 1.0 + (math.sqrt(ab) - 1.0) * (math.sqrt(a_t) + math.sqrt(ab_prev)) / (1.0 - ab)
    xi = c_x0 * x0 + c_xt * x_t + c_mu * cond.mu
    return xi, float(sched.eta2[t - 1])


def noise_to_mean(x_t, eps_hat, t: int, cond: KernelCondition, sched: DiffusionSchedule):
    """Posterior mean recovered from a noise estimate:

    Xi = x_t / sqrt(a_t) - (1 - sqrt(a_t)) / sqrt(a_t) * mu
         - beta_t / sqrt(a_t (1 - abar_t)) * sigma * eps_hat
    """
    _check_t(t, sched)
    a_t = float(sched.alpha[t - 1])
    ab = float(sched.alpha_bar[t - 1])
    beta = 1.0 - a_t
    inv_sa = 1.0 / math.sqrt(a_t)
    return inv_sa * x_t - (1.0 - math.sqrt(a_t)) * inv_sa * cond.mu \
        - beta / math.sqrt(a_t * (1.0 - ab)) * cond.sigma * eps_hat


def reverse_step(x_t, eps_hat, t: int, cond: KernelCondition, sched: DiffusionSchedule, noise):
    """One ancestral sampling step. The final step (t=1) returns the mean without noise."""
    _check_t(t, sched)
    mean = noise_to_mean(x_t, eps_hat, t, cond, sched)
    if t == 1:
        return mean
    return mean + math.sqrt(float(sched.eta2[t - 1])) * cond.sigma * noise
