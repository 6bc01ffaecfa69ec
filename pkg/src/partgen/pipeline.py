"""Two-stage training, ancestral sampling, encoding, and editing operations.

Stage 1 fits the part encoders, prior flows, and denoiser against ground-truth
transforms. Stage 2 freezes those and fits the transformation sampler with
best-of-K noise-code caching. Sampling draws per-part style latents from the
flows, a transform set from the sampler, then runs the reverse diffusion.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .config import TrainConfig
from .data import (
    DataError,
    SegmentedCloud,
    TransformSet,
    canonicalize_part,
    shape_transforms,
)
from .denoiser import CrossDenoiser, DenoiserConfig, diffusion_loss_batch
from .kernel import DiffusionSchedule, KernelCondition, make_schedule, reverse_step
from .stylizer import PartEncoder, PriorFlow, StyleLatentSet, kl_loss_batch
from .transform_sampler import (
    NoiseCode,
    SamplerConfig,
    TransformSampler,
    cimle_select,
    fit_loss_terms,
    sample_transforms,
    tensors_to_transforms,
    transforms_to_tensors,
)


class TrainingDivergedError(RuntimeError):
    pass


@dataclasses.dataclass
class ModelSpec:
    """Everything needed to rebuild the network stack from a checkpoint header."""

    class_id: str
    m: int
    part_names: tuple
    latent_dim: int = 256
    timesteps: int = 100
    alpha_start: float = 0.9999
    alpha_end: float = 0.08
    lambda_scale: float = 10.0
    point_budget: int = 512
    connections: tuple = ()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["part_names"] = list(self.part_names)
        d["connections"] = [list(c) for c in self.connections]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["part_names"] = tuple(d["part_names"])
        d["connections"] = tuple(tuple(c) for c in d.get("connections", ()))
        return cls(**d)


class PartGenModel(nn.Module):
    """Container for the trained stack plus its diffusion schedule and metadata."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = PartEncoder(spec.m, latent_dim=spec.latent_dim)
        self.flows = nn.ModuleList([PriorFlow(dim=spec.latent_dim) for _ in range(spec.m)])
        self.sampler = TransformSampler(
            spec.m, SamplerConfig(lambda_scale=spec.lambda_scale), latent_dim=spec.latent_dim)
        self.denoiser = CrossDenoiser(spec.m, DenoiserConfig(), latent_dim=spec.latent_dim)
        self.schedule: DiffusionSchedule = make_schedule(
            spec.timesteps, spec.alpha_start, spec.alpha_end)

    @property
    def m(self) -> int:
        return self.spec.m


def save_model(path, model: PartGenModel, extra_meta: dict | None = None) -> None:
    meta = {"model": model.spec.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    ckpt.save_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    state, meta = ckpt.load_checkpoint(path)
    model = PartGenModel(ModelSpec.from_dict(meta["model"]))
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# Training


@dataclasses.dataclass
class TrainingSet:
    """Dataset tensors: raw shape points plus canonicalized, padded parts."""

    points: torch.Tensor        # (S, P, 3)
    labels: torch.Tensor        # (S, P) long
    canon: torch.Tensor         # (S, m, K, 3) zero-padded canonical parts
    canon_mask: torch.Tensor    # (S, m, K) bool
    tau_shift: torch.Tensor     # (S, m, 3)
    tau_log_scale: torch.Tensor  # (S, m, 3)
    present: torch.Tensor       # (S, m) bool

    def __len__(self):
        return self.points.shape[0]


def prepare_training_set(dataset) -> TrainingSet:
    if not dataset:
        raise DataError("empty dataset")
    m = dataset[0].m
    n_points = len(dataset[0])
    for s in dataset:
        if s.m != m or len(s) != n_points:
            raise DataError("all shapes must share part count and point budget")
    S = len(dataset)
    kmax = max(int(np.max(s.part_sizes())) for s in dataset)
    points = torch.zeros(S, n_points, 3)
    labels = torch.zeros(S, n_points, dtype=torch.long)
    canon = torch.zeros(S, m, kmax, 3)
    canon_mask = torch.zeros(S, m, kmax, dtype=torch.bool)
    tau_shift = torch.zeros(S, m, 3)
    tau_log_scale = torch.zeros(S, m, 3)
    present = torch.zeros(S, m, dtype=torch.bool)
    for i, shape in enumerate(dataset):
        points[i] = torch.tensor(shape.points, dtype=torch.float32)
        labels[i] = torch.tensor(shape.labels, dtype=torch.long)
        for j in range(m):
            part = shape.part(j)
            if len(part) == 0:
                continue
            canonical, tr = canonicalize_part(part)
            k = len(part)
            canon[i, j, :k] = torch.tensor(canonical, dtype=torch.float32)
            canon_mask[i, j, :k] = True
            tau_shift[i, j] = torch.tensor(tr.shift, dtype=torch.float32)
            tau_log_scale[i, j] = torch.tensor(np.log(tr.scale), dtype=torch.float32)
            present[i, j] = True
    return TrainingSet(points, labels, canon, canon_mask, tau_shift, tau_log_scale, present)


@dataclasses.dataclass
class TrainResult:
    model: PartGenModel
    history: dict


def _sample_posterior(model, ts: TrainingSet, idx: torch.Tensor, gen: torch.Generator):
    mu, sigma = model.encoder(ts.canon[idx], ts.canon_mask[idx])
    eps = torch.randn(mu.shape, generator=gen)
    present = ts.present[idx]
    z = torch.where(present.unsqueeze(-1), mu + sigma * eps, torch.zeros_like(mu))
    return z, mu, sigma, present


def _check_finite(value: float, stage: str, epoch: int, parts: dict):
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        raise TrainingDivergedError(f"{stage} diverged at epoch {epoch}: {detail}")


def train_stage1(dataset, config: TrainConfig, connections=(), part_names=None) -> TrainResult:
    """Optimize kl_weight * l_Z + l_recon over stylizers, flows, and denoiser,
    conditioning the denoiser on ground-truth transforms."""
    if config.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    ts = prepare_training_set(dataset)
    spec = ModelSpec(
        class_id=dataset[0].class_id, m=dataset[0].m,
        part_names=tuple(part_names) if part_names
        else tuple(f"part_{j}" for j in range(dataset[0].m)),
        latent_dim=config.latent_dim, timesteps=config.timesteps,
        alpha_start=config.alpha_start, alpha_end=config.alpha_end,
        lambda_scale=config.noise_amplifier, point_budget=len(dataset[0]),
        connections=tuple(tuple(c) for c in connections),
    )
    model = PartGenModel(spec)
    model.train()
    params = list(model.encoder.parameters())
    for flow in model.flows:
        params += list(flow.parameters())
    params += list(model.denoiser.parameters())
    opt = torch.optim.Adam(params, lr=config.lr_start, betas=config.adam_betas)
    gen = torch.Generator().manual_seed(config.seed + 1)
    scale_gt = torch.exp(ts.tau_log_scale)
    history = {"kl": [], "recon": [], "total": []}
    S = len(ts)
    for epoch in range(config.stage1_epochs):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(S, generator=gen)
        ep_kl = ep_recon = 0.0
        n_batches = 0
        for start in range(0, S, config.batch_size):
            idx = perm[start:start + config.batch_size]
            z, _, sigma, present = _sample_posterior(model, ts, idx, gen)
            kl = kl_loss_batch(z, sigma, present, model.flows)
            recon = diffusion_loss_batch(
                model.denoiser, ts.points[idx], ts.labels[idx], z,
                ts.tau_shift[idx], scale_gt[idx], present, model.schedule, gen)
            loss = config.kl_weight * kl + recon
            kl_val, recon_val = float(kl.detach()), float(recon.detach())
            _check_finite(kl_val + recon_val, "stage 1", epoch,
                          {"kl": kl_val, "recon": recon_val})
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            ep_kl += kl_val
            ep_recon += recon_val
            n_batches += 1
        history["kl"].append(ep_kl / n_batches)
        history["recon"].append(ep_recon / n_batches)
        history["total"].append(config.kl_weight * history["kl"][-1] + history["recon"][-1])
    model.eval()
    return TrainResult(model, history)


def _recache_codes(model, ts: TrainingSet, config: TrainConfig, gen: torch.Generator):
    """Best-of-K noise code per training shape, plus the mean best fit loss."""
    S = len(ts)
    K = config.n_noise_candidates
    codes = torch.zeros(S, model.sampler.config.noise_dim)
    fits = []
    with torch.no_grad():
        for i in range(S):
            z, _, _, present = _sample_posterior(model, ts, torch.tensor([i]), gen)
            y = torch.randn(K, model.sampler.config.noise_dim, generator=gen)
            shift, log_scale = model.sampler(z.expand(K, -1, -1), y, present.expand(K, -1))
            losses = fit_loss_terms(shift, log_scale,
                                    ts.tau_shift[i].unsqueeze(0),
                                    ts.tau_log_scale[i].unsqueeze(0),
                                    present.expand(K, -1))
            best = int(torch.argmin(losses))
            codes[i] = y[best]
            fits.append(float(losses[best]))
    return codes, float(np.mean(fits))


def _eval_regression_fit(model, ts: TrainingSet, gen: torch.Generator) -> float:
    with torch.no_grad():
        fits = []
        for i in range(len(ts)):
            z, _, _, present = _sample_posterior(model, ts, torch.tensor([i]), gen)
            y = torch.zeros(1, model.sampler.config.noise_dim)
            shift, log_scale = model.sampler(z, y, present)
            fits.append(float(fit_loss_terms(
                shift, log_scale, ts.tau_shift[i].unsqueeze(0),
                ts.tau_log_scale[i].unsqueeze(0), present)))
    return float(np.mean(fits))


def train_stage2(dataset, model: PartGenModel, config: TrainConfig) -> TrainResult:
    """Freeze stylizers, flows, and denoiser; fit the transformation sampler by
    alternating code recaching with descent on l_recon + lambda_fit * l_fit."""
    if config.deterministic:
        torch.set_num_threads(1)
    ts = prepare_training_set(dataset)
    for module in (model.encoder, *model.flows, model.denoiser):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    model.sampler.train()
    opt = torch.optim.Adam(model.sampler.parameters(), lr=config.stage2_lr,
                           betas=config.adam_betas)
    gen = torch.Generator().manual_seed(config.seed + 2)
    S = len(ts)
    regression = config.stage2_mode == "regression"
    history = {"fit_eval": [], "recon": [], "fit": []}
    codes = torch.zeros(S, model.sampler.config.noise_dim)
    epoch = 0
    while epoch < config.stage2_epochs:
        if regression:
            history["fit_eval"].append(_eval_regression_fit(model, ts, gen))
        else:
            codes, mean_fit = _recache_codes(model, ts, config, gen)
            history["fit_eval"].append(mean_fit)
        for _ in range(min(config.recache_interval, config.stage2_epochs - epoch)):
            perm = torch.randperm(S, generator=gen)
            ep_recon = ep_fit = 0.0
            n_batches = 0
            for start in range(0, S, config.batch_size):
                idx = perm[start:start + config.batch_size]
                z, _, _, present = _sample_posterior(model, ts, idx, gen)
                y = codes[idx]
                shift, log_scale = model.sampler(z, y, present)
                fit = fit_loss_terms(shift, log_scale, ts.tau_shift[idx],
                                     ts.tau_log_scale[idx], present).mean()
                recon = diffusion_loss_batch(
                    model.denoiser, ts.points[idx], ts.labels[idx], z,
                    shift, torch.exp(log_scale), present, model.schedule, gen)
                loss = recon + config.lambda_fit * fit
                recon_val, fit_val = float(recon.detach()), float(fit.detach())
                _check_finite(recon_val + fit_val, "stage 2", epoch,
                              {"recon": recon_val, "fit": fit_val})
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.sampler.parameters(), config.grad_clip)
                opt.step()
                ep_recon += recon_val
                ep_fit += fit_val
                n_batches += 1
            history["recon"].append(ep_recon / n_batches)
            history["fit"].append(ep_fit / n_batches)
            epoch += 1
    if regression:
        history["fit_eval"].append(_eval_regression_fit(model, ts, gen))
    else:
        _, mean_fit = _recache_codes(model, ts, config, gen)
        history["fit_eval"].append(mean_fit)
    model.eval()
    return TrainResult(model, history)


def train(dataset, config: TrainConfig) -> TrainResult:
    """Both stages back to back on the same dataset."""
    stage1 = train_stage1(dataset, config)
    stage2 = train_stage2(dataset, stage1.model, config)
    return TrainResult(stage2.model, {"stage1": stage1.history, "stage2": stage2.history})


# ---------------------------------------------------------------------------
# Sampling


@dataclasses.dataclass
class GenerateOptions:
    latents: StyleLatentSet | None = None        # full set, skips flow sampling
    fixed_parts: dict | None = None              # part index -> latent tensor override
    transforms: TransformSet | None = None       # skips the transformation sampler
    code: NoiseCode | None = None                # fixed y for the sampler
    predict_fn: object = None                    # alternative noise estimator


def _resolve_counts(points_per_part, m, present) -> list:
    if isinstance(points_per_part, int):
        counts = [points_per_part if present[j] else 0 for j in range(m)]
    else:
        counts = [int(c) if present[j] else 0 for j, c in enumerate(points_per_part)]
        if len(counts) != m:
            raise DataError("points_per_part length must equal part count")
    if all(c == 0 for c in counts):
        raise DataError("no points requested for any present part")
    return counts


def _sample_latents(model, rng, fixed_parts=None) -> StyleLatentSet:
    m, d = model.m, model.spec.latent_dim
    fixed = fixed_parts or {}
    z = torch.zeros(m, d)
    with torch.no_grad():
        for j in range(m):
            if j in fixed:
                continue
            xi = torch.randn(d, generator=rng)
            z[j] = model.flows[j].forward_map(xi)[0]
        for j, value in fixed.items():
            z[j] = value
    present = torch.ones(m, dtype=torch.bool)
    return StyleLatentSet(z=z, present=present, mu=z.clone(), sigma=torch.ones(m, d))


def _generate_one(model: PartGenModel, points_per_part, rng: torch.Generator,
                  options: GenerateOptions) -> SegmentedCloud:
    m = model.m
    sched = model.schedule
    if options.latents is not None:
        latents = options.latents
        if options.fixed_parts:
            latents = latents.clone()
            for j, value in options.fixed_parts.items():
                latents.z[j] = value
    else:
        latents = _sample_latents(model, rng, options.fixed_parts)

    if options.transforms is not None:
        tau = options.transforms
    else:
        code = options.code or NoiseCode(torch.randn(32, generator=rng))
        tau = sample_transforms(model.sampler, latents, code)

    present = [latents.present[j] and tau.present[j] for j in range(m)]
    counts = _resolve_counts(points_per_part, m, present)
    labels = torch.cat([torch.full((c,), j, dtype=torch.long) for j, c in enumerate(counts)])
    shift, log_scale, _ = transforms_to_tensors(tau)
    scale = torch.exp(log_scale)
    cond = KernelCondition(shift[labels], scale[labels])

    n = int(labels.shape[0])
    x = cond.mu + cond.sigma * torch.randn(n, 3, generator=rng)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            if options.predict_fn is not None:
                eps_hat = options.predict_fn(x, labels, tau, latents, t)
                if not torch.is_tensor(eps_hat):
                    eps_hat = torch.tensor(np.asarray(eps_hat), dtype=torch.float32)
            else:
                eps_hat = model.denoiser(
                    x.unsqueeze(0), labels.unsqueeze(0), latents.z.unsqueeze(0),
                    shift.unsqueeze(0), scale.unsqueeze(0),
                    latents.present.unsqueeze(0), t, float(sched.alpha_bar[t - 1]))[0]
            noise = torch.randn(n, 3, generator=rng) if t > 1 else None
            x = reverse_step(x, eps_hat, t, cond, sched, noise)
    return SegmentedCloud(x.double().numpy(), labels.numpy(), model.spec.class_id, m)


def generate(model: PartGenModel, n_shapes: int, points_per_part, rng: torch.Generator,
             options: GenerateOptions | None = None):
    """Ancestral sampling. Output clouds carry labels and per-part point counts."""
    model.eval()
    options = options or GenerateOptions()
    return [_generate_one(model, points_per_part, rng, options) for _ in range(n_shapes)]


# ---------------------------------------------------------------------------
# Encoding and editing


@dataclasses.dataclass
class EditSession:
    """Encoded state of one shape: deterministic posterior-mean latents plus the
    observed transforms, evolving under edits."""

    latents: StyleLatentSet
    transforms: TransformSet
    points_per_part: list
    cached_code: NoiseCode | None = None

    @property
    def m(self) -> int:
        return self.latents.m


def encode_shape(model: PartGenModel, shape: SegmentedCloud) -> EditSession:
    """Deterministic encoding: z_j = posterior mean, tau from canonicalization.
    Consumes no randomness."""
    if shape.m != model.m:
        raise DataError("shape part count does not match the model")
    if len(shape) == 0 or not shape.present().any():
        raise DataError("cannot encode an all-empty shape")
    ts = prepare_training_set([shape])
    model.eval()
    with torch.no_grad():
        mu, sigma = model.encoder(ts.canon, ts.canon_mask)
    present = ts.present[0]
    z = torch.where(present.unsqueeze(-1), mu[0], torch.zeros_like(mu[0]))
    latents = StyleLatentSet(z=z, present=present, mu=mu[0],
                             sigma=torch.where(present.unsqueeze(-1), sigma[0],
                                               torch.ones_like(sigma[0])))
    tau = shape_transforms(shape)
    counts = [int(c) for c in shape.part_sizes()]
    return EditSession(latents=latents, transforms=tau, points_per_part=counts)


def reconstruct(model: PartGenModel, session: EditSession, rng: torch.Generator,
                points_per_part=None) -> SegmentedCloud:
    """Autoencoding mode: generate with the session's latents and observed transforms."""
    counts = points_per_part if points_per_part is not None else session.points_per_part
    return _generate_one(model, counts, rng,
                         GenerateOptions(latents=session.latents, transforms=session.transforms))


def resample_parts(model: PartGenModel, session: EditSession, part_subset, rng: torch.Generator,
                   points_per_part=None, code: NoiseCode | None = None) -> SegmentedCloud:
    """Replace the subset's latents with fresh flow samples, resample the
    transforms, and regenerate. Kept parts' latents are untouched."""
    subset = sorted(set(int(j) for j in part_subset))
    for j in subset:
        if not (0 <= j < session.m):
            raise DataError(f"part index {j} out of range")
    with torch.no_grad():
        for j in subset:
            xi = torch.randn(model.spec.latent_dim, generator=rng)
            session.latents.z[j] = model.flows[j].forward_map(xi)[0]
            session.latents.present[j] = True
    y = code or NoiseCode(torch.randn(32, generator=rng))
    tau = sample_transforms(model.sampler, session.latents, y)
    session.transforms = tau
    session.cached_code = y
    counts = points_per_part if points_per_part is not None else session.points_per_part
    return _generate_one(model, counts, rng,
                         GenerateOptions(latents=session.latents, transforms=tau))


def mix_parts(model: PartGenModel, sessions, assignment: dict, rng: torch.Generator,
              points_per_part=None) -> SegmentedCloud:
    """Assemble latents from donor sessions (one donor per part), sample fresh
    transforms, and regenerate. Donor transforms are never copied."""
    m = model.m
    d = model.spec.latent_dim
    z = torch.zeros(m, d)
    present = torch.zeros(m, dtype=torch.bool)
    counts = [0] * m
    for j in range(m):
        if j not in assignment:
            raise DataError(f"assignment missing part {j}")
        donor_idx = assignment[j]
        if not (0 <= donor_idx < len(sessions)):
            raise DataError(f"unknown donor session {donor_idx}")
        donor = sessions[donor_idx]
        if donor.m != m:
            raise DataError("donor session has mismatched part count")
        z[j] = donor.latents.z[j]
        present[j] = donor.latents.present[j]
        counts[j] = donor.points_per_part[j]
    if not present.any():
        raise DataError("mixed shape has no present parts")
    latents = StyleLatentSet(z=z, present=present, mu=z.clone(), sigma=torch.ones(m, d))
    y = NoiseCode(torch.randn(32, generator=rng))
    tau = sample_transforms(model.sampler, latents, y)
    use_counts = points_per_part if points_per_part is not None else counts
    return _generate_one(model, use_counts, rng,
                         GenerateOptions(latents=latents, transforms=tau))


def interpolate_part(model: PartGenModel, session: EditSession, part: int,
                     z_target: torch.Tensor, rng: torch.Generator, steps: int = 10,
                     points_per_part=None):
    """Linear path z_j + (k/steps)(z_target - z_j) for k = 0..steps. Other parts'
    latents stay fixed; transforms are resampled per step with one fixed y."""
    if not (0 <= part < session.m):
        raise DataError(f"part index {part} out of range")
    if steps < 1:
        raise DataError("steps must be >= 1")
    z_source = session.latents.z[part].clone()
    y = NoiseCode(torch.randn(32, generator=rng))
    counts = points_per_part if points_per_part is not None else session.points_per_part
    frames = []
    for k in range(steps + 1):
        if k == 0:
            z_k = z_source
        elif k == steps:
            z_k = z_target
        else:
            z_k = z_source + (k / steps) * (z_target - z_source)
        latents = session.latents.clone()
        latents.z[part] = z_k
        tau = sample_transforms(model.sampler, latents, y)
        frames.append(_generate_one(model, counts, rng,
                                    GenerateOptions(latents=latents, transforms=tau)))
    return frames


@dataclasses.dataclass
class TransformEditResult:
    cloud: SegmentedCloud
    transforms: TransformSet
    residual: float
    converged: bool
    objective_start: float
    objective_end: float


def _constraint_tensors(constraints: dict, m: int):
    shift_target = torch.zeros(m, 3)
    shift_mask = torch.zeros(m, 3, dtype=torch.bool)
    scale_target = torch.ones(m, 3)
    scale_mask = torch.zeros(m, 3, dtype=torch.bool)
    for j, spec in constraints.items():
        j = int(j)
        if not (0 <= j < m):
            raise DataError(f"constraint part {j} out of range")
        for axis, value in enumerate(spec.get("shift", (None, None, None))):
            if value is not None:
                shift_target[j, axis] = float(value)
                shift_mask[j, axis] = True
        for axis, value in enumerate(spec.get("scale", (None, None, None))):
            if value is not None:
                if float(value) <= 0:
                    raise DataError("scale constraints must be positive")
                scale_target[j, axis] = float(value)
                scale_mask[j, axis] = True
    if not (shift_mask.any() or scale_mask.any()):
        raise DataError("no constrained components")
    return shift_target, shift_mask, scale_target, scale_mask


def edit_transform(model: PartGenModel, session: EditSession, constraints: dict,
                   rng: torch.Generator, max_iters: int = 150, step: float = 0.05,
                   reg: float = 0.01, tol: float = 1e-6,
                   points_per_part=None) -> TransformEditResult:
    """Gradient-descend over the sampler's noise code y (not tau directly) to meet
    per-part shift/scale component targets, with a 0.01 ||y||^2 regularizer.
    Backtracking keeps the objective monotone; stops once the constraint residual
    falls below tol. Returns best-so-far with a warning flag on non-convergence."""
    m = model.m
    targets = _constraint_tensors(constraints, m)
    shift_target, shift_mask, scale_target, scale_mask = targets
    z = session.latents.z.unsqueeze(0)
    present = session.latents.present.unsqueeze(0)

    def objective(y_vec: torch.Tensor):
        shift, log_scale = model.sampler(z, y_vec.unsqueeze(0), present)
        scale = torch.exp(log_scale)
        residual = ((shift[0] - shift_target) ** 2 * shift_mask).sum() \
            + ((scale[0] - scale_target) ** 2 * scale_mask).sum()
        return residual, residual + reg * (y_vec ** 2).sum()

    y = (session.cached_code.y.clone() if session.cached_code is not None
         else torch.zeros(32))
    model.sampler.eval()
    y = y.detach().requires_grad_(True)
    residual, obj = objective(y)
    obj_start = float(obj.detach())
    step_size = step
    for _ in range(max_iters):
        if float(residual.detach()) <= tol:
            break
        obj.backward()
        grad = y.grad.detach().clone()
        accepted = False
        for _ in range(40):
            cand = (y.detach() - step_size * grad).requires_grad_(True)
            cand_res, cand_obj = objective(cand)
            if float(cand_obj.detach()) <= float(obj.detach()):
                y, residual, obj = cand, cand_res, cand_obj
                step_size = min(step_size * 1.5, 1.0)
                accepted = True
                break
            step_size *= 0.5
        if not accepted:
            break
    final_residual = float(residual.detach())
    with torch.no_grad():
        shift, log_scale = model.sampler(z, y.detach().unsqueeze(0), present)
    tau = tensors_to_transforms(shift[0], log_scale[0], session.latents.present)
    counts = points_per_part if points_per_part is not None else session.points_per_part
    cloud = _generate_one(model, counts, rng,
                          GenerateOptions(latents=session.latents, transforms=tau))
    session.transforms = tau
    session.cached_code = NoiseCode(y.detach())
    return TransformEditResult(
        cloud=cloud, transforms=tau, residual=final_residual,
        converged=final_residual <= 1e-4,
        objective_start=obj_start, objective_end=float(obj.detach()))


def cache_session_code(model: PartGenModel, session: EditSession, rng: torch.Generator,
                       K: int = 20) -> NoiseCode:
    """Best-of-K code fitting the session's current transforms (used to warm-start
    transform edits)."""
    code = cimle_select(model.sampler, session.latents, session.transforms, K, rng)
    session.cached_code = code
    return code
