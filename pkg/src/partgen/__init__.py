"""Part-based 3D point cloud generative model with factorized style and
configuration priors and a cross-attention diffusion decoder."""

from .config import TrainConfig, desk_profile, full_scale_profile, smoke_profile
from .data import (
    DataError,
    DatasetManifest,
    PartTransform,
    SegmentedCloud,
    TransformSet,
    apply_transform,
    canonicalize_part,
    chamfer,
    load_dataset,
    shape_transforms,
)
from .kernel import (
    DiffusionSchedule,
    KernelCondition,
    forward_marginal,
    make_schedule,
    noise_to_mean,
    posterior_params,
    reverse_step,
)
from .pipeline import (
    EditSession,
    GenerateOptions,
    PartGenModel,
    edit_transform,
    encode_shape,
    generate,
    interpolate_part,
    load_model,
    mix_parts,
    reconstruct,
    resample_parts,
    save_model,
    train,
    train_stage1,
    train_stage2,
)
from .stylizer import PriorFlow, StyleLatentSet, reparam_sample
from .synthetic import BoxTemplate, synthesize_dataset, write_synthetic_dataset
from .transform_sampler import NoiseCode, TransformSampler, cimle_select, fit_loss

__version__ = "0.1.0"
