import math

import numpy as np
import pytest
import torch

from partgen.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from partgen.config import (
    LAMBDA_SCALE_BY_CLASS,
    TrainConfig,
    desk_profile,
    smoke_profile,
)
from partgen.data import DataError, SegmentedCloud, chamfer, shape_transforms
from partgen.pipeline import (
    EditSession,
    GenerateOptions,
    TrainingDivergedError,
    _check_finite,
    cache_session_code,
    edit_transform,
    encode_shape,
    generate,
    interpolate_part,
    load_model,
    mix_parts,
    prepare_training_set,
    reconstruct,
    resample_parts,
    save_model,
    train_stage1,
    train_stage2,
)
from partgen.synthetic import synthesize_dataset
from partgen.transform_sampler import NoiseCode, sample_transforms

from conftest import TINY_CFG


class TestConfigDefaults:
    def test_default_hyperparameters(self):
        cfg = TrainConfig(class_id="chair")
        assert cfg.kl_weight == pytest.approx(5e-4)
        assert cfg.n_noise_candidates == 20
        assert cfg.recache_interval == 50
        assert cfg.timesteps == 100
        assert cfg.alpha_start == 0.9999
        assert cfg.alpha_end == 0.08
        assert cfg.batch_size == 128
        assert cfg.stage1_epochs == 8000
        assert cfg.stage2_epochs == 4000
        assert cfg.lr_start == pytest.approx(2e-3)
        assert cfg.stage2_lr == pytest.approx(2e-4)
        assert cfg.lambda_fit == 1.0
        assert cfg.adam_betas == (0.9, 0.999)

    def test_lambda_kl_per_class(self):
        assert TrainConfig(class_id="lamp").kl_weight == pytest.approx(1e-3)
        assert TrainConfig(class_id="airplane").kl_weight == pytest.approx(1e-3)

    def test_noise_amplifier_per_class(self):
        assert LAMBDA_SCALE_BY_CLASS["chair"] == 100.0
        assert LAMBDA_SCALE_BY_CLASS["airplane"] == 50.0
        assert LAMBDA_SCALE_BY_CLASS["car"] == 50.0
        assert LAMBDA_SCALE_BY_CLASS["lamp"] == 10.0
        assert TrainConfig(class_id="boxchair").noise_amplifier == 10.0

    def test_lr_decay_from_midpoint(self):
        cfg = TrainConfig(stage1_epochs=8000)
        assert cfg.lr_at(0) == pytest.approx(2e-3)
        assert cfg.lr_at(3999) == pytest.approx(2e-3)
        assert cfg.lr_at(6000) == pytest.approx(0.5 * (2e-3 + 1e-4))
        assert cfg.lr_at(8000) == pytest.approx(1e-4)

    def test_round_trip_dict(self):
        cfg = desk_profile(seed=5)
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert cfg.digest() == again.digest()

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"zzz": 1})


class TestTraining:
    def test_stage1_progress_and_history(self, tiny_model):
        _, h1, _ = tiny_model
        assert len(h1["recon"]) == TINY_CFG.stage1_epochs
        assert h1["recon"][-1] < h1["recon"][0]

    def test_stage1_deterministic(self, tiny_dataset):
        cfg = TrainConfig(class_id="boxchair", seed=11, point_budget=64, batch_size=16,
                          stage1_epochs=3, deterministic=True)
        a = train_stage1(tiny_dataset, cfg)
        b = train_stage1(tiny_dataset, cfg)
        assert abs(a.history["total"][-1] - b.history["total"][-1]) < 1e-6

    def test_divergence_guard(self):
        with pytest.raises(TrainingDivergedError, match="diverged at epoch 7"):
            _check_finite(float("nan"), "stage 1", 7, {"recon": float("nan")})

    def test_stage2_freezes_modules(self, tiny_dataset, tiny_model):
        model, _, _ = tiny_model
        before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
        cfg = TrainConfig(class_id="boxchair", seed=5, point_budget=64, batch_size=16,
                          stage1_epochs=1, stage2_epochs=6, recache_interval=3,
                          n_noise_candidates=2)
        frozen = {}
        for name, mod in (("encoder", model.encoder), ("denoiser", model.denoiser)):
            frozen[name] = {k: v.clone() for k, v in mod.state_dict().items()}
        flow_frozen = [{k: v.clone() for k, v in f.state_dict().items()} for f in model.flows]
        train_stage2(tiny_dataset, model, cfg)
        for name, mod in (("encoder", model.encoder), ("denoiser", model.denoiser)):
            for k, v in mod.state_dict().items():
                assert torch.equal(v, frozen[name][k]), f"{name}.{k} changed"
        for f, snap in zip(model.flows, flow_frozen):
            for k, v in f.state_dict().items():
                assert torch.equal(v, snap[k])
        del before

    def test_stage2_history_structure(self, tiny_model):
        _, _, h2 = tiny_model
        assert len(h2["fit_eval"]) >= 2
        assert len(h2["recon"]) == TINY_CFG.stage2_epochs


class TestCheckpoint:
    def test_round_trip_byte_stable(self, tmp_path, tiny_model):
        model, _, _ = tiny_model
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_model(p1, model, {"stage": 2})
        loaded, meta = load_model(p1)
        assert meta["stage"] == 2
        save_model(p2, loaded, {"stage": 2})
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        save_checkpoint(p, {"w": torch.zeros(2)}, {"x": 1})
        raw = p.read_bytes()
        p.write_bytes(raw.replace(b'"format_version":1', b'"format_version":9', 1))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_generate_identical_after_reload(self, tmp_path, tiny_model):
        model, _, _ = tiny_model
        p = tmp_path / "m.ckpt"
        save_model(p, model)
        loaded, _ = load_model(p)
        a = generate(model, 2, 16, torch.Generator().manual_seed(7))
        b = generate(loaded, 2, 16, torch.Generator().manual_seed(7))
        for ca, cb in zip(a, b):
            assert ca.points.tobytes() == cb.points.tobytes()
            assert ca.labels.tobytes() == cb.labels.tobytes()


class TestGenerate:
    def test_shape_contract(self, tiny_model):
        model, _, _ = tiny_model
        clouds = generate(model, 3, [10, 20, 5, 8], torch.Generator().manual_seed(0))
        assert len(clouds) == 3
        for c in clouds:
            sizes = c.part_sizes()
            assert list(sizes) == [10, 20, 5, 8]
            assert c.m == 4
            assert np.isfinite(c.points).all()

    def test_deterministic_given_seed(self, tiny_model):
        model, _, _ = tiny_model
        a = generate(model, 1, 24, torch.Generator().manual_seed(5))[0]
        b = generate(model, 1, 24, torch.Generator().manual_seed(5))[0]
        assert a.points.tobytes() == b.points.tobytes()

    def test_oracle_denoiser_recovers_target(self, tiny_model):
        # Algorithm fidelity: with a per-point oracle noise estimate the reverse
        # chain lands on the target geometry regardless of training.
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=33, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        x0 = torch.tensor(shape.points, dtype=torch.float32)
        tau = session.transforms
        shift = torch.tensor(np.stack([t.shift for t in tau.transforms]), dtype=torch.float32)
        scale = torch.tensor(np.stack([t.scale for t in tau.transforms]), dtype=torch.float32)
        sched = model.schedule

        def oracle(x_t, labels, tau_arg, lat_arg, t):
            ab = sched.alpha_bar[t - 1]
            mu = shift[labels]
            sg = scale[labels]
            return (x_t - math.sqrt(ab) * x0 - (1 - math.sqrt(ab)) * mu) / (
                math.sqrt(1 - ab) * sg)

        counts = [int(c) for c in shape.part_sizes()]
        out = generate(model, 1, counts, torch.Generator().manual_seed(1),
                       GenerateOptions(latents=session.latents, transforms=tau,
                                       predict_fn=oracle))[0]
        rms = math.sqrt(float(np.mean((out.points - shape.points) ** 2)))
        assert rms < 0.05

    def test_generated_cloud_satisfies_invariants(self, tiny_model):
        model, _, _ = tiny_model
        cloud = generate(model, 1, 16, torch.Generator().manual_seed(9))[0]
        assert isinstance(cloud, SegmentedCloud)  # construction validates invariants


class TestEncode:
    def test_deterministic_and_consumes_no_rng(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=40, n_shapes=1, n_points=64)[0]
        state_before = torch.get_rng_state()
        s1 = encode_shape(model, shape)
        s2 = encode_shape(model, shape)
        assert torch.equal(torch.get_rng_state(), state_before)
        assert torch.equal(s1.latents.z, s2.latents.z)

    def test_transforms_match_canonicalization(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=41, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        expected = shape_transforms(shape)
        for a, b in zip(session.transforms.transforms, expected.transforms):
            assert np.array_equal(a.shift, b.shift)
            assert np.array_equal(a.scale, b.scale)

    def test_empty_shape_rejected(self, tiny_model):
        model, _, _ = tiny_model
        empty = SegmentedCloud(np.zeros((0, 3)), np.zeros(0, dtype=int), "boxchair", 4)
        with pytest.raises(DataError, match="empty"):
            encode_shape(model, empty)

    def test_part_count_mismatch(self, tiny_model):
        model, _, _ = tiny_model
        shape = SegmentedCloud(np.random.default_rng(0).normal(size=(10, 3)),
                               np.zeros(10, dtype=int), "x", 2)
        with pytest.raises(DataError):
            encode_shape(model, shape)


class TestEdits:
    def test_resample_empty_subset_fixed_code_is_reconstruction_path(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=50, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        y = NoiseCode(torch.randn(32, generator=torch.Generator().manual_seed(2)))
        out = resample_parts(model, session, [], torch.Generator().manual_seed(3),
                             points_per_part=24, code=y)
        tau = sample_transforms(model.sampler, session.latents, y)
        expected = generate(model, 1, 24, torch.Generator().manual_seed(3),
                            GenerateOptions(latents=session.latents, transforms=tau))[0]
        assert out.points.tobytes() == expected.points.tobytes()

    def test_resample_all_matches_generate_stream(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=51, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        out = resample_parts(model, session, range(4), torch.Generator().manual_seed(8),
                             points_per_part=16)
        expected = generate(model, 1, 16, torch.Generator().manual_seed(8))[0]
        assert out.points.tobytes() == expected.points.tobytes()

    def test_resample_keeps_non_subset_latents(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=52, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        kept = session.latents.z[[0, 2, 3]].clone()
        resample_parts(model, session, [1], torch.Generator().manual_seed(4),
                       points_per_part=16)
        assert torch.equal(session.latents.z[[0, 2, 3]], kept)
        assert not torch.equal(session.latents.z[1], torch.zeros(256))

    def test_resample_invalid_part(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=53, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        with pytest.raises(DataError):
            resample_parts(model, session, [9], torch.Generator().manual_seed(0))

    def test_mix_degenerate_single_donor(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=54, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        mixed = mix_parts(model, [session], {j: 0 for j in range(4)},
                          torch.Generator().manual_seed(6))
        y = NoiseCode(torch.randn(32, generator=torch.Generator().manual_seed(6)))
        tau = sample_transforms(model.sampler, session.latents, y)
        g = torch.Generator().manual_seed(6)
        torch.randn(32, generator=g)  # the code draw happens first in mix_parts
        expected = generate(model, 1, session.points_per_part, g,
                            GenerateOptions(latents=session.latents, transforms=tau))[0]
        assert mixed.points.tobytes() == expected.points.tobytes()

    def test_mix_validates_assignment(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=55, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        with pytest.raises(DataError, match="missing part"):
            mix_parts(model, [session], {0: 0}, torch.Generator().manual_seed(0))
        with pytest.raises(DataError, match="unknown donor"):
            mix_parts(model, [session], {j: 5 for j in range(4)},
                      torch.Generator().manual_seed(0))

    def test_interpolation_endpoints_and_midpoint(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=56, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        z_source = session.latents.z[0].clone()
        z_target = torch.randn(256, generator=torch.Generator().manual_seed(10))
        captured = []
        original = sample_transforms

        def capture(sampler, latents, y):
            captured.append(latents.z[0].clone())
            return original(sampler, latents, y)

        import partgen.pipeline as pl
        old = pl.sample_transforms
        pl.sample_transforms = capture
        try:
            frames = interpolate_part(model, session, 0, z_target,
                                      torch.Generator().manual_seed(11), steps=10,
                                      points_per_part=8)
        finally:
            pl.sample_transforms = old
        assert len(frames) == 11
        assert torch.equal(captured[0], z_source)
        assert torch.equal(captured[10], z_target)
        mid = z_source + 0.5 * (z_target - z_source)
        assert torch.allclose(captured[5], mid, atol=1e-6)

    def test_interpolation_isolates_other_parts(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=57, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        z_target = torch.randn(256, generator=torch.Generator().manual_seed(12))
        captured = []

        import partgen.pipeline as pl
        old = pl.sample_transforms

        def capture(sampler, latents, y):
            captured.append(latents.z[[1, 2, 3]].clone())
            return old(sampler, latents, y)

        pl.sample_transforms = capture
        try:
            interpolate_part(model, session, 0, z_target,
                             torch.Generator().manual_seed(13), steps=4,
                             points_per_part=8)
        finally:
            pl.sample_transforms = old
        for other in captured[1:]:
            assert torch.equal(other, captured[0])

    def test_edit_transform_monotone_and_fixed_point(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=58, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        resample_parts(model, session, [], torch.Generator().manual_seed(14),
                       points_per_part=16)  # puts tau on the sampler manifold, caches y
        tau = session.transforms
        constraints = {
            j: {"shift": list(tau.transforms[j].shift), "scale": list(tau.transforms[j].scale)}
            for j in range(4)
        }
        result = edit_transform(model, session, constraints,
                                torch.Generator().manual_seed(15), points_per_part=16)
        assert result.residual < 1e-4
        assert result.converged
        assert result.objective_end <= result.objective_start + 1e-9

    def test_edit_transform_descends_on_new_target(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=59, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        constraints = {0: {"shift": [None, None, 1.1], "scale": [None, None, 0.3]}}
        result = edit_transform(model, session, constraints,
                                torch.Generator().manual_seed(16), points_per_part=16)
        assert result.objective_end <= result.objective_start
        assert result.residual >= 0.0

    def test_edit_transform_validation(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=60, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        g = torch.Generator().manual_seed(0)
        with pytest.raises(DataError):
            edit_transform(model, session, {9: {"shift": [0, 0, 0]}}, g)
        with pytest.raises(DataError):
            edit_transform(model, session, {0: {}}, g)
        with pytest.raises(DataError):
            edit_transform(model, session, {0: {"scale": [-1.0, None, None]}}, g)

    def test_cache_session_code(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=61, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        assert session.cached_code is None
        code = cache_session_code(model, session, torch.Generator().manual_seed(17), K=4)
        assert session.cached_code is code


class TestReconstructionSmoke:
    def test_reconstruct_runs_and_labels_match(self, tiny_model):
        model, _, _ = tiny_model
        shape = synthesize_dataset(seed=62, n_shapes=1, n_points=64)[0]
        session = encode_shape(model, shape)
        out = reconstruct(model, session, torch.Generator().manual_seed(18))
        assert list(out.part_sizes()) == list(shape.part_sizes())
        assert chamfer(out.points, shape.points) >= 0.0
