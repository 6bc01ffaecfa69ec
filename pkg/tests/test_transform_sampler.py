import numpy as np
import pytest
import torch

from partgen.data import DataError, PartTransform, TransformSet
from partgen.stylizer import StyleLatentSet
from partgen.transform_sampler import (
    NoiseCode,
    SamplerConfig,
    TransformSampler,
    cimle_select,
    fit_loss,
    sample_transforms,
    transforms_to_tensors,
)

torch.manual_seed(0)


def latents_of(z, present=None):
    m, d = z.shape
    present = torch.ones(m, dtype=torch.bool) if present is None else present
    return StyleLatentSet(z=z, present=present, mu=z.clone(), sigma=torch.ones(m, d))


def tset(shifts, scales, present=None):
    transforms = tuple(PartTransform(c, s) for c, s in zip(shifts, scales))
    present = (True,) * len(transforms) if present is None else tuple(present)
    return TransformSet(transforms, present)


class TestSampler:
    def test_scales_strictly_positive_fuzz(self):
        sampler = TransformSampler(m=3, config=SamplerConfig(lambda_scale=10.0, layers=2)).eval()
        g = torch.Generator().manual_seed(1)
        z = torch.randn(1000, 3, 256, generator=g) * 5.0
        y = torch.randn(1000, 32, generator=g)
        present = torch.ones(1000, 3, dtype=torch.bool)
        with torch.no_grad():
            _, log_scale = sampler(z, y, present)
        assert torch.isfinite(log_scale).all()
        assert (torch.exp(log_scale) > 0).all()

    def test_finite_for_large_inputs(self):
        sampler = TransformSampler(m=4, config=SamplerConfig(lambda_scale=100.0, layers=5)).eval()
        g = torch.Generator().manual_seed(2)
        z = torch.randn(8, 4, 256, generator=g)
        z = z / z.norm(dim=-1, keepdim=True) * 100.0
        y = torch.randn(8, 32, generator=g)
        with torch.no_grad():
            shift, log_scale = sampler(z, y, torch.ones(8, 4, dtype=torch.bool))
        assert torch.isfinite(shift).all() and torch.isfinite(log_scale).all()

    def test_batch_equivariance(self):
        sampler = TransformSampler(m=2, config=SamplerConfig(layers=3)).eval()
        g = torch.Generator().manual_seed(3)
        z = torch.randn(6, 2, 256, generator=g)
        y = torch.randn(6, 32, generator=g)
        present = torch.ones(6, 2, dtype=torch.bool)
        with torch.no_grad():
            s_a, l_a = sampler(z, y, present)
            perm = torch.tensor([4, 2, 0, 5, 1, 3])
            s_b, l_b = sampler(z[perm], y[perm], present)
        assert torch.equal(s_a[perm], s_b)
        assert torch.equal(l_a[perm], l_b)

    def test_deterministic_with_fixed_inputs(self):
        sampler = TransformSampler(m=2).eval()
        z = torch.randn(1, 2, 256)
        y = torch.randn(1, 32)
        present = torch.ones(1, 2, dtype=torch.bool)
        with torch.no_grad():
            a = sampler(z, y, present)
            b = sampler(z, y, present)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_absent_parts_flagged(self):
        sampler = TransformSampler(m=3).eval()
        present = torch.tensor([True, False, True])
        lat = latents_of(torch.randn(3, 256), present)
        tau = sample_transforms(sampler, lat, NoiseCode(torch.randn(32)))
        assert tau.present == (True, False, True)
        assert np.array_equal(tau.transforms[1].scale, np.ones(3))

    def test_absent_token_does_not_affect_others(self):
        sampler = TransformSampler(m=3, config=SamplerConfig(layers=2)).eval()
        g = torch.Generator().manual_seed(4)
        z = torch.randn(1, 3, 256, generator=g)
        y = torch.randn(1, 32, generator=g)
        mask = torch.tensor([[True, False, True]])
        with torch.no_grad():
            s_a, _ = sampler(z, y, mask)
            z_mod = z.clone()
            z_mod[0, 1] = torch.randn(256, generator=g) * 10
            s_b, _ = sampler(z_mod, y, mask)
        assert torch.equal(s_a[0, 0], s_b[0, 0])
        assert torch.equal(s_a[0, 2], s_b[0, 2])


class TestFitLoss:
    def test_identity_zero(self):
        tau = tset([np.zeros(3), np.ones(3)], [np.ones(3), np.full(3, 2.0)])
        assert fit_loss(tau, tau) == 0.0

    def test_unit_shift_offset(self):
        a = tset([[1.0, 0.0, 0.0]], [np.ones(3)])
        b = tset([[0.0, 0.0, 0.0]], [np.ones(3)])
        assert fit_loss(a, b) == pytest.approx(1.0)

    def test_doubled_scale(self):
        a = tset([np.zeros(3)], [np.full(3, 2.0)])
        b = tset([np.zeros(3)], [np.ones(3)])
        assert fit_loss(a, b) == pytest.approx(1.4413590417546042, rel=1e-12)

    def test_presence_mismatch_rejected(self):
        a = tset([np.zeros(3)], [np.ones(3)], present=[True])
        b = tset([np.zeros(3)], [np.ones(3)], present=[False])
        with pytest.raises(DataError):
            fit_loss(a, b)

    def test_absent_parts_do_not_contribute(self):
        a = tset([np.zeros(3), [9.0, 9.0, 9.0]], [np.ones(3), np.full(3, 7.0)],
                 present=[True, False])
        b = tset([[0.5, 0.0, 0.0], [1.0, 1.0, 1.0]], [np.ones(3), np.ones(3)],
                 present=[True, False])
        assert fit_loss(a, b) == pytest.approx(0.25)

    def test_positive_unless_equal(self):
        rng = np.random.default_rng(5)
        base = tset([rng.normal(size=3)], [rng.uniform(0.5, 2.0, size=3)])
        bumped = tset([base.transforms[0].shift + 1e-3], [base.transforms[0].scale])
        assert fit_loss(base, bumped) > 0.0


class TestCimleSelect:
    def test_k1_returns_single_draw(self):
        sampler = TransformSampler(m=2, config=SamplerConfig(layers=1)).eval()
        lat = latents_of(torch.randn(2, 256))
        tau_ref = tset([np.zeros(3), np.zeros(3)], [np.ones(3), np.ones(3)])
        code = cimle_select(sampler, lat, tau_ref, K=1, rng=torch.Generator().manual_seed(7))
        expected = torch.randn(1, 32, generator=torch.Generator().manual_seed(7))
        assert torch.equal(code.y, expected[0])

    def test_selected_code_is_argmin(self):
        sampler = TransformSampler(m=2, config=SamplerConfig(layers=2)).eval()
        lat = latents_of(torch.randn(2, 256))
        tau_ref = tset([np.zeros(3), [0.2, 0.1, -0.3]], [np.ones(3), [1.5, 0.8, 1.0]])
        K = 16
        code = cimle_select(sampler, lat, tau_ref, K=K, rng=torch.Generator().manual_seed(9))
        ys = torch.randn(K, 32, generator=torch.Generator().manual_seed(9))
        losses = [fit_loss(sample_transforms(sampler, lat, NoiseCode(y)), tau_ref) for y in ys]
        selected_loss = fit_loss(sample_transforms(sampler, lat, code), tau_ref)
        assert selected_loss == pytest.approx(min(losses), rel=1e-6)
        assert min(range(K), key=lambda k: losses[k]) == int(np.argmin(losses))

    def test_invalid_k(self):
        sampler = TransformSampler(m=1)
        lat = latents_of(torch.randn(1, 256))
        tau_ref = tset([np.zeros(3)], [np.ones(3)])
        with pytest.raises(ValueError):
            cimle_select(sampler, lat, tau_ref, K=0, rng=torch.Generator())


class TestTensorBridges:
    def test_round_trip(self):
        tau = tset([[0.1, -0.2, 0.3], [1.0, 2.0, 3.0]],
                   [[0.5, 1.0, 2.0], [0.1, 0.2, 0.3]])
        shift, log_scale, present = transforms_to_tensors(tau)
        assert present.all()
        assert np.allclose(shift.numpy(), tau.shifts(), atol=1e-7)
        assert np.allclose(np.exp(log_scale.numpy()), tau.scales(), rtol=1e-6)
