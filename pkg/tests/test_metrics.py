import numpy as np
import pytest

from partgen.data import DataError, SegmentedCloud
from partgen.metrics import (
    ConnectionSpec,
    PartSetPair,
    category_score,
    cov_p,
    evaluate_sets,
    format_report,
    make_part_set_pair,
    mmd_p,
    one_nna_p,
    shapenet_chair_spec,
    snap,
    snap_detail,
    unit_cube_canonicalize,
)
from partgen.synthetic import synthesize_dataset


def brute_chamfer(a, b):
    def one_way(src, dst):
        total = 0.0
        for p in src:
            total += min(sum((p[k] - q[k]) ** 2 for k in range(p.shape[0])) for q in dst)
        return total / len(src)

    return one_way(a, b) + one_way(b, a)


def random_clouds(rng, n_sets, n_points=12):
    return tuple(rng.normal(size=(n_points, 3)) for _ in range(n_sets))


def pair_of(gen, ref):
    return PartSetPair(generated=tuple(gen), reference=tuple(ref), part=0)


class TestUnitCube:
    def test_axes_fill_unit_cube(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-3.0, 7.0, size=(200, 3)) * [1.0, 0.1, 12.0]
        out = unit_cube_canonicalize(pts)
        assert out.min() >= -0.5 - 1e-12 and out.max() <= 0.5 + 1e-12
        spans = out.max(axis=0) - out.min(axis=0)
        assert np.allclose(spans, 1.0)

    def test_degenerate_axis(self):
        pts = np.array([[0.0, 1.0, 2.0], [1.0, 1.0, 3.0]])
        out = unit_cube_canonicalize(pts)
        assert np.allclose(out[:, 1], 0.0)

    def test_distinct_from_meanstd_canonicalization(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(64, 3))
        out = unit_cube_canonicalize(pts)
        assert not np.allclose(out.std(axis=0), 1.0, atol=0.2)


class TestMMD:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(2)
        clouds = random_clouds(rng, 4)
        assert mmd_p(pair_of(clouds, clouds)) == 0.0

    def test_min_absorbs_junk(self):
        rng = np.random.default_rng(3)
        ref = random_clouds(rng, 1)
        junk = (ref[0] + 100.0,)
        assert mmd_p(pair_of(ref + junk, ref)) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        gen = random_clouds(rng, 10)
        ref = random_clouds(rng, 10)
        expected = np.mean([min(brute_chamfer(r, g) for g in gen) for r in ref])
        assert mmd_p(pair_of(gen, ref)) == pytest.approx(expected, abs=1e-12)


class TestCOV:
    def test_identity_full_coverage(self):
        rng = np.random.default_rng(5)
        clouds = random_clouds(rng, 6)
        assert cov_p(pair_of(clouds, clouds)) == 1.0

    def test_collapsed_generator(self):
        rng = np.random.default_rng(6)
        ref = random_clouds(rng, 8)
        gen = (ref[0].copy(),) * 5
        assert cov_p(pair_of(gen, ref)) <= 1.0 / 8 + 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        gen = random_clouds(rng, 9)
        ref = random_clouds(rng, 7)
        matched = {int(np.argmin([brute_chamfer(g, r) for r in ref])) for g in gen}
        assert cov_p(pair_of(gen, ref)) == pytest.approx(len(matched) / 7, abs=1e-12)


class TestOneNNA:
    def test_split_of_one_pool_near_half(self):
        for seed in (0, 1, 2):
            rng = np.random.default_rng(seed)
            pool = random_clouds(rng, 100, n_points=16)
            acc = one_nna_p(pair_of(pool[:50], pool[50:]))
            assert 0.35 <= acc <= 0.65

    def test_separable_sets(self):
        rng = np.random.default_rng(8)
        ref = random_clouds(rng, 10)
        gen = tuple(c + 50.0 for c in ref)
        assert one_nna_p(pair_of(gen, ref)) == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        gen = random_clouds(rng, 8)
        ref = random_clouds(rng, 8)
        union = list(gen) + list(ref)
        labels = [0] * 8 + [1] * 8
        correct = 0
        for i, a in enumerate(union):
            dists = [brute_chamfer(a, b) if i != j else np.inf
                     for j, b in enumerate(union)]
            correct += labels[int(np.argmin(dists))] == labels[i]
        assert one_nna_p(pair_of(gen, ref)) == pytest.approx(correct / 16, abs=1e-12)


def square_cloud(rng, x0, n=200):
    """Dense unit square in the (x, z) plane starting at x = x0."""
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(x0, x0 + 1.0, size=n)
    pts[:, 2] = rng.uniform(0.0, 1.0, size=n)
    return pts


class TestSnap:
    def test_touching_beats_separated(self):
        rng = np.random.default_rng(10)
        a = square_cloud(rng, 0.0)
        b_touch = square_cloud(rng, 1.0)
        b_apart = b_touch + [0.5, 0.0, 0.0]
        spec = ConnectionSpec(((0, frozenset({1})),))
        touching = SegmentedCloud(np.vstack([a, b_touch]),
                                  [0] * 200 + [1] * 200, "c", 2)
        apart = SegmentedCloud(np.vstack([a, b_apart]),
                               [0] * 200 + [1] * 200, "c", 2)
        assert snap(touching, spec) < snap(apart, spec)

    def test_coincident_parts_zero(self):
        rng = np.random.default_rng(11)
        a = square_cloud(rng, 0.0, n=60)
        shape = SegmentedCloud(np.vstack([a, a]), [0] * 60 + [1] * 60, "c", 2)
        spec = ConnectionSpec(((0, frozenset({1})),))
        assert snap(shape, spec) == pytest.approx(0.0, abs=1e-12)

    def test_chair_spec_contents(self):
        spec = shapenet_chair_spec()
        entries = dict(spec.entries)
        assert entries[0] == frozenset({1, 2})   # back -> legs or seat
        assert entries[1] == frozenset({2})      # seat -> legs
        assert entries[3] == frozenset({0, 1})   # arms -> back or seat

    def test_translation_invariance_whole_shape(self):
        shape = synthesize_dataset(seed=12, n_shapes=1, n_points=256)[0]
        spec = ConnectionSpec.from_pairs([(0, 1), (1, 2), (1, 3)])
        moved = SegmentedCloud(shape.points + [5.0, -3.0, 2.0], shape.labels,
                               shape.class_id, shape.m)
        assert snap(moved, spec) == pytest.approx(snap(shape, spec), rel=1e-9)

    def test_increases_when_part_pulled_away(self):
        shape = synthesize_dataset(seed=13, n_shapes=1, n_points=256)[0]
        spec = ConnectionSpec.from_pairs([(0, 1)])
        pts = shape.points.copy()
        pts[shape.labels == 0] += [0.0, 0.0, 0.5]
        pulled = SegmentedCloud(pts, shape.labels, shape.class_id, shape.m)
        assert snap(pulled, spec) > snap(shape, spec)

    def test_skipped_connections_reported(self):
        rng = np.random.default_rng(14)
        a = square_cloud(rng, 0.0, n=40)
        shape = SegmentedCloud(a, [0] * 40, "c", 3)  # parts 1, 2 absent
        spec = ConnectionSpec(((0, frozenset({1})), (2, frozenset({0}))))
        values, skipped = snap_detail(shape, spec)
        assert values == [] and skipped == 2
        with pytest.raises(DataError):
            snap(shape, spec)

    def test_small_parts_use_available_points(self):
        rng = np.random.default_rng(15)
        a = square_cloud(rng, 0.0, n=5)
        b = square_cloud(rng, 1.0, n=5)
        shape = SegmentedCloud(np.vstack([a, b]), [0] * 5 + [1] * 5, "c", 2)
        spec = ConnectionSpec(((0, frozenset({1})),))
        assert np.isfinite(snap(shape, spec, n_snap=30))

    def test_oracle_small_sets(self):
        # n_snap covering everything reduces to plain part-to-part Chamfer.
        rng = np.random.default_rng(16)
        a = rng.normal(size=(6, 3))
        b = rng.normal(size=(6, 3)) + 0.5
        shape = SegmentedCloud(np.vstack([a, b]), [0] * 6 + [1] * 6, "c", 2)
        spec = ConnectionSpec(((0, frozenset({1})),))
        assert snap(shape, spec, n_snap=30) == pytest.approx(brute_chamfer(b, a), abs=1e-9)


class TestAggregation:
    def test_category_score_weighted(self):
        assert category_score([1.0, 3.0], [1, 3]) == pytest.approx(2.5)

    def test_evaluate_sets_iid_resample(self):
        shapes = synthesize_dataset(seed=17, n_shapes=40, n_points=192)
        result = evaluate_sets(shapes[:20], shapes[20:], m=4,
                               connections=[(0, 1), (1, 2), (1, 3)],
                               n_points=64, seed=0)
        assert result["mmd"] > 0.0
        assert result["cov"] > 0.5
        assert 0.25 <= result["one_nna"] <= 0.75
        assert np.isfinite(result["snap"])
        assert result["snap_skipped"] == 0
        text = format_report(result)
        assert "MMD-P" in text and "SNAP" in text

    def test_make_pair_resamples_to_common_count(self):
        shapes = synthesize_dataset(seed=18, n_shapes=6, n_points=128)
        pair = make_part_set_pair(shapes[:3], shapes[3:], 1, n_points=77, seed=0)
        assert all(c.shape == (77, 3) for c in pair.generated + pair.reference)
        for c in pair.generated:
            assert c.min() >= -0.5 - 1e-9 and c.max() <= 0.5 + 1e-9

    def test_empty_reference_rejected(self):
        with pytest.raises(DataError):
            PartSetPair(generated=(np.zeros((4, 3)),), reference=(), part=0)
