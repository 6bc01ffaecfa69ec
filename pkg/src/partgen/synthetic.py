"""Deterministic synthetic box-furniture generator for desk-scale training and tests.

Shapes are four labeled axis-aligned boxes (back / seat / left rail / right rail)
with dimensions drawn from a two-mode mixture (tall back vs. low back), so the
part-configuration distribution given canonical styles is genuinely bimodal.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .data import DatasetManifest, SegmentedCloud, TransformSet, save_manifest, write_record

BACK, SEAT, LEFT_LEGS, RIGHT_LEGS = 0, 1, 2, 3


@dataclasses.dataclass(frozen=True)
class BoxTemplate:
    """Parameter ranges of the synthetic class. All (lo, hi) are uniform ranges."""

    class_id: str = "boxchair"
    m: int = 4
    part_names: tuple = ("back", "seat", "left_legs", "right_legs")
    mode_weights: tuple = (0.5, 0.5)
    back_height: tuple = ((0.70, 0.80), (0.25, 0.35))  # per mode
    back_depth: tuple = (0.08, 0.12)
    seat_width: tuple = (0.85, 0.95)
    seat_depth: tuple = (0.85, 0.95)
    seat_thickness: tuple = (0.08, 0.12)
    seat_height: float = 0.45  # seat box center z
    rail_width: tuple = (0.08, 0.12)
    point_fractions: tuple = (0.30, 0.40, 0.15, 0.15)
    connections: tuple = ((BACK, SEAT), (SEAT, LEFT_LEGS), (SEAT, RIGHT_LEGS))

    def mode_back_stats(self):
        """Expected back (shift_z, scale_z) per mode, for clustering sampled
        transforms against the two configuration modes.

        A uniform box of extent h has per-axis std h / (2*sqrt(3)).
        """
        stats = []
        for lo, hi in self.back_height:
            h = 0.5 * (lo + hi)
            seat_top = self.seat_height + 0.5 * (self.seat_thickness[0] + self.seat_thickness[1]) / 2
            stats.append((seat_top + 0.5 * h, h / (2.0 * math.sqrt(3.0))))
        return stats


def _u(rng, lohi):
    return rng.uniform(lohi[0], lohi[1])


def sample_boxes(rng: np.random.Generator, template: BoxTemplate):
    """Draw one shape's mode index and per-part (center, size) boxes."""
    mode = int(rng.random() >= template.mode_weights[0])
    sw = _u(rng, template.seat_width)
    sd = _u(rng, template.seat_depth)
    st = _u(rng, template.seat_thickness)
    bh = _u(rng, template.back_height[mode])
    bd = _u(rng, template.back_depth)
    rw = _u(rng, template.rail_width)

    seat_top = template.seat_height + 0.5 * st
    seat_bottom = template.seat_height - 0.5 * st
    boxes = [None] * template.m
    boxes[BACK] = (
        np.array([0.0, -0.5 * (sd - bd), seat_top + 0.5 * bh]),
        np.array([sw, bd, bh]),
    )
    boxes[SEAT] = (np.array([0.0, 0.0, template.seat_height]), np.array([sw, sd, st]))
    rail_size = np.array([rw, sd, seat_bottom])
    boxes[LEFT_LEGS] = (np.array([-0.5 * (sw - rw), 0.0, 0.5 * seat_bottom]), rail_size)
    boxes[RIGHT_LEGS] = (np.array([0.5 * (sw - rw), 0.0, 0.5 * seat_bottom]), rail_size.copy())
    return mode, boxes


def box_bounds(template: BoxTemplate):
    """Loose per-part axis-aligned bounds that every sampled box must respect."""
    lo_hi = []
    sw_hi, sd_hi = template.seat_width[1], template.seat_depth[1]
    st_lo, st_hi = template.seat_thickness
    bh_all = [h for mode in template.back_height for h in mode]
    top_hi = template.seat_height + 0.5 * st_hi + max(bh_all)
    lo_hi.append((np.array([-0.5 * sw_hi, -0.5 * sd_hi, template.seat_height - 0.5 * st_hi]),
                  np.array([0.5 * sw_hi, 0.0, top_hi])))
    lo_hi.append((np.array([-0.5 * sw_hi, -0.5 * sd_hi, template.seat_height - 0.5 * st_hi]),
                  np.array([0.5 * sw_hi, 0.5 * sd_hi, template.seat_height + 0.5 * st_hi])))
    for _ in range(2):
        lo_hi.append((np.array([-0.5 * sw_hi, -0.5 * sd_hi, 0.0]),
                      np.array([0.5 * sw_hi, 0.5 * sd_hi, template.seat_height - 0.5 * st_lo])))
    return lo_hi


def _points_in_box(rng, center, size, n):
    return center + (rng.random((n, 3)) - 0.5) * size


def synthesize_shape(rng: np.random.Generator, template: BoxTemplate, n_points: int = 512) -> SegmentedCloud:
    _, boxes = sample_boxes(rng, template)
    fractions = np.asarray(template.point_fractions)
    counts = np.floor(fractions * n_points).astype(int)
    counts[0] += n_points - counts.sum()
    pts = []
    labs = []
    for j, ((center, size), n) in enumerate(zip(boxes, counts)):
        pts.append(_points_in_box(rng, center, size, int(n)))
        labs.append(np.full(int(n), j, dtype=np.int64))
    return SegmentedCloud(np.concatenate(pts), np.concatenate(labs),
                          template.class_id, template.m)


def synthesize_dataset(seed: int, n_shapes: int, template: BoxTemplate | None = None,
                       n_points: int = 512):
    """Procedurally generate a dataset. Byte-identical output for identical seeds."""
    template = template or BoxTemplate()
    rng = np.random.default_rng(seed)
    return [synthesize_shape(rng, template, n_points) for _ in range(n_shapes)]


def write_synthetic_dataset(out_dir, seed: int, n_train: int, n_test: int,
                            template: BoxTemplate | None = None, n_points: int = 512) -> Path:
    """Synthesize train/test splits, write records plus manifest, return manifest path."""
    template = template or BoxTemplate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shapes = synthesize_dataset(seed, n_train + n_test, template, n_points)
    names = []
    for i, shape in enumerate(shapes):
        name = f"shape_{i:04d}.txt"
        write_record(out_dir / name, shape)
        names.append(name)
    manifest = DatasetManifest(
        root=out_dir,
        class_id=template.class_id,
        m=template.m,
        train=tuple(names[:n_train]),
        test=tuple(names[n_train:]),
        connections=template.connections,
    )
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, manifest)
    return manifest_path


def assign_back_mode(tau: TransformSet, template: BoxTemplate, core_radius: float = 0.25):
    """Assign a transform sample to the nearest configuration mode via the back part.

    Works in (shift_z, estimated extent) coordinates. Returns (mode_index, in_core)
    where in_core means within core_radius of the template separation.
    """
    stats = template.mode_back_stats()
    shift_z = float(tau.transforms[BACK].shift[2])
    extent = 2.0 * math.sqrt(3.0) * float(tau.transforms[BACK].scale[2])
    coords = np.array([shift_z, extent])
    centers = [np.array([s, 2.0 * math.sqrt(3.0) * sc]) for s, sc in stats]
    dists = [float(np.linalg.norm(coords - c)) for c in centers]
    mode = int(np.argmin(dists))
    separation = float(np.linalg.norm(centers[0] - centers[1]))
    return mode, dists[mode] < core_radius * separation
