"""Core data types for segmented point clouds, part canonicalization, and dataset I/O.

All coordinates are in model units; shapes are normalized to roughly unit scale.
Types are immutable after construction and all operations here are pure functions.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

SCALE_FLOOR = 1e-8


class DataError(ValueError):
    """Raised for malformed clouds, records, or manifests."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclasses.dataclass(frozen=True)
class SegmentedCloud:
    """A point cloud with a per-point semantic part label.

    points: (N, 3) float64; labels: (N,) int in [0, m); m is the category part count.
    A part may be empty (missing part).
    """

    points: np.ndarray
    labels: np.ndarray
    class_id: str
    m: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"points must be (N, 3), got {pts.shape}")
        if lab.shape != (pts.shape[0],):
            raise DataError("labels length must equal points length")
        if not np.isfinite(pts).all():
            raise DataError("non-finite coordinate")
        if self.m < 1:
            raise DataError("part count m must be >= 1")
        if lab.size and (lab.min() < 0 or lab.max() >= self.m):
            raise DataError("label out of range")
        object.__setattr__(self, "points", _freeze(pts))
        object.__setattr__(self, "labels", _freeze(lab))

    def part(self, j: int) -> np.ndarray:
        return self.points[self.labels == j]

    def part_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.m)

    def present(self) -> np.ndarray:
        return self.part_sizes() > 0

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclasses.dataclass(frozen=True)
class PartTransform:
    """Per-part shift c and strictly positive per-axis scale s mapping canonical
    geometry into the shape: p -> s * p + c."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        sh = np.asarray(self.shift, dtype=np.float64).reshape(3)
        sc = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if not (np.isfinite(sh).all() and np.isfinite(sc).all()):
            raise DataError("non-finite transform")
        if (sc <= 0).any():
            raise DataError("scale components must be strictly positive")
        object.__setattr__(self, "shift", _freeze(sh))
        object.__setattr__(self, "scale", _freeze(sc))

    @staticmethod
    def identity() -> "PartTransform":
        return PartTransform(np.zeros(3), np.ones(3))


@dataclasses.dataclass(frozen=True)
class TransformSet:
    """One PartTransform per semantic part plus a presence mask."""

    transforms: tuple
    present: tuple

    def __post_init__(self):
        tr = tuple(self.transforms)
        pr = tuple(bool(p) for p in self.present)
        if len(tr) != len(pr):
            raise DataError("transforms and present must have equal length")
        for t in tr:
            if not isinstance(t, PartTransform):
                raise DataError("transforms must contain PartTransform entries")
        object.__setattr__(self, "transforms", tr)
        object.__setattr__(self, "present", pr)

    @property
    def m(self) -> int:
        return len(self.transforms)

    def shifts(self) -> np.ndarray:
        return np.stack([t.shift for t in self.transforms])

    def scales(self) -> np.ndarray:
        return np.stack([t.scale for t in self.transforms])


def canonicalize_part(points: np.ndarray):
    """Shift a part to zero mean and scale it to unit standard deviation per axis.

    Uses the population convention (divisor K); degenerate axes are clamped to a
    scale of 1e-8. Returns (canonical, PartTransform) with
    apply_transform(canonical, transform) reproducing the input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise DataError("empty part")
    mean = pts.mean(axis=0)
    std = pts.std(axis=0)
    scale = np.maximum(std, SCALE_FLOOR)
    canonical = (pts - mean) / scale
    return canonical, PartTransform(mean, scale)


def apply_transform(canonical: np.ndarray, transform: PartTransform) -> np.ndarray:
    """Map canonical part geometry into the shape: p -> scale * p + shift."""
    pts = np.asarray(canonical, dtype=np.float64)
    return pts * transform.scale + transform.shift


def shape_transforms(cloud: SegmentedCloud) -> TransformSet:
    """Observed per-part transforms of a segmented cloud (identity for absent parts)."""
    transforms = []
    present = []
    for j in range(cloud.m):
        pts = cloud.part(j)
        if len(pts) == 0:
            transforms.append(PartTransform.identity())
            present.append(False)
        else:
            _, t = canonicalize_part(pts)
            transforms.append(t)
            present.append(True)
    return TransformSet(tuple(transforms), tuple(present))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean-over-a of the min squared distance to b,
    plus the same with the roles swapped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("chamfer requires two non-empty point sets")
    d2 = cdist(a, b, metric="sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


# ---------------------------------------------------------------------------
# Dataset files: one shape per record ("x y z label" lines) plus a JSON manifest.


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    root: Path
    class_id: str
    m: int
    train: tuple
    test: tuple
    connections: tuple  # (j1, j2) pairs of part indices considered connected

    def record_path(self, name: str) -> Path:
        return Path(self.root) / name


def write_record(path, cloud: SegmentedCloud) -> None:
    lines = []
    for (x, y, z), lab in zip(cloud.points, cloud.labels):
        lines.append(f"{x:.8f} {y:.8f} {z:.8f} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_record(path, class_id: str, m: int) -> SegmentedCloud:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing record file: {path}")
    pts = []
    labs = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise DataError(f"{path}:{ln}: expected 'x y z label'")
        try:
            xyz = [float(v) for v in fields[:3]]
            lab = int(fields[3])
        except ValueError as e:
            raise DataError(f"{path}:{ln}: {e}") from e
        if not all(np.isfinite(v) for v in xyz):
            raise DataError(f"{path}:{ln}: non-finite coordinate")
        if lab < 0 or lab >= m:
            raise DataError(f"{path}:{ln}: label out of range")
        pts.append(xyz)
        labs.append(lab)
    if not pts:
        raise DataError(f"{path}: empty record")
    return SegmentedCloud(np.array(pts), np.array(labs), class_id, m)


def save_manifest(path, manifest: DatasetManifest) -> None:
    payload = {
        "root": str(manifest.root),
        "class_id": manifest.class_id,
        "m": manifest.m,
        "train": list(manifest.train),
        "test": list(manifest.test),
        "connections": [list(c) for c in manifest.connections],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    root = Path(raw["root"])
    if not root.is_absolute():
        root = path.parent / root
    manifest = DatasetManifest(
        root=root,
        class_id=str(raw["class_id"]),
        m=int(raw["m"]),
        train=tuple(raw["train"]),
        test=tuple(raw["test"]),
        connections=tuple((int(a), int(b)) for a, b in raw.get("connections", [])),
    )
    for name in manifest.train + manifest.test:
        if not manifest.record_path(name).exists():
            raise DataError(f"manifest lists missing record: {name}")
    for a, b in manifest.connections:
        if not (0 <= a < manifest.m and 0 <= b < manifest.m):
            raise DataError(f"connection ({a}, {b}) has invalid part index")
    return manifest


def allocate_points(sizes: np.ndarray, budget: int, min_per_part: int = 8) -> np.ndarray:
    """Split a point budget across present parts proportionally to part size,
    guaranteeing min_per_part points for every present part."""
    sizes = np.asarray(sizes, dtype=np.int64)
    present = sizes > 0
    n_present = int(present.sum())
    if n_present == 0:
        raise DataError("cannot allocate points for an all-empty shape")
    if budget < min_per_part * n_present:
        raise DataError(f"point budget {budget} too small for {n_present} parts")
    total = sizes.sum()
    exact = sizes / total * budget
    alloc = np.floor(exact).astype(np.int64)
    alloc[present] = np.maximum(alloc[present], min_per_part)
    alloc[~present] = 0
    # Largest-remainder top-up, then trim the biggest allocations if over budget.
    while alloc.sum() < budget:
        rem = np.where(present, exact - alloc, -np.inf)
        alloc[int(np.argmax(rem))] += 1
    while alloc.sum() > budget:
        candidates = np.where(present & (alloc > min_per_part), alloc, -1)
        j = int(np.argmax(candidates))
        if candidates[j] <= 0:
            raise DataError("point budget infeasible under minimum per part")
        alloc[j] -= 1
    return alloc


def resample_cloud(cloud: SegmentedCloud, budget: int, rng: np.random.Generator) -> SegmentedCloud:
    """Uniformly resample (with replacement) each present part to the allocated count."""
    sizes = cloud.part_sizes()
    alloc = allocate_points(sizes, budget)
    pts = []
    labs = []
    for j in range(cloud.m):
        if alloc[j] == 0:
            continue
        part = cloud.part(j)
        idx = rng.integers(0, len(part), size=int(alloc[j]))
        pts.append(part[idx])
        labs.append(np.full(int(alloc[j]), j, dtype=np.int64))
    return SegmentedCloud(np.concatenate(pts), np.concatenate(labs), cloud.class_id, cloud.m)


def load_dataset(manifest_path, split: str = "train", point_budget: int = 512, seed: int = 0):
    """Load and resample all shapes of a split. Deterministic given manifest and seed."""
    manifest = load_manifest(manifest_path)
    names = manifest.train if split == "train" else manifest.test
    rng = np.random.default_rng(seed)
    shapes = []
    for name in names:
        cloud = read_record(manifest.record_path(name), manifest.class_id, manifest.m)
        shapes.append(resample_cloud(cloud, point_budget, rng))
    return shapes, manifest
