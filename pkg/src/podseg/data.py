"""Synthetic labeled rapeseed plants, cloud text I/O, normalization, splits.

Plants are built from tubes (stem, tillers) and capsules (siliques) sampled
on rings at a fixed surface pitch, so point spacing is bounded and the
generated instances are guaranteed to be internally connected at half the
clustering radius while staying separated from each other by more than the
full radius. Those two properties make the clouds valid clustering fixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .cloud import NO_INSTANCE, NON_SILIQUE, SILIQUE, LabeledCloud

CLOUD_HEADER_PREFIX = "# podseg-cloud v1 columns="


@dataclass
class PlantSpec:
    n_tillers: int = 3
    siliques_per_tiller: tuple[int, int] = (4, 6)
    silique_length: tuple[float, float] = (0.035, 0.05)  # capsule end-to-end
    silique_radius: tuple[float, float] = (0.004, 0.0055)
    stem_radius: float = 0.0035
    density: float = 150000.0  # points per unit surface area
    jitter_sigma: float = 0.00015
    seed: int = 0
    min_silique_gap: float = 0.016  # surface-to-surface clearance

    def __post_init__(self):
        if self.n_tillers < 1 or self.density <= 0 or self.stem_radius <= 0:
            raise ValueError("degenerate plant spec")
        for lo, hi in (self.siliques_per_tiller, self.silique_length, self.silique_radius):
            if lo <= 0 or hi < lo:
                raise ValueError("ranges must be positive and ordered")
        if max(self.silique_radius) * 3 > min(self.silique_length):
            raise ValueError("siliques must be slim: radius << length")

    @property
    def pitch(self) -> float:
        """Target surface spacing between sampled points."""
        return 1.0 / math.sqrt(self.density)


@dataclass
class Tube:
    """Open cylinder surface along a polyline (stem and tiller geometry)."""

    vertices: np.ndarray  # (K, 3) polyline
    radius: float

    @property
    def area(self) -> float:
        seg = np.diff(self.vertices, axis=0)
        return float(2 * math.pi * self.radius * np.linalg.norm(seg, axis=1).sum())


@dataclass
class Capsule:
    """Cylinder with hemispherical caps; the silique shape."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float

    @property
    def body_length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    @property
    def area(self) -> float:
        return float(2 * math.pi * self.radius * self.body_length
                     + 4 * math.pi * self.radius**2)

    @property
    def center(self) -> np.ndarray:
        return (self.p0 + self.p1) / 2


@dataclass
class PlantGeometry:
    stem: Tube
    tillers: list[Tube]
    siliques: list[Capsule]

    @property
    def silique_area(self) -> float:
        return sum(c.area for c in self.siliques)

    @property
    def total_area(self) -> float:
        return self.stem.area + sum(t.area for t in self.tillers) + self.silique_area


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _basis_perpendicular(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = _unit(np.cross(d, helper))
    return u, np.cross(d, u)


def _segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between two 3-D segments."""
    u = p1 - p0
    v = q1 - q0
    w = p0 - q0
    a, b, c = u @ u, u @ v, v @ v
    d, e = u @ w, v @ w
    denom = a * c - b * b
    if denom > 1e-15:
        s = np.clip((b * e - c * d) / denom, 0.0, 1.0)
    else:
        s = 0.0
    t = (b * s + e) / c if c > 1e-15 else 0.0
    t = np.clip(t, 0.0, 1.0)
    s = np.clip((b * t - d) / a, 0.0, 1.0) if a > 1e-15 else 0.0
    return float(np.linalg.norm(p0 + s * u - (q0 + t * v)))


def _capsule_clear(candidate: Capsule, placed: list[Capsule], gap: float) -> bool:
    for other in placed:
        dist = _segment_distance(candidate.p0, candidate.p1, other.p0, other.p1)
        if dist < candidate.radius + other.radius + gap:
            return False
    return True


def plant_geometry(spec: PlantSpec) -> PlantGeometry:
    """Deterministic plant skeleton for the given spec (same seed, same plant)."""
    rng = np.random.default_rng(spec.seed)
    # Stem: noisy vertical polyline.
    heights = np.linspace(0.0, 0.6, 8)
    sway = rng.normal(0, 0.004, (8, 2)).cumsum(axis=0)
    stem_pts = np.column_stack([0.5 + sway[:, 0], 0.5 + sway[:, 1], heights])
    stem = Tube(stem_pts, spec.stem_radius)

    tillers = []
    for k in range(spec.n_tillers):
        frac = 0.4 + 0.5 * (k + rng.uniform(0.1, 0.9)) / spec.n_tillers
        frac = min(frac, 0.95)
        base = stem_pts[0] + frac * (stem_pts[-1] - stem_pts[0])
        azimuth = rng.uniform(0, 2 * math.pi)
        polar = rng.uniform(0.5, 1.0)  # 30-60 degrees off vertical
        direction = np.array([
            math.sin(polar) * math.cos(azimuth),
            math.sin(polar) * math.sin(azimuth),
            math.cos(polar),
        ])
        length = rng.uniform(0.16, 0.24)
        mid = base + direction * length * 0.5 + rng.normal(0, 0.004, 3)
        tip = base + direction * length
        tillers.append(Tube(np.stack([base, mid, tip]), spec.stem_radius * 0.7))

    siliques: list[Capsule] = []
    for tiller in tillers:
        count = int(rng.integers(spec.siliques_per_tiller[0],
                                 spec.siliques_per_tiller[1] + 1))
        for _ in range(count):
            placed = False
            for _attempt in range(200):
                t = rng.uniform(0.35, 1.0)
                attach = tiller.vertices[0] + t * (tiller.vertices[-1] - tiller.vertices[0])
                up_bias = rng.uniform(0.9, 1.6)
                direction = _unit(np.array([rng.normal(0, 0.45),
                                            rng.normal(0, 0.45),
                                            up_bias]))
                length = rng.uniform(*spec.silique_length)
                radius = rng.uniform(*spec.silique_radius)
                base = attach + direction * (tiller.radius + radius + 0.002)
                cand = Capsule(base, base + direction * (length - 2 * radius), radius)
                if _capsule_clear(cand, siliques, spec.min_silique_gap):
                    siliques.append(cand)
                    placed = True
                    break
            if not placed:
                siliques.append(_fallback_slot(spec, siliques, rng))
    return PlantGeometry(stem=stem, tillers=tillers, siliques=siliques)


def _fallback_slot(spec: PlantSpec, placed: list[Capsule], rng) -> Capsule:
    """Deterministic free slot above the canopy; placement cannot fail."""
    length = float(np.mean(spec.silique_length))
    radius = float(np.mean(spec.silique_radius))
    up = np.array([0.0, 0.0, 1.0])
    for ix in range(10):
        for iy in range(10):
            base = np.array([0.12 + 0.08 * ix, 0.12 + 0.08 * iy, 0.78])
            cand = Capsule(base, base + up * (length - 2 * radius), radius)
            if _capsule_clear(cand, placed, spec.min_silique_gap):
                return cand
    raise RuntimeError("no free silique slot left; spec asks for too many siliques")


def _sample_rings(axis_points: np.ndarray, radius: float, pitch: float, rng) -> np.ndarray:
    """Ring-sample a tube around a polyline at the given surface pitch."""
    points = []
    for a, b in zip(axis_points[:-1], axis_points[1:]):
        seg = b - a
        seg_len = np.linalg.norm(seg)
        if seg_len < 1e-12:
            continue
        d = seg / seg_len
        u, v = _basis_perpendicular(d)
        n_rings = max(2, int(round(seg_len / pitch)) + 1)
        n_around = max(3, int(round(2 * math.pi * radius / pitch)))
        for s in np.linspace(0.0, seg_len, n_rings):
            phase = rng.uniform(0, 2 * math.pi)
            angles = phase + 2 * math.pi * np.arange(n_around) / n_around
            ring = (a + d * s)[None, :] + radius * (
                np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v
            )
            points.append(ring)
    return np.concatenate(points)


def _sample_capsule(capsule: Capsule, pitch: float, rng) -> np.ndarray:
    axis = np.stack([capsule.p0, capsule.p1])
    body = _sample_rings(axis, capsule.radius, pitch, rng)
    d = _unit(capsule.p1 - capsule.p0)
    u, v = _basis_perpendicular(d)
    caps = []
    r = capsule.radius
    n_bands = max(1, int(round((math.pi / 2) * r / pitch)))
    for tip, sign in ((capsule.p1, 1.0), (capsule.p0, -1.0)):
        caps.append(tip[None, :] + sign * r * d[None, :])  # apex
        for j in range(n_bands):
            theta = (j + 0.5) * (math.pi / 2) / n_bands
            ring_r = r * math.sin(theta)
            n_around = max(3, int(round(2 * math.pi * ring_r / pitch)))
            phase = rng.uniform(0, 2 * math.pi)
            angles = phase + 2 * math.pi * np.arange(n_around) / n_around
            ring = (tip + sign * d * r * math.cos(theta))[None, :] + ring_r * (
                np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v
            )
            caps.append(ring)
    return np.concatenate([body] + caps)


def generate_plant(spec: PlantSpec, plant_id: str | None = None) -> LabeledCloud:
    """Sample a labeled plant point cloud; bit-identical for a given spec."""
    geometry = plant_geometry(spec)
    rng = np.random.default_rng(spec.seed + 7_777_777)
    pitch = spec.pitch
    chunks, sems, insts = [], [], []

    def add(points: np.ndarray, sem: int, inst: int):
        noisy = points + rng.normal(0, spec.jitter_sigma, points.shape)
        chunks.append(noisy)
        sems.append(np.full(len(points), sem, dtype=np.int64))
        insts.append(np.full(len(points), inst, dtype=np.int64))

    add(_sample_rings(geometry.stem.vertices, geometry.stem.radius, pitch, rng),
        NON_SILIQUE, NO_INSTANCE)
    for tiller in geometry.tillers:
        add(_sample_rings(tiller.vertices, tiller.radius, pitch, rng),
            NON_SILIQUE, NO_INSTANCE)
    for k, capsule in enumerate(geometry.siliques):
        add(_sample_capsule(capsule, pitch, rng), SILIQUE, k)
    return LabeledCloud(
        coords=np.concatenate(chunks),
        sem=np.concatenate(sems),
        inst=np.concatenate(insts),
        id=plant_id or f"plant_{spec.seed:04d}",
    )


def instance_centroid_offsets(cloud: LabeledCloud) -> np.ndarray:
    """Ground-truth shift targets: instance centroid minus point, zero for
    points outside any instance."""
    if cloud.inst is None:
        raise ValueError("cloud has no instance labels")
    offsets = np.zeros_like(cloud.coords)
    for k in np.unique(cloud.inst):
        if k < 0:
            continue
        members = cloud.inst == k
        offsets[members] = cloud.coords[members].mean(axis=0) - cloud.coords[members]
    return offsets


@dataclass
class UnitCubeTransform:
    offset: np.ndarray
    scale: float

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return (coords - self.offset) * self.scale

    def invert(self, coords: np.ndarray) -> np.ndarray:
        return coords / self.scale + self.offset


def normalize_unit_cube(cloud: LabeledCloud) -> tuple[LabeledCloud, UnitCubeTransform]:
    """Isotropic rescale + shift into [0, 1]^3, preserving aspect ratio."""
    lo = cloud.coords.min(axis=0)
    span = float((cloud.coords.max(axis=0) - lo).max())
    if span <= 0:
        raise ValueError("cloud has zero extent; cannot normalize")
    transform = UnitCubeTransform(offset=lo, scale=1.0 / span)
    return (
        LabeledCloud(coords=transform.apply(cloud.coords), sem=cloud.sem,
                     inst=cloud.inst, id=cloud.id),
        transform,
    )


def write_cloud(cloud: LabeledCloud, path) -> None:
    columns = "x,y,z"
    if cloud.sem is not None:
        columns += ",sem"
    if cloud.inst is not None:
        columns += ",inst"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CLOUD_HEADER_PREFIX}{columns}\n")
        for i in range(len(cloud)):
            parts = [repr(float(c)) for c in cloud.coords[i]]
            if cloud.sem is not None:
                parts.append(str(int(cloud.sem[i])))
            if cloud.inst is not None:
                parts.append(str(int(cloud.inst[i])))
            fh.write(" ".join(parts) + "\n")


def read_cloud(path) -> LabeledCloud:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(CLOUD_HEADER_PREFIX):
            raise ValueError(f"{path}: missing podseg-cloud header")
        columns = header[len(CLOUD_HEADER_PREFIX):].split(",")
        if columns[:3] != ["x", "y", "z"]:
            raise ValueError(f"{path}: first columns must be x,y,z")
        has_sem = "sem" in columns
        has_inst = "inst" in columns
        expected = 3 + has_sem + has_inst
        coords, sem, inst = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != expected:
                raise ValueError(
                    f"{path}: line {lineno}: expected {expected} fields, got {len(parts)}"
                )
            try:
                coords.append((float(parts[0]), float(parts[1]), float(parts[2])))
                cursor = 3
                if has_sem:
                    sem.append(int(parts[cursor]))
                    cursor += 1
                if has_inst:
                    inst.append(int(parts[cursor]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    name = getattr(path, "stem", str(path))
    return LabeledCloud(
        coords=np.array(coords),
        sem=np.array(sem, dtype=np.int64) if has_sem else None,
        inst=np.array(inst, dtype=np.int64) if has_inst else None,
        id=name,
    )


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    folds: list[list[str]] = field(default_factory=list)

    def all_ids(self) -> list[str]:
        if self.folds:
            return [i for fold in self.folds for i in fold]
        return self.train + self.val + self.test


def make_splits(ids: list[str], mode: str = "fixed", seed: int = 0) -> DatasetSplit:
    """Fixed mode follows the 40/9/6 train/val/test proportions in id order;
    sixfold shuffles (seeded) into six near-equal disjoint folds."""
    ids = list(ids)
    if mode == "fixed":
        if len(ids) < 3:
            raise ValueError("fixed split needs at least 3 ids")
        n = len(ids)
        n_train = max(1, round(n * 40 / 55))
        n_val = max(1, round(n * 9 / 55))
        if n_train + n_val >= n:
            n_train = n - 2
            n_val = 1
        return DatasetSplit(
            train=ids[:n_train],
            val=ids[n_train:n_train + n_val],
            test=ids[n_train + n_val:],
        )
    if mode == "sixfold":
        if len(ids) < 6:
            raise ValueError("sixfold split needs at least 6 ids")
        order = list(np.random.default_rng(seed).permutation(len(ids)))
        shuffled = [ids[i] for i in order]
        folds = [list(shuffled[k::6]) for k in range(6)]
        return DatasetSplit(folds=folds)
    raise ValueError(f"unknown split mode {mode!r}")


def write_manifest(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# podseg-manifest v1\n")
        if split.folds:
            for k, fold in enumerate(split.folds):
                for i in fold:
                    fh.write(f"{i} fold{k}\n")
        else:
            for name, members in (("train", split.train), ("val", split.val),
                                  ("test", split.test)):
                for i in members:
                    fh.write(f"{i} {name}\n")


def read_manifest(path) -> DatasetSplit:
    split = DatasetSplit()
    folds: dict[int, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            sample_id, group = line.split()
            if group.startswith("fold"):
                folds.setdefault(int(group[4:]), []).append(sample_id)
            else:
                getattr(split, group).append(sample_id)
    if folds:
        split.folds = [folds[k] for k in sorted(folds)]
    return split


def write_plant_spec(spec: PlantSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(spec):
            value = getattr(spec, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(float(v)) if isinstance(v, float) else str(v)
                                 for v in value)
            fh.write(f"{f.name}={value}\n")


def read_plant_spec(path) -> PlantSpec:
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    kwargs = {}
    for f in fields(PlantSpec):
        if f.name not in raw:
            continue
        text = raw.pop(f.name)
        if f.name in ("n_tillers", "seed"):
            kwargs[f.name] = int(text)
        elif f.name == "siliques_per_tiller":
            kwargs[f.name] = tuple(int(v) for v in text.split(","))
        elif "," in text:
            kwargs[f.name] = tuple(float(v) for v in text.split(","))
        else:
            kwargs[f.name] = float(text)
    if raw:
        raise ValueError(f"unknown plant spec keys: {sorted(raw)}")
    return PlantSpec(**kwargs)
