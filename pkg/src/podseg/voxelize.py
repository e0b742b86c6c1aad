"""Dynamic and hard voxelization plus the point<->voxel feature primitives.

Dynamic voxelization keeps a complete bidirectional map between points and
occupied voxels; hard voxelization caps voxel occupancy by seeded uniform
subsampling. ``scatter_aggregate`` and ``propagate`` are the two resolution
changing primitives the voxel feature encoder is built from; both are
differentiable on torch inputs, with scatter-max routing gradient only to the
per-channel argmax points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .cloud import LabeledCloud, VoxelGrid

DROPPED = -1  # point_to_voxel sentinel for points removed by hard voxelization


class Resolution(enum.Enum):
    POINT_WISE = "point_wise"
    VOXEL_WISE = "voxel_wise"


@dataclass
class FeatureMap:
    """Dense M x C feature array tagged with its resolution.

    ``values`` is a torch tensor so the map can sit inside a differentiable
    pipeline. ``argmax_ids`` is filled by max-mode scatter_aggregate and holds
    the (N_V, C) point indices the max came from.
    """

    values: torch.Tensor
    resolution: Resolution
    argmax_ids: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class VoxelMap:
    """Bidirectional point<->voxel assignment over occupied voxels.

    voxel_coords: (N_V, 3) integer grid coordinates (x, y, z columns), sorted
        lexicographically by (z, y, x) so downstream windowing is
        deterministic.
    point_to_voxel: (N,) index into the voxel list, DROPPED for points removed
        by hard voxelization.
    voxel_to_points: per voxel, ascending indices of its member points.
    counts: per-voxel member counts (always >= 1; only occupied voxels kept).
    """

    voxel_coords: np.ndarray
    point_to_voxel: np.ndarray
    voxel_to_points: list[np.ndarray]
    counts: np.ndarray

    @property
    def n_voxels(self) -> int:
        return self.voxel_coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.point_to_voxel.shape[0]

    def validate(self):
        assert self.counts.shape == (self.n_voxels,)
        assert len(self.voxel_to_points) == self.n_voxels
        seen = np.full(self.n_points, False)
        for j, members in enumerate(self.voxel_to_points):
            assert len(members) == self.counts[j] >= 1
            assert not seen[members].any(), "voxel member lists overlap"
            seen[members] = True
            assert (self.point_to_voxel[members] == j).all()
        dropped = self.point_to_voxel == DROPPED
        assert (~seen[~dropped]).sum() == 0, "retained point missing from voxel lists"


class PointOutsideGridError(ValueError):
    def __init__(self, point_index: int, coord: np.ndarray):
        self.point_index = point_index
        super().__init__(
            f"point {point_index} at {tuple(coord)} lies outside the voxel grid"
        )


def _voxel_indices(coords: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    idx = np.floor((coords - grid.origin) / grid.voxel_size).astype(np.int64)
    bad = ((idx < 0) | (idx >= grid.extent)).any(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise PointOutsideGridError(i, coords[i])
    return idx


def _linear_key(idx: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    # Linear key ordered so that sorting it equals lexicographic (z, y, x).
    ex, ey = int(grid.extent[0]), int(grid.extent[1])
    return (idx[:, 2] * ey + idx[:, 1]) * ex + idx[:, 0]


def dynamic_voxelize(cloud: LabeledCloud, grid: VoxelGrid) -> VoxelMap:
    """Assign every point to the voxel it occupies; no point is dropped."""
    idx = _voxel_indices(cloud.coords, grid)
    key = _linear_key(idx, grid)
    uniq, inverse = np.unique(key, return_inverse=True)
    order = np.argsort(inverse, kind="stable")  # groups voxels, members ascending
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.int64)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    voxel_to_points = [order[bounds[j]:bounds[j + 1]] for j in range(len(uniq))]
    ex, ey = int(grid.extent[0]), int(grid.extent[1])
    voxel_coords = np.stack(
        [uniq % ex, (uniq // ex) % ey, uniq // (ex * ey)], axis=1
    ).astype(np.int64)
    return VoxelMap(
        voxel_coords=voxel_coords,
        point_to_voxel=inverse.astype(np.int64),
        voxel_to_points=voxel_to_points,
        counts=counts,
    )


def hard_voxelize(cloud: LabeledCloud, grid: VoxelGrid, capacity: int, seed: int) -> VoxelMap:
    """Voxelize with a fixed per-voxel capacity.

    Voxels holding more than ``capacity`` points are uniformly subsampled
    (without replacement, seeded); dropped points map to DROPPED.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    vmap = dynamic_voxelize(cloud, grid)
    rng = np.random.default_rng(seed)
    p2v = vmap.point_to_voxel.copy()
    members_out = []
    counts_out = np.empty_like(vmap.counts)
    for j, members in enumerate(vmap.voxel_to_points):
        if len(members) > capacity:
            keep = np.sort(rng.choice(members, size=capacity, replace=False))
            p2v[np.setdiff1d(members, keep, assume_unique=True)] = DROPPED
            members = keep
        members_out.append(members)
        counts_out[j] = len(members)
    return VoxelMap(
        voxel_coords=vmap.voxel_coords,
        point_to_voxel=p2v,
        voxel_to_points=members_out,
        counts=counts_out,
    )


def cluster_centroids(cloud: LabeledCloud, vmap: VoxelMap) -> np.ndarray:
    """Per point, the centroid of all points sharing its voxel. Shape (N, 3)."""
    sums = np.zeros((vmap.n_voxels, 3))
    np.add.at(sums, vmap.point_to_voxel, cloud.coords)
    means = sums / vmap.counts[:, None]
    return means[vmap.point_to_voxel]


def voxel_centers(vmap: VoxelMap, grid: VoxelGrid) -> np.ndarray:
    """Metric centers of the occupied voxels. Shape (N_V, 3)."""
    return grid.origin + (vmap.voxel_coords + 0.5) * grid.voxel_size


@dataclass(frozen=True)
class AugmentFlags:
    """Which relative quantities to stack onto raw coordinates."""

    use_cluster_centroid: bool = True
    use_voxel_center: bool = True
    use_l2_norm: bool = False

    @property
    def channels(self) -> int:
        return 3 + 3 * (self.use_cluster_centroid + self.use_voxel_center) + self.use_l2_norm


def augment_features(
    cloud: LabeledCloud,
    vmap: VoxelMap,
    grid: VoxelGrid,
    flags: AugmentFlags,
    dtype: torch.dtype = torch.float32,
) -> FeatureMap:
    """Stack per-point features in fixed order: coordinates, offset to the
    voxel's point centroid, offset to the voxel center, L2 norm."""
    cols = [cloud.coords]
    if flags.use_cluster_centroid:
        cols.append(cloud.coords - cluster_centroids(cloud, vmap))
    if flags.use_voxel_center:
        centers = voxel_centers(vmap, grid)
        cols.append(cloud.coords - centers[vmap.point_to_voxel])
    if flags.use_l2_norm:
        cols.append(np.linalg.norm(cloud.coords, axis=1, keepdims=True))
    values = torch.from_numpy(np.concatenate(cols, axis=1)).to(dtype)
    return FeatureMap(values=values, resolution=Resolution.POINT_WISE)


def _scatter_max_indices(values: np.ndarray, p2v: np.ndarray, n_voxels: int) -> np.ndarray:
    """Per (voxel, channel) index of the maximal point, ties to lowest index."""
    n, c = values.shape
    vmax = np.full((n_voxels, c), -np.inf)
    np.maximum.at(vmax, p2v, values)
    is_max = values == vmax[p2v]
    idx = np.full((n_voxels, c), n, dtype=np.int64)
    point_ids = np.broadcast_to(np.arange(n)[:, None], (n, c))
    np.minimum.at(idx, p2v, np.where(is_max, point_ids, n))
    return idx


def scatter_aggregate(feat: FeatureMap, vmap: VoxelMap, mode: str = "max") -> FeatureMap:
    """Reduce point-wise features into their voxels (channel-wise).

    Modes: ``max`` (default; records argmax point ids and routes gradient only
    to them, ties broken by lowest point index), ``mean``, ``sum``. Dropped
    points (hard voxelization) never contribute.
    """
    if feat.resolution is not Resolution.POINT_WISE:
        raise ValueError("scatter_aggregate expects a point_wise feature map")
    if len(feat) != vmap.n_points:
        raise ValueError("feature map and voxel map disagree on N")
    x = feat.values
    retained = vmap.point_to_voxel != DROPPED
    if not retained.all():
        x = x[torch.from_numpy(np.flatnonzero(retained))]
        p2v = vmap.point_to_voxel[retained]
    else:
        p2v = vmap.point_to_voxel
    index = torch.from_numpy(p2v)
    if mode == "max":
        argmax = _scatter_max_indices(
            feat.values.detach().cpu().numpy()[retained], p2v, vmap.n_voxels
        )
        # Map argmax back to original point ids before gathering.
        orig_ids = np.flatnonzero(retained)[argmax]
        gathered = feat.values[torch.from_numpy(orig_ids), torch.arange(feat.channels)]
        return FeatureMap(gathered, Resolution.VOXEL_WISE, argmax_ids=orig_ids)
    if mode in ("sum", "mean"):
        out = x.new_zeros((vmap.n_voxels, feat.channels))
        out = out.index_add(0, index, x)
        if mode == "mean":
            out = out / torch.from_numpy(vmap.counts).to(out.dtype)[:, None]
        return FeatureMap(out, Resolution.VOXEL_WISE)
    raise ValueError(f"unsupported aggregation mode: {mode!r}")


def propagate(feat: FeatureMap, vmap: VoxelMap) -> FeatureMap:
    """Broadcast voxel-wise features back to every member point.

    Points dropped by hard voxelization receive zero rows.
    """
    if feat.resolution is not Resolution.VOXEL_WISE:
        raise ValueError("propagate expects a voxel_wise feature map")
    if len(feat) != vmap.n_voxels:
        raise ValueError("feature map and voxel map disagree on N_V")
    p2v = vmap.point_to_voxel
    dropped = p2v == DROPPED
    index = torch.from_numpy(np.where(dropped, 0, p2v))
    out = feat.values.index_select(0, index)
    if dropped.any():
        out = out * torch.from_numpy(~dropped).to(out.dtype)[:, None]
    return FeatureMap(out, Resolution.POINT_WISE)
