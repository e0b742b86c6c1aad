"""Dense decoder, patch plumbing and the assembled semantic network.

The network voxelizes a patch, encodes it (DVFE + windowed attention),
propagates voxel features back to points, fuses them with a learned lift of
the raw point features, and classifies every point. Whole-cloud inference
slides overlapping patch grids over the cloud and averages the per-point
probabilities across visits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .cloud import LabeledCloud, VoxelGrid
from .dvfe import DvfeCache, DvfeConfig, DynamicVoxelFeatureEncoder
from .nn import Mlp, softmax
from .voxelize import (
    AugmentFlags,
    FeatureMap,
    Resolution,
    VoxelMap,
    augment_features,
    dynamic_voxelize,
    propagate,
)
from .windows import (
    SubBatchSpec,
    WindowConfig,
    WindowPartition,
    partition_windows,
    shift_windows,
    WindowEncoder,
)


@dataclass
class PatchSpec:
    patch_len: float = 0.16
    offsets: tuple[float, ...] = (0.0, 0.08)
    stride: float = 0.08

    def __post_init__(self):
        if not 0 < self.stride <= self.patch_len:
            raise ValueError("stride must satisfy 0 < stride <= patch_len")
        for off in self.offsets:
            if not 0 <= off < self.patch_len:
                raise ValueError("offsets must lie in [0, patch_len)")

    def slide_offsets(self) -> list[float]:
        """Diagonal patch-grid offsets for inference; each point is visited
        once per offset, i.e. patch_len/stride times in total."""
        n = max(1, round(self.patch_len / self.stride))
        return [k * self.stride for k in range(n)]


@dataclass
class SemanticOutput:
    """Per-point class probabilities (rows sum to 1) and argmax labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        assert self.probs.shape[0] == self.labels.shape[0]


def classify(logits: torch.Tensor) -> SemanticOutput:
    """Softmax (in float64, so rows sum to 1 tightly) and argmax labels with
    ties resolved to the lower class index."""
    probs = softmax(logits.detach().to(torch.float64), dim=-1).numpy()
    return SemanticOutput(probs=probs, labels=np.argmax(probs, axis=1).astype(np.int64))


def semantic_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true classes."""
    rows = torch.arange(probs.shape[0])
    return -probs[rows, labels].log().mean()


def cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """semantic_loss composed with softmax, fused for numerical headroom."""
    logp = logits - logits.logsumexp(dim=-1, keepdim=True)
    rows = torch.arange(logits.shape[0])
    return -logp[rows, labels].mean()


@dataclass
class Patch:
    cloud: LabeledCloud
    indices: np.ndarray  # positions of the patch points in the source cloud
    cell: tuple[int, int, int]


def crop_patches(cloud: LabeledCloud, spec: PatchSpec, offset: float = 0.0) -> list[Patch]:
    """Tile the cloud's bounding box with cubes of side ``patch_len`` whose
    grid is shifted by ``offset`` on every axis.

    Each point lands in exactly one patch; the trailing patch per axis is
    clamped so boundary points never fall outside. Empty patches are omitted.
    """
    if len(cloud) == 0:
        raise ValueError("cannot crop an empty cloud")
    lo = cloud.coords.min(axis=0)
    hi = cloud.coords.max(axis=0)
    length = spec.patch_len
    start0 = lo + (offset - length if offset > 0 else 0.0)
    n_cells = np.maximum(1, np.ceil((hi - start0) / length - 1e-12).astype(np.int64))
    cell = np.floor((cloud.coords - start0) / length).astype(np.int64)
    cell = np.clip(cell, 0, n_cells - 1)
    key = (cell[:, 2] * n_cells[1] + cell[:, 1]) * n_cells[0] + cell[:, 0]
    uniq, inverse = np.unique(key, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(uniq))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    patches = []
    for j, k in enumerate(uniq):
        idx = order[bounds[j]:bounds[j + 1]]
        cx = int(k % n_cells[0])
        cy = int((k // n_cells[0]) % n_cells[1])
        cz = int(k // (n_cells[0] * n_cells[1]))
        patches.append(Patch(cloud.select(idx), idx, (cx, cy, cz)))
    return patches


def merge_small_patches(patches: list[Patch], source: LabeledCloud, min_points: int = 5) -> list[Patch]:
    """Fold patches below ``min_points`` into the nearest adequate patch
    (by patch-content centroid distance)."""
    big = [p for p in patches if len(p.cloud) >= min_points]
    small = [p for p in patches if len(p.cloud) < min_points]
    if not big:
        return patches
    centers = np.stack([p.cloud.coords.mean(axis=0) for p in big])
    merged = {id(p): p.indices for p in big}
    for p in small:
        d = np.linalg.norm(centers - p.cloud.coords.mean(axis=0), axis=1)
        target = big[int(np.argmin(d))]
        merged[id(target)] = np.sort(np.concatenate([merged[id(target)], p.indices]))
    return [Patch(source.select(idx), idx, p.cell) for p, idx in
            ((p, merged[id(p)]) for p in big)]


@dataclass
class PstConfig:
    voxel_size: tuple[float, float, float] = (0.006, 0.006, 0.0025)
    flags: AugmentFlags = field(default_factory=AugmentFlags)
    dvfe: DvfeConfig = field(default_factory=DvfeConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    prop_hidden: int = 32
    prop_out: int = 16
    n_classes: int = 2

    def __post_init__(self):
        if self.dvfe.in_channels != self.flags.channels:
            self.dvfe = DvfeConfig(
                in_channels=self.flags.channels,
                mid_channels=self.dvfe.mid_channels,
                out_channels=self.dvfe.out_channels,
                aggregate=self.dvfe.aggregate,
                bn_momentum=self.dvfe.bn_momentum,
            )

    @property
    def point_feature_dim(self) -> int:
        return self.window.channels + self.prop_out


@dataclass
class EncodedPatch:
    """Static geometry of one patch, reusable across training iterations."""

    cloud: LabeledCloud
    indices: np.ndarray
    grid: VoxelGrid
    vmap: VoxelMap
    augmented: torch.Tensor
    partitions: tuple[WindowPartition, WindowPartition]
    sem: torch.Tensor | None = None
    offset_targets: torch.Tensor | None = None  # gt centroid - point, full-cloud
    instance_mask: np.ndarray | None = None


def encode_patch(patch: Patch, cfg: PstConfig, dtype: torch.dtype = torch.float32,
                 offset_targets: np.ndarray | None = None) -> EncodedPatch:
    grid = VoxelGrid.fit(patch.cloud.coords, cfg.voxel_size)
    vmap = dynamic_voxelize(patch.cloud, grid)
    augmented = augment_features(patch.cloud, vmap, grid, cfg.flags, dtype=dtype)
    partitions = (partition_windows(vmap, cfg.window), shift_windows(vmap, cfg.window))
    sem = None if patch.cloud.sem is None else torch.from_numpy(patch.cloud.sem)
    targets = None
    if offset_targets is not None:
        targets = torch.from_numpy(offset_targets[patch.indices]).to(dtype)
    mask = None if patch.cloud.inst is None else patch.cloud.inst >= 0
    return EncodedPatch(patch.cloud, patch.indices, grid, vmap, augmented.values,
                        partitions, sem, targets, mask)


@dataclass
class MergedBatch:
    augmented: torch.Tensor
    vmap: VoxelMap
    partitions: tuple[WindowPartition, WindowPartition]
    sem: torch.Tensor | None
    point_slices: list[slice]
    patches: list[EncodedPatch]


def merge_batch(patches: list[EncodedPatch]) -> MergedBatch:
    """Concatenate patches into one forward pass.

    Voxel and point indices are renumbered; window groups stay per patch, so
    attention never crosses a patch boundary.
    """
    point_base = 0
    voxel_base = 0
    p2v, coords, counts, v2p = [], [], [], []
    window_groups: tuple[list, list] = ([], [])
    window_offsets: tuple[list, list] = ([], [])
    window_ids: tuple[list, list] = ([], [])
    valid_counts: tuple[list, list] = ([], [])
    slices = []
    for patch in patches:
        n = len(patch.cloud)
        nv = patch.vmap.n_voxels
        p2v.append(patch.vmap.point_to_voxel + voxel_base)
        coords.append(patch.vmap.voxel_coords)
        counts.append(patch.vmap.counts)
        v2p.extend(m + point_base for m in patch.vmap.voxel_to_points)
        for s in (0, 1):
            part = patch.partitions[s]
            window_groups[s].extend(g + voxel_base for g in part.window_to_voxels)
            window_offsets[s].append(part.offsets)
            window_ids[s].append(part.window_ids)
            valid_counts[s].append(part.valid_counts)
        slices.append(slice(point_base, point_base + n))
        point_base += n
        voxel_base += nv
    vmap = VoxelMap(
        voxel_coords=np.concatenate(coords),
        point_to_voxel=np.concatenate(p2v),
        voxel_to_points=v2p,
        counts=np.concatenate(counts),
    )
    partitions = tuple(
        WindowPartition(
            window_ids=np.concatenate(window_ids[s]),
            offsets=np.concatenate(window_offsets[s]),
            window_to_voxels=window_groups[s],
            valid_counts=np.concatenate(valid_counts[s]),
        )
        for s in (0, 1)
    )
    sem = None
    if all(p.sem is not None for p in patches):
        sem = torch.cat([p.sem for p in patches])
    return MergedBatch(
        augmented=torch.cat([p.augmented for p in patches]),
        vmap=vmap,
        partitions=partitions,
        sem=sem,
        point_slices=slices,
        patches=patches,
    )


@dataclass
class PstOutput:
    logits: torch.Tensor          # (N, n_classes)
    point_features: torch.Tensor  # (N, C2 + prop_out), the dense fused map
    voxel_features: torch.Tensor  # (N_V, C2)
    cache: DvfeCache
    vmap: VoxelMap


class PstNet(nn.Module):
    """Voxel transformer for per-point semantic segmentation."""

    def __init__(self, cfg: PstConfig):
        super().__init__()
        self.cfg = cfg
        self.dvfe = DynamicVoxelFeatureEncoder(cfg.dvfe)
        self.encoder = WindowEncoder(cfg.window, in_channels=cfg.dvfe.out_channels)
        self.prop_mlp = Mlp(cfg.flags.channels, cfg.prop_hidden, cfg.prop_out)
        self.classifier = nn.Linear(cfg.point_feature_dim, cfg.n_classes)

    def subbatch_spec(self) -> SubBatchSpec:
        return SubBatchSpec("training" if self.training else "inference")

    def forward(self, batch: MergedBatch, seed: int = 0) -> PstOutput:
        feat = FeatureMap(batch.augmented, Resolution.POINT_WISE)
        voxel_feat, cache = self.dvfe(feat, batch.vmap)
        encoded = self.encoder(voxel_feat, batch.vmap, self.subbatch_spec(),
                               seed=seed, partitions=batch.partitions)
        dense = propagate(encoded, batch.vmap).values
        fused = torch.cat([dense, self.prop_mlp(cache.augmented)], dim=1)
        return PstOutput(
            logits=self.classifier(fused),
            point_features=fused,
            voxel_features=encoded.values,
            cache=cache,
            vmap=batch.vmap,
        )

    def forward_cloud(self, cloud: LabeledCloud, seed: int = 0,
                      dtype: torch.dtype = torch.float32) -> PstOutput:
        patch = Patch(cloud, np.arange(len(cloud)), (0, 0, 0))
        return self.forward(merge_batch([encode_patch(patch, self.cfg, dtype)]), seed=seed)


def dense_propagation(encoded: FeatureMap, vmap: VoxelMap, cache: DvfeCache,
                      prop_mlp: Mlp) -> torch.Tensor:
    """Fuse the propagated voxel features with a learned lift of the raw point
    features: concat(propagate(G_v), MLP(F))."""
    dense = propagate(encoded, vmap).values
    return torch.cat([dense, prop_mlp(cache.augmented)], dim=1)


class CoverageError(RuntimeError):
    pass


def slide_collect(cloud: LabeledCloud, runner, spec: PatchSpec) -> dict[str, np.ndarray]:
    """Run ``runner(patch_cloud) -> dict[name, (n, d) array]`` over every
    sliding patch grid and average the per-point outputs across visits."""
    sums: dict[str, np.ndarray] = {}
    visits = np.zeros(len(cloud), dtype=np.int64)
    for offset in spec.slide_offsets():
        for patch in crop_patches(cloud, spec, offset):
            outputs = runner(patch.cloud)
            for name, arr in outputs.items():
                if name not in sums:
                    sums[name] = np.zeros((len(cloud), arr.shape[1]), dtype=np.float64)
                sums[name][patch.indices] += arr
            visits[patch.indices] += 1
    if (visits == 0).any():
        raise CoverageError("region-slide tiling left points unvisited")
    return {name: arr / visits[:, None] for name, arr in sums.items()} | {"visits": visits}


def region_slide_infer(cloud: LabeledCloud, model: PstNet, spec: PatchSpec) -> SemanticOutput:
    """Overlapped sliding-cube inference with probability averaging."""
    model.eval()

    def runner(patch_cloud: LabeledCloud) -> dict[str, np.ndarray]:
        with torch.no_grad():
            out = model.forward_cloud(patch_cloud)
        return {"probs": classify(out.logits).probs}

    collected = slide_collect(cloud, runner, spec)
    probs = collected["probs"]
    return SemanticOutput(probs=probs, labels=np.argmax(probs, axis=1).astype(np.int64))
