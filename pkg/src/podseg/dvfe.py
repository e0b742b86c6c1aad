"""Dynamic voxel feature encoder: two stacked VFE layers.

Layer 1 lifts augmented point features and max-aggregates them per voxel.
Layer 2 re-lifts the raw point features with its own dense block, concatenates
the propagated layer-1 voxel features, and aggregates again into the final
voxel embedding. The per-point intermediates are cached for the dense decoder
and the offset branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .cloud import LabeledCloud, VoxelGrid
from .nn import Fcn
from .voxelize import (
    AugmentFlags,
    FeatureMap,
    Resolution,
    VoxelMap,
    augment_features,
    dynamic_voxelize,
    propagate,
    scatter_aggregate,
)


@dataclass
class DvfeConfig:
    in_channels: int = 9
    mid_channels: int = 32
    out_channels: int = 64
    aggregate: str = "max"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if min(self.in_channels, self.mid_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be >= 1")


class VfeLayer(nn.Module):
    """One voxel feature encoding layer.

    Without ``concat_input`` the layer is dense-transform + aggregate. With it,
    the layer owns a second dense block for the raw input, concatenates the
    propagated previous voxel map, and aggregates the fused point features.
    """

    def __init__(self, in_channels: int, out_channels: int, concat_input: bool = False,
                 prev_channels: int = 0, aggregate: str = "max", bn_momentum: float = 0.1):
        super().__init__()
        self.concat_input = concat_input
        self.aggregate = aggregate
        if concat_input:
            self.inner = Fcn(in_channels, prev_channels, bn_momentum)
            self.fcn = Fcn(2 * prev_channels, out_channels, bn_momentum)
        else:
            self.fcn = Fcn(in_channels, out_channels, bn_momentum)

    def forward(
        self,
        x: FeatureMap,
        vmap: VoxelMap,
        prev_voxel: FeatureMap | None = None,
    ) -> tuple[FeatureMap, FeatureMap]:
        """Returns (point-wise learned features, voxel-wise aggregate)."""
        if x.resolution is not Resolution.POINT_WISE:
            raise ValueError("VfeLayer expects point_wise input")
        if self.concat_input:
            if prev_voxel is None:
                raise ValueError("concat_input layer needs the previous voxel map")
            back = propagate(prev_voxel, vmap)
            fused = torch.cat([back.values, self.inner(x.values)], dim=1)
            point = FeatureMap(self.fcn(fused), Resolution.POINT_WISE)
        else:
            point = FeatureMap(self.fcn(x.values), Resolution.POINT_WISE)
        return point, scatter_aggregate(point, vmap, self.aggregate)


@dataclass
class DvfeCache:
    """Per-point intermediates retained for the decoder and instance head."""

    augmented: torch.Tensor      # (N, C_0) raw stacked features
    point_features: torch.Tensor  # (N, C_1) layer-2 point features


class DynamicVoxelFeatureEncoder(nn.Module):
    def __init__(self, cfg: DvfeConfig):
        super().__init__()
        self.cfg = cfg
        self.layer1 = VfeLayer(cfg.in_channels, cfg.mid_channels,
                               aggregate=cfg.aggregate, bn_momentum=cfg.bn_momentum)
        self.layer2 = VfeLayer(cfg.in_channels, cfg.out_channels, concat_input=True,
                               prev_channels=cfg.mid_channels, aggregate=cfg.aggregate,
                               bn_momentum=cfg.bn_momentum)

    def forward(self, augmented: FeatureMap, vmap: VoxelMap) -> tuple[FeatureMap, DvfeCache]:
        _, voxel1 = self.layer1(augmented, vmap)
        point2, voxel2 = self.layer2(augmented, vmap, prev_voxel=voxel1)
        cache = DvfeCache(augmented=augmented.values, point_features=point2.values)
        return voxel2, cache


def dvfe_forward(
    cloud: LabeledCloud,
    grid: VoxelGrid,
    flags: AugmentFlags,
    encoder: DynamicVoxelFeatureEncoder,
    dtype: torch.dtype = torch.float32,
) -> tuple[FeatureMap, VoxelMap, DvfeCache]:
    """Voxelize, augment and encode a cloud into its voxel feature map."""
    vmap = dynamic_voxelize(cloud, grid)
    augmented = augment_features(cloud, vmap, grid, flags, dtype=dtype)
    if augmented.channels != encoder.cfg.in_channels:
        raise ValueError(
            f"augment flags produce {augmented.channels} channels, "
            f"encoder expects {encoder.cfg.in_channels}"
        )
    voxel_feat, cache = encoder(augmented, vmap)
    return voxel_feat, vmap, cache
