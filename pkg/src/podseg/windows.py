"""Dual window-set partitioning, sub-batch padding, position encoding, and the
residual attention blocks that encode the voxel feature map.

Attention is always computed over exactly the valid (and, in training,
retained) voxels of a window; the padded layout from ``assign_subbatches`` is
a batching shape, never part of the math. Valid-voxel outputs are therefore
bit-identical across padding levels by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .nn import Mlp, MultiHeadSelfAttention, softmax
from .voxelize import FeatureMap, Resolution, VoxelMap


@dataclass
class WindowConfig:
    window_size: tuple[int, int, int] = (6, 6, 12)
    num_blocks: int = 6
    channels: int = 64
    heads: int = 4
    mlp_hidden: int = 128
    pe_base: float = 10000.0
    shift_sign: int = 1  # +1 adds half a window before flooring, -1 subtracts

    def __post_init__(self):
        if any(s < 1 for s in self.window_size):
            raise ValueError("window_size must be positive")
        if self.channels % self.heads != 0:
            raise ValueError("channels must be divisible by heads")
        if self.shift_sign not in (1, -1):
            raise ValueError("shift_sign must be +1 or -1")

    @property
    def voxels_per_window(self) -> int:
        lx, ly, lz = self.window_size
        return lx * ly * lz


@dataclass
class WindowPartition:
    """Assignment of every occupied voxel to exactly one window of a set."""

    window_ids: np.ndarray      # (N_V, 3) integer window coordinates
    offsets: np.ndarray         # (N_V, 3) in-window integer offsets
    window_to_voxels: list[np.ndarray]  # per window, ascending voxel indices
    valid_counts: np.ndarray    # per window occupancy

    @property
    def n_windows(self) -> int:
        return len(self.window_to_voxels)


def _group_windows(window_ids: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    # Deterministic window order: lexicographic by (z, y, x) of the window id.
    if len(window_ids) == 0:
        return [], np.zeros(0, dtype=np.int64)
    shifted = window_ids - window_ids.min(axis=0)
    ex = int(shifted[:, 0].max()) + 1
    ey = int(shifted[:, 1].max()) + 1
    key = (shifted[:, 2] * ey + shifted[:, 1]) * ex + shifted[:, 0]
    uniq, inverse = np.unique(key, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.int64)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    groups = [order[bounds[j]:bounds[j + 1]] for j in range(len(uniq))]
    return groups, counts


def partition_windows(vmap: VoxelMap, cfg: WindowConfig) -> WindowPartition:
    """Unshifted window set: window id = floor(voxel / window_size)."""
    size = np.asarray(cfg.window_size, dtype=np.int64)
    ids = np.floor_divide(vmap.voxel_coords, size)
    offsets = np.mod(vmap.voxel_coords, size)
    groups, counts = _group_windows(ids)
    return WindowPartition(ids, offsets, groups, counts)


def shift_windows(vmap: VoxelMap, cfg: WindowConfig) -> WindowPartition:
    """Shifted window set, displaced by half a window along every axis."""
    size = np.asarray(cfg.window_size, dtype=np.int64)
    half = size // 2
    moved = vmap.voxel_coords + cfg.shift_sign * half
    ids = np.floor_divide(moved, size)
    offsets = np.mod(moved, size)
    groups, counts = _group_windows(ids)
    return WindowPartition(ids, offsets, groups, counts)


@dataclass
class SubBatchSpec:
    """Occupancy buckets (fractions of the window capacity) and their padded
    sizes. Training downsamples windows fuller than the top pad; inference
    never drops a voxel."""

    phase: str = "training"
    bucket_edges: tuple[float, ...] = None
    pad_fractions: tuple[float, ...] = None

    def __post_init__(self):
        if self.phase not in ("training", "inference"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.bucket_edges is None:
            self.bucket_edges = (0.25, 0.5, 1.0) if self.phase == "training" else (0.25, 0.5, 0.9, 1.0)
        if self.pad_fractions is None:
            self.pad_fractions = (0.25, 0.5, 0.9) if self.phase == "training" else (0.25, 0.5, 0.9, 1.0)
        if len(self.bucket_edges) != len(self.pad_fractions):
            raise ValueError("bucket_edges and pad_fractions lengths differ")

    def integer_edges(self, capacity: int) -> list[int]:
        return [math.ceil(e * capacity) for e in self.bucket_edges]

    def padded_sizes(self, capacity: int) -> list[int]:
        return [math.ceil(p * capacity) for p in self.pad_fractions]


@dataclass
class PaddedWindow:
    window_index: int
    slots: np.ndarray        # (pad,) voxel indices, -1 in padding slots
    valid: np.ndarray        # (pad,) bool
    dropped: np.ndarray      # voxel indices discarded by training downsampling


@dataclass
class SubBatches:
    buckets: list[list[PaddedWindow]]
    padded_sizes: list[int]


def assign_subbatches(partition: WindowPartition, spec: SubBatchSpec, capacity: int,
                      seed: int = 0) -> SubBatches:
    """Place every window into the occupancy bucket covering its valid count
    and lay its voxels out in a padded slot array (valid first).

    In training, windows fuller than the top padded size are randomly
    downsampled to it with the seeded generator.
    """
    edges = [min(e, capacity) for e in spec.integer_edges(capacity)]
    pads = spec.padded_sizes(capacity)
    rng = np.random.default_rng(seed)
    buckets: list[list[PaddedWindow]] = [[] for _ in pads]
    for w, members in enumerate(partition.window_to_voxels):
        n = len(members)
        if n > capacity:
            raise ValueError(f"window {w} holds {n} voxels, capacity is {capacity}")
        bucket = next(i for i, e in enumerate(edges) if n <= e)
        pad = pads[bucket]
        dropped = np.zeros(0, dtype=np.int64)
        kept = members
        if spec.phase == "training" and n > pads[-1]:
            kept = np.sort(rng.choice(members, size=pads[-1], replace=False))
            dropped = np.setdiff1d(members, kept, assume_unique=True)
        slots = np.full(pad, -1, dtype=np.int64)
        slots[: len(kept)] = kept
        valid = slots >= 0
        buckets[bucket].append(PaddedWindow(w, slots, valid, dropped))
    return SubBatches(buckets=buckets, padded_sizes=pads)


def position_encoding(offsets: np.ndarray, channels: int,
                      window_size: tuple[int, int, int],
                      base: float = 10000.0,
                      dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed sinusoidal encoding of in-window integer offsets.

    Channels split evenly across the three axes; per axis the offset is
    normalized by the window edge and expanded as interleaved sin/cos at
    geometrically decaying frequencies.
    """
    if channels % 6 != 0:
        raise ValueError(f"position encoding needs channels divisible by 6, got {channels}")
    offsets = np.asarray(offsets, dtype=np.float64)
    per_axis = channels // 3
    pairs = per_axis // 2
    exponents = np.arange(pairs) / max(pairs - 1, 1)
    freqs = 2.0 * np.pi / np.power(base, exponents)  # geometric, starts at one cycle
    out = np.empty((offsets.shape[0], channels))
    size = np.asarray(window_size, dtype=np.float64)
    for axis in range(3):
        normalized = offsets[:, axis] / size[axis]
        angles = normalized[:, None] * freqs[None, :]
        block = np.empty((offsets.shape[0], per_axis))
        block[:, 0::2] = np.sin(angles)
        block[:, 1::2] = np.cos(angles)
        out[:, axis * per_axis:(axis + 1) * per_axis] = block
    return torch.from_numpy(out).to(dtype)


def _pe_table(cfg: WindowConfig, dtype: torch.dtype) -> torch.Tensor:
    """Encoding for every possible in-window offset, zero-padded up to the
    model width when that is not a multiple of six."""
    lx, ly, lz = cfg.window_size
    grid = np.stack(np.meshgrid(np.arange(lx), np.arange(ly), np.arange(lz),
                                indexing="ij"), axis=-1).reshape(-1, 3)
    pe_channels = 6 * (cfg.channels // 6)
    table = position_encoding(grid, pe_channels, cfg.window_size, cfg.pe_base, dtype)
    if pe_channels < cfg.channels:
        table = torch.cat(
            [table, torch.zeros(table.shape[0], cfg.channels - pe_channels, dtype=dtype)],
            dim=1,
        )
    return table


def _offset_linear(offsets: np.ndarray, window_size) -> np.ndarray:
    lx, ly, lz = window_size
    return (offsets[:, 0] * ly + offsets[:, 1]) * lz + offsets[:, 2]


class DualWindowBlock(nn.Module):
    """Pre-norm residual attention within windows, then a residual MLP."""

    def __init__(self, cfg: WindowConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.channels)
        self.msa = MultiHeadSelfAttention(cfg.channels, cfg.heads)
        self.mlp = Mlp(cfg.channels, cfg.mlp_hidden, cfg.channels)

    def forward(
        self,
        feat: FeatureMap,
        partition: WindowPartition,
        spec: SubBatchSpec,
        pe_table: torch.Tensor | None = None,
        seed: int = 0,
    ) -> FeatureMap:
        if feat.resolution is not Resolution.VOXEL_WISE:
            raise ValueError("dual window block expects a voxel_wise map")
        x = feat.values
        if pe_table is None:
            pe_table = _pe_table(self.cfg, x.dtype)
        normed = self.norm(x)
        subbatches = assign_subbatches(partition, spec, self.cfg.voxels_per_window, seed)
        pe_index = _offset_linear(partition.offsets, self.cfg.window_size)

        # The projections are per token, so they run densely once; only the
        # attention matmuls are grouped. Windows are grouped by their exact
        # retained token count and sorted canonically, so the computation is
        # independent of the bucket layout and padding never enters the math.
        qk_in = normed + pe_table[torch.from_numpy(pe_index)]
        q_all = self.msa.q_proj(qk_in)
        k_all = self.msa.k_proj(qk_in)
        v_all = self.msa.v_proj(normed)
        by_count: dict[int, list[np.ndarray]] = {}
        for bucket in subbatches.buckets:
            for window in bucket:
                kept = window.slots[window.valid]
                by_count.setdefault(len(kept), []).append(kept)
        heads, head_dim = self.msa.heads, self.msa.head_dim
        scale = math.sqrt(head_dim)
        rows_out, rows_idx = [], []
        for count in sorted(by_count):
            stacks = sorted(by_count[count], key=lambda g: int(g[0]))
            idx = torch.from_numpy(np.stack(stacks))                    # (B, T)
            def gather(t):
                b, n = idx.shape
                return t[idx.reshape(-1)].view(b, n, heads, head_dim).transpose(1, 2)
            q, k, v = gather(q_all), gather(k_all), gather(v_all)       # (B, H, T, hd)
            attn = softmax(q @ k.transpose(-2, -1) / scale)
            out = (attn @ v).transpose(1, 2).reshape(-1, heads * head_dim)
            rows_out.append(out)
            rows_idx.append(idx.reshape(-1))
        projected = self.msa.out_proj(torch.cat(rows_out))
        msa_out = x.new_zeros(x.shape).index_put((torch.cat(rows_idx),), projected)
        attended = x + msa_out
        return FeatureMap(attended + self.mlp(attended), Resolution.VOXEL_WISE)


class WindowEncoder(nn.Module):
    """Stack of dual-window blocks; even blocks use the unshifted set, odd
    blocks the shifted set."""

    def __init__(self, cfg: WindowConfig, in_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        in_channels = cfg.channels if in_channels is None else in_channels
        self.project = (
            nn.Identity() if in_channels == cfg.channels
            else nn.Linear(in_channels, cfg.channels)
        )
        self.blocks = nn.ModuleList(DualWindowBlock(cfg) for _ in range(cfg.num_blocks))

    def forward(
        self,
        feat: FeatureMap,
        vmap: VoxelMap,
        spec: SubBatchSpec,
        seed: int = 0,
        partitions: tuple[WindowPartition, WindowPartition] | None = None,
    ) -> FeatureMap:
        if partitions is None:
            partitions = (partition_windows(vmap, self.cfg), shift_windows(vmap, self.cfg))
        x = FeatureMap(self.project(feat.values), Resolution.VOXEL_WISE)
        pe_table = _pe_table(self.cfg, x.values.dtype)
        for i, block in enumerate(self.blocks):
            partition = partitions[i % 2]
            x = block(x, partition, spec, pe_table=pe_table, seed=seed + i)
        return x
