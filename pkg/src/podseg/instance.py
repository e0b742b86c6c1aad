"""Instance segmentation head: per-point offsets toward instance centroids,
void-space clustering in original and shifted coordinates, proposal scoring,
and greedy NMS, plus the V/F training schedules.

Clusters are connected components of the "same predicted class and within
radius r" relation, found with a grid hash at cell size r.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .cloud import SILIQUE
from .nn import Mlp
from .semantic import PstConfig, PstNet, MergedBatch, PstOutput


@dataclass
class InstanceHeadConfig:
    cluster_radius: float = 0.01
    min_cluster_points: int = 10
    nms_iou: float = 0.3
    prep_epoch: int = 8
    score_channels: int = 32
    offset_hidden: int = 64
    variant: str = "v"  # "v": whole net trains throughout; "f": backbone frozen after prep

    def __post_init__(self):
        if self.cluster_radius <= 0:
            raise ValueError("cluster_radius must be positive")
        if not 0 < self.nms_iou < 1:
            raise ValueError("nms_iou must lie in (0, 1)")
        if self.variant not in ("v", "f"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class InstanceProposal:
    members: np.ndarray  # sorted unique point indices into the source cloud
    space: str           # "original" | "shifted"
    sem_class: int
    score: float | None = None


@dataclass
class OffsetOutput:
    offsets: torch.Tensor  # (N, 3)
    shifted: torch.Tensor  # (N, 3) coords + offsets

    def shifted_numpy(self) -> np.ndarray:
        return self.shifted.detach().to(torch.float64).numpy()


class OffsetBranch(nn.Module):
    """Small MLP regressing a 3-D shift toward the instance centroid."""

    def __init__(self, in_channels: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_channels, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 3),
        )

    def forward(self, point_features: torch.Tensor, coords: torch.Tensor) -> OffsetOutput:
        offsets = self.net(point_features)
        return OffsetOutput(offsets=offsets, shifted=coords + offsets)


def offset_losses(
    offsets: torch.Tensor,
    target_offsets: torch.Tensor,
    mask: torch.Tensor,
    eps: float = 1e-12,
) -> tuple[torch.Tensor, torch.Tensor]:
    """L1 regression to the centroid offset and negative cosine direction
    loss, both averaged over the masked (instance-bearing) points. Zero-norm
    offsets or targets contribute 0 to the direction term."""
    if mask.sum() == 0:
        zero = offsets.sum() * 0
        return zero, zero
    os_m = offsets[mask]
    t_m = target_offsets[mask]
    l_reg = (os_m - t_m).abs().sum(dim=1).mean()
    os_norm = os_m.norm(dim=1)
    t_norm = t_m.norm(dim=1)
    ok = (os_norm > eps) & (t_norm > eps)
    cos = (os_m * t_m).sum(dim=1) / (os_norm * t_norm).clamp_min(eps)
    l_dir = torch.where(ok, -cos, torch.zeros_like(cos)).mean()
    return l_reg, l_dir


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def cluster_points(
    coords: np.ndarray,
    sem: np.ndarray,
    cfg: InstanceHeadConfig,
    classes: tuple[int, ...] = (SILIQUE,),
) -> list[tuple[np.ndarray, int]]:
    """Connected components of same-class points within ``cluster_radius``.

    Returns (sorted member indices, class) pairs ordered by (class, first
    member); components below ``min_cluster_points`` are discarded.
    """
    coords = np.asarray(coords, dtype=np.float64)
    r = cfg.cluster_radius
    clusters: list[tuple[np.ndarray, int]] = []
    for cls in classes:
        idx = np.flatnonzero(sem == cls)
        if len(idx) == 0:
            continue
        pts = coords[idx]
        cells = np.floor(pts / r).astype(np.int64)
        buckets: dict[tuple[int, int, int], np.ndarray] = {}
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        keys, starts = np.unique(cells[order], axis=0, return_index=True)
        splits = np.split(order, starts[1:])
        for key, members in zip(map(tuple, keys), splits):
            buckets[key] = members
        uf = _UnionFind(len(idx))
        neighbor_offsets = [
            (dx, dy, dz)
            for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
        ]
        for key, a in buckets.items():
            for off in neighbor_offsets:
                nkey = (key[0] + off[0], key[1] + off[1], key[2] + off[2])
                if nkey < key:
                    continue  # each unordered cell pair handled once
                b = buckets.get(nkey)
                if b is None:
                    continue
                d2 = ((pts[a][:, None, :] - pts[b][None, :, :]) ** 2).sum(-1)
                for i, j in zip(*np.nonzero(d2 <= r * r)):
                    uf.union(int(a[i]), int(b[j]))
        roots = np.array([uf.find(i) for i in range(len(idx))])
        for root in np.unique(roots):
            members = idx[roots == root]
            if len(members) >= cfg.min_cluster_points:
                clusters.append((np.sort(members), cls))
    clusters.sort(key=lambda c: (c[1], int(c[0][0])))
    return clusters


def dual_set_cluster(
    coords: np.ndarray,
    shifted: np.ndarray,
    sem: np.ndarray,
    cfg: InstanceHeadConfig,
) -> list[InstanceProposal]:
    """Cluster in the original and the shifted coordinate space; member
    indices always refer to the original points."""
    proposals = [
        InstanceProposal(members, "original", cls)
        for members, cls in cluster_points(coords, sem, cfg)
    ]
    proposals += [
        InstanceProposal(members, "shifted", cls)
        for members, cls in cluster_points(shifted, sem, cfg)
    ]
    return proposals


class ScoreNet(nn.Module):
    """Per-proposal quality score: lift member features to the score width,
    stack member coordinates, max-reduce channel-wise, squash to (0, 1)."""

    def __init__(self, in_channels: int, score_channels: int = 32):
        super().__init__()
        self.feat_mlp = Mlp(in_channels, score_channels, score_channels)
        self.head = Mlp(score_channels + 3, score_channels, 1)

    def forward(
        self,
        point_features: torch.Tensor,
        coords: torch.Tensor,
        proposals: list[InstanceProposal],
    ) -> torch.Tensor:
        if not proposals:
            return point_features.new_zeros(0)
        lifted = self.feat_mlp(point_features)
        pooled = []
        for prop in proposals:
            members = torch.from_numpy(prop.members)
            rows = torch.cat([lifted[members], coords[members]], dim=1)
            pooled.append(rows.max(dim=0).values)
        logits = self.head(torch.stack(pooled)).squeeze(-1)
        return torch.sigmoid(logits)


def score_clusters(
    proposals: list[InstanceProposal],
    point_features: torch.Tensor,
    coords: torch.Tensor,
    scorenet: ScoreNet,
) -> list[InstanceProposal]:
    scores = scorenet(point_features, coords, proposals)
    for prop, s in zip(proposals, scores):
        prop.score = float(s)
    return proposals


def point_set_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = len(np.intersect1d(a, b, assume_unique=True))
    if inter == 0:
        return 0.0
    return inter / (len(a) + len(b) - inter)


def iou_score_target(iou: float, lo: float = 0.25, hi: float = 0.75) -> float:
    """Soft score target: 0 below ``lo``, 1 above ``hi``, linear between."""
    return float(np.clip((iou - lo) / (hi - lo), 0.0, 1.0))


def score_loss(
    scores: torch.Tensor,
    proposals: list[InstanceProposal],
    gt_instances: list[np.ndarray],
) -> torch.Tensor:
    """Binary cross-entropy against the soft IoU-ramp targets."""
    if len(proposals) == 0:
        return scores.sum() * 0
    targets = []
    for prop in proposals:
        best = max((point_set_iou(prop.members, gt) for gt in gt_instances), default=0.0)
        targets.append(iou_score_target(best))
    t = torch.tensor(targets, dtype=scores.dtype)
    s = scores.clamp(1e-7, 1 - 1e-7)
    return -(t * s.log() + (1 - t) * (1 - s).log()).mean()


def nms(proposals: list[InstanceProposal], iou_threshold: float) -> list[InstanceProposal]:
    """Greedy by descending score (ties to the earlier proposal); drop
    anything overlapping a kept proposal above the threshold."""
    order = sorted(range(len(proposals)),
                   key=lambda i: (-(proposals[i].score or 0.0), i))
    kept: list[InstanceProposal] = []
    for i in order:
        cand = proposals[i]
        if all(point_set_iou(cand.members, k.members) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


@dataclass
class SchedulePhase:
    losses: tuple[str, ...]
    train_pst: bool
    clustering_active: bool


def train_schedule(variant: str, epoch: int, cfg: InstanceHeadConfig) -> SchedulePhase:
    """Active losses and trainable components for the given epoch.

    Until the preparation epoch both variants train the semantic and offset
    branches only. Afterwards the V variant turns everything on; the F
    variant freezes the backbone and trains offsets + scoring alone.
    """
    if variant not in ("v", "f"):
        raise ValueError(f"unknown variant {variant!r}")
    if epoch <= cfg.prep_epoch:
        return SchedulePhase(("sem", "offset_reg", "offset_dir"), True, False)
    if variant == "v":
        return SchedulePhase(("sem", "offset_reg", "offset_dir", "score"), True, True)
    return SchedulePhase(("offset_reg", "offset_dir", "score"), False, True)


def export_shift_diagnostics(
    coords: np.ndarray, shifted: np.ndarray, sem: np.ndarray, path
) -> None:
    """Write original and shifted coordinates side by side for external
    visualization of mis-shift failure modes."""
    coords = np.asarray(coords, dtype=np.float64)
    shifted = np.asarray(shifted, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# podseg-shift v1 columns=space,x,y,z,sem\n")
        for space, pts in (("original", coords), ("shifted", shifted)):
            for p, s in zip(pts, sem):
                fh.write(
                    f"{space} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(s)}\n"
                )


def read_shift_diagnostics(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    originals, shifteds, sems = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
            space, x, y, z, s = parts
            row = (float(x), float(y), float(z))
            if space == "original":
                originals.append(row)
                sems.append(int(s))
            else:
                shifteds.append(row)
    return np.array(originals), np.array(shifteds), np.array(sems)


class PstPgNet(nn.Module):
    """Semantic backbone plus offset branch and proposal scorer."""

    def __init__(self, cfg: PstConfig, head_cfg: InstanceHeadConfig):
        super().__init__()
        self.cfg = cfg
        self.head_cfg = head_cfg
        self.pst = PstNet(cfg)
        offset_in = cfg.flags.channels + cfg.dvfe.out_channels
        self.offset_branch = OffsetBranch(offset_in, head_cfg.offset_hidden)
        self.scorenet = ScoreNet(cfg.point_feature_dim, head_cfg.score_channels)

    def forward(self, batch: MergedBatch, seed: int = 0) -> tuple[PstOutput, OffsetOutput]:
        pst_out = self.pst(batch, seed=seed)
        coords = torch.from_numpy(
            np.concatenate([p.cloud.coords for p in batch.patches])
        ).to(batch.augmented.dtype)
        feats = torch.cat([pst_out.cache.augmented, pst_out.cache.point_features], dim=1)
        return pst_out, self.offset_branch(feats, coords)

    def freeze_backbone(self):
        """Stop semantic-branch training: no gradients, fixed norm statistics."""
        for p in self.pst.parameters():
            p.requires_grad_(False)
        self.pst.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and all(not p.requires_grad for p in self.pst.parameters()):
            self.pst.eval()  # keep the frozen backbone's statistics fixed
        return self
