"""Run configuration: one flat key=value file drives every command.

All lengths are meters in the normalized (unit-cube) space. Unknown keys are
rejected and the effective configuration is echoed into the run directory so
a run can be reproduced from its own output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .dvfe import DvfeConfig
from .instance import InstanceHeadConfig
from .semantic import PatchSpec, PstConfig
from .voxelize import AugmentFlags
from .windows import WindowConfig

VARIANTS = ("pst", "v-pst-pg", "f-pst-pg")


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = ""
    # synthetic dataset
    n_plants: int = 12
    split_mode: str = "fixed"
    # voxel grid (normalized meters)
    voxel_size: tuple[float, float, float] = (0.006, 0.006, 0.0025)
    # augmented features
    use_cluster_centroid: bool = True
    use_voxel_center: bool = True
    use_l2_norm: bool = False
    # network widths
    dvfe_mid: int = 32
    dvfe_out: int = 64
    window_size: tuple[int, int, int] = (6, 6, 12)
    num_blocks: int = 6
    heads: int = 4
    channels: int = 64
    mlp_hidden: int = 128
    prop_hidden: int = 32
    prop_out: int = 16
    n_classes: int = 2
    pe_base: float = 10000.0
    shift_sign: int = 1
    aggregate: str = "max"
    # patching
    patch_len: float = 0.16
    patch_offsets: tuple[float, ...] = (0.0, 0.08)
    stride: float = 0.08
    min_patch_points: int = 5
    # optimization
    epochs: int = 60
    batch_size: int = 4
    eval_every: int = 2
    base_lr: float = 1e-5
    max_lr: float = 1e-3
    weight_decay: float = 0.05
    cycle_len: int = 400
    holdout_fraction: float = 0.15
    early_stop_train_oacc: float = 0.0
    early_stop_holdout_oacc: float = 0.0
    # instance head
    variant: str = "pst"
    cluster_radius: float = 0.01
    min_cluster_points: int = 10
    nms_iou: float = 0.3
    prep_epoch: int = 8
    score_channels: int = 32
    offset_hidden: int = 64
    # ablation harness
    ablate_epochs: int = 6
    ablate_voxel_seeds: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 < self.stride <= self.patch_len:
            raise ValueError("stride must satisfy 0 < stride <= patch_len")
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError("voxel_size must be positive")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    # --- derived module configs -------------------------------------------

    def augment_flags(self) -> AugmentFlags:
        return AugmentFlags(self.use_cluster_centroid, self.use_voxel_center,
                            self.use_l2_norm)

    def pst_config(self) -> PstConfig:
        flags = self.augment_flags()
        return PstConfig(
            voxel_size=self.voxel_size,
            flags=flags,
            dvfe=DvfeConfig(in_channels=flags.channels, mid_channels=self.dvfe_mid,
                            out_channels=self.dvfe_out, aggregate=self.aggregate),
            window=WindowConfig(window_size=self.window_size, num_blocks=self.num_blocks,
                                channels=self.channels, heads=self.heads,
                                mlp_hidden=self.mlp_hidden, pe_base=self.pe_base,
                                shift_sign=self.shift_sign),
            prop_hidden=self.prop_hidden,
            prop_out=self.prop_out,
            n_classes=self.n_classes,
        )

    def head_config(self) -> InstanceHeadConfig:
        return InstanceHeadConfig(
            cluster_radius=self.cluster_radius,
            min_cluster_points=self.min_cluster_points,
            nms_iou=self.nms_iou,
            prep_epoch=self.prep_epoch,
            score_channels=self.score_channels,
            offset_hidden=self.offset_hidden,
            variant="f" if self.variant == "f-pst-pg" else "v",
        )

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(patch_len=self.patch_len, offsets=self.patch_offsets,
                         stride=self.stride)


def _parse_value(name: str, text: str, current):
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p for p in text.split(",") if p != ""]
        kind = type(current[0]) if current else float
        return tuple(kind(p) for p in parts)
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {f.name: getattr(base or RunConfig(), f.name) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in values:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw.strip(), values[key])
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return RunConfig(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
