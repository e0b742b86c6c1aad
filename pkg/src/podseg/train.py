"""Training loops, sliding-window inference, and checkpoint management for the
semantic network and both instance-pipeline variants.

Every run is deterministic under a fixed seed: model init, patch shuffling,
window downsampling and the optimizer all derive from the configured seed, and
log lines carry no wall-clock content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cloud import LabeledCloud, SILIQUE
from .config import RunConfig
from .data import instance_centroid_offsets, normalize_unit_cube
from .instance import (
    InstanceProposal,
    PstPgNet,
    dual_set_cluster,
    nms,
    offset_losses,
    score_clusters,
    score_loss,
    train_schedule,
)
from .metrics import instances_from_labels, semantic_metrics
from .nn import (
    OptimState,
    adamw_step,
    cyclic_lr,
    load_checkpoint,
    load_state_dict_params,
    save_checkpoint,
    state_dict_params,
)
from .semantic import (
    EncodedPatch,
    PatchSpec,
    PstNet,
    SemanticOutput,
    classify,
    crop_patches,
    cross_entropy_logits,
    encode_patch,
    merge_batch,
    merge_small_patches,
    region_slide_infer,
    slide_collect,
)


class RunLog:
    """Append-only, timestamp-free line log (bit-reproducible across runs)."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")
        self.lines: list[str] = []

    def write(self, **kv):
        line = " ".join(f"{k}={_fmt(v)}" for k, v in kv.items())
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def prepare_patches(
    clouds: list[LabeledCloud],
    cfg: RunConfig,
    with_instances: bool = False,
    dtype: torch.dtype = torch.float32,
) -> list[EncodedPatch]:
    """Normalize every cloud and encode all patches at every crop offset."""
    spec = cfg.patch_spec()
    pst_cfg = cfg.pst_config()
    encoded = []
    for cloud in clouds:
        normalized, _ = normalize_unit_cube(cloud)
        targets = instance_centroid_offsets(normalized) if with_instances else None
        for offset in spec.offsets:
            patches = crop_patches(normalized, spec, offset)
            patches = merge_small_patches(patches, normalized, cfg.min_patch_points)
            for patch in patches:
                encoded.append(encode_patch(patch, pst_cfg, dtype, offset_targets=targets))
    return encoded


def split_holdout(patches: list[EncodedPatch], cfg: RunConfig) -> tuple[list, list]:
    if cfg.holdout_fraction == 0 or len(patches) < 2:
        return patches, []
    rng = np.random.default_rng(cfg.seed + 101)
    order = rng.permutation(len(patches))
    n_hold = max(1, int(round(cfg.holdout_fraction * len(patches))))
    hold = [patches[i] for i in sorted(order[:n_hold])]
    train = [patches[i] for i in sorted(order[n_hold:])]
    return train, hold


def _batches(indices: np.ndarray, size: int):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def _grad_dict(params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def _zero_grads(model: torch.nn.Module):
    for p in model.parameters():
        p.grad = None


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def evaluate_patches(model: PstNet, patches: list[EncodedPatch],
                     batch_size: int) -> dict[str, float]:
    """Loss / oAcc / mIoU over encoded patches in eval mode."""
    model.eval()
    losses, preds, gts = [], [], []
    with torch.no_grad():
        for batch_idx in _batches(np.arange(len(patches)), batch_size):
            merged = merge_batch([patches[i] for i in batch_idx])
            out = model(merged)
            losses.append(float(cross_entropy_logits(out.logits, merged.sem)))
            preds.append(out.logits.argmax(dim=1).numpy())
            gts.append(merged.sem.numpy())
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    report = semantic_metrics(pred, gt, model.cfg.n_classes)
    return {"loss": float(np.mean(losses)), "oacc": report.oacc, "miou": report.mean_iou}


@dataclass
class TrainResult:
    model: torch.nn.Module
    best_path: Path | None
    last_path: Path | None
    log: RunLog
    epochs_run: int
    final_train_oacc: float = 0.0
    final_holdout_oacc: float = 0.0


def train_semantic(
    cfg: RunConfig,
    clouds: list[LabeledCloud],
    out_dir: Path | None = None,
    init_params=None,
) -> TrainResult:
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "train_log.txt" if out_dir else None)

    torch.manual_seed(cfg.seed)
    model = PstNet(cfg.pst_config())
    if init_params is not None:
        load_state_dict_params(model, init_params)
    patches = prepare_patches(clouds, cfg)
    train_patches, holdout = split_holdout(patches, cfg)
    params = dict(model.named_parameters())
    opt = OptimState(weight_decay=cfg.weight_decay, base_lr=cfg.base_lr,
                     max_lr=cfg.max_lr, cycle_len=cfg.cycle_len)

    best_loss = math.inf
    best_path = out_dir / "best.ckpt" if out_dir else None
    last_path = out_dir / "last.ckpt" if out_dir else None
    step = 0
    train_oacc = holdout_oacc = 0.0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        shuffle = np.random.default_rng(cfg.seed + 1000 + epoch).permutation(len(train_patches))
        model.train()
        epoch_losses = []
        correct = total = 0
        for batch_idx in _batches(shuffle, cfg.batch_size):
            merged = merge_batch([train_patches[i] for i in batch_idx])
            out = model(merged, seed=step)
            loss = cross_entropy_logits(out.logits, merged.sem)
            _zero_grads(model)
            loss.backward()
            adamw_step(params, _grad_dict(params), opt)
            step += 1
            epoch_losses.append(float(loss.detach()))
            pred = out.logits.detach().argmax(dim=1)
            correct += int((pred == merged.sem).sum())
            total += len(pred)
        train_oacc = correct / total
        record = {
            "epoch": epoch, "step": step,
            "lr": opt_lr(opt, step),
            "loss": float(np.mean(epoch_losses)),
            "train_oacc": train_oacc,
        }
        if holdout and epoch % cfg.eval_every == 0:
            stats = evaluate_patches(model, holdout, cfg.batch_size)
            holdout_oacc = stats["oacc"]
            record.update(val_loss=stats["loss"], val_oacc=stats["oacc"],
                          val_miou=stats["miou"])
            if stats["loss"] < best_loss:
                best_loss = stats["loss"]
                if best_path is not None:
                    save_checkpoint(state_dict_params(model, cfg.seed), best_path)
                record["saved"] = "best"
        log.write(**record)
        if _early_stop(cfg, train_oacc, holdout_oacc, bool(holdout)):
            break
    if last_path is not None:
        save_checkpoint(state_dict_params(model, cfg.seed), last_path)
        if best_path is not None and not best_path.exists():
            save_checkpoint(state_dict_params(model, cfg.seed), best_path)
    return TrainResult(model, best_path, last_path, log, epoch, train_oacc, holdout_oacc)


def opt_lr(opt: OptimState, step: int) -> float:
    return cyclic_lr(max(step - 1, 0), opt)


def _early_stop(cfg: RunConfig, train_oacc: float, holdout_oacc: float,
                has_holdout: bool) -> bool:
    if cfg.early_stop_train_oacc <= 0:
        return False
    if train_oacc < cfg.early_stop_train_oacc:
        return False
    if has_holdout and cfg.early_stop_holdout_oacc > 0:
        return holdout_oacc >= cfg.early_stop_holdout_oacc
    return True


def _patch_instances(patch: EncodedPatch) -> list[np.ndarray]:
    if patch.cloud.inst is None:
        return []
    return instances_from_labels(patch.cloud.inst)


def train_instance(
    cfg: RunConfig,
    clouds: list[LabeledCloud],
    out_dir: Path | None = None,
    init_checkpoint=None,
) -> TrainResult:
    """Train V- or F-variant: semantic + offset losses until the preparation
    epoch, then clustering + scoring join (and the F variant freezes the
    semantic backbone)."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "train_log.txt" if out_dir else None)

    head_cfg = cfg.head_config()
    torch.manual_seed(cfg.seed)
    model = PstPgNet(cfg.pst_config(), head_cfg)
    if init_checkpoint is not None:
        params = load_checkpoint(init_checkpoint) if isinstance(init_checkpoint, (str, Path)) \
            else init_checkpoint
        if any(k.startswith(("pst.", "offset_branch.", "scorenet.")) for k in params.params):
            load_state_dict_params(model, params)
        else:
            load_state_dict_params(model.pst, params)

    patches = prepare_patches(clouds, cfg, with_instances=True)
    train_patches, holdout = split_holdout(patches, cfg)
    opt = OptimState(weight_decay=cfg.weight_decay, base_lr=cfg.base_lr,
                     max_lr=cfg.max_lr, cycle_len=cfg.cycle_len)

    best_loss = math.inf
    best_path = out_dir / "best.ckpt" if out_dir else None
    last_path = out_dir / "last.ckpt" if out_dir else None
    frozen = False
    step = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        phase = train_schedule(head_cfg.variant, epoch, head_cfg)
        if not phase.train_pst and not frozen:
            model.freeze_backbone()
            frozen = True
        model.train()
        trainable = {n: p for n, p in model.named_parameters() if p.requires_grad}
        shuffle = np.random.default_rng(cfg.seed + 2000 + epoch).permutation(len(train_patches))
        sums = {"sem": 0.0, "offset_reg": 0.0, "offset_dir": 0.0, "score": 0.0}
        n_batches = 0
        correct = total = 0
        for batch_idx in _batches(shuffle, cfg.batch_size):
            batch = [train_patches[i] for i in batch_idx]
            merged = merge_batch(batch)
            pst_out, offset_out = model(merged, seed=step)
            loss = pst_out.logits.sum() * 0
            if "sem" in phase.losses:
                sem_loss = cross_entropy_logits(pst_out.logits, merged.sem)
                loss = loss + sem_loss
                sums["sem"] += float(sem_loss)
            targets = torch.cat([p.offset_targets for p in batch])
            mask = torch.from_numpy(np.concatenate([p.instance_mask for p in batch]))
            l_reg, l_dir = offset_losses(offset_out.offsets, targets, mask)
            loss = loss + l_reg + l_dir
            sums["offset_reg"] += float(l_reg)
            sums["offset_dir"] += float(l_dir)
            if phase.clustering_active:
                score_terms = []
                for patch, sl in zip(batch, merged.point_slices):
                    term = _patch_score_loss(model, patch, pst_out, offset_out, sl, head_cfg)
                    if term is not None:
                        score_terms.append(term)
                if score_terms:
                    s_loss = torch.stack(score_terms).mean()
                    loss = loss + s_loss
                    sums["score"] += float(s_loss)
            _zero_grads(model)
            loss.backward()
            adamw_step(trainable, _grad_dict(trainable), opt)
            step += 1
            n_batches += 1
            pred = pst_out.logits.detach().argmax(dim=1)
            correct += int((pred == merged.sem).sum())
            total += len(pred)
        record = {
            "epoch": epoch, "step": step, "variant": cfg.variant,
            "losses": "+".join(phase.losses),
            "train_oacc": correct / total,
            "pst_grad_norm": _grad_norm(model.pst.parameters()),
        }
        for name in ("sem", "offset_reg", "offset_dir", "score"):
            if sums[name]:
                record[f"loss_{name}"] = sums[name] / n_batches
        if holdout and epoch % cfg.eval_every == 0:
            stats = evaluate_patches(model.pst, holdout, cfg.batch_size)
            record.update(val_loss=stats["loss"], val_miou=stats["miou"])
            total_val = stats["loss"]
            if total_val < best_loss:
                best_loss = total_val
                if best_path is not None:
                    save_checkpoint(state_dict_params(model, cfg.seed), best_path)
                record["saved"] = "best"
            model.train()
            if frozen:
                model.pst.eval()
        log.write(**record)
    if last_path is not None:
        save_checkpoint(state_dict_params(model, cfg.seed), last_path)
        if best_path is not None and not best_path.exists():
            save_checkpoint(state_dict_params(model, cfg.seed), best_path)
    return TrainResult(model, best_path, last_path, log, epoch)


def _patch_score_loss(model: PstPgNet, patch: EncodedPatch, pst_out, offset_out,
                      sl: slice, head_cfg) -> torch.Tensor | None:
    """Cluster one patch on its predicted semantics and score the proposals
    against the patch-restricted ground-truth instances."""
    gt_sets = _patch_instances(patch)
    if not gt_sets:
        return None
    labels = pst_out.logits[sl].detach().argmax(dim=1).numpy()
    coords = patch.cloud.coords
    shifted = coords + offset_out.offsets[sl].detach().to(torch.float64).numpy()
    proposals = dual_set_cluster(coords, shifted, labels, head_cfg)
    if not proposals:
        return None
    coords_t = torch.from_numpy(coords).to(pst_out.point_features.dtype)
    scores = model.scorenet(pst_out.point_features[sl], coords_t, proposals)
    return score_loss(scores, proposals, gt_sets)


@dataclass
class InstancePrediction:
    semantic: SemanticOutput
    proposals: list[InstanceProposal]
    inst_labels: np.ndarray
    offsets: np.ndarray
    shifted: np.ndarray


def infer_semantic(model: PstNet, cloud: LabeledCloud, cfg: RunConfig) -> SemanticOutput:
    normalized, _ = normalize_unit_cube(cloud)
    return region_slide_infer(normalized, model, cfg.patch_spec())


def infer_instance(model: PstPgNet, cloud: LabeledCloud, cfg: RunConfig,
                   oracle_offsets: np.ndarray | None = None,
                   oracle_labels: np.ndarray | None = None) -> InstancePrediction:
    """Whole-plant instance prediction: region-slide the backbone, average
    probabilities, offsets and point features across visits, cluster in both
    coordinate spaces, score, and apply NMS.

    ``oracle_offsets``/``oracle_labels`` substitute ground-truth quantities
    for diagnostic runs (normalized space).
    """
    head_cfg = cfg.head_config()
    normalized, _ = normalize_unit_cube(cloud)
    model.eval()

    def runner(patch_cloud: LabeledCloud) -> dict[str, np.ndarray]:
        from .semantic import Patch

        patch = Patch(patch_cloud, np.arange(len(patch_cloud)), (0, 0, 0))
        batch = merge_batch([encode_patch(patch, model.cfg)])
        with torch.no_grad():
            pst_out, offset_out = model(batch)
        return {
            "probs": classify(pst_out.logits).probs,
            "offsets": offset_out.offsets.to(torch.float64).numpy(),
            "features": pst_out.point_features.to(torch.float64).numpy(),
        }

    collected = slide_collect(normalized, runner, cfg.patch_spec())
    probs = collected["probs"]
    labels = np.argmax(probs, axis=1).astype(np.int64)
    semantic = SemanticOutput(probs=probs, labels=labels)
    offsets = collected["offsets"] if oracle_offsets is None else oracle_offsets
    cluster_labels = labels if oracle_labels is None else oracle_labels
    shifted = normalized.coords + offsets
    proposals = dual_set_cluster(normalized.coords, shifted, cluster_labels, head_cfg)
    features = torch.from_numpy(collected["features"]).to(torch.float32)
    coords_t = torch.from_numpy(normalized.coords).to(torch.float32)
    with torch.no_grad():
        proposals = score_clusters(proposals, features, coords_t, model.scorenet)
    kept = nms(proposals, head_cfg.nms_iou)
    inst_labels = np.full(len(cloud), -1, dtype=np.int64)
    for rank, prop in enumerate(kept):
        free = prop.members[inst_labels[prop.members] == -1]
        inst_labels[free] = rank
    return InstancePrediction(semantic, kept, inst_labels, offsets, shifted)
