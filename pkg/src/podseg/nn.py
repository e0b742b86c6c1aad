"""Differentiable building blocks, optimizer, gradient checker, checkpoints.

Everything here is plain torch on CPU. Training runs at float32; gradient
checks convert modules to float64 and compare autograd against central finite
differences (the independent oracle).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"PSTCKPT1"


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Numerically stable softmax (max-subtracted)."""
    shifted = x - x.max(dim=dim, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-row standardization followed by an affine transform."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


class Fcn(nn.Module):
    """Fully connected layer + batch norm + rectifier.

    Batch statistics are taken over all rows of the current batch in training
    mode; eval mode uses the running averages (momentum 0.1).
    """

    def __init__(self, in_channels: int, out_channels: int, bn_momentum: float = 0.1):
        super().__init__()
        self.linear = nn.Linear(in_channels, out_channels)
        self.norm = nn.BatchNorm1d(out_channels, momentum=bn_momentum)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.linear.in_features:
            raise ValueError(
                f"expected {self.linear.in_features} input channels, got {x.shape[1]}"
            )
        return self.act(self.norm(self.linear(x)))


class Mlp(nn.Module):
    """Two dense layers with a rectifier between; no norm, residual is the
    caller's business."""

    def __init__(self, in_channels: int, hidden: int, out_channels: int):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class MultiHeadSelfAttention(nn.Module):
    """Multi-head self-attention over a token set.

    The position encoding is added to the query/key inputs only, never to the
    values. ``forward`` consumes dense valid tokens; ``forward_masked`` is the
    padded-layout entry point: it slices the valid rows, attends over exactly
    those tokens, and zero-fills the masked output rows, so valid outputs are
    bit-identical for any amount of padding.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, pe: torch.Tensor | None = None) -> torch.Tensor:
        """x: (..., T, C) valid tokens only; pe broadcastable to x or None."""
        qk_in = x if pe is None else x + pe
        q = self.q_proj(qk_in)
        k = self.k_proj(qk_in)
        v = self.v_proj(x)
        *batch, t, c = x.shape
        shape = (*batch, t, self.heads, self.head_dim)
        q = q.view(shape).transpose(-3, -2)  # (..., H, T, hd)
        k = k.view(shape).transpose(-3, -2)
        v = v.view(shape).transpose(-3, -2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = softmax(scores, dim=-1)
        out = (attn @ v).transpose(-3, -2).reshape(*batch, t, c)
        return self.out_proj(out)

    def forward_masked(
        self, x: torch.Tensor, pe: torch.Tensor | None, valid_mask: torch.Tensor
    ) -> torch.Tensor:
        """x: (T, C) with a boolean (T,) validity mask; masked rows -> zeros."""
        if not valid_mask.any():
            raise ValueError("attention called with every position masked")
        idx = valid_mask.nonzero(as_tuple=True)[0]
        out_valid = self.forward(x[idx], None if pe is None else pe[idx])
        out = x.new_zeros(x.shape[0], self.channels)
        out[idx] = out_valid
        return out


def multi_head_attention(
    x: torch.Tensor,
    pe: torch.Tensor | None,
    valid_mask: torch.Tensor,
    module: MultiHeadSelfAttention,
) -> torch.Tensor:
    """Functional wrapper over ``MultiHeadSelfAttention.forward_masked``."""
    return module.forward_masked(x, pe, valid_mask)


@dataclass
class ModelParams:
    """Named parameter map (dot-separated paths), as stored in checkpoints."""

    params: dict[str, torch.Tensor]
    rng_seed: int = 0

    def validate(self):
        for name, tensor in self.params.items():
            if not torch.isfinite(tensor).all():
                raise ValueError(f"parameter {name} contains non-finite values")


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam state plus the cyclic schedule constants."""

    weight_decay: float = 0.05
    base_lr: float = 1e-5
    max_lr: float = 1e-3
    cycle_len: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def cyclic_lr(step: int, opt: OptimState) -> float:
    """Triangular schedule: base_lr -> max_lr over the first half cycle and
    back down over the second."""
    if opt.cycle_len <= 0:
        raise ValueError("cycle_len must be positive")
    half = opt.cycle_len / 2.0
    pos = step % opt.cycle_len
    frac = pos / half if pos <= half else (opt.cycle_len - pos) / half
    return opt.base_lr + (opt.max_lr - opt.base_lr) * frac


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    opt: OptimState,
    lr: float | None = None,
) -> None:
    """One AdamW update in place: theta <- theta - lr*(m_hat/(sqrt(v_hat)+eps)
    + wd*theta). Raises on NaN gradients, naming the parameter."""
    opt.step_count += 1
    if lr is None:
        lr = cyclic_lr(opt.step_count - 1, opt)
    t = opt.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if torch.isnan(g).any():
            raise ValueError(f"NaN gradient for parameter {name}")
        if name not in opt.exp_avg:
            opt.exp_avg[name] = torch.zeros_like(p)
            opt.exp_avg_sq[name] = torch.zeros_like(p)
        m = opt.exp_avg[name]
        v = opt.exp_avg_sq[name]
        m.mul_(opt.beta1).add_(g, alpha=1 - opt.beta1)
        v.mul_(opt.beta2).addcmul_(g, g, value=1 - opt.beta2)
        m_hat = m / (1 - opt.beta1**t)
        v_hat = v / (1 - opt.beta2**t)
        with torch.no_grad():
            p -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * p)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: str
    passed: bool


def grad_check(
    f,
    tensors: dict[str, torch.Tensor],
    tol: float = 1e-4,
    h: float = 1e-6,
    max_entries: int = 24,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``f()`` against central finite
    differences on the given tensors.

    Large tensors are probed at ``max_entries`` random entries. The error is
    |analytic - numeric| / max(1, |analytic|, |numeric|), so near-zero
    gradients are judged absolutely.
    """
    for t in tensors.values():
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    out = f()
    out.backward()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    worst_name = ""
    for name, t in tensors.items():
        analytic = t.grad
        if analytic is None:
            analytic = torch.zeros_like(t)
        flat = t.detach().reshape(-1)
        n = flat.numel()
        if n <= max_entries:
            entries = range(n)
        else:
            entries = torch.randperm(n, generator=gen)[:max_entries].tolist()
        for i in entries:
            orig = flat[i].item()
            step = h * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + step
                f_plus = f().item()
                flat[i] = orig - step
                f_minus = f().item()
                flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic.reshape(-1)[i].item()
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(max_rel_err=worst, worst_tensor=worst_name, passed=worst < tol)


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: magic, then per tensor name length + UTF-8 name,
    rank, dims (u32 LE) and float32 LE values. Round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, tensor in params.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            dims = list(tensor.shape)
            fh.write(struct.pack("<I", len(dims)))
            for d in dims:
                fh.write(struct.pack("<I", d))
            values = tensor.detach().to(torch.float32).contiguous().numpy()
            fh.write(values.tobytes())


def load_checkpoint(path, rng_seed: int = 0) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        params: dict[str, torch.Tensor] = {}
        while True:
            header = fh.read(4)
            if not header:
                break
            (name_len,) = struct.unpack("<I", header)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = [struct.unpack("<I", fh.read(4))[0] for _ in range(rank)]
            count = 1
            for d in dims:
                count *= d
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated tensor data for {name}")
            flat = torch.frombuffer(bytearray(raw), dtype=torch.float32).clone()
            params[name] = flat.reshape(dims)
    return ModelParams(params=params, rng_seed=rng_seed)


def state_dict_params(module: nn.Module, rng_seed: int = 0) -> ModelParams:
    """Snapshot a module's full state (parameters and buffers) as ModelParams."""
    return ModelParams(
        params={k: v.detach().clone() for k, v in module.state_dict().items()},
        rng_seed=rng_seed,
    )


def load_state_dict_params(module: nn.Module, params: ModelParams) -> None:
    state = module.state_dict()
    for name, tensor in params.params.items():
        if name not in state:
            raise ValueError(f"checkpoint tensor {name} not present in model")
        state[name] = tensor.to(state[name].dtype).reshape(state[name].shape)
    module.load_state_dict(state)
