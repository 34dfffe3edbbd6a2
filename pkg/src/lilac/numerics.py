"""Tensor substrate: convolution, normalization, optimizer, schedule, gradient checks.

Tensors are ``torch.Tensor``; reverse-mode differentiation comes from torch's
autograd. Everything stochastic in the package draws from counter-based
Philox generators created by :func:`make_rng`, so results are reproducible
bit-for-bit on one platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

Tensor = torch.Tensor

PRECISIONS = {"f32": torch.float32, "f64": torch.float64}


class ConfigError(ValueError):
    """Invalid configuration (bad kernel size, widths, schedule...)."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf showed up in a forward or backward pass."""


def dtype_for(precision: str) -> torch.dtype:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}; expected f32 or f64") from None


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Philox generator for ``seed``, split deterministically along ``path``.

    ``make_rng(s, 1)`` and ``make_rng(s, 2)`` are independent streams; the same
    arguments always produce the same stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def configure_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# Convolution


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 1-D convolution (cross-correlation).

    ``out[o, t] = bias[o] + sum_{i,k} weight[o, i, k] * x[i, t*stride + k - (K-1)/2]``
    with zeros outside the signal. Accepts ``C×T`` or batched ``B×C×T`` input.
    """
    if weight.dim() != 3:
        raise DimensionError(f"conv weight must be C_out×C_in×K, got {tuple(weight.shape)}")
    c_out, c_in, k = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 3 or x.shape[1] != c_in:
        raise DimensionError(f"input {tuple(x.shape)} does not match weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias {tuple(bias.shape)} does not match {c_out} output channels")
    if stride > 1 and x.shape[-1] % stride:
        raise DimensionError(f"length {x.shape[-1]} not divisible by stride {stride}")
    out = F.conv1d(x, weight, bias, stride=stride, padding=(k - 1) // 2)
    return out.squeeze(0) if unbatched else out


class Conv1d(nn.Module):
    """Convolution layer with odd kernel and same padding; parameters start at zero.

    Callers initialize weights explicitly (random, identity or zero).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1, stride: int = 1):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.weight = nn.Parameter(torch.zeros(out_channels, in_channels, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride)

    def extra_repr(self) -> str:
        return f"{self.in_channels}, {self.out_channels}, k={self.kernel_size}, stride={self.stride}"


# ---------------------------------------------------------------------------
# Normalization / nonlinearity


def num_groups(channels: int) -> int:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return groups


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return F.group_norm(x, groups, weight, bias, eps)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.groups = num_groups(channels)
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.weight, self.bias, self.eps)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Gradients accumulate across calls; zero them between steps.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: list[Tensor] = field(default_factory=list)
    exp_avg_sq: list[Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
        return state


@torch.no_grad()
def adamw_step(params: Sequence[Tensor], grads: Sequence[Tensor | None], state: OptimizerState, lr: float) -> None:
    """One AdamW update in place.

    Weight decay is decoupled: ``p <- p * (1 - lr*wd)`` before the
    bias-corrected adaptive step. ``None`` gradients count as zero.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise DimensionError("params, grads and optimizer moments differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient/moment shape mismatch for parameter {tuple(p.shape)}")
        p.mul_(1.0 - lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


@torch.no_grad()
def clip_grad_norm(grads: Sequence[Tensor | None], max_norm: float) -> float:
    present = [g for g in grads if g is not None]
    if not present:
        return 0.0
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in present))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in present:
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# Learning-rate schedule


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )
        if self.min_lr < 0 or self.base_lr < self.min_lr:
            raise ConfigError("need 0 <= min_lr <= base_lr")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0, then cosine annealing down to ``min_lr``.

    Steps past ``total_steps`` return ``min_lr``.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step >= schedule.total_steps:
        return schedule.min_lr
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    span = schedule.base_lr - schedule.min_lr
    return schedule.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    ``fn`` must be a deterministic, scalar-valued closure over ``params``
    (float64 leaves with ``requires_grad``). The relative error of each entry
    is ``|a - fd| / max(|a|, |fd|, floor)``; the floor keeps central-difference
    rounding (about ``1e-16 / eps``) on exactly-zero gradients from dominating.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise ContractError("grad_check needs float64 parameters")
    with torch.no_grad():
        first, second = float(fn()), float(fn())
    if first != second:
        raise ContractError("function is not deterministic; finite differences are meaningless")

    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            a_flat = a.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                ai = float(a_flat[i])
                err = abs(ai - fd) / max(abs(ai), abs(fd), floor)
                worst = max(worst, err)
    return worst
