"""EDM training for the backbone and for adaptor branches, plus guidance."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt_io
from .adaptors import AdaptorBranch, AdaptorVariant, build_adaptor, controlled_denoise
from .backbone import Backbone, BackboneConfig, Conditions, build_backbone, config_digest, loss_weight
from .conditions import condition_map
from .data import LatentCodec, SyntheticSample
from .numerics import (
    ConfigError,
    LrSchedule,
    NonFiniteError,
    OptimizerState,
    Tensor,
    adamw_step,
    backward,
    clip_grad_norm,
    dtype_for,
    lr_at,
    make_rng,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class FreezeError(RuntimeError):
    """The frozen backbone changed during adaptor training."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    base_lr: float = 1e-4
    warmup_steps: int = 100
    min_lr: float = 0.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    dropout_p_context: float = 0.5
    dropout_p_e: float = 0.5
    dropout_p_c: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        for name in ("dropout_p_context", "dropout_p_e", "dropout_p_c"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.steps <= self.warmup_steps:
            raise ConfigError("steps must exceed warmup_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        dtype_for(self.precision)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.warmup_steps, self.steps, self.min_lr)

    def digest(self) -> str:
        return config_digest(asdict(self))


@dataclass
class DropoutMask:
    keep_context: np.ndarray
    keep_e: np.ndarray
    keep_c: np.ndarray


@dataclass
class TrainResult:
    module: nn.Module
    log: list[dict] = field(default_factory=list)
    optimizer: OptimizerState | None = None


# ---------------------------------------------------------------------------
# Batches


@dataclass
class TensorSet:
    """Dataset rendered to tensors: latents, style ids, context latents, control maps."""

    latents: Tensor
    style: Tensor
    context: Tensor
    control: Tensor | None = None

    def __len__(self) -> int:
        return self.latents.shape[0]

    def batch(self, idx) -> tuple[Tensor, Conditions]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        ctrl = None if self.control is None else self.control[idx]
        return self.latents[idx], Conditions(self.style[idx], self.context[idx], None, ctrl)


def to_tensors(samples: Sequence[SyntheticSample], codec: LatentCodec, condition: str | None = None,
               dtype=torch.float32) -> TensorSet:
    lat = np.stack([codec.encode(s) for s in samples])
    ctx = np.stack([codec.encode_context(s.context_roll) for s in samples])
    style = torch.tensor([s.style_id for s in samples], dtype=torch.long)
    control = None
    if condition is not None:
        control = torch.from_numpy(
            np.stack([condition_map(condition, s.note_roll, s.chord_truth).values for s in samples])
        ).to(dtype)
    return TensorSet(torch.from_numpy(lat).to(dtype), style, torch.from_numpy(ctx).to(dtype), control)


# ---------------------------------------------------------------------------
# Stochastic pieces


def sample_noise_level(rng: np.random.Generator, n: int | None = None, p_mean: float = -1.2,
                       p_std: float = 1.2):
    """Log-normal noise level(s): ``exp(p_mean + p_std * z)``."""
    z = rng.standard_normal(n)
    return np.exp(p_mean + p_std * z)


def draw_dropout(batch: int, cfg: TrainConfig, rng: np.random.Generator) -> DropoutMask:
    u = rng.random((3, batch))
    return DropoutMask(u[0] >= cfg.dropout_p_context, u[1] >= cfg.dropout_p_e, u[2] >= cfg.dropout_p_c)


def apply_condition_dropout(cond: Conditions, cfg: TrainConfig, rng: np.random.Generator,
                            batch: int | None = None) -> tuple[Conditions, DropoutMask]:
    """Drop context, style embedding and control independently per sample.

    Dropped style/context fall back to the backbone's learned null vectors;
    a dropped control becomes the all-zero map.
    """
    if batch is None:
        for t in (cond.style, cond.context, cond.control):
            if t is not None:
                batch = t.shape[0]
                break
        else:
            raise ConfigError("cannot infer batch size from empty conditions")
    mask = draw_dropout(batch, cfg, rng)
    style = cond.style
    if style is not None:
        style = torch.where(torch.from_numpy(mask.keep_e), style, torch.full_like(style, -1))
    keep_ctx = torch.from_numpy(mask.keep_context)
    if cond.context_keep is not None:
        keep_ctx = keep_ctx & cond.context_keep
    control = cond.control
    if control is not None:
        control = control * torch.from_numpy(mask.keep_c).to(control.dtype).view(-1, 1, 1)
    return Conditions(style, cond.context, keep_ctx if cond.context is not None else None, control), mask


# ---------------------------------------------------------------------------
# Objective / guidance


def weighted_denoising_loss(denoise_fn: Callable[[Tensor, Tensor, Conditions], Tensor], x: Tensor,
                            cond: Conditions, sigma: Tensor, noise: Tensor) -> Tensor:
    """``mean_b lambda(sigma_b) * mean((D(x_b + sigma_b n_b) - x_b)^2)``."""
    s = sigma.reshape(-1, 1, 1).to(x.dtype)
    d = denoise_fn(x + s * noise.to(x.dtype), sigma.to(x.dtype), cond)
    per_sample = ((d - x) ** 2).mean(dim=(1, 2))
    return (loss_weight(s.reshape(-1)) * per_sample).mean()


def edm_loss(model: Backbone, branch: AdaptorBranch | None, x: Tensor, cond: Conditions,
             rng: np.random.Generator, p_mean: float = -1.2, p_std: float = 1.2) -> Tensor:
    sigma = torch.from_numpy(sample_noise_level(rng, x.shape[0], p_mean, p_std)).to(x.dtype)
    noise = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x.dtype)

    def fn(xn, s, c):
        return controlled_denoise(model, branch, xn, s, c)

    loss = weighted_denoising_loss(fn, x, cond, sigma, noise)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss)} (sigma range {float(sigma.min()):.3g}"
                            f"..{float(sigma.max()):.3g})")
    return loss


def cfg_denoise(model: Backbone, branch: AdaptorBranch | None, x: Tensor, sigma, cond: Conditions,
                weight: float = 1.0) -> Tensor:
    """``D_null + w (D_cond - D_null)``; w=1 and w=0 return the pure paths."""
    if weight < 0:
        raise ConfigError("guidance weight must be >= 0")
    if weight == 1.0:
        return controlled_denoise(model, branch, x, sigma, cond)
    d_null = controlled_denoise(model, branch, x, sigma, Conditions())
    if weight == 0.0:
        return d_null
    d_cond = controlled_denoise(model, branch, x, sigma, cond)
    return d_null + weight * (d_cond - d_null)


# ---------------------------------------------------------------------------
# Loop


def _epoch_batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            yield order[i:i + batch]


def run_training(trainable: nn.Module, loss_fn: Callable[[Tensor, Conditions, np.random.Generator], Tensor],
                 data: TensorSet, cfg: TrainConfig, dump_path=None) -> TrainResult:
    names, params = zip(*[(n, p) for n, p in trainable.named_parameters() if p.requires_grad])
    opt = OptimizerState.for_params(params, base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = cfg.schedule()
    rng = make_rng(cfg.seed, 0x7A)
    batches = _epoch_batches(len(data), cfg.batch_size, rng)
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        x, cond = data.batch(next(batches))
        cond, _ = apply_condition_dropout(cond, cfg, rng)
        for p in params:
            p.grad = None
        try:
            loss = loss_fn(x, cond, rng)
            backward(loss)
        except (TrainingError, NonFiniteError) as exc:
            if dump_path is not None:
                ckpt_io.save(dump_path, ckpt_io.Checkpoint.from_module(
                    "adaptor", trainable, {"diverged_at": step, "error": str(exc)}))
            raise TrainingError(f"training diverged at step {step}: {exc}") from exc
        grads = [p.grad for p in params]
        clip_grad_norm(grads, cfg.grad_clip)
        lr = lr_at(sched, step)
        adamw_step(params, grads, opt, lr)
        rows.append({"step": step, "lr": lr, "loss": float(loss.detach()),
                     "wall_ms": round((time.perf_counter() - t0) * 1000, 3)})
        if step % 500 == 0 or step == cfg.steps - 1:
            log.info("step %d lr %.3g loss %.4f", step, lr, float(loss.detach()))
    return TrainResult(trainable, rows, opt)


def train_backbone(config: BackboneConfig, train_cfg: TrainConfig, data: TensorSet,
                   seed: int | None = None) -> TrainResult:
    """Pre-train a backbone from scratch (all conditions dropped out independently)."""
    dtype = dtype_for(train_cfg.precision)
    model = build_backbone(config, train_cfg.seed if seed is None else seed).to(dtype)
    data = TensorSet(data.latents.to(dtype), data.style, data.context.to(dtype), None)

    def loss_fn(x, cond, rng):
        return edm_loss(model, None, x, cond, rng, train_cfg.p_mean, train_cfg.p_std)

    result = run_training(model, loss_fn, data, train_cfg)
    model.requires_grad_(False)
    return result


def train_adaptor(backbone: Backbone, variant: AdaptorVariant | str, train_cfg: TrainConfig,
                  data: TensorSet, dump_path=None) -> TrainResult:
    """Fine-tune a fresh branch against a frozen backbone.

    Raises :class:`FreezeError` if any backbone parameter changed.
    """
    if data.control is None:
        raise ConfigError("adaptor training needs control maps")
    dtype = dtype_for(train_cfg.precision)
    backbone.to(dtype).requires_grad_(False)
    before = backbone.digest()
    branch = build_adaptor(backbone, variant)
    data = TensorSet(data.latents.to(dtype), data.style, data.context.to(dtype), data.control.to(dtype))

    def loss_fn(x, cond, rng):
        return edm_loss(backbone, branch, x, cond, rng, train_cfg.p_mean, train_cfg.p_std)

    result = run_training(branch, loss_fn, data, train_cfg, dump_path)
    if backbone.digest() != before:
        raise FreezeError("backbone parameters changed during adaptor training")
    return result


def smoothed(values: Sequence[float], window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")


def write_log(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "wall_ms"])
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Checkpoint helpers


def backbone_checkpoint(model: Backbone, train_cfg: TrainConfig | None = None) -> ckpt_io.Checkpoint:
    meta = {
        "backbone_config": model.config.to_dict(),
        "config_digest": model.config.digest(),
        "train_config": asdict(train_cfg) if train_cfg else None,
    }
    return ckpt_io.Checkpoint.from_module("backbone", model, meta)


def load_backbone(path_or_ckpt, precision: str = "f32") -> Backbone:
    ck = path_or_ckpt if isinstance(path_or_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(path_or_ckpt)
    if ck.kind != "backbone":
        raise ckpt_io.FormatError(f"expected a backbone checkpoint, got {ck.kind}")
    cfg_dict = dict(ck.metadata["backbone_config"])
    cfg = BackboneConfig(**{**cfg_dict, "levels": tuple(cfg_dict["levels"])})
    if cfg.digest() != ck.metadata.get("config_digest"):
        raise ckpt_io.IntegrityError("backbone config digest mismatch")
    model = Backbone(cfg)
    model.load_state_dict(ck.state_dict())
    model.to(dtype_for(precision)).requires_grad_(False)
    return model


def adaptor_checkpoint(branch: AdaptorBranch, backbone: Backbone, condition: str,
                       train_cfg: TrainConfig | None = None, opt: OptimizerState | None = None) -> ckpt_io.Checkpoint:
    meta = {
        "variant": branch.variant.to_dict(),
        "variant_name": branch.variant.name,
        "condition": condition,
        "cond_channels": branch.cond_channels,
        "backbone_digest": backbone.digest(),
        "backbone_config": backbone.config.to_dict(),
        "config_digest": backbone.config.digest(),
        "train_config": asdict(train_cfg) if train_cfg else None,
    }
    extra = {}
    if opt is not None:
        meta["optimizer_step"] = opt.step
        names = [n for n, p in branch.named_parameters() if p.requires_grad]
        for n, m, v in zip(names, opt.exp_avg, opt.exp_avg_sq):
            extra[f"optim.m.{n}"] = m
            extra[f"optim.v.{n}"] = v
    return ckpt_io.Checkpoint.from_module("adaptor", branch, meta, extra)


def load_adaptor(path_or_ckpt, backbone: Backbone) -> tuple[AdaptorBranch, dict]:
    ck = path_or_ckpt if isinstance(path_or_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(path_or_ckpt)
    if ck.kind != "adaptor":
        raise ckpt_io.FormatError(f"expected an adaptor checkpoint, got {ck.kind}")
    if ck.metadata.get("config_digest") != backbone.config.digest():
        raise ckpt_io.IntegrityError("adaptor was trained against a different backbone config")
    variant = AdaptorVariant(**ck.metadata["variant"])
    branch = build_adaptor(backbone, variant, ck.metadata.get("cond_channels", 12))
    dtype = next(backbone.parameters()).dtype
    branch.load_state_dict(ck.state_dict(prefix_filter="optim.", dtype=dtype))
    return branch, ck.metadata
