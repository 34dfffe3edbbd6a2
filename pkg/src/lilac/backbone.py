"""Desk-scale EDM denoiser: a 1-D convolutional U-Net over latent sequences.

The encoder is a list of blocks ``x_l = F_l(x_{l-1}, e)``; every block output
is also the skip tensor the decoder adds back in at the matching resolution.
Adaptors hook in through :meth:`Backbone.denoise`'s ``network`` argument.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import (
    ConfigError,
    ContractError,
    Conv1d,
    GroupNorm,
    Tensor,
    make_rng,
    silu,
)

SIGMA_DATA = 0.5
SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
RHO = 7.0


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 16
    levels: tuple[int, ...] = (16, 32, 64)
    blocks_per_level: int = 1
    embed_dim: int = 64
    context_channels: int | None = None
    num_styles: int = 3
    fourier_features: int = 16
    frame_rate_hz: float = 11.7

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(w) for w in self.levels))
        if self.context_channels is None:
            object.__setattr__(self, "context_channels", self.latent_channels)
        if not self.levels or any(w <= 0 for w in self.levels):
            raise ConfigError(f"levels must be non-empty positive widths, got {self.levels}")
        if self.latent_channels < 12:
            raise ConfigError("latent_channels must be >= 12 to carry a chroma probe")
        if self.blocks_per_level < 1 or self.embed_dim < 1 or self.num_styles < 1:
            raise ConfigError("blocks_per_level, embed_dim and num_styles must be positive")
        if self.fourier_features % 2:
            raise ConfigError("fourier_features must be even")

    @property
    def time_factor(self) -> int:
        """Input lengths must be multiples of this."""
        return 2 ** (len(self.levels) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(d: dict) -> str:
    import json

    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Conditions:
    """Global and time-varying conditions for a batch.

    ``style`` holds style ids with ``-1`` meaning the learned null embedding.
    ``context`` is ``B×C×T`` or ``None`` (all null); ``context_keep`` masks
    individual samples to the null context. ``control`` is the adaptor's
    ``B×N×T`` condition map, ``None`` meaning the all-zero map.
    """

    style: Tensor | None = None
    context: Tensor | None = None
    context_keep: Tensor | None = None
    control: Tensor | None = None

    def null(self) -> "Conditions":
        return Conditions()

    def select(self, idx) -> "Conditions":
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return Conditions(pick(self.style), pick(self.context), pick(self.context_keep), pick(self.control))


# ---------------------------------------------------------------------------
# Layers


class ResBlock(nn.Module):
    """Pre-norm residual block with a feature-wise scale/shift from the embedding."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.norm1 = GroupNorm(channels)
        self.conv1 = Conv1d(channels, channels, 3)
        self.emb = nn.Linear(embed_dim, 2 * channels)
        self.norm2 = GroupNorm(channels)
        self.conv2 = Conv1d(channels, channels, 3)

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        scale, shift = self.emb(silu(emb)).unsqueeze(-1).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(silu(h))
        return x + h


class EncoderBlock(nn.Module):
    """One frozen encoder stage ``F_l``.

    The first block concatenates the context channel-wise to its input; later
    blocks open with a stride-2 convolution that halves the time axis.
    """

    def __init__(self, in_channels: int, out_channels: int, embed_dim: int, n_res: int,
                 context_channels: int = 0, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.context_channels = context_channels
        self.stride = stride
        self.proj = Conv1d(in_channels + context_channels, out_channels, 3, stride=stride)
        self.res = nn.ModuleList(ResBlock(out_channels, embed_dim) for _ in range(n_res))

    def forward(self, x: Tensor, emb: Tensor, context: Tensor | None = None) -> Tensor:
        if self.context_channels:
            if context is None:
                raise ContractError("first encoder block needs a context tensor (null or real)")
            x = torch.cat([x, context], dim=1)
        h = self.proj(x)
        for block in self.res:
            h = block(h, emb)
        return h


class Upsample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = Conv1d(in_channels, out_channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(torch.repeat_interleave(x, 2, dim=-1))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        cfg = config
        self.config = cfg
        lv = cfg.levels
        e = cfg.embed_dim

        half = cfg.fourier_features // 2
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(100.0), half)))
        self.noise_mlp = nn.Sequential(nn.Linear(cfg.fourier_features, e), nn.SiLU(), nn.Linear(e, e))
        self.style_table = nn.Parameter(torch.zeros(cfg.num_styles, e))
        self.null_style = nn.Parameter(torch.zeros(e))
        self.null_context = nn.Parameter(torch.zeros(cfg.context_channels))

        blocks = [EncoderBlock(cfg.latent_channels, lv[0], e, cfg.blocks_per_level, cfg.context_channels)]
        for i in range(1, len(lv)):
            blocks.append(EncoderBlock(lv[i - 1], lv[i], e, cfg.blocks_per_level, stride=2))
        self.encoder = nn.ModuleList(blocks)
        self.mid = ResBlock(lv[-1], e)
        self.decoder = nn.ModuleList(ResBlock(w, e) for w in lv)
        self.upsample = nn.ModuleList(Upsample(lv[i], lv[i - 1]) for i in range(1, len(lv)))
        self.out_norm = GroupNorm(lv[0])
        self.out_conv = Conv1d(lv[0], cfg.latent_channels, 3)

    # -- conditioning ------------------------------------------------------

    def embed(self, c_noise: Tensor, style: Tensor | None) -> Tensor:
        """Conditional embedding ``e``: noise-level features plus style vector."""
        ang = c_noise.reshape(-1, 1) * self.freqs.to(c_noise.dtype)
        emb = self.noise_mlp(torch.cat([torch.cos(ang), torch.sin(ang)], dim=1))
        if style is None:
            return emb + self.null_style
        style = style.reshape(-1)
        picked = self.style_table[style.clamp(min=0)]
        keep = (style >= 0).unsqueeze(-1)
        return emb + torch.where(keep, picked, self.null_style.expand_as(picked))

    def resolve_context(self, cond: Conditions, batch: int, length: int) -> Tensor:
        null = self.null_context.view(1, -1, 1).expand(batch, -1, length)
        if cond.context is None:
            return null
        if cond.context.shape != (batch, self.config.context_channels, length):
            raise ContractError(f"context shape {tuple(cond.context.shape)} does not match input")
        if cond.context_keep is None:
            return cond.context
        return torch.where(cond.context_keep.view(-1, 1, 1), cond.context, null)

    # -- network -----------------------------------------------------------

    def encoder_forward(self, x0: Tensor, emb: Tensor, context: Tensor) -> list[Tensor]:
        """Run the encoder; returns every block output ``x_1 .. x_L`` (the skips)."""
        feats = []
        h = x0
        for block in self.encoder:
            h = block(h, emb, context)
            feats.append(h)
        return feats

    def decode(self, skips: Sequence[Tensor], emb: Tensor, bottleneck: Tensor | None = None) -> Tensor:
        h = self.mid(skips[-1] if bottleneck is None else bottleneck, emb)
        for level in reversed(range(len(self.decoder))):
            h = self.decoder[level](h + skips[level], emb)
            if level > 0:
                h = self.upsample[level - 1](h)
        return self.out_conv(silu(self.out_norm(h)))

    def network(self, x0: Tensor, emb: Tensor, context: Tensor) -> Tensor:
        return self.decode(self.encoder_forward(x0, emb, context), emb)

    # -- EDM ---------------------------------------------------------------

    def check_input(self, x: Tensor) -> None:
        if x.dim() != 3 or x.shape[1] != self.config.latent_channels:
            raise ContractError(f"expected B×{self.config.latent_channels}×T input, got {tuple(x.shape)}")
        if x.shape[-1] % self.config.time_factor:
            raise ContractError(
                f"time length {x.shape[-1]} not divisible by {self.config.time_factor}"
            )

    def denoise(self, x: Tensor, sigma, cond: Conditions | None = None,
                network: Callable[[Tensor, Tensor, Tensor, Conditions], Tensor] | None = None) -> Tensor:
        """Preconditioned denoiser ``D(x; sigma) = c_skip x + c_out NN(c_in x, c_noise, e, ctx)``.

        ``network`` replaces the bare U-Net pass; it receives
        ``(c_in*x, e, context, cond)`` and returns the raw network output.
        """
        unbatched = x.dim() == 2
        if unbatched:
            x = x.unsqueeze(0)
        self.check_input(x)
        cond = cond or Conditions()
        sigma = as_sigma(sigma, x)
        c_skip, c_out, c_in, c_noise = precondition(sigma)
        emb = self.embed(c_noise, cond.style)
        ctx = self.resolve_context(cond, x.shape[0], x.shape[-1])
        x0 = c_in * x
        if network is None:
            out = self.network(x0, emb, ctx)
        else:
            out = network(x0, emb, ctx, cond)
        d = c_skip * x + c_out * out
        return d.squeeze(0) if unbatched else d

    def digest(self) -> str:
        return param_digest(self)


def as_sigma(sigma, x: Tensor) -> Tensor:
    """Broadcastable ``B×1×1`` noise level tensor; rejects sigma <= 0."""
    s = torch.as_tensor(sigma, dtype=x.dtype)
    if s.dim() == 0:
        s = s.expand(x.shape[0])
    if (s <= 0).any():
        raise ContractError("sigma must be > 0")
    return s.reshape(-1, 1, 1)


def precondition(sigma: Tensor, sigma_data: float = SIGMA_DATA):
    """EDM scalings ``(c_skip, c_out, c_in, c_noise)``."""
    sd2 = sigma_data**2
    c_skip = sd2 / (sigma**2 + sd2)
    c_out = sigma * sigma_data / torch.sqrt(sigma**2 + sd2)
    c_in = 1.0 / torch.sqrt(sigma**2 + sd2)
    c_noise = torch.log(sigma) / 4
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float = SIGMA_DATA):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Construction


@torch.no_grad()
def init_weights(module: nn.Module, rng: np.random.Generator) -> None:
    """Fan-in scaled normal init in sorted parameter-name order.

    Norm gains are set to 1 and biases to 0 (overriding torch's own random
    defaults); embedding tables get unit-scale draws so styles are
    distinguishable from the start.
    """
    for name, p in sorted(module.named_parameters()):
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("null_"):
            p.zero_()
            continue
        if "norm" in name:
            p.fill_(1.0 if leaf == "weight" else 0.0)
            continue
        if leaf == "bias":
            p.zero_()
            continue
        if name == "style_table":
            draw = rng.standard_normal(p.shape)
        else:
            fan_in = int(np.prod(p.shape[1:]))
            draw = rng.standard_normal(p.shape) / math.sqrt(fan_in)
        p.copy_(torch.from_numpy(draw).to(p.dtype))


def build_backbone(config: BackboneConfig, seed: int = 0) -> Backbone:
    model = Backbone(config)
    init_weights(model, make_rng(seed, 0xB0))
    return model


# ---------------------------------------------------------------------------
# Sampling


def karras_sigmas(n: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                  rho: float = RHO) -> np.ndarray:
    """Descending noise schedule of ``n`` values from ``sigma_max`` to ``sigma_min``."""
    if n < 2:
        raise ConfigError(f"schedule needs n >= 2, got {n}")
    if not 0 < sigma_min < sigma_max:
        raise ConfigError("need 0 < sigma_min < sigma_max")
    i = np.arange(n, dtype=np.float64)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    sig = (hi + i / (n - 1) * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    return sig


def heun_sampler(denoise_fn: Callable[[Tensor, float], Tensor], noise: Tensor, steps: int,
                 sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX, rho: float = RHO) -> Tensor:
    """Deterministic 2nd-order integration of the probability-flow ODE.

    ``noise`` is a standard normal draw; the last step (to sigma=0) is Euler.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if steps == 1:
        sigmas = np.array([sigma_max, 0.0])
    else:
        sigmas = np.append(karras_sigmas(steps, sigma_min, sigma_max, rho), 0.0)
    x = noise * float(sigmas[0])
    for s_cur, s_next in zip(sigmas[:-1], sigmas[1:]):
        s_cur, s_next = float(s_cur), float(s_next)
        d = (x - denoise_fn(x, s_cur)) / s_cur
        x_next = x + (s_next - s_cur) * d
        if s_next > 0:
            d2 = (x_next - denoise_fn(x_next, s_next)) / s_next
            x_next = x + (s_next - s_cur) * 0.5 * (d + d2)
        x = x_next
    return x


@torch.no_grad()
def sample(model: Backbone, adaptor, cond: Conditions, shape: tuple[int, ...], steps: int = 30,
           cfg_weight: float = 1.0, seed: int = 0) -> Tensor:
    """Generate latents of ``shape`` (``B×C×T``).

    With an adaptor every denoiser call is routed through the controlled
    path; ``cfg_weight != 1`` switches on classifier-free guidance.
    """
    from .trainer import cfg_denoise  # guidance lives with training

    dtype = next(model.parameters()).dtype
    noise = torch.from_numpy(make_rng(seed, 0x5A).standard_normal(shape)).to(dtype)

    def fn(x, s):
        return cfg_denoise(model, adaptor, x, s, cond, cfg_weight)

    return heun_sampler(fn, noise, steps)
