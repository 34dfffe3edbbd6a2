"""Control adaptors attached to a frozen backbone.

Two branch families produce per-level skip deltas ``delta_l`` that the
decoder adds to the frozen skips, ``s_l = F_l(x_{l-1}, e) + delta_l``:

* ``controlnet``: a trainable clone ``G_l`` of every encoder block.
* LiLAC: a second pass through the *frozen* blocks, wrapped by K=1 identity
  convolutions before (head) and after (tail) the block plus an optional
  zero-initialized bypass (residual).

Both start from ``x_hat_0 = x_0 + Z_in(c)`` and emit ``delta_l = Z_s(x_hat_l)``.
The inline variant (``lilac-star``) wraps the backbone's own encoder pass
instead, with no second stream and no skip convolutions.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, Conditions
from .numerics import ConfigError, ContractError, Conv1d, Tensor

CONTROLNET = "controlnet"
LILAC = "lilac"
INLINE = "lilac_inline"


@dataclass(frozen=True)
class AdaptorVariant:
    kind: str
    head: bool = True
    tail: bool = False
    residual: bool = False

    def __post_init__(self):
        if self.kind not in (CONTROLNET, LILAC, INLINE):
            raise ConfigError(f"unknown adaptor kind {self.kind!r}")
        if self.kind == LILAC and not self.head:
            raise ConfigError("LiLAC variants always carry a head layer")

    @property
    def name(self) -> str:
        if self.kind == CONTROLNET:
            return "controlnet"
        if self.kind == INLINE:
            return "lilac-star"
        return "h" + ("t" if self.tail else "") + ("r" if self.residual else "")

    @classmethod
    def from_name(cls, name: str) -> "AdaptorVariant":
        try:
            return VARIANTS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "head": self.head, "tail": self.tail, "residual": self.residual}


VARIANTS = {
    "controlnet": AdaptorVariant(CONTROLNET),
    "h": AdaptorVariant(LILAC),
    "ht": AdaptorVariant(LILAC, tail=True),
    "hr": AdaptorVariant(LILAC, residual=True),
    "htr": AdaptorVariant(LILAC, tail=True, residual=True),
    "lilac-star": AdaptorVariant(INLINE, tail=True, residual=True),
}


# ---------------------------------------------------------------------------
# Initializers


def init_identity_conv(channels: int, kernel: int = 1) -> tuple[Tensor, Tensor]:
    """Weights ``C×C×K`` that copy the input: 1 at the center tap where in == out."""
    if kernel % 2 == 0:
        raise ConfigError(f"identity kernel must be odd, got {kernel}")
    w = torch.zeros(channels, channels, kernel)
    center = (kernel - 1) // 2
    w[:, :, center] = torch.eye(channels)
    return w, torch.zeros(channels)


def init_zero_conv(in_channels: int, out_channels: int, kernel: int = 1) -> tuple[Tensor, Tensor]:
    return torch.zeros(out_channels, in_channels, kernel), torch.zeros(out_channels)


def identity_conv(channels: int, kernel: int = 1) -> Conv1d:
    conv = Conv1d(channels, channels, kernel)
    w, b = init_identity_conv(channels, kernel)
    with torch.no_grad():
        conv.weight.copy_(w)
        conv.bias.copy_(b)
    return conv


def zero_conv(in_channels: int, out_channels: int, kernel: int = 1) -> Conv1d:
    # Conv1d parameters are created as zeros already
    return Conv1d(in_channels, out_channels, kernel)


def clone_encoder(backbone: Backbone) -> nn.ModuleList:
    """Trainable deep copy of the backbone encoder, bit-equal at creation."""
    clone = copy.deepcopy(backbone.encoder)
    clone.requires_grad_(True)
    return clone


def condition_input(x0: Tensor, c: Tensor | None, z_in: Conv1d) -> Tensor:
    """``x_hat_0 = x_0 + Z_in(c)``; ``c=None`` stands for the all-zero map."""
    if c is None:
        return x0
    if c.shape[-1] != x0.shape[-1]:
        raise ContractError(f"condition length {c.shape[-1]} != latent length {x0.shape[-1]}")
    return x0 + z_in(c)


# ---------------------------------------------------------------------------
# Branch


class AdaptorBranch(nn.Module):
    """Trainable control pathway for one variant.

    Holds no backbone parameters; the frozen backbone is passed to every call.
    """

    def __init__(self, backbone: Backbone, variant: AdaptorVariant, cond_channels: int = 12):
        super().__init__()
        self.variant = variant
        self.cond_channels = cond_channels
        self.structure = [(b.in_channels, b.out_channels, b.stride) for b in backbone.encoder]
        c = backbone.config.latent_channels
        self.input_conv = zero_conv(cond_channels, c)

        if variant.kind == CONTROLNET:
            self.blocks = clone_encoder(backbone)
        else:
            self.heads = nn.ModuleList(identity_conv(ci) for ci, _, _ in self.structure)
            if variant.tail:
                self.tails = nn.ModuleList(identity_conv(co) for _, co, _ in self.structure)
            if variant.residual:
                self.residuals = nn.ModuleList(zero_conv(ci, co) for ci, co, _ in self.structure)
        if variant.kind != INLINE:
            self.skip_convs = nn.ModuleList(zero_conv(co, co) for _, co, _ in self.structure)

    def check_compatible(self, backbone: Backbone) -> None:
        got = [(b.in_channels, b.out_channels, b.stride) for b in backbone.encoder]
        if got != self.structure:
            raise ConfigError("adaptor was built for a different backbone layout")

    def wrapped_block(self, backbone: Backbone, level: int, x: Tensor, emb: Tensor, ctx: Tensor) -> Tensor:
        """``[I_t](F_l(I_h(x), e)) + [Z_r(x)]`` for LiLAC kinds."""
        block = backbone.encoder[level]
        h = block(self.heads[level](x), emb, ctx)
        if self.variant.tail:
            h = self.tails[level](h)
        if self.variant.residual:
            r = x if block.stride == 1 else F.avg_pool1d(x, block.stride)
            h = h + self.residuals[level](r)
        return h

    def forward(self, backbone: Backbone, x0: Tensor, c: Tensor | None, emb: Tensor, ctx: Tensor) -> list[Tensor]:
        """Per-level skip deltas for a two-stream variant."""
        if self.variant.kind == INLINE:
            raise ConfigError("the inline variant has no separate branch; use inline_network")
        self.check_compatible(backbone)
        h = condition_input(x0, c, self.input_conv)
        deltas = []
        for level in range(len(self.structure)):
            if self.variant.kind == CONTROLNET:
                h = self.blocks[level](h, emb, ctx)
            else:
                h = self.wrapped_block(backbone, level, h, emb, ctx)
            deltas.append(self.skip_convs[level](h))
        return deltas

    def inline_network(self, backbone: Backbone, x0: Tensor, c: Tensor | None, emb: Tensor, ctx: Tensor) -> Tensor:
        """Single-pass network output with adaptor layers spliced into the encoder."""
        if self.variant.kind != INLINE:
            raise ConfigError("inline_network is only defined for lilac-star")
        self.check_compatible(backbone)
        h = condition_input(x0, c, self.input_conv)
        feats = []
        for level in range(len(self.structure)):
            h = self.wrapped_block(backbone, level, h, emb, ctx)
            feats.append(h)
        return backbone.decode(feats, emb)


def build_adaptor(backbone: Backbone, variant: AdaptorVariant | str, cond_channels: int = 12) -> AdaptorBranch:
    if isinstance(variant, str):
        variant = AdaptorVariant.from_name(variant)
    dtype = next(backbone.parameters()).dtype
    return AdaptorBranch(backbone, variant, cond_channels).to(dtype)


def adaptor_forward(branch: AdaptorBranch, backbone: Backbone, x0: Tensor, c: Tensor | None,
                    emb: Tensor, ctx: Tensor) -> list[Tensor]:
    return branch(backbone, x0, c, emb, ctx)


def controlled_network(backbone: Backbone, branch: AdaptorBranch):
    """Network callable for :meth:`Backbone.denoise` that applies the branch."""

    def run(x0: Tensor, emb: Tensor, ctx: Tensor, cond: Conditions) -> Tensor:
        if branch.variant.kind == INLINE:
            return branch.inline_network(backbone, x0, cond.control, emb, ctx)
        skips = backbone.encoder_forward(x0, emb, ctx)
        deltas = branch(backbone, x0, cond.control, emb, ctx)
        return backbone.decode([s + d for s, d in zip(skips, deltas)], emb, bottleneck=skips[-1])

    return run


def controlled_denoise(backbone: Backbone, branch: AdaptorBranch | None, x: Tensor, sigma,
                       cond: Conditions | None = None) -> Tensor:
    """Backbone denoiser with every decoder skip replaced by ``s_l + delta_l``."""
    if branch is None:
        return backbone.denoise(x, sigma, cond)
    return backbone.denoise(x, sigma, cond, network=controlled_network(backbone, branch))


def inline_forward(branch: AdaptorBranch, backbone: Backbone, x: Tensor, sigma,
                   cond: Conditions | None = None) -> Tensor:
    if branch.variant.kind != INLINE:
        raise ConfigError("inline_forward needs the lilac-star variant")
    return controlled_denoise(backbone, branch, x, sigma, cond)


# ---------------------------------------------------------------------------
# Parameter accounting


@dataclass
class ParamCensus:
    components: "OrderedDict[str, int]"

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def rows(self):
        yield from self.components.items()
        yield "total", self.total


def count_params(obj: nn.Module) -> ParamCensus:
    """Exact parameter counts grouped by top-level component."""
    comps: OrderedDict[str, int] = OrderedDict()
    for name, p in obj.named_parameters():
        top = name.split(".", 1)[0]
        comps[top] = comps.get(top, 0) + p.numel()
    return ParamCensus(comps)
