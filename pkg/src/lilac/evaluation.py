"""Adherence, conflict and parameter-census evaluations.

Generated latents are decoded with the codec's exact probe, so chroma
adherence (cMSE) and style adherence (cosine similarity between the target
style one-hot and the time-averaged decoded style scores) are computed
without any learned feature extractor.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adaptors import VARIANTS, AdaptorBranch, build_adaptor, count_params
from .backbone import Backbone, Conditions, sample
from .conditions import condition_map
from .data import LatentCodec, SyntheticSample
from .numerics import ConfigError, make_rng

SETTINGS = ("aligned", "misaligned", "none")


@dataclass(frozen=True)
class EvalConfig:
    steps: int = 30
    cfg_weight: float = 1.0
    seed: int = 0
    batch: int = 200


@dataclass
class EvalRow:
    model: str
    variant: str
    condition: str
    setting: str
    params: int
    cmse: float
    cs: float
    n: int


REPORT_COLUMNS = [f.name for f in fields(EvalRow)]
PARAM_COLUMNS = ["variant", "params", "ratio_to_controlnet"]


def cs_analog(style_scores: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Per-sample cosine similarity of the mean style scores to the target one-hot."""
    mean = style_scores.mean(axis=-1)
    norms = np.linalg.norm(mean, axis=-1)
    picked = mean[np.arange(len(targets)), np.asarray(targets)]
    return np.divide(picked, norms, out=np.zeros_like(picked), where=norms > 0)


def derangement(n: int, seed: int) -> np.ndarray:
    """Seeded pairing with no fixed points: rotate by one along a random cycle."""
    if n < 2:
        raise ConfigError("a derangement needs at least 2 samples")
    order = make_rng(seed, 0xDE).permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner


def _tensor(a, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def generate(backbone: Backbone, branch: AdaptorBranch | None, cond: Conditions, n: int, channels: int,
             frames: int, cfg: EvalConfig) -> np.ndarray:
    """Sample ``n`` latents in chunks of ``cfg.batch``; chunk ``k`` uses seed path ``(seed, k)``."""
    out = []
    for k, start in enumerate(range(0, n, cfg.batch)):
        idx = slice(start, min(n, start + cfg.batch))
        sub = cond.select(idx)
        size = idx.stop - idx.start
        z = sample(backbone, branch, sub, (size, channels, frames), cfg.steps, cfg.cfg_weight,
                   seed=int(make_rng(cfg.seed, k).integers(2**31)))
        out.append(z.double().numpy())
    return np.concatenate(out)


def build_conditions(samples: Sequence[SyntheticSample], codec: LatentCodec, dtype, *, style=None,
                     use_context: bool = False, condition: str | None = None,
                     control_from: Sequence[SyntheticSample] | None = None) -> Conditions:
    """Conditions for a test batch.

    ``style`` overrides per-sample style ids (-1 = null); ``control_from``
    supplies the samples the control maps are extracted from.
    """
    styles = np.array([s.style_id for s in samples]) if style is None else np.asarray(style)
    ctx = None
    if use_context:
        ctx = _tensor(np.stack([codec.encode_context(s.context_roll) for s in samples]), dtype)
    control = None
    if condition is not None:
        source = samples if control_from is None else control_from
        control = _tensor(np.stack([condition_map(condition, s.note_roll, s.chord_truth).values
                                    for s in source]), dtype)
    return Conditions(torch.as_tensor(styles, dtype=torch.long), ctx, None, control)


def _score(z: np.ndarray, samples, codec: LatentCodec, targets) -> tuple[float, float]:
    chroma, scores = codec.decode_probe(z)
    truth = np.stack([s.note_roll for s in samples])
    cm = float(np.mean((chroma - truth) ** 2))
    cs = float(np.mean(cs_analog(scores, targets)))
    return cm, cs


def _dtype(backbone: Backbone):
    return next(backbone.parameters()).dtype


def eval_adherence(backbone: Backbone, branch: AdaptorBranch | None, samples: Sequence[SyntheticSample],
                   codec: LatentCodec, cfg: EvalConfig = EvalConfig(), condition: str = "chroma",
                   use_style: bool = True, use_context: bool = True, name: str | None = None) -> EvalRow:
    """cMSE / CS of generations conditioned on each test sample's own signals.

    With ``branch=None`` the control is absent; pass ``use_style=False,
    use_context=False`` for the fully unconditioned baseline.
    """
    n = len(samples)
    style = None if use_style else np.full(n, -1)
    cond = build_conditions(samples, codec, _dtype(backbone), style=style, use_context=use_context,
                            condition=condition if branch is not None else None)
    frames = samples[0].note_roll.shape[1]
    z = generate(backbone, branch, cond, n, codec.channels, frames, cfg)
    cm, cs = _score(z, samples, codec, [s.style_id for s in samples])
    variant = branch.variant.name if branch is not None else "none"
    params = count_params(branch).total if branch is not None else 0
    label = name or (variant if branch is not None else
                     "backbone" + ("+style" if use_style else "") + ("+context" if use_context else ""))
    return EvalRow(label, variant, condition if branch is not None else "none", "aligned", params, cm, cs, n)


def eval_conflict(backbone: Backbone, branch: AdaptorBranch | None, samples: Sequence[SyntheticSample],
                  codec: LatentCodec, setting: str, condition: str = "chroma", cfg: EvalConfig = EvalConfig(),
                  name: str | None = None) -> EvalRow:
    """Style/control agreement study.

    * aligned: style and control from the same sample
    * misaligned: the sample's style, control from a deranged partner
    * none: style omitted, the sample's own control

    Every setting keeps the per-sample noise seeds, so settings differ only in
    the conditions. CS is measured against each sample's own style id and
    cMSE against the control's source roll.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"setting must be one of {SETTINGS}")
    n = len(samples)
    own = np.array([s.style_id for s in samples])
    source = list(samples)
    style = own
    if setting == "misaligned":
        source = [samples[j] for j in derangement(n, cfg.seed)]
    elif setting == "none":
        style = np.full(n, -1)
    cond = build_conditions(samples, codec, _dtype(backbone), style=style,
                            condition=condition if branch is not None else None, control_from=source)
    frames = samples[0].note_roll.shape[1]
    z = generate(backbone, branch, cond, n, codec.channels, frames, cfg)
    cm, cs = _score(z, source, codec, own)
    variant = branch.variant.name if branch is not None else "none"
    params = count_params(branch).total if branch is not None else 0
    return EvalRow(name or variant, variant, condition if branch is not None else "none", setting, params, cm, cs, n)


def report_params(backbone: Backbone, variants: Sequence[str] = tuple(VARIANTS)) -> list[dict]:
    reference = count_params(build_adaptor(backbone, "controlnet")).total
    rows = [{"variant": "backbone", "params": count_params(backbone).total,
             "ratio_to_controlnet": count_params(backbone).total / reference}]
    for v in variants:
        total = count_params(build_adaptor(backbone, v)).total
        rows.append({"variant": v, "params": total, "ratio_to_controlnet": total / reference})
    return rows


# ---------------------------------------------------------------------------
# CSV


def format_report(rows: Sequence, columns: Sequence[str], header: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(asdict(row) if hasattr(row, "__dataclass_fields__") else row)
    return buf.getvalue()


def write_report(path, rows, columns, header: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(rows, columns, header))


def read_report(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    return header, list(csv.DictReader(lines[1:]))
