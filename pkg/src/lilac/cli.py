"""Command-line entry point: ``lilac <subcommand>``.

Exit codes: 0 success, 1 contract/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .adaptors import VARIANTS, build_adaptor, controlled_denoise, count_params
from .backbone import Backbone, Conditions, build_backbone, sample
from .conditions import ConditionMap, read_condition_csv, write_condition_csv, resample_condition, condition_map
from .config import RunConfig, load_config
from .data import LatentCodec, dataset_from_config, load_dataset, save_dataset
from .evaluation import (
    PARAM_COLUMNS,
    REPORT_COLUMNS,
    build_conditions,
    eval_adherence,
    eval_conflict,
    format_report,
    report_params,
    write_report,
)
from .numerics import ConfigError, ContractError, configure_determinism, dtype_for, grad_check, make_rng
from .trainer import (
    adaptor_checkpoint,
    backbone_checkpoint,
    load_adaptor,
    load_backbone,
    to_tensors,
    train_adaptor,
    train_backbone,
    write_log,
)

log = logging.getLogger("lilac")

CONDITION_CHOICES = ("chroma", "thresh", "chord")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML config file")
    p.add_argument("--seed", type=int, default=d, help="override every seed in the config")
    p.add_argument("--out", default=d if suppress else "runs", help="output directory")
    p.add_argument("--precision", choices=["f32", "f64"], default=d if suppress else "f32")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lilac", description="Lightweight control adaptors for a frozen diffusion backbone.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def cmd(name, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    cmd("gen-data", "write train/test synthetic datasets")
    p = cmd("train-backbone", "pre-train the desk-scale backbone")
    p.add_argument("--steps", type=int)
    p = cmd("train-adaptor", "train an adaptor branch on a frozen backbone")
    p.add_argument("--variant", choices=list(VARIANTS), required=True)
    p.add_argument("--condition", choices=CONDITION_CHOICES, default="chroma")
    p.add_argument("--backbone")
    p.add_argument("--steps", type=int)
    p = cmd("sample", "generate one latent and write its decoded chroma")
    p.add_argument("--backbone")
    p.add_argument("--adaptor")
    p.add_argument("--index", type=int, default=0, help="test-set sample providing the conditions")
    p.add_argument("--condition-file", help="CSV condition map overriding the test sample's")
    p.add_argument("--style", type=int, help="style id (-1 for none)")
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-weight", type=float)
    p = cmd("eval-adherence", "cMSE / CS of conditioned generations")
    p.add_argument("--backbone")
    p.add_argument("--adaptor", action="append", default=[])
    p = cmd("eval-conflict", "aligned / misaligned / none style study")
    p.add_argument("--setting", choices=["aligned", "misaligned", "none"], required=True)
    p.add_argument("--backbone")
    p.add_argument("--adaptor", action="append", default=[])
    p = cmd("params", "parameter census CSV")
    p.add_argument("--variant", action="append", choices=list(VARIANTS))
    p = cmd("init-check", "assert initialization equivalence")
    p.add_argument("--variant", action="append", choices=list(VARIANTS))
    p.add_argument("--backbone")
    p.add_argument("--inputs", type=int, default=50)
    cmd("grad-check", "finite-difference gradient check on a toy config")
    return parser


# ---------------------------------------------------------------------------
# Helpers


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.with_precision(args.precision)


def _codec(cfg: RunConfig) -> LatentCodec:
    return LatentCodec(cfg.backbone.latent_channels, cfg.data.num_styles, cfg.data.seed,
                       cfg.data.texture_amplitude, cfg.data.style_blend)


def _dataset(cfg: RunConfig, out: Path, split: int):
    path = out / ("train.npz" if split == 0 else "test.npz")
    if path.exists():
        return load_dataset(path)
    return dataset_from_config(cfg.data, split)


def _backbone(cfg: RunConfig, args) -> Backbone:
    path = Path(args.backbone) if getattr(args, "backbone", None) else Path(args.out) / "backbone.llck"
    if path.exists():
        return load_backbone(path, args.precision)
    raise FileNotFoundError(f"no backbone checkpoint at {path}; run train-backbone first")


def _header(cfg: RunConfig) -> dict:
    return {"seed": cfg.eval.seed, "config_digest": cfg.digest()}


def _check_styles(cfg: RunConfig) -> None:
    if cfg.backbone.num_styles != cfg.data.num_styles:
        raise ConfigError("[backbone] num_styles must equal [data] num_styles")


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, name in ((0, "train.npz"), (1, "test.npz")):
        save_dataset(out / name, dataset_from_config(cfg.data, split), cfg.data)
    print(f"wrote {out / 'train.npz'} ({cfg.data.n}) and {out / 'test.npz'} ({cfg.data.test_n})")
    return 0


def cmd_train_backbone(cfg: RunConfig, args) -> int:
    _check_styles(cfg)
    out = Path(args.out)
    tcfg = cfg.backbone_train if args.steps is None else replace(
        cfg.backbone_train, steps=args.steps, warmup_steps=min(cfg.backbone_train.warmup_steps, args.steps - 1))
    data = to_tensors(_dataset(cfg, out, 0), _codec(cfg))
    result = train_backbone(cfg.backbone, tcfg, data)
    ckpt_io.save(out / "backbone.llck", backbone_checkpoint(result.module, tcfg))
    write_log(out / "backbone_log.csv", result.log)
    print(f"backbone digest {result.module.digest()[:16]} final loss {result.log[-1]['loss']:.4f}")
    return 0


def cmd_train_adaptor(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    backbone = _backbone(cfg, args)
    tcfg = cfg.train if args.steps is None else replace(
        cfg.train, steps=args.steps, warmup_steps=min(cfg.train.warmup_steps, args.steps - 1))
    data = to_tensors(_dataset(cfg, out, 0), _codec(cfg), args.condition)
    result = train_adaptor(backbone, args.variant, tcfg, data, dump_path=out / "diverged.llck")
    stem = f"adaptor_{args.variant}_{args.condition}"
    ckpt_io.save(out / f"{stem}.llck", adaptor_checkpoint(result.module, backbone, args.condition, tcfg,
                                                          result.optimizer))
    write_log(out / f"{stem}_log.csv", result.log)
    print(f"wrote {out / (stem + '.llck')} final loss {result.log[-1]['loss']:.4f}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    backbone = _backbone(cfg, args)
    codec = _codec(cfg)
    test = _dataset(cfg, out, 1)
    if not 0 <= args.index < len(test):
        raise ContractError(f"--index must lie in [0, {len(test)})")
    s = test[args.index]
    dtype = next(backbone.parameters()).dtype
    branch, condition = None, None
    if args.adaptor:
        branch, meta = load_adaptor(args.adaptor, backbone)
        condition = meta["condition"]
    style = [s.style_id if args.style is None else args.style]
    cond = build_conditions([s], codec, dtype, style=style, use_context=True, condition=condition)
    if args.condition_file:
        cmap = read_condition_csv(args.condition_file)
        cmap = resample_condition(cmap, s.note_roll.shape[1])
        cond.control = torch.from_numpy(cmap.values[None]).to(dtype)
    steps = args.steps or cfg.eval.steps
    w = cfg.eval.cfg_weight if args.cfg_weight is None else args.cfg_weight
    z = sample(backbone, branch, cond, (1, codec.channels, s.note_roll.shape[1]), steps, w, cfg.eval.seed)
    chroma, scores = codec.decode_probe(z.double().numpy()[0])
    path = out / f"sample_{args.index}.csv"
    out.mkdir(parents=True, exist_ok=True)
    write_condition_csv(path, ConditionMap(chroma, "chroma", cfg.backbone.frame_rate_hz))
    err = float(np.mean((chroma - s.note_roll) ** 2))
    print(f"wrote {path}; cmse vs test sample {err:.4f}; style scores {np.round(scores.mean(axis=1), 3)}")
    return 0


def _adaptors(backbone, paths):
    for p in paths:
        branch, meta = load_adaptor(p, backbone)
        yield branch, meta["condition"], Path(p).stem


def cmd_eval_adherence(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    backbone = _backbone(cfg, args)
    codec = _codec(cfg)
    test = _dataset(cfg, out, 1)
    rows = [
        eval_adherence(backbone, None, test, codec, cfg.eval, use_style=False, use_context=False),
        eval_adherence(backbone, None, test, codec, cfg.eval, use_style=True, use_context=True),
    ]
    for branch, condition, name in _adaptors(backbone, args.adaptor):
        rows.append(eval_adherence(backbone, branch, test, codec, cfg.eval, condition=condition, name=name))
    write_report(out / "eval_adherence.csv", rows, REPORT_COLUMNS, _header(cfg))
    print(format_report(rows, REPORT_COLUMNS, _header(cfg)), end="")
    return 0


def cmd_eval_conflict(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    backbone = _backbone(cfg, args)
    codec = _codec(cfg)
    test = _dataset(cfg, out, 1)
    rows = [eval_conflict(backbone, None, test, codec, args.setting, cfg=cfg.eval, name="backbone")]
    for branch, condition, name in _adaptors(backbone, args.adaptor):
        rows.append(eval_conflict(backbone, branch, test, codec, args.setting, condition, cfg.eval, name))
    write_report(out / f"eval_conflict_{args.setting}.csv", rows, REPORT_COLUMNS, _header(cfg))
    print(format_report(rows, REPORT_COLUMNS, _header(cfg)), end="")
    return 0


def cmd_params(cfg: RunConfig, args) -> int:
    backbone = build_backbone(cfg.backbone, cfg.train.seed)
    rows = report_params(backbone, args.variant or list(VARIANTS))
    print(format_report(rows, PARAM_COLUMNS, {"seed": cfg.train.seed, "config_digest": cfg.digest()}), end="")
    return 0


def init_equivalence(backbone: Backbone, variant: str, inputs: int, seed: int, frames: int = 32) -> float:
    """Largest |controlled - frozen| over random inputs for a fresh branch."""
    dtype = next(backbone.parameters()).dtype
    branch = build_adaptor(backbone, variant)
    rng = make_rng(seed, 0x1C)
    cfg = backbone.config
    worst = 0.0
    with torch.no_grad():
        for _ in range(inputs):
            x = torch.from_numpy(rng.standard_normal((2, cfg.latent_channels, frames))).to(dtype)
            sigma = torch.from_numpy(np.exp(rng.normal(-1.2, 1.2, 2))).to(dtype)
            cond = Conditions(
                torch.from_numpy(rng.integers(-1, cfg.num_styles, 2)),
                torch.from_numpy(rng.standard_normal((2, cfg.context_channels, frames))).to(dtype),
                None,
                torch.from_numpy(rng.random((2, 12, frames))).to(dtype),
            )
            ref = backbone.denoise(x, sigma, cond)
            got = controlled_denoise(backbone, branch, x, sigma, cond)
            scale = float(ref.abs().max()) or 1.0
            worst = max(worst, float((got - ref).abs().max()) / scale)
    return worst


def cmd_init_check(cfg: RunConfig, args) -> int:
    backbone = _backbone(cfg, args) if args.backbone else build_backbone(cfg.backbone, cfg.train.seed)
    backbone.to(dtype_for(args.precision))
    tol = 0.0 if args.precision == "f64" else 1e-6
    ok = True
    for variant in args.variant or list(VARIANTS):
        err = init_equivalence(backbone, variant, args.inputs, cfg.train.seed, cfg.data.frames)
        passed = err <= tol
        ok &= passed
        print(f"{variant}: max relative deviation {err:.3g} ({'ok' if passed else 'FAIL'})")
    return 0 if ok else 1


def toy_grad_check(seed: int = 0) -> float:
    """FD check of the full LiLAC^HTR loss on a 2-level toy backbone (float64)."""
    from .backbone import BackboneConfig
    from .trainer import weighted_denoising_loss

    cfg = BackboneConfig(latent_channels=12, levels=(4, 8), embed_dim=4, num_styles=2, fourier_features=4)
    backbone = build_backbone(cfg, seed).double().requires_grad_(False)
    branch = build_adaptor(backbone, "htr")
    rng = make_rng(seed, 0x6C)
    with torch.no_grad():
        for p in branch.parameters():
            p.add_(torch.from_numpy(0.1 * rng.standard_normal(p.shape)))
    x = torch.from_numpy(rng.standard_normal((2, 12, 4)))
    cond = Conditions(torch.tensor([0, 1]), torch.from_numpy(rng.standard_normal((2, 12, 4))), None,
                      torch.from_numpy(rng.random((2, 12, 4))))
    sigma = torch.tensor([0.3, 1.7], dtype=torch.float64)
    noise = torch.from_numpy(rng.standard_normal((2, 12, 4)))

    def fn():
        return weighted_denoising_loss(lambda xn, s, c: controlled_denoise(backbone, branch, xn, s, c),
                                       x, cond, sigma, noise)

    return grad_check(fn, list(branch.parameters()))


def cmd_grad_check(cfg: RunConfig, args) -> int:
    err = toy_grad_check(cfg.train.seed)
    ok = err <= 1e-4
    print(f"LiLAC^HTR toy loss: max relative error {err:.3g} ({'ok' if ok else 'FAIL'})")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "train-adaptor": cmd_train_adaptor,
    "sample": cmd_sample,
    "eval-adherence": cmd_eval_adherence,
    "eval-conflict": cmd_eval_conflict,
    "params": cmd_params,
    "init-check": cmd_init_check,
    "grad-check": cmd_grad_check,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lilac: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    configure_determinism()
    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ContractError, ConfigError) as exc:
        print(f"lilac: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ckpt_io.CheckpointError) as exc:
        print(f"lilac: I/O error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
