"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure (non-finite loss, failed gradient check).

``HDRKIT_SEED`` overrides the default seed of seed-consuming commands;
an explicit ``--seed`` flag still wins over the environment.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .checkpoint import load_checkpoint
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    ShapeError,
    TrainingError,
)
from .exposure import bracket
from .imgio import load_hdr, load_ldr, save_hdr, save_ldr
from .tonemap import ReinhardParams, reinhard
from .trainer import (
    TrainConfig,
    build_index,
    evaluate,
    infer_hdr,
    infer_iterations,
    loss_log_csv,
    parse_config_file,
    split_dataset,
    synth_pair,
    train,
)

_CONVERT_SUFFIXES = (".hdr", ".pfm")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the exit contract reserves 2 for data
    errors, so usage failures are rethrown and mapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: {message}")


def _env_seed() -> int | None:
    raw = os.environ.get("HDRKIT_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"HDRKIT_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(flag: int | None, fallback: int) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    if env is not None:
        return env
    return fallback


def _derive_seed(seed: int, index: int) -> int:
    """A stable, well-separated per-sample seed."""
    return int(np.random.SeedSequence(seed, spawn_key=(2, index)).generate_state(1)[0])


def _ensure_parent(path) -> Path:
    p = Path(path)
    if p.parent != Path(""):
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    config = parse_config_file(args.config)
    seed = _resolve_seed(args.seed, config.seed)
    config = dataclasses.replace(config, seed=seed)

    if args.synth is not None:
        if args.synth < 1:
            raise ConfigError(f"--synth needs at least 1 pair, got {args.synth}")
        samples = [synth_pair(_derive_seed(config.seed, i),
                              config.size, config.size)
                   for i in range(args.synth)]
    else:
        index = build_index(args.data)
        if len(index.pairs) >= 5:
            index = split_dataset(index, config.seed)
            pairs = [p for p in index.pairs if p.split == "train"]
        else:
            pairs = index.pairs
        if not pairs:
            raise ConfigError(f"no training pairs found under {args.data}")
        samples = [(load_ldr(p.ldr_path), load_hdr(p.hdr_path)) for p in pairs]

    out = _ensure_parent(args.out)
    ckpt, log = train(config, samples, out_path=out)
    log_path = out.with_suffix(".loss.csv")
    log_path.write_text(loss_log_csv(log))
    print(f"trained {config.epochs} epochs on {len(samples)} pairs, "
          f"final mean loss {log[-1].mean_loss:.6g}")
    print(f"checkpoint: {out}")
    print(f"loss log: {log_path}")
    return 0


def _cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ldr = load_ldr(args.input)
    if args.trace_dir is not None:
        trace_dir = Path(args.trace_dir)
        trace_dir.mkdir(parents=True, exist_ok=True)
        outputs = infer_iterations(ckpt, ldr)
        for t, hdr in enumerate(outputs, start=1):
            save_hdr(trace_dir / f"iter_{t}.hdr", hdr)
        print(f"trace: {len(outputs)} iteration outputs in {trace_dir}")
        final = outputs[-1]
    else:
        final = infer_hdr(ckpt, ldr)
    save_hdr(_ensure_parent(args.out), final)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    index = build_index(args.data)
    if not index.pairs:
        raise ConfigError(f"no ldr/hdr pairs found under {args.data}")
    report, skipped = evaluate(ckpt, index.pairs)
    _ensure_parent(args.report).write_text(report.to_csv())
    if report.rows:
        print(f"scored {len(report.rows)} images: "
              f"mean psnr {report.mean_psnr_db:.3f} dB, "
              f"mean ssim {report.mean_ssim:.5f}")
    print(f"report: {args.report}")
    for path, reason in skipped:
        print(f"skipped: {path} ({reason})", file=sys.stderr)
    return 2 if skipped else 0


def _cmd_bracket(args) -> int:
    stack = bracket(load_ldr(args.input))
    for tag, image in (("m2", stack.ev_minus2), ("0", stack.ev_0),
                       ("p2", stack.ev_plus2)):
        path = f"{args.prefix}{tag}.ppm"
        save_ldr(_ensure_parent(path), image)
        print(f"wrote {path}")
    return 0


def _cmd_tonemap(args) -> int:
    params = ReinhardParams(key=args.key, delta=args.delta, white=args.white)
    save_ldr(_ensure_parent(args.output), reinhard(load_hdr(args.input), params))
    print(f"wrote {args.output}")
    return 0


def _cmd_convert(args) -> int:
    src, dst = Path(args.src), Path(args.dst)
    for p in (src, dst):
        if p.suffix.lower() not in _CONVERT_SUFFIXES:
            raise ConfigError(
                f"convert handles {', '.join(_CONVERT_SUFFIXES)} files, got {p.name}")
    save_hdr(_ensure_parent(dst), load_hdr(src))
    print(f"wrote {dst}")
    return 0


def _cmd_gradcheck(args) -> int:
    m = re.fullmatch(r"(\d+)x(\d+)", args.size)
    if m is None:
        raise ConfigError(f"--size must look like 8x8, got {args.size!r}")
    height, width = int(m.group(1)), int(m.group(2))
    seed = _resolve_seed(args.seed, 0)
    report = gradcheck_mod.run_gradcheck(
        height=height, width=width, channels=args.channels,
        iterations=args.iters, growth=args.growth, seed=seed)
    for entry in report.entries:
        print(f"{entry.name} {entry.rel_error:.3e}")
    print(f"checked {len(report.entries)} parameter tensors, "
          f"max relative error {report.max_rel_error:.3e} "
          f"(tolerance {report.tolerance:g}, draw attempts {report.attempts})")
    if not report.passed:
        print("gradcheck FAILED", file=sys.stderr)
        return 3
    return 0


def _cmd_ablate(args) -> int:
    if args.config is not None:
        base = parse_config_file(args.config)
    else:
        base = TrainConfig()
    seed = _resolve_seed(args.seed, base.seed)
    # one epoch over one synthetic pair = exactly one optimizer step
    config = dataclasses.replace(
        base,
        seed=seed,
        epochs=1,
        batch_size=1,
        use_skip1=base.use_skip1 and not args.no_skip1,
        use_skip2=base.use_skip2 and not args.no_skip2,
        lambda1=0.0 if args.no_l1 else base.lambda1,
        lambda2=0.0 if args.no_lper else base.lambda2,
    )
    sample = synth_pair(_derive_seed(config.seed, 0), config.size, config.size)
    _, log = train(config, [sample])

    lines = [f"{f.name}={getattr(config, f.name)!r}"
             for f in dataclasses.fields(TrainConfig)]
    lines.append(f"step_mean_loss={log[-1].mean_loss!r}")
    manifest = "\n".join(lines) + "\n"
    if args.out is not None:
        _ensure_parent(args.out).write_text(manifest)
        print(f"manifest: {args.out}")
    else:
        print(manifest, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="hdrkit",
        description="HDR image reconstruction from a single LDR exposure.",
        epilog="Exit codes: 0 success, 1 usage/config error, 2 data/format "
               "error, 3 numerical failure. HDRKIT_SEED overrides default "
               "seeds.")
    sub = parser.add_subparsers(dest="subcommand", required=True,
                                metavar="subcommand")

    p = sub.add_parser("train", help="train a reconstruction network",
                       description="Train on ldr/hdr pairs and write a "
                                   "checkpoint plus a <out>.loss.csv log.")
    p.add_argument("--config", required=True,
                   help="key=value training configuration file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of paired *.ppm/*.hdr files")
    src.add_argument("--synth", type=int, metavar="N",
                     help="train on N generated scenes instead of files")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="reconstruct HDR from one LDR image",
                       description="Bracket the input, run the network and "
                                   "write linear radiance (Radiance RGBE).")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--in", dest="input", required=True, metavar="LDR",
                   help="input PPM image")
    p.add_argument("--out", required=True, metavar="HDR",
                   help="output .hdr path")
    p.add_argument("--trace-dir", metavar="DIR",
                   help="also dump every iteration output as iter_<t>.hdr")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset",
                       description="Write a CSV of per-image PSNR/SSIM plus "
                                   "a mean row; unreadable pairs are "
                                   "skipped and reported (exit 2).")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True,
                   help="directory of paired *.ppm/*.hdr files")
    p.add_argument("--report", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bracket", help="synthesize an exposure stack",
                       description="Write <prefix>m2.ppm, <prefix>0.ppm and "
                                   "<prefix>p2.ppm exposure variants.")
    p.add_argument("input", help="input PPM image")
    p.add_argument("prefix", help="output filename prefix")
    p.set_defaults(func=_cmd_bracket)

    p = sub.add_parser("tonemap", help="tone map HDR to a display PPM",
                       description="Photographic operator: luminance scaled "
                                   "by key/log-average, compressed with "
                                   "x/(1+x); chroma preserved by ratio.")
    p.add_argument("input", help="input .hdr or .pfm image")
    p.add_argument("output", help="output PPM path")
    p.add_argument("--key", type=float, default=0.18,
                   help="target mid-grey (default 0.18)")
    p.add_argument("--white", type=float, default=None,
                   help="luminance mapped to pure white (default: none, "
                        "plain x/(1+x) curve)")
    p.add_argument("--delta", type=float, default=1e-6,
                   help="log-average stabilizer (default 1e-6)")
    p.set_defaults(func=_cmd_tonemap)

    p = sub.add_parser("convert", help="convert between PFM and RGBE",
                       description="Lossless up to RGBE quantization "
                                   "(shared-exponent 8-bit mantissas).")
    p.add_argument("src", help="source .hdr or .pfm file")
    p.add_argument("dst", help="destination .hdr or .pfm file")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("gradcheck", help="verify gradients numerically",
                       description="Compare every parameter gradient of the "
                                   "full pipeline against central finite "
                                   "differences in float64; exit 3 above "
                                   "tolerance 1e-4.")
    p.add_argument("--size", default="8x8", help="input extent HxW (default 8x8)")
    p.add_argument("--channels", type=int, default=8,
                   help="feature channels (default 8)")
    p.add_argument("--iters", type=int, default=2,
                   help="feedback iterations (default 2)")
    p.add_argument("--growth", type=int, default=4,
                   help="dense-block growth channels (default 4)")
    p.add_argument("--seed", type=int, help="draw seed (default 0)")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run one ablated training step",
                       description="Apply ablation switches, run a single "
                                   "optimizer step on a generated scene and "
                                   "emit a key=value manifest of the active "
                                   "configuration.")
    p.add_argument("--no-skip1", action="store_true",
                   help="drop the first-level feature skip")
    p.add_argument("--no-skip2", action="store_true",
                   help="drop the second-level feature skip")
    p.add_argument("--no-l1", action="store_true",
                   help="disable the pixel reconstruction loss")
    p.add_argument("--no-lper", action="store_true",
                   help="disable the perceptual loss")
    p.add_argument("--config", help="base key=value configuration file "
                                    "(default: built-in desk scale)")
    p.add_argument("--out", help="manifest output path (default stdout)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, ShapeError, DomainError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())
