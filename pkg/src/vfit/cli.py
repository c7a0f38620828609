"""Command-line entry point: ``vfit {gen-data,train,interpolate,eval,bench}``.

Every subcommand takes ``--config`` (JSON) plus ``--set section.key=value``
overrides and writes ``resolved_config.json`` into its output directory.
Relative output directories are placed under ``$VFIT_OUTPUT_ROOT`` when set.

Exit codes: 0 ok, 1 unexpected failure, 2 configuration error, 3 data or
checkpoint error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import DataError, FRAME_PATTERN, gen_synthetic, load_quadruplet, load_septuplet, write_frame
from .deform import BACKEND
from .evalbench import DEFAULT_SWEEP, bench_attention, evaluate, load_model, plot_bench, write_bench_csv
from .training import NumericError, build_model, dtype_of, fit

log = logging.getLogger("vfit")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _out_dir(arg: str) -> Path:
    p = Path(arg)
    root = os.environ.get("VFIT_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = config_mod.load(args.config, args.set or [])
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    snapshot["command"] = args.command
    (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
    return cfg, out


def cmd_gen_data(args) -> int:
    cfg, out = _prepare(args)
    params = dict(cfg.data.synthetic or {})
    manifest = gen_synthetic(params, out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    manifest = args.manifest or cfg.data.manifest
    if manifest is None:
        raise ConfigError("no manifest: pass --manifest or set data.manifest")
    res = fit(cfg.model, cfg.train, manifest, out, resume=args.resume)
    print(f"trained {res.steps} steps; checkpoint {res.checkpoint}")
    return 0


def _model_for(cfg: RunConfig, checkpoint: str | None):
    path = checkpoint or cfg.checkpoint
    if path is None:
        log.warning("no checkpoint given; using freshly initialised weights (seed %d)", cfg.train.seed)
        return build_model(cfg.model, cfg.train.seed, dtype_of(cfg.train)).eval()
    return load_model(path)


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / FRAME_PATTERN.format(1)).exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / FRAME_PATTERN.format(1)).exists())
    if not dirs:
        raise DataError(f"no frame sequences under {root}")
    return dirs


def cmd_interpolate(args) -> int:
    cfg = config_mod.load(args.config, args.set or [])
    frames_root = Path(args.frames)
    if not frames_root.is_dir():
        raise DataError(f"frames directory {frames_root} does not exist")
    seqs = _sequence_dirs(frames_root)
    model = _model_for(cfg, args.checkpoint)
    cfg, out = _prepare(args)
    dtype = next(model.parameters()).dtype
    for seq in seqs:
        if (seq / FRAME_PATTERN.format(7)).exists():
            inputs = load_septuplet(seq).inputs
        else:
            inputs = load_quadruplet(seq)
        dest = out if seq == frames_root else out / seq.name
        dest.mkdir(parents=True, exist_ok=True)
        with torch.no_grad():
            pred, aux = model(torch.from_numpy(inputs).to(dtype)[None], return_all=True)
        write_frame(dest / "pred_0.5.png", pred[0].clamp(0, 1))
        if args.dump_kernels:
            arrays = {}
            for l, part in enumerate(aux["synthesis"]):
                k = part["kernel"]
                arrays[f"l{l}/weight"] = k.weight.numpy()
                arrays[f"l{l}/alpha"] = k.alpha.numpy()
                arrays[f"l{l}/beta"] = k.beta.numpy()
                arrays[f"l{l}/masks"] = part["masks"].numpy()
            ckpt_io.save_debug(dest / "synthesis_debug.npz", arrays)
        print(dest / "pred_0.5.png")
    return 0


def cmd_eval(args) -> int:
    cfg = config_mod.load(args.config, args.set or [])
    manifest = args.manifest or cfg.data.manifest
    if manifest is None:
        raise ConfigError("no manifest: pass --manifest or set data.manifest")
    model = None if args.ground_truth else _model_for(cfg, args.checkpoint)
    report = evaluate(model, manifest)
    cfg, out = _prepare(args)
    report.write_csv(out / "metrics.csv")
    lines = [report.summary()]
    for tag, sub in sorted(report.by_tag().items()):
        if tag:
            lines.append(f"[{tag}] {sub.summary()}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_bench(args) -> int:
    cfg, out = _prepare(args)
    rows = bench_attention(DEFAULT_SWEEP)
    write_bench_csv(rows, out / "attention_bench.csv")
    plot_bench(rows, out / "attention_bench.png")
    bad = [r for r in rows if r["pairs_analytic"] != r["pairs_measured"]]
    for r in rows:
        print(f"T={r['T']} M={r['M']} {r['H']}x{r['W']} {r['mode']:>7}: "
              f"{r['pairs_analytic']} analytic, {r['pairs_measured']} measured")
    if args.kernels:
        from .kernel_bench import run as run_kernels

        res = run_kernels()
        (out / "kernel_bench.json").write_text(json.dumps(res, indent=2))
        print(json.dumps(res, indent=2))
    return 0 if not bad else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vfit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_out=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", required=need_out, help="output directory")

    sp = sub.add_parser("gen-data", help="write a synthetic septuplet dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("interpolate", help="synthesise middle frames")
    common(sp)
    sp.add_argument("--frames", required=True, help="sequence directory or directory of sequences")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dump-kernels", action="store_true", help="also save predicted kernels and masks")
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("eval", help="PSNR/SSIM over a manifest")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoint")
    sp.add_argument("--ground-truth", action="store_true", help="score targets against themselves")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="attention pair-count benchmark")
    common(sp)
    sp.add_argument("--kernels", action="store_true", help="also time compiled vs torch deformable kernel")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("deformable kernel backend: %s", BACKEND)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ckpt_io.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
