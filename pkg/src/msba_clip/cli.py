"""Command-line entry point: ``msba-clip <subcommand> [--config C] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import ImageCache, SyntheticConfig, generate_synthetic_corpus, load_manifest, write_image
from .evaluate import DEFAULT_VARIANTS, ablation_run, evaluate, export_intensity_maps, robustness_sweep
from .msba import msba_sample, write_png_map, write_raw_map
from .train import TrainConfig, train

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file mirroring TrainConfig")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=Path, default=Path("out"))

    parser = _Parser(prog="msba-clip", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic forgery corpus")
    p.add_argument("--num-groups", type=int, default=400)
    p.add_argument("--image-size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--num-methods", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=8)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--manifest", type=Path, required=True)

    for name in ("eval", "robustness"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--manifest", type=Path, required=True)
        p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", parents=[common], help="leave-one-method-out ablation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--held-out", type=int, nargs="*", default=None)

    p = sub.add_parser("export-maps", parents=[common], help="dump predicted/ground-truth intensity maps")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ids", nargs="+", required=True)

    p = sub.add_parser("augment-preview", parents=[common], help="write a few MSBA samples")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--split", default="train")
    return parser


def _config(args) -> TrainConfig:
    if args.config is None:
        cfg = TrainConfig()
    else:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.updated({"seed": args.seed})
    return cfg


def _snapshot(out: Path, command: str, args, config: TrainConfig | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command,
               "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}}
    if config is not None:
        payload["config"] = config.to_dict()
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")


def run(args) -> None:
    out: Path = args.out
    cmd = args.command
    if cmd == "synth":
        seed = 0 if args.seed is None else args.seed
        cfg = SyntheticConfig(args.num_groups, tuple(args.image_size), args.num_methods, seed, args.patch_size)
        generate_synthetic_corpus(cfg, out)
        _snapshot(out, cmd, args)
        return
    config = _config(args)
    _snapshot(out, cmd, args, config)
    if cmd == "train":
        result = train(config, load_manifest(args.manifest), out, progress=True)
        _snapshot(out, cmd, args, config)  # train() writes its own copy of the config there
        print(f"checkpoint: {result.checkpoint} (epoch {result.best_epoch}, val auc {result.best_val_auc})")
    elif cmd == "eval":
        report = evaluate(args.checkpoint, load_manifest(args.manifest), args.split, out_dir=out,
                          seed=config.seed, require_auc=False)
        print(json.dumps(report.to_dict(), indent=2))
        if report.frame_auc is None:
            raise RuntimeError("split holds a single class: AUC undefined (accuracy reported above)")
    elif cmd == "robustness":
        report = robustness_sweep(args.checkpoint, load_manifest(args.manifest), args.split, config.seed, out)
        for row in report.rows():
            print(",".join(map(str, row)))
    elif cmd == "ablate":
        result = ablation_run(config, load_manifest(args.manifest), args.seeds, DEFAULT_VARIANTS,
                              args.held_out, out)
        for row in result.table:
            print(row)
    elif cmd == "export-maps":
        for path in export_intensity_maps(args.checkpoint, load_manifest(args.manifest), args.ids, out):
            print(path)
    elif cmd == "augment-preview":
        manifest = load_manifest(args.manifest)
        cache = ImageCache(manifest)
        groups = [g for g in manifest.groups(args.split).values() if len(g["fakes"]) >= 2]
        rng = np.random.default_rng(config.seed)
        params = {"beta": config.msba.beta, "lambda_range": config.msba.lambda_range,
                  "min_intensity": config.msba.min_intensity, "signed": config.msba.signed}
        for i, g in enumerate(groups[: args.count]):
            s = msba_sample(g, manifest.num_methods, cache, rng, **params)
            stem = f"preview_{i:02d}_{g['real'].group_id}"
            write_image(out / f"{stem}_blend.png", s.image)
            write_png_map(out / f"{stem}_map.png", s.intensity)
            write_raw_map(out / f"{stem}_map.fimp", s.intensity)
            (out / f"{stem}_alpha.json").write_text(json.dumps([float(a) for a in s.alpha]), encoding="utf-8")
            print(stem, np.round(s.alpha, 4).tolist())


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "msba-clip: error: a subcommand is required")
        run(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit code 2
        print(f"msba-clip {getattr(args, 'command', '')}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
