"""Command-line front end.

Subcommands: synth, train, eval, ablate, grid, gradcheck, infer.

Training-family commands read a flat `key = value` config file, then
apply environment overrides (prefix DFDEBLUR_, upper-cased key), then
explicit flags; flags always win. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import autodiff as ad
from . import data as data_mod
from . import gradcheck, metrics, network, optics, trainer

__all__ = ["main"]

ENV_PREFIX = "DFDEBLUR_"


class UsageError(Exception):
    """Bad flags, config keys, or values."""


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(trainer.TrainConfig)}
# manifest/out_dir are wired to dedicated flags below.
_OVERRIDE_FIELDS = [n for n in _CONFIG_FIELDS if n not in ("manifest", "out_dir")]

_TRUE_WORDS = {"1", "true", "yes", "on"}
_FALSE_WORDS = {"0", "false", "no", "off"}


def _convert(name: str, value: str):
    f = _CONFIG_FIELDS[name]
    text = str(value).strip()
    if f.type in ("bool", bool):
        low = text.lower()
        if low in _TRUE_WORDS:
            return True
        if low in _FALSE_WORDS:
            return False
        raise UsageError(f"config key {name!r} expects a boolean, got {text!r}")
    try:
        if f.type in ("int", int):
            return int(text)
        if f.type in ("float", float):
            return float(text)
    except ValueError as exc:
        raise UsageError(f"config key {name!r} expects a number, got {text!r}") from exc
    return text


def read_config_file(path) -> dict[str, str]:
    """Parse flat `key = value` lines; # and ; start comments."""
    path = Path(path)
    if not path.exists():
        raise data_mod.DataError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise UsageError(f"{path}:{lineno}: duplicate config key {key!r}")
        out[key] = value.strip()
    return out


def build_train_config(args) -> trainer.TrainConfig:
    """Defaults < config file < environment < explicit flags."""
    values: dict = {}
    if args.config:
        for key, text in read_config_file(args.config).items():
            values[key] = _convert(key, text)
    for name in _CONFIG_FIELDS:
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = _convert(name, env)
    if args.manifest is not None:
        values["manifest"] = args.manifest
    if args.out is not None:
        values["out_dir"] = args.out
    for name in _OVERRIDE_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _convert(name, flag)
    if "manifest" not in values:
        raise UsageError("a dataset manifest is required (--manifest or config key)")
    if "out_dir" not in values:
        raise UsageError("an output directory is required (--out or config key)")
    try:
        return trainer.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--manifest", help="dataset directory or manifest.txt")
    p.add_argument("--out", help="output directory")
    for name in _OVERRIDE_FIELDS:
        p.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            metavar="V",
            help=f"override config key {name}",
        )


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise UsageError(f"--size expects N or HxW, got {text!r}") from None
    return h, w


def _parse_range(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"--depth-range expects 'min,max', got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise UsageError(f"--depth-range expects numbers, got {text!r}") from None
    return lo, hi


def cmd_synth(args) -> int:
    h, w = _parse_size(args.size)
    lo, hi = _parse_range(args.depth_range)
    try:
        camera = optics.ThinLensCamera(
            focal_length_m=args.focal_length,
            aperture_m=args.aperture,
            focus_distance_m=args.focus_distance,
            coc_to_pixel=args.coc_to_pixel,
        )
        cfg = data_mod.SceneConfig(
            height=h,
            width=w,
            depth_min_m=lo,
            depth_max_m=hi,
            camera=camera,
            defocus_levels=args.levels,
            include_focus_plane=not args.no_focus_plane,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = data_mod.synth_dataset(args.out, args.count, cfg, args.seed, args.split)
    print(f"wrote {args.count} sample(s) and manifest to {manifest.root}")
    return 0


def cmd_train(args) -> int:
    config = build_train_config(args)
    result = trainer.train(config)
    report = result.final_report
    print(f"run {result.run_id}: {result.steps} step(s), "
          f"epoch loss {result.first_epoch_loss:.6f} -> {result.final_epoch_loss:.6f}")
    if report is not None:
        print(f"eval[{config.eval_split}]: rmse={report.rmse} psnr={report.psnr}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model, payload = trainer.load_checkpoint_bundle(args.checkpoint)
    manifest = data_mod.DatasetManifest.load(args.manifest)
    report = metrics.evaluate_split(model, manifest, args.split)
    report.config["checkpoint"] = str(args.checkpoint)
    report.config["run_id"] = payload.get("run_id")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [metrics.csv_header(("split",)), metrics.csv_row(report, (args.split,))]
    metrics.write_csv(out_dir / "eval.csv", rows)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    print(",".join(rows[0]))
    print(",".join(rows[1]))
    return 0


def _write_suite_config(out_dir, config) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "suite_config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def cmd_ablate(args) -> int:
    config = build_train_config(args)
    _write_suite_config(config.out_dir, config)
    suite = trainer.ablation_suite(config)
    print(f"ablation table: {suite.csv_path}")
    for row in suite.rows:
        print(",".join(row))
    return 0


def cmd_grid(args) -> int:
    config = build_train_config(args)
    _write_suite_config(config.out_dir, config)
    suite = trainer.loss_grid(config)
    print(f"loss grid table: {suite.csv_path}")
    for row in suite.rows:
        print(",".join(row))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all_checks(
        seed=args.seed, instances=args.instances, inject_bug=args.inject_bug
    )
    print(f"seed={args.seed} instances={args.instances}")
    print(gradcheck.format_report(results))
    if all(r.passed for r in results):
        return 0
    return 3


def cmd_infer(args) -> int:
    written = trainer.infer(args.checkpoint, args.images, args.out)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfdeblur",
        description="Joint depth-from-defocus and deblurring toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic defocus dataset")
    p.add_argument("--count", type=int, default=8, help="number of scenes")
    p.add_argument("--size", default="64", help="scene extent, N or HxW")
    p.add_argument("--depth-range", default="0.5,3.0", help="min,max depth in meters")
    p.add_argument("--focus-distance", type=float, default=1.0, help="meters")
    p.add_argument("--focal-length", type=float, default=0.07, help="meters")
    p.add_argument("--aperture", type=float, default=0.0448, help="meters")
    p.add_argument("--coc-to-pixel", type=float, default=1000.0,
                   help="pixels per meter of blur diameter")
    p.add_argument("--levels", type=int, default=16, help="blur quantization levels")
    p.add_argument("--no-focus-plane", action="store_true",
                   help="do not force one region to the focus distance")
    p.add_argument("--split", default="train", choices=data_mod.SPLITS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    for name, func, blurb in (
        ("train", cmd_train, "train one run"),
        ("ablate", cmd_ablate, "run the three-way head-ablation suite"),
        ("grid", cmd_grid, "run every loss variant"),
    ):
        p = sub.add_parser(name, help=blurb)
        _add_train_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=data_mod.SPLITS)
    p.add_argument("--out", required=True, help="directory for eval.csv and report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--inject-bug", choices=("relu", "conv2d"), default=None,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", help="run a checkpoint on images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+", help="input PNG image(s)")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (data_mod.DataError, network.BadCheckpointError, metrics.EmptyMaskError,
            optics.DepthDomainError, ad.DegenerateBatchError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (trainer.DivergenceError, ad.DomainError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
