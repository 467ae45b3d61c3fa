"""Command-line entry point: ``rendersynth <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 validation or tolerance failure.
Every command accepts ``--config FILE.toml`` whose keys are the command's
long option names (dashes as underscores); explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import adversarial, datasets, evaluation, gradcheck, storage
from .pyramid_aug import HandmadeParams, load_handmade_params
from .tag_model import DEFAULT_GEOMETRY, EVAL_POSES, render, sample_labels

POSE_PROFILES = {"default": None, "aligned": EVAL_POSES}
TRAIN_PROFILES = {
    "desk": {},
    "smoke": {"epochs": 1, "steps_per_epoch": 20},
}


class UsageError(Exception):
    """Bad or missing command-line arguments (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- argument plumbing ------------------------------------------------------------

def _option_types(parser: argparse.ArgumentParser) -> dict[str, type]:
    types = {}
    for action in parser._actions:
        if action.dest in ("help", "config", "command") or not action.option_strings:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            types[action.dest] = bool
        elif action.nargs in ("*", "+") or isinstance(action, argparse._AppendAction):
            types[action.dest] = list
        else:
            types[action.dest] = action.type or str
    return types


def _merge_config(args, parser, argv: list[str]) -> argparse.Namespace:
    """Fill options not given on the command line from ``--config``."""
    if not args.config:
        return args
    values = storage.load_config(args.config, _option_types(parser))
    explicit = {a.dest for a in parser._actions if a.option_strings and _given(a, argv)}
    for key, value in values.items():
        if key not in explicit:
            setattr(args, key, value)
    return args


def _given(action, argv: list[str]) -> bool:
    return any(a == opt or a.startswith(opt + "=") for a in argv for opt in action.option_strings)


def _threads(args) -> int | None:
    return args.threads if getattr(args, "threads", None) else None


def _handmade(args) -> HandmadeParams:
    return load_handmade_params(args.handmade_config) if args.handmade_config else HandmadeParams()


# -- commands -------------------------------------------------------------------

def cmd_render(args) -> int:
    if args.resolution < DEFAULT_GEOMETRY.min_resolution:
        raise ValueError(f"resolution {args.resolution} is below the renderer minimum "
                         f"{DEFAULT_GEOMETRY.min_resolution}")
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    rng = np.random.default_rng(args.seed)
    poses = POSE_PROFILES[args.poses] or datasets.DEFAULT_POSES
    labels = sample_labels(rng, args.n, args.resolution, poses)
    samples = [datasets.Sample(i, render(l, args.resolution).image, l) for i, l in enumerate(labels)]
    path = storage.write_samples(args.out, samples, "clean", args.seed, png=True, f32=args.f32)
    print(f"wrote {len(samples)} images and {path}")
    return 0


def cmd_dataset(args) -> int:
    state = None
    if args.variant in datasets.NEEDS_GENERATOR:
        if not args.checkpoint:
            raise UsageError(f"variant {args.variant} needs --checkpoint")
        state = adversarial.load_checkpoint(args.checkpoint)
    kwargs = dict(state=state, params=_handmade(args))
    if POSE_PROFILES[args.poses]:
        kwargs["poses"] = POSE_PROFILES[args.poses]
    samples = datasets.generate_samples(args.variant, args.n, args.seed, args.resolution, _threads(args), **kwargs)
    path = storage.write_samples(args.out, samples, args.variant, args.seed, png=not args.no_png, f32=True)
    print(f"wrote {len(samples)} {args.variant} samples and {path}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(seeds=args.seeds, size=args.size, tolerance=args.tolerance)
    print(report.to_text())
    return 0 if report.passed else 2


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = dict(TRAIN_PROFILES[args.profile])
    for key in ("epochs", "steps_per_epoch", "batch_size", "resolution", "seed", "lr"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.resume:
        state = adversarial.load_checkpoint(args.resume)
        cfg = dataclasses.replace(state.cfg, **{k: v for k, v in overrides.items() if k == "epochs"})
        if cfg.epochs <= state.epoch:
            raise ValueError(f"checkpoint already finished epoch {state.epoch}; raise --epochs to continue")
        state.cfg = cfg
    else:
        cfg = adversarial.TrainConfig(**overrides)
        state = None
    state = adversarial.train(cfg, state=state, monitor_flips=args.monitor_flips, log=print)
    adversarial.save_checkpoint(out / "checkpoint.npz", state)
    (out / "history.csv").write_text(adversarial.history_csv(state.history))
    print(f"step {state.step}, epoch {state.epoch}; wrote {out / 'checkpoint.npz'} and {out / 'history.csv'}")
    return 0


def _named_paths(items: list[str]) -> dict[str, str]:
    named = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"expected NAME=PATH, got {item!r}")
        named[name] = path
    return named


def cmd_eval(args) -> int:
    if not args.train:
        raise UsageError("give at least one --train NAME=PATH")
    trains = _named_paths(args.train)
    test, _ = storage.load_dataset(args.test)
    rows = []
    for name, path in trains.items():
        data, _ = storage.load_dataset(path)
        decoder = evaluation.train_reference_decoder(data, epochs=args.epochs, l2=args.l2, seed=args.seed)
        rows.append((name, data.provenance, len(data), evaluation.evaluate(decoder, test)))
    width = max(len(r[0]) for r in rows)
    print(f"test set {args.test}: {test.provenance}, {len(test)} samples")
    for name, prov, n, score in rows:
        print(f"  {name:<{width}s}  trained on {n:6d} {prov:<9s}  MHD {score:.4f}")
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train", "provenance", "n_train", "test_provenance", "n_test", "mhd"])
        for name, prov, n, score in rows:
            w.writerow([name, prov, n, test.provenance, len(test), f"{score:.6f}"])
        Path(args.csv).write_text(buf.getvalue())
    return 0


def cmd_filter(args) -> int:
    data, records = storage.load_dataset(args.dataset)
    state = adversarial.load_checkpoint(args.checkpoint)
    kept, scores = adversarial.score_filter(data.images, state.disc, args.quantile)
    src = Path(args.dataset)
    src_dir = src if src.is_dir() else src.parent
    out = Path(args.out) if args.out else src_dir
    out.mkdir(parents=True, exist_ok=True)

    def rebase(rec, score):
        path = os.path.relpath(src_dir / rec["path"], out)
        return {**rec, "path": Path(path).as_posix(), "score": float(score)}

    keep = set(kept.tolist())
    storage.write_manifest(out / "manifest.filtered.jsonl", [rebase(records[i], scores[i]) for i in kept])
    storage.write_manifest(out / "removed.jsonl",
                           [rebase(records[i], scores[i]) for i in range(len(records)) if i not in keep])
    print(f"kept {len(kept)} of {len(records)} samples (quantile {args.quantile})")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rendersynth", description="Synthetic labeled tag images with learned augmentations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="TOML file with option values")
        p.set_defaults(func=func)
        return p

    p = command("render", cmd_render, "render clean tags")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--poses", choices=sorted(POSE_PROFILES), default="default")
    p.add_argument("--f32", action="store_true", help="also write raw float32 images")
    p.add_argument("--out", required=True)

    p = command("dataset", cmd_dataset, "generate a labeled dataset")
    p.add_argument("--variant", choices=datasets.VARIANTS, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--poses", choices=sorted(POSE_PROFILES), default="default")
    p.add_argument("--checkpoint")
    p.add_argument("--handmade-config", help="TOML file with handmade stage parameters")
    p.add_argument("--threads", type=int)
    p.add_argument("--no-png", action="store_true", help="write only the float32 images")
    p.add_argument("--out", required=True)

    p = command("gradcheck", cmd_gradcheck, "finite-difference checks of all backward passes")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)

    p = command("train", cmd_train, "adversarial training against the handmade distribution")
    p.add_argument("--profile", choices=sorted(TRAIN_PROFILES), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--monitor-flips", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)

    p = command("eval", cmd_eval, "train reference decoders and report MHD on a test set")
    p.add_argument("--train", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--test", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--l2", type=float, default=evaluation.DEFAULT_L2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write the report as CSV")

    p = command("filter", cmd_filter, "drop the lowest-scoring samples under a trained discriminator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--quantile", type=float, default=0.02)
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args = _merge_config(args, sub, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as exc:
        print(f"rendersynth: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"rendersynth: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
