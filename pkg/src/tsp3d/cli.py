"""Command-line entry point: ``tsp3d <command> [flags]``.

Exit status is 0 on success, 1 on a usage or input error and 2 on a numeric
failure (non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CheckpointError, NumericError, Tsp3dError
from .harness.bench import ABLATION_HEADER, PROFILE_HEADER, TABLE_ROWS, evaluate, profile, rows_to_csv, run_ablation
from .harness.gradsuite import gradient_suite
from .harness.io import read_dataset, write_dataset
from .harness.scenes import SceneSpec, generate_dataset
from .params import load_checkpoint, save_checkpoint
from .pipeline import Model, ModelConfig, TrainState, baseline_config, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
log = logging.getLogger("tsp3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _dataset(args):
    if args.dataset:
        samples = read_dataset(args.dataset)
        if not samples:
            raise UsageError(f"no scene files in {args.dataset}")
        return samples
    return generate_dataset(args.seed, args.count, SceneSpec(extent=args.extent))


def _config(args):
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    return cfg.replace(seed=args.seed) if args.seed is not None else cfg


def cmd_scenegen(args):
    if not args.out:
        raise UsageError("scenegen needs --out DIR")
    samples = generate_dataset(args.seed, args.count, SceneSpec(extent=args.extent))
    paths = write_dataset(samples, args.out)
    print(f"wrote {len(paths)} scenes to {args.out}")


def cmd_train(args):
    if not args.out:
        raise UsageError("train needs --out CHECKPOINT")
    cfg = _config(args)
    samples = _dataset(args)
    model = Model(cfg)
    state = train(model, samples, args.steps, state=TrainState(), log_every=max(args.steps // 10, 1), logger=log)
    save_checkpoint(model.store, args.out)
    print(f"trained {state.step} steps, final loss {state.history[-1]:.6f}, checkpoint {args.out}")


def _restore(cfg, path):
    """Model over a checkpoint that holds exactly the tensors ``cfg`` needs."""
    store = load_checkpoint(path, cfg.seed)
    saved = set(store.names())
    model = Model(cfg, store=store)
    if set(model.store.names()) != saved:
        missing = sorted(set(model.store.names()) - saved)
        extra = sorted(saved - set(model.store.names()))
        raise CheckpointError(f"{path} does not match the config: missing {missing[:3]}, unused {extra[:3]}")
    return model


def cmd_eval(args):
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    cfg = _config(args)
    model = _restore(cfg, args.checkpoint)
    report = evaluate(_dataset(args), model)
    print(f"acc25={report.acc_at_25:.4f} acc50={report.acc_at_50:.4f} ms={report.mean_ms:.2f} n={len(report.ious)}")


def _write_or_print(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_profile(args):
    cfg = _config(args)
    models = {
        "concat": Model(baseline_config(seed=cfg.seed)),
        "attention": Model(cfg.replace(fusion_mode="attention", addition_mode="full", cba_levels=())),
        "tgp": Model(cfg.replace(fusion_mode="tgp")),
        "simplified_tgp": Model(cfg.replace(fusion_mode="simplified_tgp")),
    }
    if args.checkpoint:
        models[cfg.fusion_mode] = _restore(cfg, args.checkpoint)
    _write_or_print(rows_to_csv(profile(_dataset(args), models), PROFILE_HEADER), args.out)


def cmd_ablate(args):
    cfg = _config(args)
    train_set = _dataset(args)
    eval_set = generate_dataset(args.seed + 1, args.count, SceneSpec(extent=args.extent))
    configs = {f"({k})": cfg.replace(**v) for k, v in TABLE_ROWS.items()}
    rows, _ = run_ablation(configs, train_set, eval_set, args.steps, seed=cfg.seed)
    _write_or_print(rows_to_csv(rows, ABLATION_HEADER), args.out)


def cmd_gradcheck(args):
    report, _, _ = gradient_suite(args.seed if args.seed is not None else 1)
    worst = report.worst
    print(f"max_rel_err={report.max_rel_err:.3e} worst={worst.name}{tuple(int(i) for i in worst.worst_index)} "
          f"checked={report.checked} kinks={report.kinks}")
    if not report.passed(1e-4):
        raise NumericError(f"gradient check failed: {report.max_rel_err:.3e} >= 1e-4", node=worst.name)


COMMANDS = {
    "scenegen": cmd_scenegen,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = _Parser(prog="tsp3d", description="Text-guided sparse voxel grounding on synthetic scenes.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value model config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--checkpoint", help="parameter checkpoint")
    parser.add_argument("--dataset", help="directory of scene files")
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--count", type=int, default=16, help="number of generated scenes")
    parser.add_argument("--extent", type=float, default=4.0, help="generated room edge in metres")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.steps < 1 or args.count < 1:
            raise UsageError("--steps and --count must be positive")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        seed_default = args.seed is None
        if seed_default and args.command != "gradcheck":
            args.seed = 0
        COMMANDS[args.command](args)
    except UsageError as exc:
        text = str(exc)
        if not text.startswith("usage:"):
            text = f"{parser.format_usage()}tsp3d: error: {text}"
        print(text, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (Tsp3dError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
