"""Command line: generate data, train, evaluate, run the ablation grid and lambda sweeps.

Exit codes: 0 success, 2 config or data error, 3 numeric divergence,
4 checkpoint/dataset shape mismatch. Relative output directories are resolved
against ``$IGVLAB_OUTPUT_ROOT`` (default: the working directory).
"""

import argparse
import csv
import hashlib
import math
import os
import sys
from pathlib import Path

import numpy as np

from .benchmark import SPLITS, load_dataset, save_dataset, split_ood
from .config import default_config, load_config, save_config
from .errors import ContractError, NumericError, ShapeMismatchError
from .objective import VARIANTS, check_variant
from .trainer import (
    evaluate, fit, load_checkpoint, save_checkpoint, write_metrics,
)

OUTPUT_ROOT_ENV = "IGVLAB_OUTPUT_ROOT"
EXIT_OK, EXIT_DATA, EXIT_NUMERIC, EXIT_SHAPE = 0, 2, 3, 4
RUN_COLUMNS = ("variant", "seed", "best_epoch", "val_acc", "test_acc_iid", "test_acc_ood",
               "grounding_iou")
SUMMARY_COLUMNS = ("variant", "runs", "ood_mean", "ood_std", "iid_mean", "iid_std",
                   "iou_mean", "iou_std")
SWEEP_COLUMNS = ("param", "value", "lambda1", "lambda2", "seed", "best_epoch", "val_acc",
                 "test_acc_iid", "test_acc_ood", "grounding_iou")


def default_grid():
    return [1.3 ** i for i in range(-10, 11)]


# -- paths and IO helpers -------------------------------------------------------

def output_dir(config):
    base = Path(config.run.output_dir)
    if base.is_absolute():
        return base
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / base


def data_dir(config):
    return output_dir(config) / "data"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


def write_splits(config):
    """Generate the four splits, write them as JSONL plus a SHA256SUMS file."""
    spec, sizes = config.data, config.splits
    splits = split_ood(spec, sizes.n_train, sizes.n_val, sizes.n_test)
    target = data_dir(config)
    target.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in SPLITS:
        path = target / f"{name}.jsonl"
        save_dataset(splits[name], path)
        lines.append(f"{_sha256(path)}  {path.name}\n")
    (target / "SHA256SUMS").write_text("".join(lines), encoding="utf-8")
    return splits


def read_splits(config):
    """Load generated splits and check they match the config's data section."""
    target = data_dir(config)
    missing = [n for n in SPLITS if not (target / f"{n}.jsonl").exists()]
    if missing:
        raise ContractError(
            f"dataset files missing in {target}: {', '.join(missing)} (run 'igvlab generate')")
    splits = {n: load_dataset(target / f"{n}.jsonl") for n in SPLITS}
    for name, data in splits.items():
        if data.spec != config.data:
            raise ContractError(f"{name} split was generated with a different data config")
    return splits


def _splits_for(config, create):
    try:
        return read_splits(config)
    except ContractError:
        if not create:
            raise
        return write_splits(config)


def run_dir(config, variant, seed):
    return output_dir(config) / "runs" / f"{variant}-seed{seed}"


def _best(result):
    return result.history[result.best_epoch - 1] if result.best_epoch else None


def _run_row(variant, seed, result):
    best = _best(result)
    if best is None:
        return [variant, seed, 0] + ["nan"] * 4
    return [variant, seed, result.best_epoch] + [
        _fmt(getattr(best, c)) for c in ("val_acc", "test_acc_iid", "test_acc_ood",
                                         "grounding_iou")]


def train_one(config, splits, variant, seed, log=None):
    """Fit one run and write its metrics CSV and best checkpoint."""
    result = fit(config, splits, seed, variant=variant, log=log)
    target = run_dir(config, variant, seed)
    target.mkdir(parents=True, exist_ok=True)
    write_metrics(result.history, target / "metrics.csv")
    best = _best(result)
    save_checkpoint(target / "checkpoint.json", result.model, config, seed, variant,
                    best.val_acc if best else None, result.best_epoch)
    return result


# -- commands ---------------------------------------------------------------------

def cmd_init_config(args):
    path = Path(args.path)
    save_config(default_config(), path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_generate(args):
    config = load_config(args.config)
    write_splits(config)
    target = data_dir(config)
    print(f"wrote {len(SPLITS)} splits and SHA256SUMS to {target}")
    return EXIT_OK


def _epoch_logger(quiet):
    if quiet:
        return None

    def log(m):
        print(f"epoch {m.epoch:3d}  loss_c {m.loss_c:.4f}  val {m.val_acc:.3f}  "
              f"iid {m.test_acc_iid:.3f}  ood {m.test_acc_ood:.3f}  iou {m.grounding_iou:.3f}",
              flush=True)
    return log


def cmd_train(args):
    config = load_config(args.config)
    variant = check_variant(args.variant or config.igv.variant)
    seed = config.run.seeds[0] if args.seed is None else args.seed
    splits = read_splits(config)
    result = train_one(config, splits, variant, seed, _epoch_logger(args.quiet))
    print(f"{variant} seed {seed}: best epoch {result.best_epoch}, "
          f"outputs in {run_dir(config, variant, seed)}")
    return EXIT_OK


def _mean_std(values):
    values = [v for v in values if not math.isnan(v)]
    if not values:
        return math.nan, math.nan
    return float(np.mean(values)), float(np.std(values))


def summarize(rows):
    """Per-variant mean/std of OOD accuracy, IID accuracy and IoU over seeds."""
    out = []
    for variant in dict.fromkeys(r[0] for r in rows):
        mine = [r for r in rows if r[0] == variant]
        ood = _mean_std([float(r[5]) for r in mine])
        iid = _mean_std([float(r[4]) for r in mine])
        iou = _mean_std([float(r[6]) for r in mine])
        out.append([variant, len(mine), *ood, *iid, *iou])
    return out


def render_table(summary):
    lines = [f"{'variant':<14}{'runs':>5}{'OOD acc':>18}{'IID acc':>18}{'IoU':>18}"]
    for variant, runs, om, os_, im, is_, um, us in summary:
        lines.append(f"{variant:<14}{runs:>5}{om:>11.3f} ± {os_:.3f}{im:>11.3f} ± {is_:.3f}"
                     f"{um:>11.3f} ± {us:.3f}")
    return "\n".join(lines)


def ordering_report(rows):
    by = {}
    for r in rows:
        by.setdefault(r[0], {})[r[1]] = float(r[5])
    lines = []
    if "full" in by and "c-only" in by:
        seeds = sorted(set(by["full"]) & set(by["c-only"]))
        wins = sum(by["full"][s] > by["c-only"][s] for s in seeds)
        lines.append(f"full beats c-only on OOD accuracy in {wins}/{len(seeds)} seeds")
    if "full" in by and "erm-baseline" in by:
        gap = np.mean(list(by["full"].values())) - np.mean(list(by["erm-baseline"].values()))
        lines.append(f"full minus erm-baseline mean OOD accuracy: {gap:+.3f}")
    return lines


def cmd_ablate(args):
    config = load_config(args.config)
    variants = args.variants or list(VARIANTS)
    for v in variants:
        check_variant(v)
    seeds = args.seeds if args.seeds else list(config.run.seeds)
    splits = _splits_for(config, create=True)
    rows = []
    for seed in seeds:
        for variant in variants:
            result = train_one(config, splits, variant, seed)
            rows.append(_run_row(variant, seed, result))
            if not args.quiet:
                print(" ".join(str(x) for x in rows[-1]), flush=True)
    target = output_dir(config) / "ablation"
    _write_csv(target / "runs.csv", RUN_COLUMNS, rows)
    summary = summarize(rows)
    _write_csv(target / "summary.csv", SUMMARY_COLUMNS,
               [[s[0], s[1]] + [_fmt(x) for x in s[2:]] for s in summary])
    report = render_table(summary) + "\n" + "\n".join(ordering_report(rows)) + "\n"
    (target / "summary.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def cmd_sweep(args):
    config = load_config(args.config)
    grid = args.grid if args.grid else default_grid()
    seed = config.run.seeds[0] if args.seed is None else args.seed
    variant = check_variant(args.variant)
    splits = _splits_for(config, create=True)
    rows = []
    for value in grid:
        if value < 0:
            raise ContractError(f"sweep value must be nonnegative, got {value}")
        lam = {"lambda1": 1.0, "lambda2": 1.0, args.param: float(value)}
        run_config = config.with_igv(**lam)
        result = fit(run_config, splits, seed, variant=variant)
        best = _best(result)
        rows.append([args.param, _fmt(value), _fmt(lam["lambda1"]), _fmt(lam["lambda2"]), seed,
                     result.best_epoch] + [_fmt(getattr(best, c)) for c in
                                           ("val_acc", "test_acc_iid", "test_acc_ood",
                                            "grounding_iou")])
        if not args.quiet:
            print(" ".join(str(x) for x in rows[-1]), flush=True)
    target = output_dir(config) / "sweeps" / f"{args.param}.csv"
    _write_csv(target, SWEEP_COLUMNS, rows)
    peak = max(rows, key=lambda r: float(r[8]))
    print(f"peak OOD accuracy {float(peak[8]):.3f} at {args.param} = {float(peak[1]):.4g}")
    return EXIT_OK


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset)
    if len(data) == 0:
        raise ContractError(f"{args.dataset}: dataset has no instances")
    clips = data.arrays()[0]
    expected = meta["config"].data
    if clips.shape[1:] != (expected.num_clips, expected.clip_dim):
        raise ShapeMismatchError(
            f"dataset clips are {clips.shape[1]} x {clips.shape[2]}, checkpoint expects "
            f"{expected.num_clips} x {expected.clip_dim}")
    if data.spec.vocab_size > expected.vocab_size or data.spec.num_answers != expected.num_answers:
        raise ShapeMismatchError("dataset vocabulary or answer set does not fit the checkpoint")
    metrics = evaluate(model, data, meta["variant"], with_losses=True)
    columns = ("accuracy", "grounding_iou", "loss_c", "loss_t", "loss_v")
    for key in columns:
        print(f"{key:14s} {metrics[key]:.6f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"eval-{Path(args.dataset).stem}.csv")
    _write_csv(out, ("checkpoint", "dataset") + columns,
               [[str(args.checkpoint), str(args.dataset)] + [_fmt(metrics[k]) for k in columns]])
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="igvlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default config")
    p.add_argument("path")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("generate", help="write the four dataset splits")
    p.add_argument("config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant with one seed")
    p.add_argument("config")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="variants x seeds grid with summary table")
    p.add_argument("config")
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one loss weight, the other held at 1")
    p.add_argument("config")
    p.add_argument("--param", required=True, choices=("lambda1", "lambda2"))
    p.add_argument("--grid", type=lambda s: [float(x) for x in s.split(",") if x],
                   help="comma-separated values (default 1.3^i for i in -10..10)")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        # non-finite results are reported by the engine's own checks
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except ShapeMismatchError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericError as err:
        print(f"error: numeric divergence: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
