"""Command-line entry points: ``generate-data``, ``train`` and ``compare``.

Exit codes: 0 success, 1 I/O or report failure, 2 configuration error or bad
flags, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import phantomgen as pg
from .errors import (ConfigurationError, DatasetFormatError, DimensionError, InputError, ReportError,
                     StateError, TrainingDivergenceError)
from .losses import LossWeights
from .metrics import MetricsRecord, aggregate_folds, records_to_csv
from .trainer import FINAL_CKPT, LAST_CKPT, METHODS, METRICS_FILE, TrainConfig, train

log = logging.getLogger("dualteacher")

SUITES = {
    "table1": ["supervised_only", "joint_training", "mean_teacher", "dual_teacher"],
    "table2": ["pseudo_label_baseline", "gan_baseline", "no_inter_teacher", "no_intra_teacher",
               "dual_teacher"],
}
CONFIG_FILE = "config.json"
PLOT_FILE = "curves.png"


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_hparams(p):
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--batch-size", type=int, default=4, help="per-stream batch size")
    g.add_argument("--lambda-kd", type=float, default=0.1)
    g.add_argument("--lambda-con-max", type=float, default=0.1)
    g.add_argument("--ema-alpha", type=float, default=0.99)
    g.add_argument("--ema-after-student", action="store_true")
    g.add_argument("--noise-sigma", type=float, default=0.1)
    g.add_argument("--pseudo-threshold", type=float, default=0.0)
    g.add_argument("--base-channels", type=int, default=8)
    g.add_argument("--depth", type=int, default=2)
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--translator", choices=["histogram_match", "identity"], default="histogram_match")


def config_from_args(args, method, seed) -> TrainConfig:
    return TrainConfig(
        method=method, epochs=args.epochs, seed=seed, learning_rate=args.lr,
        batch_size_s=args.batch_size, batch_size_t=args.batch_size, batch_size_u=args.batch_size,
        loss_weights=LossWeights(lambda_kd=args.lambda_kd, lambda_con_max=args.lambda_con_max),
        ema_alpha=args.ema_alpha, ema_after_student=args.ema_after_student,
        noise_sigma=args.noise_sigma, pseudo_label_threshold=args.pseudo_threshold,
        base_channels=args.base_channels, depth=args.depth, augment=not args.no_augment,
        translator=args.translator,
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="dualteacher", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a phantom dataset split into folds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-source", type=int, default=40)
    g.add_argument("--n-target", type=int, default=40)
    g.add_argument("--folds", type=int, default=4)
    g.add_argument("--labeled-frac", type=float, default=1 / 3,
                   help="share of the non-validation target pool that is labeled")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train one method on one fold")
    t.add_argument("--method", choices=sorted(METHODS), required=True)
    t.add_argument("--data", type=Path, required=True, help="dataset root written by generate-data")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, default=None,
                   help="run directory (default runs/<method>/fold<k>/seed<s>)")
    t.add_argument("--resume", action="store_true")
    _add_hparams(t)

    c = sub.add_parser("compare", help="run or collect a method suite and print the table")
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--suite", choices=sorted(SUITES), default=None)
    c.add_argument("--methods", default=None, help="comma-separated methods (overrides --suite)")
    c.add_argument("--folds", type=_int_list, default=[0])
    c.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    c.add_argument("--out", type=Path, default=Path("runs"))
    c.add_argument("--no-train", action="store_true", help="only report existing runs")
    _add_hparams(c)
    return parser


def fold_dir(data, fold):
    return Path(data) / f"fold{fold}"


def run_dir(root, method, fold, seed):
    return Path(root) / method / f"fold{fold}" / f"seed{seed}"


def read_metrics(path):
    """Parse a JSON-lines metrics file, ignoring a torn trailing line."""
    lines = []
    for raw in Path(path).read_text().splitlines():
        try:
            lines.append(json.loads(raw))
        except json.JSONDecodeError:
            break
    return lines


def record_from_line(line) -> MetricsRecord:
    return MetricsRecord(
        per_class_dice={int(k): v for k, v in line["val_dice"].items()},
        mean_dice=line["mean_dice"], n_images=line.get("n_images", 0), fold_index=line["fold"],
        method=line["method"], seed=line["seed"], n_degenerate=line.get("n_degenerate", 0),
    )


def completed_record(out, config: TrainConfig):
    """Final-epoch record of a finished run in ``out`` with this config, else None."""
    out = Path(out)
    try:
        saved = json.loads((out / CONFIG_FILE).read_text())
    except (FileNotFoundError, json.JSONDecodeError):
        return None
    if saved.get("hash") != config.hash() or not (out / FINAL_CKPT).exists():
        return None
    lines = read_metrics(out / METRICS_FILE)
    if len(lines) != config.epochs:
        return None
    return record_from_line(lines[-1])


def plot_curves(metrics_log, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [l["epoch"] for l in metrics_log]
    fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("total", "seg"):
        ax_l.plot(epochs, [l["loss"][key] for l in metrics_log], label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend()
    ax_d.plot(epochs, [l["mean_dice"] for l in metrics_log], label="mean")
    for c in metrics_log[0]["val_dice"]:
        ax_d.plot(epochs, [l["val_dice"][c] for l in metrics_log], lw=0.8, alpha=0.6, label=f"class {c}")
    ax_d.set_xlabel("epoch")
    ax_d.set_ylabel("validation dice")
    ax_d.set_ylim(0, 1)
    ax_d.legend(fontsize=7)
    fig.suptitle(f"{metrics_log[0]['method']} fold {metrics_log[0]['fold']} seed {metrics_log[0]['seed']}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_one(config: TrainConfig, data, fold, out, resume=False):
    """Train one (method, fold, seed) cell into ``out``; return its final record."""
    bundle = pg.load_dataset(fold_dir(data, fold))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if resume and not (out / LAST_CKPT).exists():
        resume = False
    (out / CONFIG_FILE).write_text(json.dumps({"hash": config.hash(), "config": config.to_dict()},
                                              indent=1, sort_keys=True) + "\n")
    state = train(config, bundle, out, resume=resume)
    plot_curves(state.metrics_log, out / PLOT_FILE)
    return record_from_line(state.metrics_log[-1])


def _cell_worker(config_dict, data, fold, out):
    import torch
    torch.set_num_threads(1)
    config = TrainConfig.from_dict(config_dict)
    # a matching partial run in ``out`` is continued rather than restarted
    resume = (Path(out) / LAST_CKPT).exists() and _saved_hash(out) == config.hash()
    return run_one(config, data, fold, out, resume=resume)


def _saved_hash(out):
    try:
        return json.loads((Path(out) / CONFIG_FILE).read_text()).get("hash")
    except (FileNotFoundError, json.JSONDecodeError):
        return None


def cmd_generate_data(args):
    spec = pg.PhantomSpec(image_size=args.size, num_classes=args.classes, seed=args.seed)
    samples = pg.generate_dataset(spec, args.n_source, args.n_target)
    bundles = pg.make_folds(samples, args.folds, args.labeled_frac, args.seed, spec=spec)
    for k, b in enumerate(bundles):
        path = pg.save_dataset(b, fold_dir(args.out, k))
        print(f"fold {k}: d_s={len(b.d_s)} d_t={len(b.d_t)} d_u={len(b.d_u)} val={len(b.val)} -> {path}")
    return 0


def cmd_train(args):
    config = config_from_args(args, args.method, args.seed)
    out = args.out or run_dir("runs", args.method, args.fold, args.seed)
    if args.resume and not (Path(out) / LAST_CKPT).exists():
        raise StateError(f"nothing to resume in {out}")
    rec = run_one(config, args.data, args.fold, out, resume=args.resume)
    print(f"{config.method} fold {args.fold} seed {args.seed}: final mean dice {rec.mean_dice:.4f} -> {out}")
    return 0


def cmd_compare(args):
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    elif args.suite:
        methods = SUITES[args.suite]
    else:
        raise ConfigurationError("give --suite or --methods")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigurationError(f"unknown methods {unknown}")
    cells = [(m, f, s) for m in methods for f in args.folds for s in args.seeds]
    configs = {c: config_from_args(args, c[0], c[2]) for c in cells}
    records, todo = {}, []
    for cell in cells:
        rec = completed_record(run_dir(args.out, *cell), configs[cell])
        if rec is not None:
            records[cell] = rec
        else:
            todo.append(cell)
    if todo and args.no_train:
        missing = ", ".join(f"({m}, fold {f}, seed {s})" for m, f, s in todo)
        raise ReportError(f"missing runs: {missing}")
    if todo:
        workers = max(1, min(len(todo), int(os.environ.get("DUALTEACHER_THREADS", os.cpu_count() or 1))))
        log.info("training %d of %d cells with %d worker(s)", len(todo), len(cells), workers)
        jobs = [(configs[c].to_dict(), str(args.data), c[1], str(run_dir(args.out, *c))) for c in todo]
        if workers == 1:
            results = [_cell_worker(*j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_cell_worker, *zip(*jobs)))
        records.update(zip(todo, results))

    ordered = [records[c] for c in cells]
    report = aggregate_folds(ordered, methods=methods)
    name = args.suite if args.suite and not args.methods else "compare"
    args.out.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    (args.out / f"{name}.txt").write_text(text + "\n")
    (args.out / f"{name}_summary.csv").write_text(report.to_csv())
    (args.out / f"{name}_runs.csv").write_text(records_to_csv(ordered))
    print(text)
    return 0


COMMANDS = {"generate-data": cmd_generate_data, "train": cmd_train, "compare": cmd_compare}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, DimensionError, InputError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, ReportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
