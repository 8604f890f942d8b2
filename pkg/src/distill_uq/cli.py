"""Command-line entry point: ``distill-uq {prepare-data,train,uncertainty,ood,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, experiment, uncertainty
from .config import METHODS, ConfigError, RunConfig, apply_overrides, load_config, save_config
from .distillation import TrainingDivergence
from .gnn import load_checkpoint, predict_proba
from .graphdata import (IngestionError, IntegrityError, ParameterError, StratificationError, batch,
                        stratified_kfold, write_tu_dataset)

log = logging.getLogger("distill_uq")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
OOD_METHODS = ("selfdistill", "ensemble", "mcdropout")
REPORT_COLUMNS = ["f1_macro", "roc_auc_macro", "mce", "brier", "param_count"]
TIMING_COLUMNS = ["train_time_s", "test_time_s"]


class UsageError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    for key in ("seed", "method", "ensemble_size", "epochs", "folds", "mc_samples", "holdout_class"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if args.out is not None:
        overrides["out_dir"] = args.out
    return apply_overrides(config, overrides).validate()


# ------------------------------------------------------------------ commands


def cmd_prepare_data(config: RunConfig, args) -> int:
    data, ood = experiment.prepare(config)
    out = Path(config.out_dir) / "data"
    write_tu_dataset(data, out / data.name, data.name)
    if ood is not None:
        write_tu_dataset(ood, out / ood.name, ood.name)
    counts = np.bincount(data.labels, minlength=data.num_classes).tolist()
    print(f"{data.name}: {len(data)} graphs, k={data.num_classes}, d={data.feature_dim}, class counts {counts}")
    if ood is not None:
        print(f"held-out class: {len(ood)} graphs")
    print(f"written to {out}")
    return EXIT_OK


def cmd_train(config: RunConfig, args) -> int:
    data, _ = experiment.prepare(config)
    root = Path(config.out_dir)
    stratified_kfold(data, config.folds, config.seed)  # fail early on unsplittable data
    for method in config.methods():
        method_dir = root / method
        save_config(config, method_dir / "config.cfg")
        rows = []

        def on_fold(res: experiment.FoldResult, method_dir=method_dir, rows=rows):
            fold_dir = method_dir / f"fold_{res.split.fold_index}"
            res.trained.save(fold_dir)
            for i, h in enumerate(res.trained.histories):
                name = "history.csv" if len(res.trained.histories) == 1 else f"history_member_{i}.csv"
                h.write_csv(fold_dir / name)
            rows.append(res.row)
            evaluation.write_metrics_csv(rows, method_dir / "metrics.csv")

        experiment.cross_validate(method, data, config, on_fold)
        print(f"{method}: {len(rows)} folds -> {method_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_uncertainty(config: RunConfig, args) -> int:
    if bool(args.input) == bool(args.checkpoint):
        raise UsageError("give exactly one of --input PROBS.json or --checkpoint MODEL.npz")
    if args.input:
        m, samples = uncertainty.load_prediction_json(args.input)
    else:
        model, _ = load_checkpoint(args.checkpoint)
        if model.num_exits < 2:
            raise UsageError("the uncertainty metric needs a multi-exit (self-distillation) model; "
                             f"{args.checkpoint} has a single classifier")
        data, _ = experiment.prepare(config)
        probs = predict_proba(model, batch(data.graphs))
        m = len(probs)
        samples = [uncertainty.ExitPredictions.from_exits([p[i] for p in probs]) for i in range(len(data))]
    rows = uncertainty.report(samples)
    text = uncertainty.report_csv(rows, m, args.weights)
    out = Path(args.output) if args.output else Path(config.out_dir) / "uncertainty.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(f"{len(rows)} samples -> {out}")
    return EXIT_OK


def cmd_ood(config: RunConfig, args) -> int:
    if config.holdout_class == "":
        raise UsageError("the OOD experiment needs a held-out class (--holdout-class N|last or holdout_class=...)")
    data, ood = experiment.prepare(config)
    methods = OOD_METHODS if config.method == "all" else (config.method,)
    if args.load and len(methods) > 1:
        raise UsageError("--load works with a single --method")
    split = stratified_kfold(data, config.folds, config.seed)[0]
    seed = experiment.fold_seed(config, 0)
    train_data, val_data = data.subset(split.train), data.subset(split.validation)
    test_data = data.subset(split.test)
    out = Path(config.out_dir) / "ood"
    summaries = {}
    for method in methods:
        if args.load:
            trained = experiment.load_method(method, args.load, config, seed)
        else:
            trained = experiment.train_method(method, train_data, val_data, config, seed)
            trained.save(out / method)
        id_e, ood_e = evaluation.ood_experiment(method, trained.predict, test_data.graphs, ood.graphs)
        evaluation.write_entropy_csv(id_e, out)
        evaluation.write_entropy_csv(ood_e, out)
        summaries[method] = evaluation.ood_summary(id_e, ood_e, data.num_classes)
        s = summaries[method]
        print(f"{method}: mean entropy ID {s['id_mean_entropy']:.4f}, OOD {s['ood_mean_entropy']:.4f}, "
              f"separated={s['separated']}")
    save_config(config, out / "config.cfg")
    evaluation.write_json(summaries, out / "ood_summary.json")
    return EXIT_OK


def cmd_report(config: RunConfig, args) -> int:
    root = Path(args.dir or config.out_dir)
    files = sorted(root.glob("*/metrics.csv"))
    if not files:
        raise UsageError(f"no runs found under {root} (expected <method>/metrics.csv)")
    rows = []
    for f in files:
        rows.extend(evaluation.read_metrics_csv(f))
    present = sorted({r.method for r in rows})
    missing = [m for m in METHODS if m not in present]
    if missing:
        log.warning("partial report: no runs for %s", ", ".join(missing))
    summary = evaluation.aggregate(rows)
    metrics_summary = {m: {k: v for k, v in e.items() if k not in TIMING_COLUMNS} for m, e in summary.items()}
    timing_summary = {m: {k: e[k] for k in TIMING_COLUMNS} for m, e in summary.items()}
    evaluation.write_json(metrics_summary, root / "report.json")
    (root / "report.txt").write_text(evaluation.format_table(metrics_summary, REPORT_COLUMNS))
    evaluation.write_json(timing_summary, root / "timing.json")
    (root / "timing.txt").write_text(evaluation.format_table(timing_summary, TIMING_COLUMNS))
    print(evaluation.format_table(metrics_summary, REPORT_COLUMNS), end="")
    print(evaluation.format_table(timing_summary, TIMING_COLUMNS), end="")
    return EXIT_OK


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "uncertainty": cmd_uncertainty,
    "ood": cmd_ood,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="distill-uq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare-data", parents=[common], help="materialise the dataset in TU format")
    p = sub.add_parser("train", parents=[common], help="k-fold training and evaluation")
    p.add_argument("--method", choices=METHODS + ("all",))
    p.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p = sub.add_parser("uncertainty", parents=[common], help="uncertainty report per sample")
    p.add_argument("--input", help="JSON file of per-sample exit probabilities")
    p.add_argument("--checkpoint", help="self-distillation checkpoint to score the configured dataset")
    p.add_argument("--weights", choices=("linear", "nonlinear", "both"), default="both")
    p.add_argument("--output", help="CSV path (default <out>/uncertainty.csv)")
    p = sub.add_parser("ood", parents=[common], help="ID vs held-out-class entropy experiment")
    p.add_argument("--method", choices=OOD_METHODS + ("all",))
    p.add_argument("--holdout-class", dest="holdout_class")
    p.add_argument("--load", help="checkpoint (or ensemble directory) to use instead of training")
    p.add_argument("--epochs", type=int)
    p.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p = sub.add_parser("report", parents=[common], help="aggregate metrics.csv files into tables")
    p.add_argument("dir", nargs="?", help="run directory (default: out_dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](config, args)
    except (ConfigError, UsageError, IngestionError, IntegrityError, ParameterError, StratificationError) as exc:
        print(f"distill-uq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"distill-uq {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
