"""Cross-validated comparison protocol shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import baselines, evaluation
from .config import RunConfig
from .distillation import DistillConfig, History, train
from .gnn import MultiExitGNN, ModelConfig, count_parameters, load_checkpoint, predict_proba, save_checkpoint
from .graphdata import (Dataset, FoldSplit, IngestionError, batch, find_tu_dataset, generate_synthetic_admissions,
                        hold_out_class, parse_tu_dataset, stratified_kfold, undersample_majority)

log = logging.getLogger(__name__)

FOLD_SEED_STRIDE = 100


def load_dataset(config: RunConfig) -> Dataset:
    if config.dataset == "synthetic":
        data = generate_synthetic_admissions(config.synthetic_patients, config.synthetic_seed,
                                             include_icu=config.synthetic_icu)
    else:
        where = find_tu_dataset(config.tu_name, config.resolved_data_root() or None)
        if where is None:
            raise IngestionError(
                f"TU dataset {config.tu_name} not found under data_root / $DISTILL_UQ_DATA "
                f"(looked for {config.tu_name}_A.txt)")
        data = parse_tu_dataset(where, config.tu_name)
    return data


def holdout_index(config: RunConfig, data: Dataset) -> int | None:
    if config.holdout_class == "":
        return None
    if config.holdout_class == "last":
        return data.num_classes - 1
    return int(config.holdout_class)


def prepare(config: RunConfig) -> tuple[Dataset, Dataset | None]:
    """Load data, split off the held-out class (if any) and rebalance."""
    data = load_dataset(config)
    ood = None
    held = holdout_index(config, data)
    if held is not None:
        data, ood = hold_out_class(data, held)
    if config.balance:
        data = undersample_majority(data, config.seed)
    return data, ood


def model_config(config: RunConfig, data: Dataset) -> ModelConfig:
    return ModelConfig(in_dim=data.feature_dim, num_classes=data.num_classes, layer_kind=config.layer_kind,
                       hidden_dims=config.hidden_dims, head_hidden=config.head_hidden, dropout=config.dropout,
                       layer_dropout=config.layer_dropout)


def distill_config(config: RunConfig, seed: int) -> DistillConfig:
    return DistillConfig(alpha=config.alpha, lam=config.lam, epochs=config.epochs,
                         final_plain_epochs=config.final_plain_epochs, lr=config.lr,
                         batch_size=config.batch_size, seed=seed, temperature=config.temperature)


def fold_seed(config: RunConfig, fold: int) -> int:
    return config.seed + FOLD_SEED_STRIDE * fold


@dataclass
class TrainedMethod:
    """A trained model for one method plus what is needed to predict with it."""

    method: str
    model: object
    histories: list[History]
    train_time_s: float
    param_count: int
    mc_samples: int = 100
    mc_seed: int = 0

    def predict(self, graphs) -> np.ndarray:
        """Decision distribution for each graph."""
        b = batch(graphs)
        if self.method == "ensemble":
            return baselines.ensemble_predict(self.model, b)[0]
        if self.method == "mcdropout":
            cfg = baselines.MCDropoutConfig(self.mc_samples, self.mc_seed)
            return baselines.mc_dropout_predict(self.model, b, cfg)[0]
        return predict_proba(self.model, b)[-1]

    def exit_probs(self, graphs) -> list[np.ndarray]:
        if self.method != "selfdistill":
            raise ValueError("per-exit predictions need a multi-exit (self-distillation) model")
        return predict_proba(self.model, batch(graphs))

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        if self.method == "ensemble":
            return [baselines.save_ensemble(self.model, directory / "ensemble")]
        return [save_checkpoint(self.model, directory / "model.npz", {"method": self.method})]


def train_method(method: str, train_data: Dataset, val_data: Dataset | None, config: RunConfig,
                 seed: int) -> TrainedMethod:
    mcfg = model_config(config, train_data)
    dcfg = distill_config(config, seed)
    if method == "selfdistill":
        def fit():
            return train(MultiExitGNN(mcfg, seed=seed), train_data, val_data, dcfg)
    elif method in ("single", "mcdropout"):
        def fit():
            return baselines.train_single(train_data, val_data, mcfg, dcfg)
    elif method == "ensemble":
        def fit():
            return baselines.train_ensemble(train_data, val_data, mcfg, dcfg, config.ensemble_size)
    else:
        raise ValueError(f"unknown method {method!r}")
    (model, hist), seconds = evaluation.timed(fit)
    if method == "ensemble":
        params = sum(count_parameters(m) for m in model.members)
        histories = hist
    else:
        params = count_parameters(model)
        histories = [hist]
    return TrainedMethod(method, model, histories, seconds, params, config.mc_samples, seed)


def load_method(method: str, path, config: RunConfig, seed: int = 0) -> TrainedMethod:
    path = Path(path)
    if method == "ensemble":
        model = baselines.load_ensemble(path if (path / "manifest.json").is_file() else path / "ensemble")
        params = sum(count_parameters(m) for m in model.members)
    else:
        model, _ = load_checkpoint(path if path.is_file() else path / "model.npz")
        params = count_parameters(model)
    return TrainedMethod(method, model, [], 0.0, params, config.mc_samples, seed)


@dataclass
class FoldResult:
    row: evaluation.MetricsRow
    trained: TrainedMethod
    test_probs: np.ndarray
    split: FoldSplit


def run_fold(method: str, data: Dataset, split: FoldSplit, config: RunConfig) -> FoldResult:
    seed = fold_seed(config, split.fold_index)
    train_data, val_data, test_data = data.subset(split.train), data.subset(split.validation), data.subset(split.test)
    trained = train_method(method, train_data, val_data, config, seed)
    probs, test_seconds = evaluation.timed(trained.predict, test_data.graphs)
    y = test_data.labels
    m = evaluation.classification_metrics(y, probs, data.num_classes)
    row = evaluation.MetricsRow(method, split.fold_index, m["f1_macro"], m["roc_auc_macro"], trained.train_time_s,
                                test_seconds, m["mce"], m["brier"], trained.param_count)
    log.info("%s fold %d: f1=%.3f auc=%.3f train=%.1fs", method, split.fold_index, row.f1_macro,
             row.roc_auc_macro, row.train_time_s)
    return FoldResult(row, trained, probs, split)


def cross_validate(method: str, data: Dataset, config: RunConfig,
                   on_fold: Callable[[FoldResult], None] | None = None) -> list[FoldResult]:
    results = []
    for split in stratified_kfold(data, config.folds, config.seed):
        res = run_fold(method, data, split, config)
        if on_fold is not None:
            on_fold(res)
        results.append(res)
    return results
