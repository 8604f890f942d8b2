"""Comparison methods: a single network, a deep ensemble and MC dropout."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .distillation import DistillConfig, History, train
from .gnn import (MultiExitGNN, ModelConfig, forward_multi_exit, load_checkpoint, predict_proba,
                  save_checkpoint)
from .graphdata import Batch, Dataset, ParameterError


@dataclass
class MCDropoutConfig:
    samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.samples < 2:
            raise ParameterError("MC dropout needs at least 2 samples")


@dataclass
class EnsembleModel:
    members: list[MultiExitGNN]
    seeds: list[int]

    @property
    def size(self) -> int:
        return len(self.members)


def single_config(model_config: ModelConfig) -> ModelConfig:
    return replace(model_config, multi_exit=False)


def train_single(train_data: Dataset, val_data: Dataset | None, model_config: ModelConfig,
                 config: DistillConfig) -> tuple[MultiExitGNN, History]:
    """Cross-entropy training of the teacher-only architecture."""
    model = MultiExitGNN(single_config(model_config), seed=config.seed)
    return train(model, train_data, val_data, config)


def train_ensemble(train_data: Dataset, val_data: Dataset | None, model_config: ModelConfig,
                   config: DistillConfig, size: int) -> tuple[EnsembleModel, list[History]]:
    """Independently trained members with seeds ``seed, seed+1, ...`` (sequential)."""
    if size < 1:
        raise ParameterError("ensemble size must be positive")
    members, seeds, histories = [], [], []
    for i in range(size):
        cfg = replace(config, seed=config.seed + i)
        model, hist = train_single(train_data, val_data, model_config, cfg)
        members.append(model)
        seeds.append(cfg.seed)
        histories.append(hist)
    return EnsembleModel(members, seeds), histories


def order_free_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0 that does not depend on the order of the slices."""
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def ensemble_predict(ensemble: EnsembleModel, b: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Mean member distribution and the stacked member distributions (members, n, k)."""
    members = np.stack([predict_proba(m, b)[-1] for m in ensemble.members])
    return order_free_mean(members), members


def mc_dropout_predict(model: MultiExitGNN, b: Batch, config: MCDropoutConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``config.samples`` stochastic passes with head dropout on; returns (mean, samples)."""
    if config.samples < 2:
        raise ParameterError("MC dropout needs at least 2 samples")
    rng = np.random.default_rng(config.seed)
    draws = np.stack([forward_multi_exit(model, b, "mc", rng).soft_labels[-1] for _ in range(config.samples)])
    return draws.mean(axis=0), draws


# -------------------------------------------------------------- checkpoints


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_ensemble(ensemble: EnsembleModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (member, seed) in enumerate(zip(ensemble.members, ensemble.seeds)):
        path = save_checkpoint(member, directory / f"member_{i}.npz", {"seed": seed})
        entries.append({"file": path.name, "seed": seed, "sha256": _sha256(path)})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"size": ensemble.size, "members": entries}, indent=2) + "\n")
    return manifest


def load_ensemble(directory) -> EnsembleModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    members, seeds = [], []
    for entry in manifest["members"]:
        path = directory / entry["file"]
        if _sha256(path) != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {path}")
        model, _ = load_checkpoint(path)
        members.append(model)
        seeds.append(int(entry["seed"]))
    return EnsembleModel(members, seeds)
