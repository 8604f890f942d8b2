"""Flat ``key = value`` run configuration.

Lines starting with ``#`` are comments. Keys (defaults in brackets)::

    dataset             tu | synthetic                      [synthetic]
    tu_name             TU dataset name                     [ENZYMES]
    data_root           directory holding <tu_name>/        [$DISTILL_UQ_DATA]
    synthetic_patients  number of synthetic patients        [2000]
    synthetic_icu       extra held-out-class patients       [0]
    synthetic_seed      generator seed                      [1]
    balance             undersample the majority class      [false]
    holdout_class       class id, "last", or empty          []
    layer_kind          sage | graphconv                    [graphconv]
    hidden_dims         comma-separated layer widths        [32,32,32]
    head_hidden         classifier MLP hidden width         [16]
    dropout             dropout before each head            [0.5]
    layer_dropout       dropout after each GNN layer        [0.0]
    method              single|ensemble|mcdropout|selfdistill|all  [selfdistill]
    alpha, lambda       imitation / feature trade-off       [0.6, 0.04]
    epochs, final_plain_epochs                              [100, 20]
    lr, batch_size, temperature                             [0.001, 32, 1.0]
    ensemble_size, mc_samples                               [3, 100]
    folds, seed, out_dir                                    [5, 0, runs]
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

METHODS = ("single", "ensemble", "mcdropout", "selfdistill")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    tu_name: str = "ENZYMES"
    data_root: str = ""
    synthetic_patients: int = 2000
    synthetic_icu: int = 0
    synthetic_seed: int = 1
    balance: bool = False
    holdout_class: str = ""
    layer_kind: str = "graphconv"
    hidden_dims: tuple[int, ...] = (32, 32, 32)
    head_hidden: int = 16
    dropout: float = 0.5
    layer_dropout: float = 0.0
    method: str = "selfdistill"
    alpha: float = 0.6
    lam: float = 0.04
    epochs: int = 100
    final_plain_epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    temperature: float = 1.0
    ensemble_size: int = 3
    mc_samples: int = 100
    folds: int = 5
    seed: int = 0
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.dataset not in ("tu", "synthetic"):
            raise ConfigError(f"dataset must be 'tu' or 'synthetic', not {self.dataset!r}")
        if self.method not in METHODS + ("all",):
            raise ConfigError(f"method must be one of {METHODS + ('all',)}, not {self.method!r}")
        if self.layer_kind not in ("sage", "graphconv"):
            raise ConfigError(f"layer_kind must be 'sage' or 'graphconv', not {self.layer_kind!r}")
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden_dims must list positive widths")
        if self.multi_exit_layers() < 2 and self.method in ("selfdistill", "all"):
            raise ConfigError("self-distillation needs at least two GNN layers")
        if not 0.0 <= self.alpha <= 1.0 or self.lam < 0:
            raise ConfigError("alpha must lie in [0, 1] and lambda must be non-negative")
        if self.final_plain_epochs > self.epochs or self.epochs < 0:
            raise ConfigError("need 0 <= final_plain_epochs <= epochs")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.layer_dropout < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        if self.folds < 2 or self.ensemble_size < 1 or self.mc_samples < 2 or self.batch_size < 1:
            raise ConfigError("need folds >= 2, ensemble_size >= 1, mc_samples >= 2, batch_size >= 1")
        if self.holdout_class not in ("", "last"):
            try:
                int(self.holdout_class)
            except ValueError:
                raise ConfigError(f"holdout_class must be an integer or 'last', not {self.holdout_class!r}") from None
        return self

    def multi_exit_layers(self) -> int:
        return len(self.hidden_dims)

    def methods(self) -> list[str]:
        return list(METHODS) if self.method == "all" else [self.method]

    def resolved_data_root(self) -> str:
        return self.data_root or os.environ.get("DISTILL_UQ_DATA", "")


_KEY_ALIASES = {"lambda": "lam"}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def apply_overrides(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    updates = {}
    for key, raw in pairs.items():
        key = _KEY_ALIASES.get(key.strip().replace("-", "_"), key.strip().replace("-", "_"))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _convert(key, raw)
    return replace(config, **updates)


def parse_config(text: str) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return apply_overrides(RunConfig(), pairs).validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        key = "lambda" if f.name == "lam" else f.name
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config))
    return path
