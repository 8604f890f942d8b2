"""Classification/calibration metrics, timing and the ID-vs-OOD entropy experiment."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_COLUMNS = ["method", "fold", "f1_macro", "roc_auc_macro", "mce", "brier", "param_count"]
TIMING_COLUMNS = ["method", "fold", "train_time_s", "test_time_s"]


@dataclass
class MetricsRow:
    method: str
    fold: int
    f1_macro: float
    roc_auc_macro: float
    train_time_s: float
    test_time_s: float
    mce: float
    brier: float
    param_count: int


@dataclass
class EntropyExport:
    method: str
    split: str
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.size == 0:
        raise ValueError("empty input")
    return y


def f1_macro(y_true, y_pred, k: int) -> float:
    """Unweighted mean of per-class F1 over all k classes (0 when undefined)."""
    t, p = _labels(y_true), _labels(y_pred)
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred differ in length")
    scores = []
    for c in range(k):
        tp = np.sum((t == c) & (p == c))
        denom = np.sum(t == c) + np.sum(p == c)
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def _binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    ranks = rankdata(scores)  # average ranks for ties
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_macro(y_true, scores) -> float:
    """One-vs-rest rank AUC averaged over classes present in ``y_true``."""
    t = _labels(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = np.stack([1.0 - s, s], axis=1)
    present = np.unique(t)
    if present.size < 2:
        raise ValueError("ROC AUC is undefined when the truth has a single class")
    return float(np.mean([_binary_auc(t == c, s[:, c]) for c in present]))


def mce(y_true, scores, bins: int = 10) -> float:
    """Largest |accuracy - mean confidence| over non-empty equal-width confidence bins on (0, 1]."""
    t = _labels(y_true)
    s = np.asarray(scores, dtype=np.float64)
    conf = s.max(axis=1)
    correct = (s.argmax(axis=1) == t).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    gap = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            gap = max(gap, abs(correct[sel].mean() - conf[sel].mean()))
    return float(gap)


def brier(y_true, scores) -> float:
    """Mean over samples of the summed squared error against the one-hot truth."""
    t = _labels(y_true)
    s = np.asarray(scores, dtype=np.float64)
    onehot = np.eye(s.shape[1])[t]
    return float(np.mean(np.sum((s - onehot) ** 2, axis=1)))


def classification_metrics(y_true, probs, k: int) -> dict:
    return {
        "f1_macro": f1_macro(y_true, np.argmax(probs, axis=1), k),
        "roc_auc_macro": roc_auc_macro(y_true, probs),
        "mce": mce(y_true, probs),
        "brier": brier(y_true, probs),
    }


def predictive_entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=1)


# ---------------------------------------------------------------- timing


def timing(fn: Callable[[], object]) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def timed(fn: Callable, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# ------------------------------------------------------------ OOD entropy


def ood_experiment(method: str, predict: Callable, id_graphs, ood_graphs) -> tuple[EntropyExport, EntropyExport]:
    """Per-sample predictive entropy on in-distribution and held-out-class graphs.

    ``predict`` maps a list of graphs to the method's decision distribution
    (teacher exit for self-distillation, mean distribution for ensembles and
    MC dropout).
    """
    if predict is None:
        raise ValueError(f"no trained model for method {method!r}")
    id_e = EntropyExport(method, "id", predictive_entropy(predict(list(id_graphs))))
    ood_e = EntropyExport(method, "ood", predictive_entropy(predict(list(ood_graphs))))
    return id_e, ood_e


def histogram_summary(values: np.ndarray, k: int, bins: int = 30) -> dict:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, math.log(k)))
    return {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def write_entropy_csv(export: EntropyExport, out_dir) -> Path:
    path = Path(out_dir) / f"entropy_{export.method}_{export.split}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{float(v)!r}\n" for v in export.values))
    return path


def ood_summary(id_e: EntropyExport, ood_e: EntropyExport, k: int) -> dict:
    return {
        "method": id_e.method,
        "num_classes": k,
        "id_count": int(id_e.values.size),
        "ood_count": int(ood_e.values.size),
        "id_mean_entropy": id_e.mean,
        "ood_mean_entropy": ood_e.mean,
        "separated": bool(ood_e.mean > id_e.mean),
        "id_histogram": histogram_summary(id_e.values, k),
        "ood_histogram": histogram_summary(ood_e.values, k),
    }


# --------------------------------------------------------------- exports


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> Path:
    """Deterministic metric columns; timings go to a sibling ``timings.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for name, cols in ((path, METRIC_COLUMNS), (path.with_name("timings.csv"), TIMING_COLUMNS)):
        with name.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                d = asdict(r)
                w.writerow([_cell(d[c]) for c in cols])
    return path


def read_metrics_csv(path) -> list[MetricsRow]:
    path = Path(path)
    timings = {}
    tpath = path.with_name("timings.csv")
    if tpath.is_file():
        with tpath.open() as fh:
            for r in csv.DictReader(fh):
                timings[(r["method"], int(r["fold"]))] = (float(r["train_time_s"]), float(r["test_time_s"]))
    rows = []
    with path.open() as fh:
        for r in csv.DictReader(fh):
            key = (r["method"], int(r["fold"]))
            tr, te = timings.get(key, (math.nan, math.nan))
            rows.append(MetricsRow(r["method"], int(r["fold"]), float(r["f1_macro"]), float(r["roc_auc_macro"]),
                                   tr, te, float(r["mce"]), float(r["brier"]), int(r["param_count"])))
    return rows


def aggregate(rows: Sequence[MetricsRow]) -> dict:
    """Per-method mean/std across folds for every numeric column."""
    out: dict[str, dict] = {}
    numeric = [f.name for f in fields(MetricsRow) if f.name not in ("method", "fold")]
    for method in sorted({r.method for r in rows}):
        sel = [r for r in rows if r.method == method]
        entry = {"folds": len(sel)}
        for name in numeric:
            mu, sd = mean_std([getattr(r, name) for r in sel])
            entry[name] = {"mean": mu, "std": sd}
        out[method] = entry
    return out


def format_table(summary: dict, columns: Sequence[str]) -> str:
    header = ["Model"] + list(columns)
    lines = [" | ".join(header), " | ".join("---" for _ in header)]
    for method, entry in summary.items():
        cells = [method]
        for c in columns:
            v = entry[c]
            if c == "param_count":
                cells.append(f"{int(round(v['mean'])):,}")
            else:
                cells.append(f"{v['mean']:.2f} ± {v['std']:.2f}")
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
