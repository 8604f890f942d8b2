"""Disagreement-based uncertainty scores for multi-exit classifiers.

All functions work on plain probability vectors (natural log throughout) and
know nothing about models. Student exits are indexed by depth ``l = 1..m-1``;
exit ``m`` is the teacher. A student's distance from the teacher is
``m - l``, so deeper students that disagree with the teacher's class get
larger weights.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_EPS = 1e-12
LN2 = math.log(2.0)


class WeightKind(str, enum.Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


def _vec(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64).ravel()


def _check_pair(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ValueError(f"distributions differ in length: {p.shape[0]} vs {q.shape[0]}")


def kl_divergence(p, q) -> float:
    """sum_c p_c ln(p_c / q_c), with 0 ln 0 = 0 and q clamped at 1e-12."""
    p, q = _vec(p), _vec(q)
    _check_pair(p, q)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], PROB_EPS)))))


def disagreement(preds: Sequence, outcome) -> float:
    """Sum of KL(member || outcome) over all members."""
    if len(preds) == 0:
        raise ValueError("disagreement needs at least one prediction")
    return float(sum(kl_divergence(p, outcome) for p in preds))


def jsd(p, q) -> float:
    p, q = _vec(p), _vec(q)
    _check_pair(p, q)
    mix = 0.5 * (p + q)
    return 0.5 * (kl_divergence(p, mix) + kl_divergence(q, mix))


def entropy(p) -> float:
    p = _vec(p)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def argmax(p) -> int:
    # np.argmax already returns the first (lowest) index on ties
    return int(np.argmax(_vec(p)))


def _check_depth(l: int, m: int) -> None:
    if m < 2 or not 1 <= l <= m - 1:
        raise ValueError(f"student depth {l} outside [1, {m - 1}]")


def weight_linear(l: int, m: int, disagrees: bool) -> float:
    _check_depth(l, m)
    if not disagrees:
        return 1.0
    distance = m - l
    return 1.0 + (m - distance) / m


def weight_nonlinear(l: int, m: int, disagrees: bool) -> float:
    _check_depth(l, m)
    if not disagrees:
        return 1.0
    distance = m - l
    return 2.0 - math.exp(distance - m)


def weight(kind, l: int, m: int, disagrees: bool) -> float:
    kind = WeightKind(kind)
    fn = weight_linear if kind is WeightKind.LINEAR else weight_nonlinear
    return fn(l, m, disagrees)


@dataclass
class ExitPredictions:
    """Soft labels of one sample: students shallow-to-deep, then the teacher."""

    student_probs: list[np.ndarray]
    teacher_probs: np.ndarray

    def __post_init__(self):
        self.student_probs = [_vec(p) for p in self.student_probs]
        self.teacher_probs = _vec(self.teacher_probs)
        if not self.student_probs:
            raise ValueError("need at least one student exit")
        k = self.teacher_probs.shape[0]
        for p in self.student_probs:
            _check_pair(p, self.teacher_probs)
        for p in self.student_probs + [self.teacher_probs]:
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"not a probability vector over {k} classes: {p}")

    @property
    def m(self) -> int:
        return len(self.student_probs) + 1

    @classmethod
    def from_exits(cls, probs: Sequence) -> "ExitPredictions":
        """Build from all exits' soft labels, the teacher last."""
        return cls(list(probs[:-1]), probs[-1])


def _weights(preds: ExitPredictions, kind) -> list[float]:
    t = argmax(preds.teacher_probs)
    return [weight(kind, l, preds.m, argmax(p) != t) for l, p in enumerate(preds.student_probs, start=1)]


def weighted_disagreement_kl(preds: ExitPredictions, kind) -> float:
    w = _weights(preds, kind)
    return float(sum(wl * kl_divergence(p, preds.teacher_probs) for wl, p in zip(w, preds.student_probs)))


def uc(preds: ExitPredictions, kind) -> float:
    """Depth-weighted sum of student-vs-teacher Jensen-Shannon divergences."""
    w = _weights(preds, kind)
    return float(sum(wl * jsd(p, preds.teacher_probs) for wl, p in zip(w, preds.student_probs)))


def uc_max(m: int, kind) -> float:
    """Upper bound of :func:`uc`: every student disagrees and sits at JSD = ln 2."""
    if m < 2:
        raise ValueError("need m >= 2 classifiers")
    return float(sum(weight(kind, l, m, True) for l in range(1, m)) * LN2)


def uc_norm(preds: ExitPredictions, kind) -> float:
    return uc(preds, kind) / uc_max(preds.m, kind)


@dataclass
class UncertaintyRow:
    predicted: list[int]
    disagreement: float
    uc_lin: float
    uc_nonlin: float
    ucnorm_lin: float
    ucnorm_nonlin: float
    entropy: float


def quantify(preds: ExitPredictions, kind=WeightKind.LINEAR, divergence=jsd) -> float:
    """Uncertainty of one prediction, step by step.

    1. collect student and teacher soft labels;
    2. weight each student by depth if its class differs from the teacher's;
    3. measure each student's divergence from the teacher;
    4. return the weighted sum.
    """
    students, teacher = preds.student_probs, preds.teacher_probs
    m = preds.m
    outcome_class = argmax(teacher)
    w = np.ones(m - 1)
    for l in range(1, m):
        if argmax(students[l - 1]) != outcome_class:
            w[l - 1] = weight(kind, l, m, True)
    d = np.array([divergence(students[l - 1], teacher) for l in range(1, m)])
    return float(np.sum(w * d))


def report_row(preds: ExitPredictions) -> UncertaintyRow:
    return UncertaintyRow(
        predicted=[argmax(p) for p in preds.student_probs] + [argmax(preds.teacher_probs)],
        disagreement=disagreement(preds.student_probs, preds.teacher_probs),
        uc_lin=quantify(preds, WeightKind.LINEAR),
        uc_nonlin=quantify(preds, WeightKind.NONLINEAR),
        ucnorm_lin=quantify(preds, WeightKind.LINEAR) / uc_max(preds.m, WeightKind.LINEAR),
        ucnorm_nonlin=quantify(preds, WeightKind.NONLINEAR) / uc_max(preds.m, WeightKind.NONLINEAR),
        entropy=entropy(preds.teacher_probs),
    )


def report(samples: Sequence[ExitPredictions]) -> list[UncertaintyRow]:
    return [report_row(s) for s in samples]


# --------------------------------------------------------------- batch IO


def load_prediction_json(path) -> tuple[int, list[ExitPredictions]]:
    """Read ``{"m": int, "samples": [{"students": [[...], ...], "teacher": [...]}]}``."""
    doc = json.loads(Path(path).read_text())
    m = int(doc["m"])
    samples = []
    for i, s in enumerate(doc.get("samples", [])):
        if len(s["students"]) != m - 1:
            raise ValueError(f"sample {i}: expected {m - 1} student rows, got {len(s['students'])}")
        samples.append(ExitPredictions(s["students"], s["teacher"]))
    return m, samples


def dump_prediction_json(samples: Sequence[ExitPredictions], path) -> Path:
    m = samples[0].m if samples else 0
    doc = {"m": m, "samples": [{"students": [p.tolist() for p in s.student_probs],
                                "teacher": s.teacher_probs.tolist()} for s in samples]}
    Path(path).write_text(json.dumps(doc))
    return Path(path)


def report_header(m: int, weights: str = "both") -> list[str]:
    cols = ["sample_id"] + [f"pred_exit_{i}" for i in range(1, m + 1)] + ["disagreement"]
    if weights in ("linear", "both"):
        cols.append("uc_lin")
    if weights in ("nonlinear", "both"):
        cols.append("uc_nonlin")
    if weights in ("linear", "both"):
        cols.append("ucnorm_lin")
    if weights in ("nonlinear", "both"):
        cols.append("ucnorm_nonlin")
    return cols + ["entropy"]


def report_csv(rows: Sequence[UncertaintyRow], m: int, weights: str = "both") -> str:
    if weights not in ("linear", "nonlinear", "both"):
        raise ValueError(f"weights must be linear, nonlinear or both, not {weights!r}")
    header = report_header(m, weights)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, r in enumerate(rows):
        values = {"sample_id": i, "disagreement": r.disagreement, "uc_lin": r.uc_lin,
                  "uc_nonlin": r.uc_nonlin, "ucnorm_lin": r.ucnorm_lin,
                  "ucnorm_nonlin": r.ucnorm_nonlin, "entropy": r.entropy}
        for j, c in enumerate(r.predicted, start=1):
            values[f"pred_exit_{j}"] = c
        w.writerow([values[c] if isinstance(values[c], int) else repr(float(values[c])) for c in header])
    return buf.getvalue()
