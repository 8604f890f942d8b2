"""Self-distillation objective and the mini-batch training loop.

Every exit is trained on cross-entropy with the true label; student exits
additionally imitate the deepest exit (the teacher) through a KL term on soft
labels and a squared-distance penalty on pooled features. Teacher targets are
detached, so students never pull the teacher towards themselves.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .gnn import MultiExitGNN, MultiExitOutput, forward_multi_exit
from .graphdata import Dataset, batch

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


class TrainingDivergence(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class DistillConfig:
    alpha: float = 0.6
    lam: float = 0.04
    epochs: int = 100
    final_plain_epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        if self.final_plain_epochs > self.epochs:
            raise ValueError("final_plain_epochs cannot exceed epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def alphas(self, m: int, plain: bool = False) -> list[float]:
        """Per-exit imitation weights; the teacher (last) is always 0."""
        a = 0.0 if plain else self.alpha
        return [a] * (m - 1) + [0.0]

    def lambdas(self, m: int, plain: bool = False) -> list[float]:
        lam = 0.0 if plain else self.lam
        return [lam] * (m - 1) + [0.0]


@dataclass
class LossBreakdown:
    total: float
    ce: list[float]
    kl: list[float]
    pen: list[float]
    alphas: list[float]
    lambdas: list[float]

    def reconstruct(self) -> float:
        m = len(self.ce)
        dis = sum((1 - a) * c + a * k for a, c, k in zip(self.alphas, self.ce, self.kl)) / m
        pen = sum(lam * p for lam, p in zip(self.lambdas, self.pen)) / m
        return dis + pen


# -------------------------------------------------------------- loss terms


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[np.asarray(labels, dtype=np.int64)]


def cross_entropy(logits, labels) -> nx.Node:
    """Per-sample -log softmax(logits)[y], shape (n,)."""
    logits = logits if isinstance(logits, nx.Node) else nx.const(logits)
    logp = nx.log_softmax(logits)
    return nx.scale(nx.sum(nx.mul(logp, nx.const(_one_hot(labels, logits.shape[1]))), axis=1), -1.0)


def kl_student_teacher(student_logits, teacher_probs: np.ndarray, temperature: float = 1.0) -> nx.Node:
    """Per-sample sum_c q_l log(q_l / q_t) with the teacher held constant."""
    z = student_logits if isinstance(student_logits, nx.Node) else nx.const(student_logits)
    if temperature != 1.0:
        z = nx.scale(z, 1.0 / temperature)
    logq = nx.log_softmax(z)
    q = nx.exp(logq)
    log_t = np.log(np.maximum(np.asarray(teacher_probs, dtype=np.float64), PROB_EPS))
    return nx.sum(nx.mul(q, nx.sub(logq, nx.const(log_t))), axis=1)


def _teacher_soft_labels(out: MultiExitOutput, temperature: float) -> np.ndarray:
    return nx.softmax_array(out.logits[-1].value / temperature)


def _per_exit_terms(out: MultiExitOutput, labels, config: DistillConfig, targets=None):
    if targets is None:
        q_t, h_t = _teacher_soft_labels(out, config.temperature), out.features[-1].value
    else:
        q_t, h_t = targets
    ce, kl, pen = [], [], []
    for l in range(out.num_exits):
        ce.append(cross_entropy(out.logits[l], labels))
        if l == out.num_exits - 1:
            zero = nx.const(np.zeros(len(labels)))
            kl.append(zero)
            pen.append(zero)
            continue
        kl.append(kl_student_teacher(out.logits[l], q_t, config.temperature))
        if out.features[l].shape != out.features[-1].shape:
            raise nx.ContractError(
                f"feature penalty needs equal widths, got {out.features[l].shape} vs {h_t.shape}; "
                "is a harmonizer missing?")
        pen.append(nx.sum(nx.square(nx.sub(out.features[l], nx.const(h_t))), axis=1))
    return ce, kl, pen


def distillation_loss(out: MultiExitOutput, labels, config: DistillConfig, plain: bool = False) -> nx.Node:
    """Batch mean of (1/m) sum_l [(1 - a_l) CE_l + a_l KL_l]."""
    ce, kl, _ = _per_exit_terms(out, labels, config)
    return _combine(ce, kl, None, config.alphas(out.num_exits, plain), None)


def feature_penalty(out: MultiExitOutput, config: DistillConfig, plain: bool = False) -> nx.Node:
    """Batch mean of (1/m) sum_l lambda_l ||h_l - h_t||^2."""
    m = out.num_exits
    h_t = out.features[-1].value
    terms = []
    for l in range(m - 1):
        if out.features[l].shape != h_t.shape:
            raise nx.ContractError(
                f"feature penalty needs equal widths, got {out.features[l].shape} vs {h_t.shape}; "
                "is a harmonizer missing?")
        terms.append(nx.sum(nx.square(nx.sub(out.features[l], nx.const(h_t))), axis=1))
    terms.append(nx.const(np.zeros(h_t.shape[0])))
    return _combine(None, None, terms, None, config.lambdas(m, plain))


def _combine(ce, kl, pen, alphas, lambdas) -> nx.Node:
    per_sample = None
    m = len(ce) if ce is not None else len(pen)

    def acc(node, w):
        nonlocal per_sample
        if w == 0.0:
            return
        term = nx.scale(node, w / m)
        per_sample = term if per_sample is None else nx.add(per_sample, term)

    if ce is not None:
        for c, k, a in zip(ce, kl, alphas):
            acc(c, 1.0 - a)
            acc(k, a)
    if pen is not None:
        for p, lam in zip(pen, lambdas):
            acc(p, lam)
    if per_sample is None:
        return nx.const(0.0)
    return nx.mean(per_sample)


def teacher_targets(out: MultiExitOutput, config: DistillConfig) -> tuple[np.ndarray, np.ndarray]:
    """The detached teacher soft labels and features the students imitate."""
    return _teacher_soft_labels(out, config.temperature), out.features[-1].value.copy()


def total_loss(out: MultiExitOutput, labels, config: DistillConfig, plain: bool = False,
               targets: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[nx.Node, LossBreakdown]:
    """Distillation loss plus feature penalty, per sample then batch-averaged.

    ``targets`` pins the teacher soft labels and features instead of reading
    them off ``out``; finite-difference checks need this because the teacher
    targets are constants to backprop.
    """
    m = out.num_exits
    ce, kl, pen = _per_exit_terms(out, labels, config, targets)
    alphas, lambdas = config.alphas(m, plain), config.lambdas(m, plain)
    loss = _combine(ce, kl, pen, alphas, lambdas)
    breakdown = LossBreakdown(
        total=float(loss.value),
        ce=[float(c.value.mean()) for c in ce],
        kl=[float(k.value.mean()) for k in kl],
        pen=[float(p.value.mean()) for p in pen],
        alphas=alphas,
        lambdas=lambdas,
    )
    return loss, breakdown


# ------------------------------------------------------------------ training


@dataclass
class History:
    num_exits: int
    rows: list[dict] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def columns(self) -> list[str]:
        m = self.num_exits
        return (["epoch", "split", "total"] + [f"ce_exit_{i}" for i in range(1, m + 1)]
                + [f"kl_exit_{i}" for i in range(1, m + 1)] + [f"pen_exit_{i}" for i in range(1, m + 1)])

    def add(self, epoch: int, split: str, b: LossBreakdown) -> None:
        row = {"epoch": epoch, "split": split, "total": b.total}
        for i, (c, k, p) in enumerate(zip(b.ce, b.kl, b.pen), start=1):
            row[f"ce_exit_{i}"], row[f"kl_exit_{i}"], row[f"pen_exit_{i}"] = c, k, p
        self.rows.append(row)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = self.columns()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.rows:
                w.writerow([row[c] if c in ("epoch", "split") else repr(float(row[c])) for c in cols])
        return path


def _mean_breakdown(parts: list[tuple[int, LossBreakdown]]) -> LossBreakdown:
    n = sum(w for w, _ in parts)
    first = parts[0][1]

    def avg(get):
        return sum(w * get(b) for w, b in parts) / n

    m = len(first.ce)
    return LossBreakdown(
        total=avg(lambda b: b.total),
        ce=[avg(lambda b, i=i: b.ce[i]) for i in range(m)],
        kl=[avg(lambda b, i=i: b.kl[i]) for i in range(m)],
        pen=[avg(lambda b, i=i: b.pen[i]) for i in range(m)],
        alphas=first.alphas,
        lambdas=first.lambdas,
    )


def evaluate_loss(model: MultiExitGNN, data: Dataset, config: DistillConfig, plain: bool = False,
                  chunk: int = 512) -> LossBreakdown:
    """Eval-mode loss breakdown over a whole dataset."""
    parts = []
    for start in range(0, len(data), chunk):
        graphs = data.graphs[start:start + chunk]
        b = batch(graphs)
        out = forward_multi_exit(model, b, "eval")
        _, bd = total_loss(out, b.labels, config, plain)
        parts.append((len(graphs), bd))
    return _mean_breakdown(parts)


def train(model: MultiExitGNN, train_data: Dataset, val_data: Dataset | None,
          config: DistillConfig) -> tuple[MultiExitGNN, History]:
    """Mini-batch Adam on the total loss.

    For the final ``final_plain_epochs`` epochs every exit trains on plain
    cross-entropy. The parameters with the lowest validation teacher
    cross-entropy are restored at the end.
    """
    m = model.num_exits
    history = History(m)
    if config.epochs == 0:
        return model, history
    rng = np.random.default_rng(config.seed)
    opt = nx.Adam(model.parameters(), lr=config.lr)
    best_ce, best_state = math.inf, None
    n = len(train_data)
    for epoch in range(config.epochs):
        plain = epoch >= config.epochs - config.final_plain_epochs
        order = rng.permutation(n)
        parts = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            b = batch([train_data.graphs[i] for i in idx])
            out = forward_multi_exit(model, b, "train", rng)
            loss, bd = total_loss(out, b.labels, config, plain)
            if not np.isfinite(loss.value):
                raise TrainingDivergence(f"non-finite loss {loss.value} at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            history.batch_losses.append(bd.total)
            parts.append((len(idx), bd))
        history.add(epoch, "train", _mean_breakdown(parts))
        if val_data is not None and len(val_data):
            vb = evaluate_loss(model, val_data, config, plain)
            history.add(epoch, "validation", vb)
            if vb.ce[-1] < best_ce:
                best_ce, best_state = vb.ce[-1], model.state_dict()
                history.best_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    log.debug("training finished; best epoch %d (teacher CE %.4f)", history.best_epoch, best_ce)
    return model, history
