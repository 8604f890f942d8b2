"""Multi-exit graph classifiers built on :mod:`distill_uq.numerics`.

A model is a stack of message-passing layers (GraphConv or GraphSAGE-mean),
each followed by batch norm and ReLU. Classifier heads (two-layer MLPs with
dropout in front) read globally mean-pooled node features. A self-distillation
model has a head after every layer; a single model only after the last one.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .graphdata import Batch, IntegrityError

CHECKPOINT_VERSION = 1
LAYER_KINDS = ("graphconv", "sage")


@dataclass
class ModelConfig:
    in_dim: int
    num_classes: int
    layer_kind: str = "sage"
    hidden_dims: tuple[int, ...] = (64, 64, 64, 64)
    head_hidden: int = 32
    dropout: float = 0.5
    layer_dropout: float = 0.0
    multi_exit: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}; expected one of {LAYER_KINDS}")
        if not self.hidden_dims:
            raise ValueError("need at least one GNN layer")

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims)

    @property
    def exits(self) -> list[int]:
        """1-based layer indices carrying a classifier head."""
        m = self.num_layers
        return list(range(1, m + 1)) if self.multi_exit else [m]


@dataclass
class MultiExitOutput:
    logits: list[nx.Node]
    soft_labels: list[np.ndarray]
    features: list[nx.Node]
    exits: list[int] = field(default_factory=list)

    @property
    def num_exits(self) -> int:
        return len(self.logits)

    @property
    def teacher_probs(self) -> np.ndarray:
        return self.soft_labels[-1]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MultiExitGNN:
    """Parameters, batch-norm buffers and structure of one classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, nx.Node] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        dims = (config.in_dim,) + config.hidden_dims
        for l in range(1, config.num_layers + 1):
            d_in, d_out = dims[l - 1], dims[l]
            self._add(f"layer{l}.w_self", _uniform(rng, d_in, (d_in, d_out)))
            self._add(f"layer{l}.w_neigh", _uniform(rng, d_in, (d_in, d_out)))
            self._add(f"layer{l}.bias", _uniform(rng, d_in, (d_out,)))
            self._add(f"bn{l}.gamma", np.ones(d_out))
            self._add(f"bn{l}.beta", np.zeros(d_out))
            self.buffers[f"bn{l}.running_mean"] = np.zeros(d_out)
            self.buffers[f"bn{l}.running_var"] = np.ones(d_out)
        d_m = config.hidden_dims[-1]
        for l in config.exits:
            d_l = config.hidden_dims[l - 1]
            if d_l != d_m:
                self._add(f"head{l}.harm.w", _uniform(rng, d_l, (d_l, d_m)))
                self._add(f"head{l}.harm.b", _uniform(rng, d_l, (d_m,)))
            self._add(f"head{l}.fc1.w", _uniform(rng, d_m, (d_m, config.head_hidden)))
            self._add(f"head{l}.fc1.b", _uniform(rng, d_m, (config.head_hidden,)))
            self._add(f"head{l}.fc2.w", _uniform(rng, config.head_hidden, (config.head_hidden, config.num_classes)))
            self._add(f"head{l}.fc2.b", _uniform(rng, config.head_hidden, (config.num_classes,)))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = nx.param(value)

    @property
    def num_exits(self) -> int:
        return len(self.config.exits)

    def has_harmonizer(self, l: int) -> bool:
        return f"head{l}.harm.w" in self.params

    def parameters(self) -> list[nx.Node]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.value.copy() for k, p in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.value = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=np.float64)


def count_parameters(model: MultiExitGNN) -> int:
    """Trainable scalars, heads and harmonizers included (batch-norm buffers excluded)."""
    return int(sum(p.value.size for p in model.params.values()))


def linear_parameter_count(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


# ------------------------------------------------------------------ layers


def _check_edges(edges: np.ndarray, n: int) -> None:
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise IntegrityError(f"edge index outside [0, {n})")


def graphconv_forward(w_self, w_neigh, bias, x, b: Batch) -> nx.Node:
    """out_v = x_v W_self + (sum over in-neighbours u of x_u) W_neigh + bias."""
    _check_edges(b.edges, b.num_nodes)
    agg = nx.spmm(b.adjacency(normalize=False), x)
    return nx.add(nx.add(nx.matmul(x, w_self), nx.matmul(agg, w_neigh)), bias)


def sage_mean_forward(w_self, w_neigh, bias, x, b: Batch) -> nx.Node:
    """out_v = x_v W_self + (mean over in-neighbours u of x_u) W_neigh + bias; no neighbours -> 0."""
    _check_edges(b.edges, b.num_nodes)
    agg = nx.spmm(b.adjacency(normalize=True), x)
    return nx.add(nx.add(nx.matmul(x, w_self), nx.matmul(agg, w_neigh)), bias)


def global_mean_pool(node_features, graph_id, num_graphs: int | None = None) -> nx.Node:
    return nx.segment_mean(node_features, graph_id, num_graphs)


_LAYER_FN = {"graphconv": graphconv_forward, "sage": sage_mean_forward}


def forward_multi_exit(model: MultiExitGNN, b: Batch, mode: str = "eval",
                       rng: np.random.Generator | None = None, *,
                       update_stats: bool = True, masks: dict[str, np.ndarray] | None = None) -> MultiExitOutput:
    """Run every layer and every head on a batch.

    ``mode`` is ``"train"`` (batch statistics, dropout on), ``"eval"``
    (running statistics, no dropout) or ``"mc"`` (running statistics with the
    head dropout kept on, for MC-dropout sampling). ``masks`` pins dropout
    masks by name (``"layer{l}"`` / ``"head{l}"``), which gradient checks use.
    """
    if mode not in ("train", "eval", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = model.config
    if b.node_features.shape[1] != cfg.in_dim:
        raise nx.ShapeError(f"batch has feature dim {b.node_features.shape[1]}, model expects {cfg.in_dim}")
    p = model.params
    masks = masks or {}
    if rng is None:
        rng = np.random.default_rng(0)

    def drop(name: str, h: nx.Node, rate: float, active: bool) -> nx.Node:
        if name in masks:
            return nx.dropout(h, masks[name])
        if not active or rate <= 0.0:
            return h
        return nx.dropout(h, nx.dropout_mask(rng, h.shape, rate))

    layer_fn = _LAYER_FN[cfg.layer_kind]
    exits = set(cfg.exits)
    x = nx.const(b.node_features)
    logits, probs, feats, order = [], [], [], []
    for l in range(1, cfg.num_layers + 1):
        h = layer_fn(p[f"layer{l}.w_self"], p[f"layer{l}.w_neigh"], p[f"layer{l}.bias"], x, b)
        if mode == "train":
            h, mu, var = nx.batch_norm_train(h, p[f"bn{l}.gamma"], p[f"bn{l}.beta"], cfg.bn_eps)
            if update_stats:
                n = b.num_nodes
                unbiased = var * n / (n - 1) if n > 1 else var
                mom = cfg.bn_momentum
                model.buffers[f"bn{l}.running_mean"] = (1 - mom) * model.buffers[f"bn{l}.running_mean"] + mom * mu
                model.buffers[f"bn{l}.running_var"] = (1 - mom) * model.buffers[f"bn{l}.running_var"] + mom * unbiased
        else:
            h = nx.batch_norm_eval(h, p[f"bn{l}.gamma"], p[f"bn{l}.beta"],
                                   model.buffers[f"bn{l}.running_mean"], model.buffers[f"bn{l}.running_var"],
                                   cfg.bn_eps)
        h = nx.relu(h)
        x = drop(f"layer{l}", h, cfg.layer_dropout, mode == "train")
        if l not in exits:
            continue
        z = global_mean_pool(x, b.graph_id, b.num_graphs)
        if model.has_harmonizer(l):
            z = nx.add(nx.matmul(z, p[f"head{l}.harm.w"]), p[f"head{l}.harm.b"])
        feats.append(z)
        z = drop(f"head{l}", z, cfg.dropout, mode in ("train", "mc"))
        z = nx.relu(nx.add(nx.matmul(z, p[f"head{l}.fc1.w"]), p[f"head{l}.fc1.b"]))
        out = nx.add(nx.matmul(z, p[f"head{l}.fc2.w"]), p[f"head{l}.fc2.b"])
        logits.append(out)
        probs.append(nx.softmax_array(out.value))
        order.append(l)
    return MultiExitOutput(logits, probs, feats, order)


def predict_proba(model: MultiExitGNN, b: Batch) -> list[np.ndarray]:
    """Eval-mode soft labels of every exit, shallowest first."""
    return forward_multi_exit(model, b, "eval").soft_labels


# -------------------------------------------------------------- checkpoints


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps (byte-reproducible)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        meta_bytes = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        entries = {"__meta__": meta_bytes, **arrays}
        for name in sorted(entries):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, _npy_bytes(entries[name]))


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"]).decode())
    return arrays, meta


def save_checkpoint(model: MultiExitGNN, path, extra: dict | None = None) -> Path:
    meta = {"version": CHECKPOINT_VERSION, "model": asdict(model.config), "extra": extra or {}}
    write_arrays(path, model.state_dict(), meta)
    return Path(path)


def load_checkpoint(path) -> tuple[MultiExitGNN, dict]:
    arrays, meta = read_arrays(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    model = MultiExitGNN(ModelConfig(**meta["model"]))
    model.load_state_dict(arrays)
    return model, meta.get("extra", {})
