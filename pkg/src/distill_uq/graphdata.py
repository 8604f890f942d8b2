"""Graph datasets: TU-format IO, a synthetic admissions generator, splits and batching."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class IngestionError(FileNotFoundError):
    pass


class IntegrityError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass(eq=False)
class Graph:
    node_features: np.ndarray
    edges: np.ndarray  # (n_edges, 2) int, src -> dst
    label: int

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.label = int(self.label)
        n = self.node_features.shape[0]
        if self.node_features.ndim != 2 or n < 1:
            raise IntegrityError("a graph needs a 2-d feature matrix with at least one node")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise IntegrityError(f"edge endpoint outside [0, {n})")

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.label == other.label
                and np.array_equal(self.node_features, other.node_features)
                and np.array_equal(self.edges, other.edges))


@dataclass(eq=False)
class Dataset:
    graphs: list[Graph]
    num_classes: int
    feature_dim: int
    name: str = ""

    def __post_init__(self):
        if not self.graphs:
            raise ParameterError("dataset is empty")
        for g in self.graphs:
            if g.label < 0 or g.label >= self.num_classes:
                raise IntegrityError(f"label {g.label} outside [0, {self.num_classes})")
            if g.node_features.shape[1] != self.feature_dim:
                raise IntegrityError("feature dimension differs across graphs")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, idx):
        return self.graphs[idx]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.graphs[i] for i in indices], self.num_classes, self.feature_dim, self.name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.feature_dim == other.feature_dim
                and len(self.graphs) == len(other.graphs)
                and all(a == b for a, b in zip(self.graphs, other.graphs)))


@dataclass(eq=False)
class Batch:
    node_features: np.ndarray
    edges: np.ndarray
    graph_id: np.ndarray
    labels: np.ndarray
    _adjacency: dict = field(default_factory=dict, repr=False)

    @property
    def num_graphs(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])

    def adjacency(self, normalize: bool) -> sp.csr_matrix:
        """Sparse in-neighbour matrix A[dst, src]; row-normalised when ``normalize``."""
        key = bool(normalize)
        if key not in self._adjacency:
            n = self.num_nodes
            src, dst = self.edges[:, 0], self.edges[:, 1]
            a = sp.csr_matrix((np.ones(len(src)), (dst, src)), shape=(n, n))
            a.sum_duplicates()
            if normalize:
                deg = np.asarray(a.sum(axis=1)).ravel()
                inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
                a = sp.diags(inv) @ a
                a = a.tocsr()
            self._adjacency[key] = a
        return self._adjacency[key]


@dataclass
class FoldSplit:
    fold_index: int
    train: list[int]
    validation: list[int]
    test: list[int]


# ---------------------------------------------------------------- TU format


def _read_ints(path: Path) -> np.ndarray:
    rows = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    return np.array([int(float(r)) for r in rows], dtype=np.int64)


def _read_matrix(path: Path) -> np.ndarray:
    rows = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in r.split(",")] for r in rows], dtype=np.float64)


def parse_tu_dataset(dir_path, name: str) -> Dataset:
    """Read a dataset stored in the TU plain-text layout.

    Node features are the rows of ``_node_attributes.txt`` when present,
    otherwise a one-hot of ``_node_labels.txt``, otherwise a constant 1.
    Graph labels are remapped to contiguous 0-based integers.
    """
    root = Path(dir_path)
    required = {k: root / f"{name}_{k}.txt" for k in ("A", "graph_indicator", "graph_labels")}
    for path in required.values():
        if not path.is_file():
            raise IngestionError(f"missing required file {path}")

    indicator = _read_ints(required["graph_indicator"]) - 1
    raw_labels = _read_ints(required["graph_labels"])
    n_graphs = raw_labels.shape[0]
    if indicator.size == 0 or indicator.min() < 0 or indicator.max() >= n_graphs:
        raise IntegrityError("graph indicator references unknown graph ids")
    if np.any(np.diff(indicator) < 0):
        raise IntegrityError("graph indicator must list nodes graph by graph")

    edges = _read_matrix(required["A"]).astype(np.int64) - 1 if required["A"].stat().st_size else np.zeros((0, 2), np.int64)
    n_nodes = indicator.shape[0]
    if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
        raise IntegrityError("edge references a node that does not exist")
    if edges.size and np.any(indicator[edges[:, 0]] != indicator[edges[:, 1]]):
        raise IntegrityError("edge connects nodes of different graphs")

    attr_path = root / f"{name}_node_attributes.txt"
    label_path = root / f"{name}_node_labels.txt"
    if attr_path.is_file():
        features = _read_matrix(attr_path)
    elif label_path.is_file():
        node_labels = _read_ints(label_path)
        values = np.unique(node_labels)
        features = (node_labels[:, None] == values[None, :]).astype(np.float64)
    else:
        features = np.ones((n_nodes, 1))
    if features.shape[0] != n_nodes:
        raise IntegrityError("node feature rows do not match the graph indicator")

    classes = np.unique(raw_labels)
    remap = {int(c): i for i, c in enumerate(classes)}
    counts = np.bincount(indicator, minlength=n_graphs)
    if np.any(counts == 0):
        raise IntegrityError("graph without nodes")
    starts = np.concatenate(([0], np.cumsum(counts)))
    edge_owner = indicator[edges[:, 0]] if edges.size else np.zeros(0, np.int64)
    order = np.argsort(edge_owner, kind="stable")
    edges, edge_owner = edges[order], edge_owner[order]
    edge_starts = np.searchsorted(edge_owner, np.arange(n_graphs + 1))

    graphs = []
    for g in range(n_graphs):
        lo, hi = starts[g], starts[g + 1]
        e = edges[edge_starts[g]:edge_starts[g + 1]] - lo
        graphs.append(Graph(features[lo:hi], e, remap[int(raw_labels[g])]))
    return Dataset(graphs, len(classes), features.shape[1], name)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_tu_dataset(dataset: Dataset, dir_path, name: str | None = None) -> Path:
    """Serialise ``dataset`` in the TU layout (1-based ids, attributes as floats)."""
    name = name or dataset.name or "DATASET"
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, attr_lines = [], [], []
    offset = 0
    for gi, g in enumerate(dataset.graphs, start=1):
        for s, d in g.edges:
            a_lines.append(f"{s + offset + 1}, {d + offset + 1}")
        ind_lines.extend([str(gi)] * g.num_nodes)
        attr_lines.extend(", ".join(_fmt(v) for v in row) for row in g.node_features)
        offset += g.num_nodes
    (root / f"{name}_A.txt").write_text("".join(line + "\n" for line in a_lines))
    (root / f"{name}_graph_indicator.txt").write_text("".join(line + "\n" for line in ind_lines))
    (root / f"{name}_graph_labels.txt").write_text("".join(f"{g.label}\n" for g in dataset.graphs))
    (root / f"{name}_node_attributes.txt").write_text("".join(line + "\n" for line in attr_lines))
    return root


def find_tu_dataset(name: str, root=None) -> Path | None:
    """Locate ``<root>/<name>/<name>_A.txt`` using ``DISTILL_UQ_DATA`` as default root."""
    candidates = []
    if root is not None:
        candidates.append(Path(root))
    if os.environ.get("DISTILL_UQ_DATA"):
        candidates.append(Path(os.environ["DISTILL_UQ_DATA"]))
    for base in candidates:
        for d in (base / name, base / name / name, base / name / "raw", base):
            if (d / f"{name}_A.txt").is_file():
                return d
    return None


# ---------------------------------------------------- synthetic admissions

ADMISSION_TYPES = 6
LOCATIONS = 5
SERVICES = 8
# kind one-hot (visit, service) ++ admission type ++ location ++ service code
SYNTHETIC_FEATURE_DIM = 2 + ADMISSION_TYPES + LOCATIONS + SERVICES


def _patient_graph(rng: np.random.Generator, label: int) -> Graph:
    """One patient: visits chained in time, services hanging off visits.

    Label-dependent structure: readmitted patients (label 1) have longer visit
    chains, favour emergency admission types and a different service mix.
    Label 2 (only produced on request) mimics an ICU cohort: an admission
    location and service codes never used by the other two classes.
    """
    if label == 0:
        n_visits = int(rng.integers(2, 7))
        adm_p = np.array([0.3, 0.25, 0.2, 0.1, 0.1, 0.05])
        svc_p = np.array([0.2, 0.2, 0.2, 0.15, 0.15, 0.1, 0.0, 0.0])
        loc_p = np.array([0.4, 0.4, 0.2, 0.0, 0.0])
        n_services = int(rng.integers(1, 5))
    elif label == 1:
        n_visits = int(rng.integers(4, 9))
        adm_p = np.array([0.05, 0.1, 0.2, 0.2, 0.2, 0.25])
        svc_p = np.array([0.1, 0.1, 0.15, 0.2, 0.2, 0.25, 0.0, 0.0])
        loc_p = np.array([0.25, 0.4, 0.35, 0.0, 0.0])
        n_services = int(rng.integers(1, 6))
    else:
        n_visits = int(rng.integers(2, 9))
        adm_p = np.full(ADMISSION_TYPES, 1.0 / ADMISSION_TYPES)
        svc_p = np.array([0.0, 0.0, 0.0, 0.0, 0.1, 0.1, 0.4, 0.4])
        loc_p = np.array([0.0, 0.0, 0.0, 0.5, 0.5])
        n_services = int(rng.integers(1, 6))

    n = n_visits + n_services
    x = np.zeros((n, SYNTHETIC_FEATURE_DIM))
    edges = []
    for v in range(n_visits):
        x[v, 0] = 1.0
        x[v, 2 + rng.choice(ADMISSION_TYPES, p=adm_p)] = 1.0
        x[v, 2 + ADMISSION_TYPES + rng.choice(LOCATIONS, p=loc_p)] = 1.0
        if v > 0:
            edges.append((v - 1, v))
    for s in range(n_services):
        node = n_visits + s
        x[node, 1] = 1.0
        x[node, 2 + ADMISSION_TYPES + LOCATIONS + rng.choice(SERVICES, p=svc_p)] = 1.0
        edges.append((int(rng.integers(0, n_visits)), node))
    return Graph(x, np.array(edges, dtype=np.int64), label)


def generate_synthetic_admissions(n_patients: int, seed: int, *, include_icu: int = 0) -> Dataset:
    """Seeded binary-label stand-in for per-patient admission graphs.

    ``include_icu`` extra patients of a third class (label 2) can be appended
    for out-of-distribution experiments; hold them out with
    :func:`hold_out_class`.
    """
    if n_patients < 2:
        raise ParameterError("n_patients must be at least 2")
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(n_patients) % 2, np.full(include_icu, 2)])
    rng.shuffle(labels)
    graphs = [_patient_graph(rng, int(y)) for y in labels]
    return Dataset(graphs, 3 if include_icu else 2, SYNTHETIC_FEATURE_DIM, "SYNTH_ADMISSIONS")


def is_weakly_connected(graph: Graph) -> bool:
    n = graph.num_nodes
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for s, d in graph.edges:
        parent[find(int(s))] = find(int(d))
    return len({find(i) for i in range(n)}) == 1


# ------------------------------------------------------------ rebalancing


def undersample_majority(dataset: Dataset, seed: int) -> Dataset:
    if dataset.num_classes != 2:
        raise ParameterError("undersampling expects a binary dataset")
    labels = dataset.labels
    counts = np.bincount(labels, minlength=2)
    if counts[0] == counts[1]:
        return dataset
    rng = np.random.default_rng(seed)
    minority = int(np.argmin(counts))
    keep_major = rng.choice(np.flatnonzero(labels != minority), size=counts[minority], replace=False)
    keep = np.concatenate([np.flatnonzero(labels == minority), keep_major])
    rng.shuffle(keep)
    return dataset.subset(keep.tolist())


def undersample_counts(counts: tuple[int, int]) -> tuple[int, int]:
    """Class sizes after undersampling the majority to the minority count."""
    m = min(counts)
    return (m, m)


def _stratified_chunks(labels: np.ndarray, n_parts: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deal each class's shuffled members round-robin across ``n_parts`` parts.

    Round-robin continues where the previous class stopped, so part sizes
    stay balanced as well as per-class counts.
    """
    parts: list[list[int]] = [[] for _ in range(n_parts)]
    cursor = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        rng.shuffle(members)
        for idx in members:
            parts[cursor % n_parts].append(int(idx))
            cursor += 1
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


def _stratified_holdout(indices: np.ndarray, labels: np.ndarray, fraction: float,
                        rng: np.random.Generator) -> tuple[list[int], list[int]]:
    keep, held = [], []
    for c in np.unique(labels[indices]):
        members = indices[labels[indices] == c].copy()
        rng.shuffle(members)
        n_held = int(round(fraction * len(members)))
        held.extend(members[:n_held].tolist())
        keep.extend(members[n_held:].tolist())
    return sorted(keep), sorted(held)


def stratified_kfold(dataset: Dataset, folds: int = 5, seed: int = 0,
                     validation_fraction: float = 0.2) -> list[FoldSplit]:
    """Stratified k-fold; the non-test part is split again into train/validation."""
    if folds < 2:
        raise ParameterError("need at least two folds")
    labels = dataset.labels
    counts = np.bincount(labels)
    present = counts[counts > 0]
    if np.any(present < folds):
        raise StratificationError(f"a class has fewer than {folds} members: {counts.tolist()}")
    rng = np.random.default_rng(seed)
    parts = _stratified_chunks(labels, folds, rng)
    splits = []
    for f in range(folds):
        rest = np.concatenate([parts[j] for j in range(folds) if j != f])
        train, val = _stratified_holdout(rest, labels, validation_fraction, rng)
        splits.append(FoldSplit(f, train, val, parts[f].tolist()))
    return splits


def hold_out_class(dataset: Dataset, class_id: int) -> tuple[Dataset, Dataset]:
    if dataset.num_classes < 2:
        raise ParameterError("need at least two classes to hold one out")
    labels = dataset.labels
    if not np.any(labels == class_id):
        raise ParameterError(f"class {class_id} does not occur in the dataset")
    remap = {}
    for c in range(dataset.num_classes):
        if c != class_id:
            remap[c] = len(remap)
    id_graphs = [Graph(g.node_features, g.edges, remap[g.label]) for g in dataset.graphs if g.label != class_id]
    ood_graphs = [g for g in dataset.graphs if g.label == class_id]
    k = dataset.num_classes - 1
    ood = Dataset(ood_graphs, dataset.num_classes, dataset.feature_dim, f"{dataset.name}_ood{class_id}")
    return Dataset(id_graphs, k, dataset.feature_dim, dataset.name), ood


# ---------------------------------------------------------------- batching


def batch(graphs) -> Batch:
    graphs = list(graphs)
    if not graphs:
        raise ParameterError("cannot batch an empty list of graphs")
    dim = graphs[0].node_features.shape[1]
    if any(g.node_features.shape[1] != dim for g in graphs):
        raise IntegrityError("graphs in a batch must share the feature dimension")
    sizes = np.array([g.num_nodes for g in graphs])
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    edges = [g.edges + off for g, off in zip(graphs, offsets)]
    return Batch(
        node_features=np.concatenate([g.node_features for g in graphs], axis=0),
        edges=np.concatenate(edges, axis=0) if edges else np.zeros((0, 2), np.int64),
        graph_id=np.repeat(np.arange(len(graphs)), sizes),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
    )


def unbatch(b: Batch) -> list[Graph]:
    sizes = np.bincount(b.graph_id, minlength=b.num_graphs)
    starts = np.concatenate(([0], np.cumsum(sizes)))
    owner = b.graph_id[b.edges[:, 0]] if b.edges.size else np.zeros(0, np.int64)
    out = []
    for g in range(b.num_graphs):
        lo, hi = starts[g], starts[g + 1]
        out.append(Graph(b.node_features[lo:hi], b.edges[owner == g] - lo, int(b.labels[g])))
    return out
