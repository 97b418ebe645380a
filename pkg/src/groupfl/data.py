"""Datasets, IDX ingestion, stratified splits and non-IID node partitions."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError

log = logging.getLogger(__name__)

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803

FRACTIONS = {"tenth": 0.1, "quarter": 0.25, "half": 0.5}
SETTINGS = {
    "Dtt": ("tenth", "tenth"),
    "Dtq": ("tenth", "quarter"),
    "Dth": ("tenth", "half"),
    "Dqq": ("quarter", "quarter"),
    "Dqh": ("quarter", "half"),
    "Dhh": ("half", "half"),
}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.y) == 0:
            raise DomainError("dataset is empty")
        if self.X.ndim != 2 or self.X.shape[0] != len(self.y):
            raise DomainError(f"features {self.X.shape} do not match {len(self.y)} labels")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise DomainError("label out of range")

    def __len__(self):
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, name or self.name)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class DiversitySetting:
    node_fraction: str
    edge_fraction: str

    def __post_init__(self):
        for f in (self.node_fraction, self.edge_fraction):
            if f not in FRACTIONS:
                raise ConfigError(f"unknown class fraction {f!r}")

    @classmethod
    def named(cls, name: str) -> "DiversitySetting":
        try:
            return cls(*SETTINGS[name])
        except KeyError:
            raise ConfigError(f"unknown diversity setting {name!r}; expected one of {sorted(SETTINGS)}") from None

    def classes_per_node(self, num_classes: int) -> int:
        return max(1, _round_half_up(FRACTIONS[self.node_fraction] * num_classes))

    def classes_per_edge(self, num_classes: int) -> int:
        return max(1, _round_half_up(FRACTIONS[self.edge_fraction] * num_classes))


def synth_blobs(num_classes: int, input_dim: int, per_class: int, seed: int, sigma: float = 0.3,
                condition: float = 1.0) -> Dataset:
    """Gaussian blobs with class means uniform in ``[-1, 1]^input_dim``.

    With ``condition > 1`` feature ``j`` is scaled by a geometric sequence
    running from 1 down to ``1 / condition``, which leaves the classes exactly
    as separable but makes gradient descent slow along the small features.
    """
    if min(num_classes, input_dim, per_class) < 1:
        raise DomainError("num_classes, input_dim and per_class must be positive")
    if sigma < 0 or condition < 1:
        raise DomainError("need sigma >= 0 and condition >= 1")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1.0, 1.0, size=(num_classes, input_dim))
    y = np.repeat(np.arange(num_classes), per_class)
    X = means[y] + sigma * rng.standard_normal((len(y), input_dim))
    if condition > 1:
        X = X * np.geomspace(1.0, 1.0 / condition, input_dim)
    return Dataset(X, y, num_classes, name=f"blobs-{num_classes}x{input_dim}-s{seed}")


# -- IDX ---------------------------------------------------------------------

def _read_header(buf: bytes, expected_magic: int, what: str):
    if len(buf) < 8:
        raise FormatError(f"{what} file truncated in header", offset=len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise FormatError(f"{what} file has magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{what} file truncated in dimension table", offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims)) if dims else 0
    if len(buf) - start < need:
        raise FormatError(f"{what} file truncated: need {need} data bytes, have {len(buf) - start}",
                          offset=len(buf))
    return dims, start


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    images = Path(images_path).read_bytes()
    labels = Path(labels_path).read_bytes()
    (n_img, *shape), s_img = _read_header(images, IDX_IMAGES_MAGIC, "images")
    (n_lab,), s_lab = _read_header(labels, IDX_LABELS_MAGIC, "labels")
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} does not match label count {n_lab}", offset=4)
    size = int(np.prod(shape))
    X = np.frombuffer(images, dtype=np.uint8, count=n_img * size, offset=s_img)
    y = np.frombuffer(labels, dtype=np.uint8, count=n_lab, offset=s_lab).astype(np.int64)
    if n_lab and y.max() >= num_classes:
        bad = int(np.argmax(y >= num_classes))
        raise FormatError(f"label {y[bad]} >= num_classes {num_classes}", offset=s_lab + bad)
    return Dataset(X.reshape(n_img, size) / 255.0, y, num_classes, name=Path(images_path).name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- splits ------------------------------------------------------------------

def split(ds: Dataset, seed: int, ratio=(3, 1, 1)):
    """Stratified train/validation/test split, 3:1:1 by default."""
    if len(ds) < 5:
        raise DomainError("need at least 5 examples to split")
    rng = np.random.default_rng(seed)
    total = sum(ratio)
    parts = ([], [], [])
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        if len(idx) == 0:
            continue
        if len(idx) < 5:
            log.warning("class %d has only %d examples; split proportions are best-effort", c, len(idx))
        idx = rng.permutation(idx)
        n_train = _round_half_up(len(idx) * ratio[0] / total)
        n_val = min(_round_half_up(len(idx) * ratio[1] / total), len(idx) - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    names = ("train", "val", "test")
    out = []
    for name, chunks in zip(names, parts):
        idx = np.sort(np.concatenate(chunks))
        if len(idx) == 0:
            raise DomainError(f"{name} split would be empty")
        out.append(ds.subset(idx, f"{ds.name}/{name}"))
    return tuple(out)


# -- partitions --------------------------------------------------------------

@dataclass
class Partition:
    """Per-node training data (as indices into ``train``) plus node-to-edge placement."""

    train: Dataset
    node_indices: list
    node_to_edge: list
    val: Dataset | None = None
    test: Dataset | None = None
    edge_classes: list = field(default_factory=list)
    fallback_nodes: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.node_indices)

    @property
    def num_edges(self) -> int:
        return max(self.node_to_edge) + 1

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.node_indices], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        """``|D_i| / |D|`` for every node."""
        s = self.sizes
        return s / s.sum()

    def node_data(self, i: int):
        ix = self.node_indices[i]
        return self.train.X[ix], self.train.y[ix]

    def pooled(self, nodes=None):
        nodes = range(self.num_nodes) if nodes is None else nodes
        ix = np.concatenate([self.node_indices[i] for i in nodes])
        return self.train.X[ix], self.train.y[ix]

    def label_sets(self):
        return [set(self.train.y[ix].tolist()) for ix in self.node_indices]

    def to_json(self) -> str:
        doc = {
            "num_nodes": self.num_nodes,
            "nodes": {str(i): {"edge": int(self.node_to_edge[i]),
                               "examples": [int(j) for j in ix]}
                      for i, ix in enumerate(self.node_indices)},
            "edge_classes": [sorted(int(c) for c in cs) for cs in self.edge_classes],
            "fallback_nodes": [int(i) for i in self.fallback_nodes],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, train: Dataset, val=None, test=None) -> "Partition":
        doc = json.loads(text)
        n = doc["num_nodes"]
        nodes = [doc["nodes"][str(i)] for i in range(n)]
        return cls(train=train,
                   node_indices=[np.array(v["examples"], dtype=np.int64) for v in nodes],
                   node_to_edge=[int(v["edge"]) for v in nodes],
                   val=val, test=test,
                   edge_classes=[set(c) for c in doc.get("edge_classes", [])],
                   fallback_nodes=list(doc.get("fallback_nodes", [])))


def partition(train: Dataset, num_nodes: int, num_edges: int, setting: DiversitySetting,
              mean_examples: float, sd_examples: float, seed: int, *,
              class_sd: float = 1.0, placement: str = "round_robin",
              val: Dataset | None = None, test: Dataset | None = None) -> Partition:
    """Split ``train`` across nodes with per-node and per-edge class caps.

    Edges receive class sets dealt from a shuffled cycle of all classes (so
    coverage is balanced); each node draws a (jittered, capped) number
    of classes from its edge's set and a normally distributed number of
    examples, sampled without replacement. When a node's classes are already
    exhausted it samples with replacement and is listed in ``fallback_nodes``.
    """
    if not num_nodes >= num_edges >= 1:
        raise ConfigError("need num_nodes >= num_edges >= 1")
    C = train.num_classes
    cpn = setting.classes_per_node(C)
    cpe = setting.classes_per_edge(C)
    if cpn > C or cpe > C:
        raise ConfigError(f"setting needs {max(cpn, cpe)} classes but dataset has {C}")
    if cpn > cpe:
        raise ConfigError("classes per node exceeds classes per edge")
    rng = np.random.default_rng(seed)

    if placement == "round_robin":
        node_to_edge = [i % num_edges for i in range(num_nodes)]
    elif placement == "random":
        node_to_edge = [i % num_edges for i in range(num_nodes)]
        node_to_edge = [int(e) for e in rng.permutation(node_to_edge)]
    else:
        raise ConfigError(f"unknown placement {placement!r}")

    # deal classes to edges from a shuffled cycle so every class is covered as evenly as possible
    cycle = rng.permutation(C)
    edge_classes = [set(int(cycle[(e * cpe + j) % C]) for j in range(cpe)) for e in range(num_edges)]

    pools = {c: list(rng.permutation(np.flatnonzero(train.y == c))) for c in range(C)}
    node_indices, fallback = [], []
    for i in range(num_nodes):
        allowed = np.array(sorted(edge_classes[node_to_edge[i]]))
        k = int(np.clip(_round_half_up(rng.normal(cpn, class_sd)) if class_sd > 0 else cpn, 1, cpn))
        classes = rng.choice(allowed, size=k, replace=False)
        want = max(1, _round_half_up(rng.normal(mean_examples, sd_examples)) if sd_examples > 0
                   else _round_half_up(mean_examples))
        avail = np.array([j for c in classes for j in pools[int(c)]], dtype=np.int64)
        if len(avail) == 0:
            full = np.flatnonzero(np.isin(train.y, classes))
            if len(full) == 0:
                raise ConfigError(f"node {i}: no training examples for classes {sorted(classes.tolist())}")
            chosen = np.sort(rng.choice(full, size=want, replace=True))
            fallback.append(i)
        else:
            take = min(want, len(avail))
            chosen = np.sort(rng.choice(avail, size=take, replace=False))
            used = set(chosen.tolist())
            for c in classes:
                pools[int(c)] = [j for j in pools[int(c)] if j not in used]
        node_indices.append(chosen)
    if fallback:
        log.warning("%d node(s) sampled with replacement after their classes ran out", len(fallback))
    return Partition(train=train, node_indices=node_indices, node_to_edge=node_to_edge,
                     val=val, test=test, edge_classes=edge_classes, fallback_nodes=fallback)
