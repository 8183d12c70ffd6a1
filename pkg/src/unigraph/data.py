"""Datasets: TU benchmark parsing, synthetic generators and checkpoint files."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graph import Graph, complete_graph, cycle_graph, make_rng, permute, random_graph
from .kernels import _atomic_write
from .model import EncoderConfig, Model


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    graphs: list
    labels: np.ndarray
    num_classes: int
    feature_dim: int = 0
    class_values: list = field(default_factory=list)  # original label of each class id

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.graphs):
            raise ValueError(f"{len(self.labels)} labels for {len(self.graphs)} graphs")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("class ids must lie in 0..num_classes-1")
        if self.feature_dim > 0:
            for i, g in enumerate(self.graphs):
                if g.features is None or g.features.shape[1] != self.feature_dim:
                    raise ValueError(f"graph {i} does not carry {self.feature_dim} feature columns")

    def __len__(self):
        return len(self.graphs)

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        idx = list(indices)
        return Dataset(name or self.name, [self.graphs[i] for i in idx], self.labels[idx], self.num_classes,
                       self.feature_dim, list(self.class_values))


# TU benchmark format

def _read_lines(path):
    with open(path) as fh:
        return [(no, line.strip()) for no, line in enumerate(fh, 1) if line.strip()]


def _ints(text, path, no):
    try:
        return [int(float(tok)) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise DataFormatError(f"{path}:{no}: cannot parse integers from {text!r}") from None


def load_tu(directory, name: str) -> Dataset:
    """Parse ``NAME_A.txt``, ``NAME_graph_indicator.txt`` and ``NAME_graph_labels.txt``.

    ``NAME_node_labels.txt`` and ``NAME_node_attributes.txt`` are optional.
    Node labels become one-hot features, attributes are used as given, and
    both are concatenated when present. Graph labels are remapped to
    ``0..C-1`` in sorted order of the original values. Self-loops are dropped.
    """
    def path(suffix):
        return os.path.join(str(directory), f"{name}_{suffix}.txt")

    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not os.path.exists(path(suffix)):
            raise FileNotFoundError(f"missing TU file {path(suffix)}")

    indicator = []
    for no, line in _read_lines(path("graph_indicator")):
        (gid,) = _ints(line, path("graph_indicator"), no)
        indicator.append(gid)
    indicator = np.asarray(indicator, dtype=np.int64)
    graph_ids = sorted(set(indicator.tolist()))
    raw_labels = [_ints(line, path("graph_labels"), no)[0] for no, line in _read_lines(path("graph_labels"))]
    if len(raw_labels) != len(graph_ids):
        raise DataFormatError(f"{len(raw_labels)} graph labels for {len(graph_ids)} graphs")

    gpos = {gid: k for k, gid in enumerate(graph_ids)}
    node_graph = np.array([gpos[g] for g in indicator.tolist()], dtype=np.int64)
    first = np.zeros(len(graph_ids), dtype=np.int64)
    sizes = np.bincount(node_graph, minlength=len(graph_ids))
    first[1:] = np.cumsum(sizes)[:-1]
    if np.any(np.diff(node_graph) < 0):
        raise DataFormatError(f"{path('graph_indicator')}: nodes are not grouped by graph")

    edges = [set() for _ in graph_ids]
    total = len(indicator)
    for no, line in _read_lines(path("A")):
        vals = _ints(line, path("A"), no)
        if len(vals) != 2:
            raise DataFormatError(f"{path('A')}:{no}: expected two node ids, got {line!r}")
        u, v = vals[0] - 1, vals[1] - 1
        if not (0 <= u < total and 0 <= v < total):
            raise DataFormatError(f"{path('A')}:{no}: node id out of range in {line!r}")
        gu, gv = node_graph[u], node_graph[v]
        if gu != gv:
            raise DataFormatError(f"{path('A')}:{no}: edge {line!r} joins nodes of different graphs")
        if u == v:
            continue
        a, b = u - first[gu], v - first[gu]
        edges[gu].add((min(a, b), max(a, b)))

    node_labels = None
    if os.path.exists(path("node_labels")):
        node_labels = [_ints(line, path("node_labels"), no)[0] for no, line in _read_lines(path("node_labels"))]
        if len(node_labels) != total:
            raise DataFormatError(f"{len(node_labels)} node labels for {total} nodes")
    attrs = None
    if os.path.exists(path("node_attributes")):
        rows = []
        for no, line in _read_lines(path("node_attributes")):
            try:
                rows.append([float(t) for t in line.replace(",", " ").split()])
            except ValueError:
                raise DataFormatError(f"{path('node_attributes')}:{no}: bad attribute row {line!r}") from None
        attrs = np.asarray(rows, dtype=np.float64)
        if attrs.shape[0] != total:
            raise DataFormatError(f"{attrs.shape[0]} attribute rows for {total} nodes")

    blocks = []
    if node_labels is not None:
        vocab = {v: k for k, v in enumerate(sorted(set(node_labels)))}
        onehot = np.zeros((total, len(vocab)))
        onehot[np.arange(total), [vocab[v] for v in node_labels]] = 1.0
        blocks.append(onehot)
    if attrs is not None:
        blocks.append(attrs)
    feats = np.concatenate(blocks, axis=1) if blocks else None

    graphs = []
    for k in range(len(graph_ids)):
        lo, hi = first[k], first[k] + sizes[k]
        graphs.append(Graph(int(sizes[k]), tuple(sorted(edges[k])),
                            None if node_labels is None else node_labels[lo:hi],
                            None if feats is None else feats[lo:hi]))
    classes = sorted(set(raw_labels))
    cmap = {c: i for i, c in enumerate(classes)}
    return Dataset(name, graphs, [cmap[v] for v in raw_labels], len(classes),
                   0 if feats is None else feats.shape[1], classes)


def write_tu(directory, ds: Dataset) -> None:
    """Write ``ds`` in TU text format.

    Node labels are written when every graph has them; feature matrices are not written.
    """
    os.makedirs(directory, exist_ok=True)
    a_lines, ind_lines, offset = [], [], 0
    for k, g in enumerate(ds.graphs):
        for i, j in g.edges:
            a_lines.append(f"{i + offset + 1}, {j + offset + 1}")
            a_lines.append(f"{j + offset + 1}, {i + offset + 1}")
        ind_lines.extend([str(k + 1)] * g.n)
        offset += g.n
    values = ds.class_values or list(range(ds.num_classes))
    files = [("A", a_lines), ("graph_indicator", ind_lines), ("graph_labels", [str(values[y]) for y in ds.labels])]
    if ds.graphs and all(g.node_labels is not None for g in ds.graphs):
        files.append(("node_labels", [str(v) for g in ds.graphs for v in g.node_labels]))
    for suffix, lines in files:
        with open(os.path.join(directory, f"{ds.name}_{suffix}.txt"), "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))


# synthetic data

def synth_cycles_vs_cliques(count: int, size_range=(4, 12), seed: int = 0, name: str = "cycles_cliques") -> Dataset:
    """Cycle graphs (class 0) and complete graphs (class 1) with randomly relabelled nodes.

    Sizes are drawn uniformly from ``size_range`` (inclusive), raised to at
    least 4 because the 3-cycle and the triangle coincide.
    """
    lo, hi = max(4, size_range[0]), max(4, size_range[1])
    rng = make_rng((seed, 0xC1C))
    graphs, labels = [], []
    for i in range(count):
        n = int(rng.integers(lo, hi + 1))
        base = cycle_graph(n) if i % 2 == 0 else complete_graph(n)
        graphs.append(permute(base, rng.permutation(n)))
        labels.append(i % 2)
    return Dataset(name, graphs, labels, 2, 0, [0, 1])


def synth_sparse_vs_dense(count: int, size_range=(6, 14), seed: int = 0, p=(0.15, 0.5),
                          num_node_labels: int = 3, name: str = "sparse_dense") -> Dataset:
    """Erdos-Renyi graphs at two edge densities, with categorical node labels as one-hot features.

    Node labels are ``degree mod num_node_labels``; class 0 is sparse, class 1 dense.
    """
    rng = make_rng((seed, 0x5D))
    graphs, labels = [], []
    for i in range(count):
        n = int(rng.integers(size_range[0], size_range[1] + 1))
        y = i % 2
        g = random_graph(n, p[y], rng)
        lab = [int(d) % num_node_labels for d in g.degrees()]
        x = np.eye(num_node_labels)[lab]
        graphs.append(Graph(n, g.edges, lab, x))
        labels.append(y)
    return Dataset(name, graphs, labels, 2, num_node_labels, [0, 1])


def cyclomatic_number(g: Graph) -> int:
    return g.num_edges - g.n + g.num_components()


def mutag_cycle_rule(g: Graph) -> int:
    """Label 1 when the graph has 3 or more independent cycles, else label 2."""
    return 1 if cyclomatic_number(g) >= 3 else 2


# checkpoints
#
# magic, u32 version, u32 header length, JSON header, u32 record count, then
# per record: u16 name length, name, u8 ndim, ndim x u64 dims, float64 values.
# Everything little-endian; records sorted by name.

CKPT_MAGIC = b"UGCKPT01"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    format_version: int
    tensors: dict
    config: dict
    registry: dict


def _checkpoint_bytes(ck: Checkpoint) -> bytes:
    header = json.dumps({"config": ck.config, "registry": ck.registry}, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<II", ck.format_version, len(header)), header,
           struct.pack("<I", len(ck.tensors))]
    for name in sorted(ck.tensors):
        arr = np.ascontiguousarray(ck.tensors[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<HB", len(raw), arr.ndim))
        out.append(raw)
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_from_model(model: Model, extra_config: Optional[dict] = None) -> Checkpoint:
    tensors = {name: t.data for name, t in model.params.items()}
    for name, st in model.bn.items():
        tensors[f"bnstat.{name}.mean"] = st.mean
        tensors[f"bnstat.{name}.var"] = st.var
    registry = {ds: {**info, "params": model.dataset_param_names(ds)} for ds, info in model.datasets.items()}
    cfg = model.config_dict()
    if extra_config:
        cfg["run"] = extra_config
    return Checkpoint(CKPT_VERSION, tensors, cfg, registry)


def save_checkpoint(path, model_or_ckpt, extra_config: Optional[dict] = None) -> None:
    ck = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else checkpoint_from_model(model_or_ckpt, extra_config)
    _atomic_write(path, _checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(off, size, what):
        if off + size > len(buf):
            raise DataFormatError(f"{path}: truncated checkpoint at offset {off} while reading {what}")

    need(0, len(CKPT_MAGIC), "magic")
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    need(off, 8, "header")
    version, hlen = struct.unpack_from("<II", buf, off)
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off += 8
    need(off, hlen, "header")
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    need(off, 4, "record count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        need(off, 3, "record header")
        nlen, ndim = struct.unpack_from("<HB", buf, off)
        off += 3
        need(off, nlen + 8 * ndim, "record name")
        name = buf[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        need(off, 8 * size, f"values of {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 8 * size
    if off != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - off} trailing bytes after offset {off}")
    return Checkpoint(version, tensors, header["config"], header["registry"])


def model_from_checkpoint(ck: Checkpoint) -> Model:
    cfg = ck.config
    model = Model(EncoderConfig(**cfg["encoder"]), cfg["seed"], tuple(cfg["kernels"]))
    for ds, info in sorted(ck.registry.items()):
        model.add_dataset(ds, info["in_dim"], info["num_classes"])
    expected = set(model.params) | {f"bnstat.{k}.{s}" for k in model.bn for s in ("mean", "var")}
    if expected != set(ck.tensors):
        missing = sorted(expected - set(ck.tensors))[:3]
        extra = sorted(set(ck.tensors) - expected)[:3]
        raise DataFormatError(f"checkpoint does not match model layout (missing {missing}, unexpected {extra})")
    for name, arr in ck.tensors.items():
        if name.startswith("bnstat."):
            key, stat = name[len("bnstat."):].rsplit(".", 1)
            setattr(model.bn[key], stat, arr.copy())
        else:
            if model.params[name].shape != arr.shape:
                raise DataFormatError(f"{name}: shape {arr.shape} in checkpoint, model expects "
                                      f"{model.params[name].shape}")
            model.params[name].data = arr.copy()
    return model
