"""Graph kernels used as decoder targets: WL subtree, shortest path and FGSD.

Feature maps are computed per graph; :func:`kernel_matrix` turns a dataset of
graphs into a cosine-normalized kernel matrix, and :func:`save_kernel` /
:func:`load_kernel` persist it in a small binary container.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graph import Graph, eigendecompose, laplacian

KINDS = ("WL", "SP", "FGSD")

ZERO_EIG = 1e-8
# harmonic distances are rounded before binning so that values sitting on a bin
# edge land in the same bin regardless of eigensolver round-off
_DIST_DECIMALS = 9


@dataclass(frozen=True)
class KernelConfig:
    wl_iterations: int = 3
    fgsd_bins: int = 200
    fgsd_range_max: float = 10.0
    fgsd_variant: str = "harmonic"
    sp_unlabeled_fallback: bool = True

    def __post_init__(self):
        if self.wl_iterations < 1:
            raise ValueError(f"wl_iterations must be >= 1, got {self.wl_iterations}")
        if self.fgsd_bins < 2:
            raise ValueError(f"fgsd_bins must be >= 2, got {self.fgsd_bins}")
        if not self.fgsd_range_max > 0:
            raise ValueError(f"fgsd_range_max must be > 0, got {self.fgsd_range_max}")
        if self.fgsd_variant not in ("harmonic", "biharmonic"):
            raise ValueError(f"unknown FGSD variant {self.fgsd_variant!r}")

    def digest(self, kind: str) -> str:
        """Hash of the fields that influence ``kind``; names the cache file."""
        relevant = {
            "WL": ("wl_iterations",),
            "SP": ("sp_unlabeled_fallback",),
            "FGSD": ("fgsd_bins", "fgsd_range_max", "fgsd_variant"),
        }[kind]
        payload = json.dumps({"kind": kind, **{k: getattr(self, k) for k in relevant}}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class KernelMatrix:
    kind: str
    values: np.ndarray
    raw_diag: np.ndarray
    config: KernelConfig = field(default_factory=KernelConfig)
    wl_table: Optional[dict] = None
    fingerprint: str = ""

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _node_labels(g: Graph, fallback: bool = True) -> tuple:
    if g.node_labels is not None:
        return g.node_labels
    return g.labels_or_degree() if fallback else (0,) * g.n


def wl_features(g: Graph, h: int, table: Optional[dict] = None) -> Counter:
    """Weisfeiler-Lehman subtree features over iterations ``0..h``.

    Keys are compressed label ids. ``table`` maps ``(iteration, signature)`` to
    an id and is extended in first-seen order (nodes visited by index), so a
    single table shared over a dataset keeps features aligned between graphs.
    """
    if table is None:
        table = {}
    nbrs = g.neighbors()
    labels = []
    for lab in _node_labels(g):
        labels.append(table.setdefault((0, (int(lab),)), len(table)))
    feats = Counter(labels)
    for it in range(1, h + 1):
        new = []
        for v in range(g.n):
            sig = (labels[v], tuple(sorted(labels[u] for u in nbrs[v])))
            new.append(table.setdefault((it, sig), len(table)))
        labels = new
        feats.update(labels)
    return feats


def bfs_distances(g: Graph) -> np.ndarray:
    """All-pairs hop distances; ``-1`` marks unreachable pairs."""
    nbrs = g.neighbors()
    dist = np.full((g.n, g.n), -1, dtype=np.int64)
    for s in range(g.n):
        dist[s, s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for v in nbrs[u]:
                if dist[s, v] < 0:
                    dist[s, v] = dist[s, u] + 1
                    q.append(v)
    return dist


def sp_features(g: Graph, fallback: bool = True) -> Counter:
    """Counts of ``(label_a, label_b, distance)`` over connected unordered node pairs."""
    labels = _node_labels(g, fallback)
    dist = bfs_distances(g)
    feats = Counter()
    for i in range(g.n):
        for j in range(i + 1, g.n):
            d = int(dist[i, j])
            if d > 0:
                a, b = sorted((labels[i], labels[j]))
                feats[(a, b, d)] += 1
    return feats


def spectral_distances(g: Graph, variant: str = "harmonic") -> np.ndarray:
    """Pairwise ``sum_k f(lambda_k) (phi_k(x) - phi_k(y))^2`` over nonzero eigenvalues.

    ``f(lambda) = 1/lambda`` (harmonic) or ``1/lambda^2`` (biharmonic).
    """
    dec = eigendecompose(laplacian(g))
    lam = dec.eigenvalues
    keep = lam > ZERO_EIG
    power = 1.0 if variant == "harmonic" else 2.0
    u = dec.eigenvectors[:, keep]
    pinv = (u / lam[keep] ** power) @ u.T
    diag = np.diag(pinv)
    return diag[:, None] + diag[None, :] - 2.0 * pinv


def fgsd_features(g: Graph, bins: int = 200, range_max: float = 10.0, variant: str = "harmonic") -> np.ndarray:
    """Histogram of spectral distances over ``bins`` equal bins on ``[0, range_max]``.

    The returned vector has ``bins + 1`` entries; the last is the overflow bin
    and also collects every pair that spans two connected components.
    """
    if bins < 2:
        raise ValueError(f"fgsd needs at least 2 bins, got {bins}")
    hist = np.zeros(bins + 1)
    if g.n < 2:
        return hist
    s = np.round(spectral_distances(g, variant), _DIST_DECIMALS)
    comp = g.components()
    iu, ju = np.triu_indices(g.n, 1)
    vals = s[iu, ju]
    same = comp[iu] == comp[ju]
    idx = np.floor(vals * bins / range_max).astype(np.int64)
    idx = np.clip(idx, 0, None)
    idx[vals == range_max] = bins - 1
    idx[(vals > range_max) | ~same] = bins
    np.add.at(hist, idx, 1.0)
    return hist


def feature_matrix(graphs: Sequence[Graph], kind: str, cfg: KernelConfig = KernelConfig()):
    """Dense ``(m, vocabulary)`` feature matrix plus the WL table (``None`` for other kinds)."""
    if kind == "FGSD":
        rows = [fgsd_features(g, cfg.fgsd_bins, cfg.fgsd_range_max, cfg.fgsd_variant) for g in graphs]
        return np.array(rows).reshape(len(graphs), cfg.fgsd_bins + 1), None
    table = None
    if kind == "WL":
        table = {}
        maps = [wl_features(g, cfg.wl_iterations, table) for g in graphs]
    elif kind == "SP":
        maps = [sp_features(g, cfg.sp_unlabeled_fallback) for g in graphs]
    else:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KINDS}")
    vocab = {}
    for mp in maps:
        for key in sorted(mp):
            vocab.setdefault(key, len(vocab))
    x = np.zeros((len(graphs), len(vocab)))
    for r, mp in enumerate(maps):
        for key, c in mp.items():
            x[r, vocab[key]] = c
    return x, table


def normalize_kernel(raw: np.ndarray) -> np.ndarray:
    d = np.diag(raw).copy()
    scale = np.sqrt(np.where(d > 0, d, 1.0))
    k = raw / scale[:, None] / scale[None, :]
    zero = d <= 0
    k[zero, :] = 0.0
    k[:, zero] = 0.0
    k = np.clip(0.5 * (k + k.T), 0.0, 1.0)
    np.fill_diagonal(k, 1.0)
    return k


def kernel_matrix(dataset: Sequence[Graph], kind: str, cfg: KernelConfig = KernelConfig()) -> KernelMatrix:
    if len(dataset) == 0:
        raise ValueError("cannot build a kernel matrix for an empty dataset")
    x, table = feature_matrix(dataset, kind, cfg)
    raw = x @ x.T
    return KernelMatrix(kind, normalize_kernel(raw), np.diag(raw).copy(), cfg, table)


def batch_slice(k: KernelMatrix, indices: Sequence[int]) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= k.size):
        bad = idx[(idx < 0) | (idx >= k.size)][0]
        raise IndexError(f"kernel index {bad} out of range for {k.size} graphs")
    return k.values[np.ix_(idx, idx)]


# cache container: magic, u32 version, u32 header length, JSON header,
# u64 m, m raw_diag doubles, m*m value doubles (all little-endian)

CACHE_MAGIC = b"UGKERNEL"
CACHE_VERSION = 1


def cache_path(directory, dataset_name: str, kind: str, cfg: KernelConfig) -> str:
    return os.path.join(str(directory), f"{dataset_name}.{kind}.{cfg.digest(kind)}.ugk")


def _table_to_json(table):
    return [[it, list(sig[0:1]) if it == 0 else [sig[0], list(sig[1])], idx]
            for (it, sig), idx in sorted(table.items(), key=lambda kv: kv[1])]


def _table_from_json(rows):
    table = {}
    for it, sig, idx in rows:
        key = (it, (int(sig[0]),)) if it == 0 else (it, (int(sig[0]), tuple(int(x) for x in sig[1])))
        table[key] = int(idx)
    return table


def graphs_fingerprint(graphs: Sequence[Graph]) -> str:
    """Content hash of a graph list (sizes, edges, node labels)."""
    h = hashlib.sha256()
    for g in graphs:
        h.update(json.dumps([g.n, [list(e) for e in g.edges], g.node_labels]).encode())
    return h.hexdigest()[:16]


def save_kernel(path, km: KernelMatrix, dataset_name: str = "", fingerprint: str = "") -> None:
    header = {
        "kind": km.kind,
        "dataset": dataset_name,
        "fingerprint": fingerprint,
        "config": asdict(km.config),
        "wl_table": None if km.wl_table is None else _table_to_json(km.wl_table),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    m = km.size
    parts = [
        CACHE_MAGIC,
        struct.pack("<II", CACHE_VERSION, len(blob)),
        blob,
        struct.pack("<Q", m),
        np.ascontiguousarray(km.raw_diag, dtype="<f8").tobytes(),
        np.ascontiguousarray(km.values, dtype="<f8").tobytes(),
    ]
    _atomic_write(path, b"".join(parts))


def load_kernel(path) -> KernelMatrix:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a kernel cache (bad magic)")
    off = len(CACHE_MAGIC)
    version, hlen = struct.unpack_from("<II", buf, off)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: kernel cache version {version}, expected {CACHE_VERSION}")
    off += 8
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    (m,) = struct.unpack_from("<Q", buf, off)
    off += 8
    need = off + 8 * (m + m * m)
    if len(buf) != need:
        raise ValueError(f"{path}: truncated kernel cache ({len(buf)} bytes, expected {need})")
    raw_diag = np.frombuffer(buf, dtype="<f8", count=m, offset=off).astype(np.float64)
    values = np.frombuffer(buf, dtype="<f8", count=m * m, offset=off + 8 * m).astype(np.float64).reshape(m, m)
    table = None if header["wl_table"] is None else _table_from_json(header["wl_table"])
    return KernelMatrix(header["kind"], values, raw_diag, KernelConfig(**header["config"]), table,
                        header.get("fingerprint", ""))


def _atomic_write(path, data: bytes) -> None:
    path = str(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_kernels(graphs: Sequence[Graph], cfg: KernelConfig = KernelConfig(),
                    cache_dir=None, dataset_name: str = "dataset", report: Optional[dict] = None) -> dict:
    """All three kernel matrices for a dataset, read from / written to ``cache_dir`` if given.

    A cache file is reused only when its graph fingerprint matches. ``report``
    collects ``kind -> (path, "hit" | "computed")``.
    """
    out = {}
    fp = graphs_fingerprint(graphs) if cache_dir else ""
    for kind in KINDS:
        path = cache_path(cache_dir, dataset_name, kind, cfg) if cache_dir else None
        if path and os.path.exists(path):
            km = load_kernel(path)
            if km.size == len(graphs) and km.fingerprint == fp:
                out[kind] = km
                if report is not None:
                    report[kind] = (path, "hit")
                continue
        km = kernel_matrix(graphs, kind, cfg)
        if path:
            save_kernel(path, km, dataset_name, fp)
        out[kind] = km
        if report is not None:
            report[kind] = (path, "computed")
    return out
