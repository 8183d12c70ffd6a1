"""Input transformer, moment-based graph convolution layers and sum pooling.

Graphs of a batch are padded to the largest node count ``N`` and stacked into
``(B*N, width)`` node matrices; padded rows are masked out of batch-norm
statistics, pooling and losses. Graph filters are applied per graph with a
batched ``(B, N, N) @ (B, N, width)`` product.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import (Graph, apply_spectral_fn, conv_filter, eigendecompose, gaussian_features, laplacian,
                    normalized_laplacian)
from .model import EncoderConfig, Model


def input_filter(g: Graph, kind: Union[str, Callable] = "normalized_laplacian") -> np.ndarray:
    """The matrix ``f(L)`` applied to raw node features.

    ``kind`` is ``"normalized_laplacian"``, ``"laplacian"`` (``f(x) = x``),
    ``"identity"`` (``f(x) = 1``) or a scalar function of Laplacian eigenvalues.
    """
    if callable(kind):
        return apply_spectral_fn(eigendecompose(laplacian(g)), kind)
    if kind == "normalized_laplacian":
        return normalized_laplacian(g)
    if kind == "laplacian":
        return laplacian(g)
    if kind == "identity":
        return np.eye(g.n)
    raise ValueError(f"unknown input filter {kind!r}")


@dataclass
class PreparedGraph:
    n: int
    filtered_x: np.ndarray  # f(L) X
    conv: np.ndarray  # g(L)
    adjacency: np.ndarray
    input_matrix: Optional[np.ndarray] = None  # f(L), kept only for Gaussian features
    feature_seed: Optional[tuple] = None

    @property
    def random_features(self) -> bool:
        return self.feature_seed is not None

    def features_for(self, draw=None) -> np.ndarray:
        """``f(L) X``; with ``draw`` set, Gaussian features are redrawn from ``(feature_seed, draw)``."""
        if draw is None or not self.random_features:
            return self.filtered_x
        d = self.filtered_x.shape[1]
        return self.input_matrix @ gaussian_features(self.n, d, 1.0 / np.sqrt(d), self.feature_seed + (int(draw),))


def node_features(g: Graph, index: int, cfg: EncoderConfig, seed: int) -> np.ndarray:
    """Raw features of ``g``, or a Gaussian draw with sigma = 1/sqrt(d) when it has none."""
    if g.features is not None:
        return g.features
    d = cfg.random_feature_dim
    return gaussian_features(g.n, d, 1.0 / np.sqrt(d), (seed, index))


def prepare_graph(g: Graph, x: np.ndarray, filter_kind="normalized_laplacian") -> PreparedGraph:
    if x.shape[0] != g.n:
        raise ValueError(f"feature matrix has {x.shape[0]} rows, graph has {g.n} nodes")
    return PreparedGraph(g.n, input_filter(g, filter_kind) @ x, conv_filter(g), g.adjacency())


def prepare_graphs(graphs: Sequence[Graph], cfg: EncoderConfig, seed: int = 0) -> list:
    out = []
    for i, g in enumerate(graphs):
        p = prepare_graph(g, node_features(g, i, cfg, seed), cfg.input_filter)
        if g.features is None:
            p.input_matrix = input_filter(g, cfg.input_filter)
            p.feature_seed = (int(seed), i)
        out.append(p)
    return out


@dataclass
class Batch:
    indices: np.ndarray
    mask: np.ndarray  # (B, N)
    filtered_x: np.ndarray  # (B*N, d)
    conv: np.ndarray  # (B, N, N)
    adjacency: np.ndarray  # (B, N, N)
    labels: Optional[np.ndarray] = None
    kernels: Optional[dict] = None  # kind -> (B, B)

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def max_nodes(self) -> int:
        return self.mask.shape[1]

    @property
    def row_mask(self) -> np.ndarray:
        return self.mask.reshape(-1)

    @property
    def node_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def make_batch(prepared: Sequence[PreparedGraph], indices, labels=None, kernels=None, draw=None) -> Batch:
    """Pad the selected graphs into one batch; ``kernels`` maps kind to a KernelMatrix.

    ``draw`` selects a fresh Gaussian feature draw for featureless graphs
    (``None`` keeps the fixed draw made at preparation time).
    """
    from .kernels import batch_slice

    idx = np.asarray(indices, dtype=np.int64)
    items = [prepared[i] for i in idx]
    b = len(items)
    n = max(1, max(p.n for p in items))
    d = items[0].filtered_x.shape[1]
    mask = np.zeros((b, n))
    x = np.zeros((b, n, d))
    conv = np.zeros((b, n, n))
    adj = np.zeros((b, n, n))
    for k, p in enumerate(items):
        if p.filtered_x.shape[1] != d:
            raise ValueError(f"feature width {p.filtered_x.shape[1]} differs from batch width {d}")
        mask[k, :p.n] = 1.0
        x[k, :p.n] = p.features_for(draw)
        conv[k, :p.n, :p.n] = p.conv
        adj[k, :p.n, :p.n] = p.adjacency
    y = None if labels is None else np.asarray(labels)[idx]
    ks = None if kernels is None else {kind: batch_slice(km, idx) for kind, km in kernels.items()}
    return Batch(idx, mask, x.reshape(b * n, d), conv, adj, y, ks)


@dataclass
class EncoderOutput:
    z: Tensor  # (B, h)
    y: Tensor  # (B*N, h), padded rows zero
    layers: list


def _masked(x: Tensor, row_mask: np.ndarray) -> Tensor:
    return ad.mul(x, np.repeat(row_mask[:, None], x.shape[1], axis=1))


def graph_conv(conv: np.ndarray, x: Tensor) -> Tensor:
    """Apply each graph's filter to its own block of rows."""
    b, n, _ = conv.shape
    w = x.shape[1]
    return ad.reshape(ad.matmul(conv, ad.reshape(x, (b, n, w))), (b * n, w))


def input_transform(model: Model, dataset: str, batch: Batch, train: bool = False, rng=None) -> Tensor:
    """``MLP(f(L) X)`` with the dataset's own transformer, width ``hidden``."""
    if batch.filtered_x.shape[1] != model.datasets[dataset]["in_dim"]:
        raise ValueError(f"dataset {dataset!r} expects {model.datasets[dataset]['in_dim']} input features, "
                         f"got {batch.filtered_x.shape[1]}")
    out = model.mlp(f"ds.{dataset}.input", ad.as_tensor(batch.filtered_x), train, batch.row_mask, rng,
                    dropout=model.cfg.encoder_dropout_rate)
    return _masked(out, batch.row_mask)


def capsule_layer(model: Model, t: int, x: Tensor, conv: np.ndarray, row_mask: np.ndarray,
                  train: bool = False, rng=None) -> Tensor:
    """Layer ``t``: outer MLP of the sum over p of MLP_p(g(L) x^p)."""
    expected = model.cfg.layer_input_width(t)
    if x.shape[1] != expected:
        raise ad.ShapeError(f"layer {t} expects width {expected}, got {x.shape}")
    rate = model.cfg.encoder_dropout_rate
    total = None
    for p in range(1, model.cfg.moments + 1):
        branch = model.mlp(f"enc.{t}.moment{p}", graph_conv(conv, ad.elementwise_pow(x, p)), train, row_mask, rng,
                           dropout=rate)
        total = branch if total is None else ad.add(total, branch)
    out = model.mlp(f"enc.{t}.outer", total, train, row_mask, rng, dropout=rate)
    return _masked(out, row_mask)


def encode_batch(model: Model, dataset: str, batch: Batch, train: bool = False, rng=None) -> EncoderOutput:
    x0 = input_transform(model, dataset, batch, train, rng)
    outputs = [x0]
    for t in range(1, model.cfg.layers + 1):
        inp = outputs[0] if t == 1 else ad.concat(outputs, axis=1)
        outputs.append(capsule_layer(model, t, inp, batch.conv, batch.row_mask, train, rng))
    y = outputs[-1]
    b, n = batch.mask.shape
    z = ad.sum(ad.reshape(y, (b, n, y.shape[1])), axis=1)
    return EncoderOutput(z, y, outputs[1:])


def encode(model: Model, dataset: str, g: Graph, x: Optional[np.ndarray] = None, train: bool = False,
           rng=None, seed: int = 0) -> EncoderOutput:
    """Embed a single graph. Without ``x`` the graph's own (or Gaussian) features are used."""
    if x is None:
        x = node_features(g, 0, model.cfg, seed)
    batch = make_batch([prepare_graph(g, np.asarray(x, dtype=np.float64), model.cfg.input_filter)], [0])
    return encode_batch(model, dataset, batch, train, rng)


def embed_dataset(model: Model, dataset: str, prepared: Sequence[PreparedGraph], batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings for every prepared graph, shape ``(m, hidden)``."""
    rows = []
    for start in range(0, len(prepared), batch_size):
        idx = np.arange(start, min(start + batch_size, len(prepared)))
        rows.append(encode_batch(model, dataset, make_batch(prepared, idx), train=False).z.data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, model.cfg.hidden))
