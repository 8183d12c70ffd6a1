"""Multi-task decoder losses and the classification head.

Every loss averages over its entries (pairs, node pairs, graphs) rather than
summing, so loss weights do not depend on batch or graph size.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Batch, EncoderOutput
from .model import Model

PRETRAIN = "pretrain"
FINETUNE = "finetune"


@dataclass(frozen=True)
class LossWeights:
    lambda_A: float = 1.0
    lambda_K: float = 1.0
    lambda_k: Optional[tuple] = None  # per kernel, defaults to 1/K each
    lambda_class: float = 1.0
    adaptive: bool = True
    finetune_adjacency: bool = True
    finetune_unsup_kernel: bool = True

    def __post_init__(self):
        vals = [self.lambda_A, self.lambda_K, self.lambda_class] + list(self.lambda_k or ())
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be nonnegative: {self}")

    def kernel_weights(self, kinds: Sequence[str]) -> dict:
        if self.lambda_k is None:
            return {k: 1.0 / len(kinds) for k in kinds}
        if len(self.lambda_k) != len(kinds):
            raise ValueError(f"{len(self.lambda_k)} kernel weights for {len(kinds)} kernels")
        return dict(zip(kinds, self.lambda_k))


def adjacency_loss(y: Tensor, adjacency: np.ndarray, mask: np.ndarray, lambda_A: float = 1.0) -> Tensor:
    """Mean BCE between ``sigmoid(Y Y^T)`` and the adjacency of each graph.

    ``y`` is ``(B, N, h)`` or the flat ``(B*N, h)`` encoder output. Every real
    node pair counts, the diagonal included (target 0). Per-graph means are
    averaged over the batch.
    """
    b, n = mask.shape
    if adjacency.shape != (b, n, n):
        raise ad.ShapeError(f"adjacency_loss: shape mismatch {adjacency.shape} vs mask {mask.shape}")
    if y.ndim == 2:
        if y.shape[0] != b * n:
            raise ad.ShapeError(f"adjacency_loss: shape mismatch {y.shape} vs mask {mask.shape}")
        y = ad.reshape(y, (b, n, y.shape[1]))
    elif y.shape[:2] != (b, n):
        raise ad.ShapeError(f"adjacency_loss: shape mismatch {y.shape} vs mask {mask.shape}")
    probs = ad.sigmoid(ad.matmul(y, ad.transpose(y)))
    counts = mask.sum(axis=1)
    pair = mask[:, :, None] * mask[:, None, :]
    weight = pair / np.maximum(counts, 1.0)[:, None, None] ** 2 / b
    return ad.scalar_mul(ad.bce(probs, adjacency, weight), lambda_A)


def pair_scores(z: Tensor, w: Tensor) -> Tensor:
    """``sigmoid(z_i^T W z_j)`` for every ordered pair in the batch."""
    return ad.sigmoid(ad.bilinear(z, w, z))


def kernel_loss_unsup(z: Tensor, heads: Mapping[str, Tensor], k_slices: Mapping[str, np.ndarray],
                      weights: LossWeights = LossWeights()) -> Tensor:
    b = z.shape[0]
    kinds = list(k_slices)
    lam = weights.kernel_weights(kinds)
    total = None
    for kind in kinds:
        target = np.asarray(k_slices[kind])
        if target.shape != (b, b):
            raise ad.ShapeError(f"kernel slice {kind} has shape {target.shape}, batch size is {b}")
        term = ad.scalar_mul(ad.mse(pair_scores(z, heads[kind]), target), lam[kind])
        total = term if total is None else ad.add(total, term)
    return ad.scalar_mul(total, weights.lambda_K)


def adaptive_targets(k_slices: Sequence[np.ndarray], labels) -> np.ndarray:
    """Max over kernels for same-label pairs, min over kernels otherwise."""
    if labels is None:
        raise ValueError("adaptive kernel loss needs class labels for every graph")
    stack = np.stack([np.asarray(k) for k in k_slices])
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    return np.where(same, stack.max(axis=0), stack.min(axis=0))


def kernel_loss_adaptive(z: Tensor, w_adapt: Tensor, k_slices: Sequence[np.ndarray], labels,
                         lambda_K: float = 1.0) -> Tensor:
    target = adaptive_targets(k_slices, labels)
    if target.shape != (z.shape[0], z.shape[0]):
        raise ad.ShapeError(f"kernel slices have shape {target.shape}, batch size is {z.shape[0]}")
    return ad.scalar_mul(ad.mse(pair_scores(z, w_adapt), target), lambda_K)


def classifier_logits(model: Model, dataset: str, z: Tensor, train: bool = False, rng=None) -> Tensor:
    return model.mlp(f"ds.{dataset}.head", z, train, None, rng)


def classify(model: Model, dataset: str, z: Tensor, train: bool = False, rng=None) -> Tensor:
    """Class probabilities for each embedding row."""
    if z.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
    return ad.softmax(classifier_logits(model, dataset, z, train, rng))


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict = field(default_factory=dict)

    def values(self) -> dict:
        out = {k: v.item() for k, v in self.parts.items()}
        out["total"] = self.total.item()
        return out


def total_loss(model: Model, dataset: str, batch: Batch, out: EncoderOutput, mode: str,
               weights: LossWeights = LossWeights(), train: bool = False, rng=None) -> LossBreakdown:
    """Weighted decoder objective for one batch.

    ``pretrain`` uses the adjacency and unsupervised kernel losses; ``finetune``
    uses cross entropy plus the adaptive kernel loss, and keeps the two
    unsupervised terms when the corresponding flags are set.
    """
    if mode not in (PRETRAIN, FINETUNE):
        raise ValueError(f"unknown mode {mode!r}")
    parts = {}
    use_adj = mode == PRETRAIN or weights.finetune_adjacency
    use_unsup = mode == PRETRAIN or weights.finetune_unsup_kernel
    if use_adj and weights.lambda_A > 0:
        parts["adjacency"] = adjacency_loss(out.y, batch.adjacency, batch.mask, weights.lambda_A)
    if use_unsup and weights.lambda_K > 0 and batch.kernels:
        heads = {k: model.params[f"dec.W.{k}"] for k in batch.kernels}
        parts["kernel_unsup"] = kernel_loss_unsup(out.z, heads, batch.kernels, weights)
    if mode == FINETUNE:
        if batch.labels is None:
            raise ValueError("finetune loss needs graph labels")
        if weights.adaptive and weights.lambda_K > 0 and batch.kernels:
            parts["kernel_adaptive"] = kernel_loss_adaptive(
                out.z, model.params["dec.W.adapt"], list(batch.kernels.values()), batch.labels, weights.lambda_K)
        if weights.lambda_class > 0:
            logits = classifier_logits(model, dataset, out.z, train, rng)
            parts["class"] = ad.scalar_mul(ad.softmax_cross_entropy(logits, batch.labels), weights.lambda_class)
    total = None
    for v in parts.values():
        total = v if total is None else ad.add(total, v)
    if total is None:
        total = Tensor(0.0)
    return LossBreakdown(total, parts)
