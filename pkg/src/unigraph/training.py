"""Optimization: learning-rate schedule, Adam, pretraining, fine-tuning and k-fold evaluation."""
from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tape
from .data import Dataset
from .encoder import PreparedGraph, encode_batch, make_batch, prepare_graphs
from .graph import make_rng
from .kernels import KINDS, KernelConfig, KernelMatrix, dataset_kernels
from .losses import FINETUNE, PRETRAIN, LossWeights, classifier_logits, total_loss
from .model import EncoderConfig, Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epoch: int = 3000
    warmup_epochs: float = 2
    lr_init: float = 1e-4
    lr_max: float = 1e-3
    lr_final: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 5e-4
    patience: int = 50
    smoothing: int = 5
    folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_init, self.lr_max, self.lr_final) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.warmup_epochs < self.max_epoch:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < max_epoch ({self.max_epoch})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.smoothing < 1:
            raise ValueError("smoothing must be >= 1")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from ``lr_init`` to ``lr_max``, then cosine decay to ``lr_final`` at ``max_epoch``."""
    if not 0 <= epoch <= cfg.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epoch}]")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * epoch / cfg.warmup_epochs
    frac = (epoch - cfg.warmup_epochs) / (cfg.max_epoch - cfg.warmup_epochs)
    return cfg.lr_final + 0.5 * (cfg.lr_max - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> AdamState:
    """One in-place Adam update of the arrays in ``params`` (name -> Tensor or ndarray).

    ``weight_decay * w`` is added to each gradient first (L2 regularization).
    Parameters whose gradient is ``None`` are left untouched.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        w = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        g = g + weight_decay * w if weight_decay else g
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        w -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


@dataclass
class DatasetBundle:
    """A dataset with its featurized graphs and precomputed kernel matrices."""

    dataset: Dataset
    prepared: list
    kernels: Optional[dict]

    @property
    def name(self) -> str:
        return self.dataset.name

    @property
    def in_dim(self) -> int:
        return self.prepared[0].filtered_x.shape[1]


def prepare_dataset(dataset: Dataset, enc_cfg: EncoderConfig = EncoderConfig(),
                    kernel_cfg: Optional[KernelConfig] = KernelConfig(), seed: int = 0,
                    cache_dir=None, kernels: Optional[dict] = None) -> DatasetBundle:
    """Featurize every graph and attach kernel matrices (computed, cached or given)."""
    prepared = prepare_graphs(dataset.graphs, enc_cfg, seed)
    if kernels is None and kernel_cfg is not None:
        kernels = dataset_kernels(dataset.graphs, kernel_cfg, cache_dir, dataset.name)
    return DatasetBundle(dataset, prepared, kernels)


def _split_batches(indices: np.ndarray, batch_size: int) -> list:
    if len(indices) == 0:
        return []
    return np.array_split(indices, math.ceil(len(indices) / batch_size))


def _draw(model: Model, key: tuple):
    """Feature draw id for a training epoch, or None when resampling is off."""
    if not model.cfg.resample_features:
        return None
    return zlib.crc32(repr(key).encode())


def _step(model: Model, bundle: DatasetBundle, idx, mode: str, weights: LossWeights, state: AdamState,
          lr: float, weight_decay: float, rng, max_kernel_entries: Optional[list] = None, draw=None) -> dict:
    batch = make_batch(bundle.prepared, idx, bundle.dataset.labels, bundle.kernels, draw)
    if max_kernel_entries is not None and batch.kernels:
        max_kernel_entries.append(max(k.size for k in batch.kernels.values()))
    model.zero_grad()
    with Tape() as tape:
        out = encode_batch(model, bundle.name, batch, train=True, rng=rng)
        loss = total_loss(model, bundle.name, batch, out, mode, weights, train=True, rng=rng)
    tape.backward(loss.total)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    adam_step(model.params, grads, state, lr, weight_decay)
    return loss.values()


def _class_probs(model: Model, bundle: DatasetBundle, idx, draws: int, first=None) -> np.ndarray:
    """Eval-mode class probabilities averaged over feature draws.

    ``first`` is the output already computed on the fixed draw. Extra draws
    only matter for graphs with random features.
    """
    if first is None:
        first = encode_batch(model, bundle.name, make_batch(bundle.prepared, idx), train=False)
    outs = [first]
    if any(bundle.prepared[i].random_features for i in idx):
        for k in range(1, draws):
            batch = make_batch(bundle.prepared, idx, draw=zlib.crc32(repr((3, k)).encode()))
            outs.append(encode_batch(model, bundle.name, batch, train=False))
    probs = 0.0
    for out in outs:
        logits = classifier_logits(model, bundle.name, out.z).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = probs + e / e.sum(axis=1, keepdims=True)
    return probs / len(outs)


def evaluate(model: Model, bundle: DatasetBundle, indices, mode: str = FINETUNE,
             weights: LossWeights = LossWeights(), chunk: int = 256, draws: Optional[int] = None) -> dict:
    """Eval-mode loss (averaged over chunks, weighted by size) and accuracy.

    The loss uses the fixed feature draw; accuracy averages class
    probabilities over ``draws`` draws (default ``model.cfg.eval_draws``).
    """
    draws = model.cfg.eval_draws if draws is None else draws
    indices = np.asarray(indices, dtype=np.int64)
    total, correct, parts = 0.0, 0, {}
    for idx in _split_batches(indices, chunk):
        batch = make_batch(bundle.prepared, idx, bundle.dataset.labels, bundle.kernels)
        out = encode_batch(model, bundle.name, batch, train=False)
        loss = total_loss(model, bundle.name, batch, out, mode, weights, train=False)
        frac = len(idx) / len(indices)
        total += loss.total.item() * frac
        for k, v in loss.values().items():
            parts[k] = parts.get(k, 0.0) + v * frac
        if mode == FINETUNE and model.datasets[bundle.name]["num_classes"] > 0:
            pred = np.argmax(_class_probs(model, bundle, idx, draws, out), axis=1)
            correct += int(np.sum(pred == batch.labels))
    return {"loss": total, "accuracy": correct / len(indices) if len(indices) else float("nan"), "parts": parts}


def predict(model: Model, bundle: DatasetBundle, indices, chunk: int = 256, draws: Optional[int] = None) -> np.ndarray:
    draws = model.cfg.eval_draws if draws is None else draws
    preds = [np.argmax(_class_probs(model, bundle, idx, draws), axis=1)
             for idx in _split_batches(np.asarray(indices, dtype=np.int64), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def pretrain(bundles: Sequence[DatasetBundle], model: Model, cfg: TrainConfig,
             weights: LossWeights = LossWeights(), epochs: Optional[int] = None,
             log_fn: Optional[Callable] = None, kernel_audit: Optional[list] = None) -> list:
    """Unsupervised training on several datasets at once.

    Each batch comes from a single dataset so its kernel slices line up;
    batches of different datasets are interleaved round-robin within an
    epoch. Returns the mean batch loss of every epoch.
    """
    for b in bundles:
        if not b.kernels:
            raise ValueError(f"no kernel matrices for dataset {b.name!r}; run the kernel precompute step first")
        model.add_dataset(b.name, b.in_dim, b.dataset.num_classes)
    epochs = cfg.max_epoch if epochs is None else epochs
    state = AdamState()
    history = []
    for epoch in range(epochs):
        rng = make_rng((cfg.seed, 1, epoch))
        queues = [[(b, idx) for idx in _split_batches(rng.permutation(len(b.dataset)), cfg.batch_size)]
                  for b in bundles]
        order = []
        for r in range(max(len(q) for q in queues)):
            order.extend(q[r] for q in queues if r < len(q))
        losses = []
        for i, (b, idx) in enumerate(order):
            lr = lr_at(min(epoch + i / len(order), cfg.max_epoch), cfg)
            vals = _step(model, b, idx, PRETRAIN, weights, state, lr, cfg.weight_decay, rng, kernel_audit,
                         _draw(model, (1, epoch)))
            losses.append(vals)
        mean = float(np.mean([v["total"] for v in losses]))
        history.append(mean)
        if log_fn is not None:
            comps = {k: float(np.mean([v.get(k, 0.0) for v in losses])) for k in losses[0]}
            log_fn({"stage": "pretrain", "epoch": epoch, "lr": lr_at(epoch, cfg), "loss": comps})
    return history


@dataclass
class FinetuneResult:
    test_accuracy: float
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    train_accuracy: float
    history: list


def finetune(model: Model, bundle: DatasetBundle, split, cfg: TrainConfig,
             weights: LossWeights = LossWeights(), epochs: Optional[int] = None,
             log_fn: Optional[Callable] = None, fold: Optional[int] = None) -> FinetuneResult:
    """Supervised training on one dataset with early stopping on validation loss.

    ``split`` is ``(train, val, test)`` index arrays. Validation loss is
    smoothed over ``cfg.smoothing`` epochs; the snapshot with the lowest
    smoothed value is kept and training stops once ``cfg.patience`` epochs
    pass without improvement. ``model`` ends up holding that snapshot.
    """
    train_idx, val_idx, test_idx = (np.asarray(s, dtype=np.int64) for s in split)
    if len(val_idx) == 0:
        raise ValueError("finetune needs a nonempty validation set")
    model.add_dataset(bundle.name, bundle.in_dim, bundle.dataset.num_classes)
    epochs = cfg.max_epoch if epochs is None else epochs
    state = AdamState()
    best, best_loss, best_epoch = model.state(), math.inf, -1
    recent, history, since = [], [], 0
    epoch = 0
    for epoch in range(epochs):
        rng = make_rng((cfg.seed, 2, 0 if fold is None else fold + 1, epoch))
        batches = _split_batches(rng.permutation(train_idx), cfg.batch_size)
        parts = []
        for i, idx in enumerate(batches):
            lr = lr_at(min(epoch + i / len(batches), cfg.max_epoch), cfg)
            parts.append(_step(model, bundle, idx, FINETUNE, weights, state, lr, cfg.weight_decay, rng,
                               draw=_draw(model, (2, 0 if fold is None else fold + 1, epoch))))
        val = evaluate(model, bundle, val_idx, FINETUNE, weights, draws=1)  # per-epoch monitor, fixed draw only
        recent = (recent + [val["loss"]])[-cfg.smoothing:]
        smoothed = float(np.mean(recent))
        record = {"stage": "finetune", "fold": fold, "epoch": epoch, "lr": lr_at(epoch, cfg),
                  "loss": {k: float(np.mean([p.get(k, 0.0) for p in parts])) for k in parts[0]} if parts else {},
                  "val_loss": val["loss"], "val_loss_smoothed": smoothed, "val_accuracy": val["accuracy"]}
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if smoothed < best_loss:
            best, best_loss, best_epoch, since = model.state(), smoothed, epoch, 0
        else:
            since += 1
            if since > cfg.patience:
                break
    model.load_state(best)
    test = evaluate(model, bundle, test_idx, FINETUNE, weights) if len(test_idx) else {"accuracy": float("nan")}
    train = evaluate(model, bundle, train_idx, FINETUNE, weights) if len(train_idx) else {"accuracy": float("nan")}
    return FinetuneResult(test["accuracy"], best_loss, best_epoch, epoch + 1, train["accuracy"], history)


@dataclass
class FoldResult:
    fold_accuracies: list
    mean: float
    std: float
    details: list = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, accs, details=None) -> "FoldResult":
        accs = [float(a) for a in accs]
        return cls(accs, float(np.mean(accs)), float(np.std(accs)), list(details or []))

    def to_dict(self) -> dict:
        return asdict(self)


def stratified_folds(labels, k: int = 10, seed: int = 0) -> list:
    """Seeded fold assignment; falls back to plain shuffling if a class has fewer than ``k`` members."""
    labels = np.asarray(labels)
    if len(labels) < k:
        raise ValueError(f"need at least {k} graphs for {k} folds, got {len(labels)}")
    rng = make_rng((seed, 3))
    classes, counts = np.unique(labels, return_counts=True)
    folds = [[] for _ in range(k)]
    if counts.min() < k:
        warnings.warn(f"a class has fewer than {k} members; using unstratified folds", stacklevel=2)
        for pos, i in enumerate(rng.permutation(len(labels))):
            folds[pos % k].append(int(i))
    else:
        pos = 0
        for c in classes:
            for i in rng.permutation(np.flatnonzero(labels == c)):
                folds[pos % k].append(int(i))
                pos += 1
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def fold_splits(folds: Sequence[np.ndarray]) -> list:
    """``(train, val, test)`` per fold: fold i tests, fold i+1 validates, the rest train."""
    k = len(folds)
    out = []
    for i in range(k):
        val_i = (i + 1) % k
        train = np.concatenate([folds[j] for j in range(k) if j not in (i, val_i)])
        out.append((np.sort(train), folds[val_i], folds[i]))
    return out


def cross_validate(bundle: DatasetBundle, cfg: TrainConfig, enc_cfg: EncoderConfig = EncoderConfig(),
                   weights: LossWeights = LossWeights(), pretrained: Optional[Model] = None,
                   epochs: Optional[int] = None, fit: Optional[Callable] = None,
                   log_fn: Optional[Callable] = None) -> FoldResult:
    """k-fold evaluation; ``fit(fold, train, val, test) -> accuracy`` overrides the model-based default."""
    if len(bundle.dataset) < cfg.folds:
        raise ValueError(f"dataset has {len(bundle.dataset)} graphs, fewer than {cfg.folds} folds")
    folds = stratified_folds(bundle.dataset.labels, cfg.folds, cfg.seed)
    accs, details = [], []
    for i, (tr, va, te) in enumerate(fold_splits(folds)):
        if fit is not None:
            accs.append(fit(i, tr, va, te))
            continue
        model = pretrained.clone() if pretrained is not None else Model(enc_cfg, cfg.seed)
        res = finetune(model, bundle, (tr, va, te), cfg, weights, epochs, log_fn, fold=i)
        accs.append(res.test_accuracy)
        details.append({"fold": i, "test_accuracy": res.test_accuracy, "best_epoch": res.best_epoch,
                        "epochs_run": res.epochs_run, "best_val_loss": res.best_val_loss,
                        "train_accuracy": res.train_accuracy})
        log.info("fold %d: test accuracy %.4f (best epoch %d)", i, res.test_accuracy, res.best_epoch)
    return FoldResult.from_accuracies(accs, details)
