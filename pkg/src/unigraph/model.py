"""Parameter store shared by the encoder, decoder heads and classifier heads.

Names follow a flat dotted scheme:

* ``enc.*``             shared graph encoder layers
* ``dec.W.<kind>``      bilinear kernel heads (``dec.W.adapt`` for the adaptive loss)
* ``ds.<name>.input.*`` per-dataset input transformer
* ``ds.<name>.head.*``  per-dataset classifier
"""
from __future__ import annotations

import copy
import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .graph import make_rng

KERNEL_KINDS = ("WL", "SP", "FGSD")


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 32
    layers: int = 5
    moments: int = 2
    mlp_depth: int = 2
    dropout_rate: float = 0.5  # classifier head
    encoder_dropout_rate: float = 0.0  # input transformer and convolution MLPs
    random_feature_dim: int = 32
    resample_features: bool = True  # fresh Gaussian draw per training epoch for featureless graphs
    input_filter: str = "normalized_laplacian"
    eval_draws: int = 16  # feature draws averaged at prediction time for featureless graphs

    def __post_init__(self):
        for name in ("hidden", "layers", "moments", "mlp_depth", "random_feature_dim", "eval_draws"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("dropout_rate", "encoder_dropout_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")

    def layer_input_width(self, t: int) -> int:
        """Width fed to encoder layer ``t`` (1-based): the input plus every earlier layer."""
        return self.hidden * t

    @property
    def embedding_dim(self) -> int:
        return self.hidden


def _param_seed(seed: int, name: str) -> tuple:
    return (int(seed), zlib.crc32(name.encode()))


class Model:
    """Named parameters plus batch-norm running statistics.

    The encoder and kernel heads are created once; :meth:`add_dataset` attaches
    an input transformer and classifier for each dataset. Parameter values are
    derived from ``(seed, name)`` so adding a dataset never perturbs the rest.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0, kernels=KERNEL_KINDS):
        self.cfg = cfg
        self.seed = int(seed)
        self.kernels = tuple(kernels)
        self.params: dict = {}
        self.bn: dict = {}
        self.datasets: dict = {}
        h = cfg.hidden
        for t in range(1, cfg.layers + 1):
            w_in = cfg.layer_input_width(t)
            for p in range(1, cfg.moments + 1):
                self._add_mlp(f"enc.{t}.moment{p}", [w_in] + [h] * cfg.mlp_depth)
            self._add_mlp(f"enc.{t}.outer", [h] * (cfg.mlp_depth + 1))
        for kind in self.kernels + ("adapt",):
            self._add_param(f"dec.W.{kind}", self._glorot(f"dec.W.{kind}", h, h))

    # construction

    def _glorot(self, name, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return make_rng(_param_seed(self.seed, name)).uniform(-limit, limit, size=(fan_in, fan_out))

    def _add_param(self, name, value):
        self.params[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def _add_mlp(self, prefix, widths):
        for i in range(len(widths) - 1):
            self._add_param(f"{prefix}.lin{i}.W", self._glorot(f"{prefix}.lin{i}.W", widths[i], widths[i + 1]))
            self._add_param(f"{prefix}.lin{i}.b", np.zeros(widths[i + 1]))
            if i < len(widths) - 2:
                self._add_param(f"{prefix}.bn{i}.gamma", np.ones(widths[i + 1]))
                self._add_param(f"{prefix}.bn{i}.beta", np.zeros(widths[i + 1]))
                self.bn[f"{prefix}.bn{i}"] = RunningStats(widths[i + 1])

    def add_dataset(self, name: str, in_dim: int, num_classes: int, seed: Optional[int] = None):
        """Create the input transformer and classifier head for ``name`` (no-op if present)."""
        if "." in name:
            raise ValueError(f"dataset name may not contain '.': {name!r}")
        if name in self.datasets:
            known = self.datasets[name]
            if (known["in_dim"], known["num_classes"]) != (in_dim, num_classes):
                raise ValueError(f"dataset {name!r} already registered with {known}")
            return
        saved = self.seed
        if seed is not None:
            self.seed = int(seed)
        try:
            h = self.cfg.hidden
            self._add_mlp(f"ds.{name}.input", [in_dim] + [h] * self.cfg.mlp_depth)
            if num_classes > 0:
                self._add_mlp(f"ds.{name}.head", [h, h, h, num_classes])
        finally:
            self.seed = saved
        self.datasets[name] = {"in_dim": int(in_dim), "num_classes": int(num_classes)}

    # views

    def shared_names(self) -> list:
        return sorted(k for k in self.params if not k.startswith("ds."))

    def dataset_param_names(self, name: str) -> list:
        return sorted(k for k in self.params if k.startswith(f"ds.{name}."))

    def trainable(self, names=None) -> dict:
        if names is None:
            return dict(self.params)
        return {k: self.params[k] for k in names}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        """Copy of every parameter array and running statistic (for snapshots)."""
        return {
            "params": {k: v.data.copy() for k, v in self.params.items()},
            "bn": {k: (s.mean.copy(), s.var.copy()) for k, s in self.bn.items()},
        }

    def load_state(self, state: dict):
        for k, v in state["params"].items():
            self.params[k].data = v.copy()
        for k, (m, v) in state["bn"].items():
            self.bn[k].mean = m.copy()
            self.bn[k].var = v.copy()

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.cfg), "seed": self.seed, "kernels": list(self.kernels)}

    # forward helpers

    def mlp(self, prefix: str, x, train: bool, mask=None, rng=None, dropout: Optional[float] = None,
            batch_norm: bool = True):
        """Linear layers with batch norm, relu and dropout between them; linear output."""
        rate = self.cfg.dropout_rate if dropout is None else dropout
        i = 0
        while f"{prefix}.lin{i}.W" in self.params:
            x = ad.add_bias(ad.matmul(x, self.params[f"{prefix}.lin{i}.W"]), self.params[f"{prefix}.lin{i}.b"])
            if f"{prefix}.lin{i + 1}.W" in self.params:
                if batch_norm:
                    x = ad.batch_norm(x, self.params[f"{prefix}.bn{i}.gamma"], self.params[f"{prefix}.bn{i}.beta"],
                                      self.bn[f"{prefix}.bn{i}"], train, mask)
                x = ad.relu(x)
                x = ad.dropout(x, rate, rng, train)
            i += 1
        if i == 0:
            raise KeyError(f"no MLP named {prefix!r}")
        return x
