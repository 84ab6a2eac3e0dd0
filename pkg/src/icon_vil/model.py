"""Frozen ReLU backbone with parallel bottleneck adapters and a growable linear head.

Layer rule on an adapted layer ``l``::

    h_{l+1} = relu(W_l h_l + b_l + s_l * U_l relu(D_l h_l))

Non-adapted layers drop the adapter branch. The last layer's output goes
through a parameter-free layer norm before the head. Batches are row-major
``(batch, features)`` arrays throughout.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig, DimMismatch, ShapeMismatch, StaleCache
from .numerics import make_rng

NORM_EPS = 1e-6


def default_adapter_layers(num_layers: int) -> tuple[int, ...]:
    """Early-layer placement: the first ceil(5L/12) layers."""
    return tuple(range(min(num_layers, math.ceil(5 * num_layers / 12))))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dim: int = 16
    backbone_layers: int = 3
    adapter_layers: tuple[int, ...] | None = None
    adapter_rank: int = 5
    adapter_init_std: float = 0.02
    ema_decay: float = 0.9999
    final_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.backbone_layers < 1:
            raise BadConfig("input_dim, hidden_dim and backbone_layers must be positive")
        if self.adapter_rank < 1:
            raise BadConfig("adapter_rank must be >= 1", path="model.adapter_rank")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise BadConfig("ema_decay must lie in [0, 1]", path="model.ema_decay")
        layers = self.adapter_layers
        if layers is None:
            layers = default_adapter_layers(self.backbone_layers)
        layers = tuple(sorted(set(int(i) for i in layers)))
        if any(not 0 <= i < self.backbone_layers for i in layers):
            raise BadConfig(f"adapter layer outside [0, {self.backbone_layers})",
                            path="model.adapter_layers")
        object.__setattr__(self, "adapter_layers", layers)

    def layer_dims(self, layer: int) -> tuple[int, int]:
        """``(in_dim, out_dim)`` of backbone layer ``layer``."""
        return (self.input_dim if layer == 0 else self.hidden_dim), self.hidden_dim

    @property
    def adapter_size(self) -> int:
        r = self.adapter_rank
        return sum(r * i + o * r + 1 for i, o in map(self.layer_dims, self.adapter_layers))


class Backbone:
    """Seeded random dense+ReLU stack. Parameters are read-only after construction."""

    def __init__(self, config: ModelConfig):
        rng = make_rng(config.seed, 100)
        self.final_norm = config.final_norm
        self.weights, self.biases = [], []
        for layer in range(config.backbone_layers):
            d_in, d_out = config.layer_dims(layer)
            w = rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_out, d_in))
            b = rng.normal(0.0, 0.1, size=d_out)
            w.setflags(write=False)
            b.setflags(write=False)
            self.weights.append(w)
            self.biases.append(b)

    def __len__(self):
        return len(self.weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


class AdapterSet:
    """Per-layer (down, up, scale) parameters with a canonical flat ordering.

    Flat order: by layer index, then ``down`` row-major, ``up`` row-major, ``scale``.
    """

    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        self.layers = config.adapter_layers
        self.down, self.up, self.scale = {}, {}, {}
        rng = make_rng(config.seed, 200)
        r = config.adapter_rank
        for layer in self.layers:
            d_in, d_out = config.layer_dims(layer)
            if init:
                self.down[layer] = rng.normal(0.0, config.adapter_init_std, size=(r, d_in))
                self.scale[layer] = 1.0
            else:
                self.down[layer] = np.zeros((r, d_in))
                self.scale[layer] = 0.0
            self.up[layer] = np.zeros((d_out, r))
        self.version = 0

    @property
    def size(self) -> int:
        return self.config.adapter_size

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        parts = []
        for layer in self.layers:
            parts += [self.down[layer].ravel(), self.up[layer].ravel(), [self.scale[layer]]]
        return np.concatenate(parts).astype(np.float64)

    def set_flat(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ShapeMismatch(f"adapter vector has shape {values.shape}, expected ({self.size},)")
        pos = 0
        for layer in self.layers:
            for name in ("down", "up"):
                arr = getattr(self, name)[layer]
                arr[...] = values[pos:pos + arr.size].reshape(arr.shape)
                pos += arr.size
            self.scale[layer] = float(values[pos])
            pos += 1
        self.version += 1

    def copy(self) -> "AdapterSet":
        return copy.deepcopy(self)


class EmaAdapters:
    def __init__(self, live: AdapterSet, decay: float):
        self.adapters = live.copy()
        self.decay = float(decay)

    def flat(self) -> np.ndarray:
        return self.adapters.flat()


def ema_update(ema: EmaAdapters, live: AdapterSet) -> None:
    """``ema <- decay * ema + (1 - decay) * live``, elementwise."""
    current = ema.adapters.flat()
    target = live.flat()
    if current.shape != target.shape:
        raise ShapeMismatch(f"EMA shape {current.shape} vs live {target.shape}")
    if ema.decay == 1.0:
        return
    ema.adapters.set_flat(ema.decay * current + (1.0 - ema.decay) * target)


class ClassifierHead:
    """Linear output layer whose rows are append-only; a row index is a stable node id."""

    def __init__(self, hidden_dim: int):
        self.hidden_dim = hidden_dim
        self.weight = np.zeros((0, hidden_dim))
        self.bias = np.zeros(0)
        self.version = 0

    @property
    def num_nodes(self) -> int:
        return self.weight.shape[0]

    def append_rows(self, count: int = 1) -> list[int]:
        start = self.num_nodes
        self.weight = np.vstack([self.weight, np.zeros((count, self.hidden_dim))])
        self.bias = np.concatenate([self.bias, np.zeros(count)])
        self.version += 1
        return list(range(start, start + count))

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    def set_flat(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ShapeMismatch(f"head vector has shape {values.shape}, expected ({self.size},)")
        n = self.weight.size
        self.weight = values[:n].reshape(self.weight.shape).copy()
        self.bias = values[n:].copy()
        self.version += 1

    def copy(self) -> "ClassifierHead":
        return copy.deepcopy(self)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)        # h_l per layer
    preacts: list = field(default_factory=list)       # z_l per layer
    branch_pre: dict = field(default_factory=dict)    # D_l h_l
    branch_up: dict = field(default_factory=dict)     # U_l relu(D_l h_l), unscaled
    features: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    adapters: AdapterSet | None = None
    head: ClassifierHead | None = None
    versions: tuple[int, int] = (0, 0)


def features(backbone: Backbone, adapters: AdapterSet, X, cache: ForwardCache | None = None):
    h = np.asarray(X, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[1] != backbone.weights[0].shape[1]:
        raise DimMismatch(f"input dim {h.shape[1]}, expected {backbone.weights[0].shape[1]}")
    for layer, (w, b) in enumerate(zip(backbone.weights, backbone.biases)):
        z = h @ w.T + b
        if layer in adapters.down:
            a = h @ adapters.down[layer].T
            up = np.maximum(a, 0.0) @ adapters.up[layer].T
            z = z + adapters.scale[layer] * up
            if cache is not None:
                cache.branch_pre[layer] = a
                cache.branch_up[layer] = up
        if cache is not None:
            cache.inputs.append(h)
            cache.preacts.append(z)
        h = np.maximum(z, 0.0)
    if backbone.final_norm:
        h = h - h.mean(axis=1, keepdims=True)
        std = np.sqrt(np.mean(h * h, axis=1, keepdims=True) + NORM_EPS)
        h = h / std
        if cache is not None:
            cache.norm_std = std
    return h


def forward(backbone: Backbone, X, adapters: AdapterSet, head: ClassifierHead):
    """Raw logits over every head node, plus the cache ``backward`` needs."""
    cache = ForwardCache(adapters=adapters, head=head,
                         versions=(adapters.version, head.version))
    feats = features(backbone, adapters, X, cache)
    cache.features = feats
    return feats @ head.weight.T + head.bias, cache


def backward(backbone: Backbone, cache: ForwardCache, grad_logits):
    """Gradients of a logit-level upstream gradient w.r.t. adapters (flat) and head.

    Returns ``(grad_adapters, grad_head)`` where ``grad_head`` is flat in the
    head's own ordering (weights row-major, then biases).
    """
    adapters, head = cache.adapters, cache.head
    if cache.features is None or (adapters.version, head.version) != cache.versions:
        raise StaleCache("parameters changed since the forward pass")
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache.features.shape[0], head.num_nodes):
        raise DimMismatch(f"upstream gradient shape {g.shape}")
    grad_w = g.T @ cache.features
    grad_b = g.sum(axis=0)
    dh = g @ head.weight
    if cache.norm_std is not None:
        xhat = cache.features
        dh = (dh - dh.mean(axis=1, keepdims=True)
              - xhat * np.mean(dh * xhat, axis=1, keepdims=True)) / cache.norm_std
    grads = {}
    for layer in reversed(range(len(backbone))):
        dz = dh * (cache.preacts[layer] > 0)
        h = cache.inputs[layer]
        dh = dz @ backbone.weights[layer]
        if layer in adapters.down:
            a = cache.branch_pre[layer]
            act = np.maximum(a, 0.0)
            s = adapters.scale[layer]
            d_up = s * (dz.T @ act)
            d_scale = float(np.sum(dz * cache.branch_up[layer]))
            da = s * (dz @ adapters.up[layer]) * (a > 0)
            d_down = da.T @ h
            dh = dh + da @ adapters.down[layer]
            grads[layer] = (d_down, d_up, d_scale)
    parts = []
    for layer in adapters.layers:
        d_down, d_up, d_scale = grads[layer]
        parts += [d_down.ravel(), d_up.ravel(), [d_scale]]
    grad_adapters = np.concatenate(parts) if parts else np.zeros(0)
    return grad_adapters, np.concatenate([grad_w.ravel(), grad_b])


def ensemble_class_logits(online, ema) -> np.ndarray:
    """Elementwise max of the online-adapter and EMA-adapter class logits."""
    online = np.asarray(online, dtype=np.float64)
    ema = np.asarray(ema, dtype=np.float64)
    if online.shape != ema.shape:
        raise DimMismatch(f"ensemble of shapes {online.shape} and {ema.shape}")
    return np.maximum(online, ema)


class Network:
    """Backbone, live adapters, EMA adapters and head bundled for one run."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.backbone = Backbone(config)
        self.adapters = AdapterSet(config)
        self.ema = EmaAdapters(self.adapters, config.ema_decay)
        self.head = ClassifierHead(config.hidden_dim)

    def logits(self, X, use_ema: bool = False) -> np.ndarray:
        adapters = self.ema.adapters if use_ema else self.adapters
        out, _ = forward(self.backbone, X, adapters, self.head)
        return out

    def forward(self, X):
        return forward(self.backbone, X, self.adapters, self.head)

    def backward(self, cache, grad_logits):
        return backward(self.backbone, cache, grad_logits)

    def snapshot(self) -> "Network":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "format": "icon-vil-checkpoint/1",
            "config": {
                "input_dim": cfg.input_dim, "hidden_dim": cfg.hidden_dim,
                "backbone_layers": cfg.backbone_layers,
                "adapter_layers": list(cfg.adapter_layers),
                "adapter_rank": cfg.adapter_rank,
                "adapter_init_std": cfg.adapter_init_std,
                "ema_decay": cfg.ema_decay, "final_norm": cfg.final_norm, "seed": cfg.seed,
            },
            "num_nodes": self.head.num_nodes,
            "backbone": self.backbone.flat().tolist(),
            "adapters": self.adapters.flat().tolist(),
            "ema_adapters": self.ema.flat().tolist(),
            "head": self.head.flat().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        cfg = dict(doc["config"])
        cfg["adapter_layers"] = tuple(cfg["adapter_layers"])
        net = cls(ModelConfig(**cfg))
        if not np.array_equal(net.backbone.flat(), np.asarray(doc["backbone"], dtype=np.float64)):
            raise ShapeMismatch("checkpoint backbone does not match its seeded config")
        net.adapters.set_flat(doc["adapters"])
        net.ema.adapters.set_flat(doc["ema_adapters"])
        if doc["num_nodes"]:
            net.head.append_rows(int(doc["num_nodes"]))
        net.head.set_flat(doc["head"])
        return net
