"""Layers, squeeze taps, the label loss and momentum SGD."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Node, ShapeError

LAYER_KINDS = ("dense", "conv1x1", "conv3x3", "relu", "batchnorm", "global-avg-pool")


class Parameter:
    __slots__ = ("value", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def squeeze(x: Node) -> Node:
    """Average each channel over its spatial positions.

    (H, W, C) -> (C,) and (m, H, W, C) -> (m, C).
    """
    if x.value.ndim not in (3, 4):
        raise ShapeError(f"squeeze: expected a rank 3 or 4 feature map, got shape {x.shape}")
    return ad.global_avg_pool(x)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy over the batch. Rank-1 logits are a batch of one."""
    labels = np.atleast_1d(np.asarray(labels))
    if logits.value.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    return ad.mean(ad.softmax_cross_entropy(logits, labels))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int | None = None
    tap: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv1x1", "conv3x3"):
            if self.width is None or self.width < 1:
                raise ValueError(f"{self.kind} layer needs a positive width, got {self.width}")

    @classmethod
    def parse(cls, text: str) -> LayerSpec:
        """``dense:32``, ``relu:tap``, ``conv3x3:16:tap``."""
        parts = [p.strip() for p in text.strip().split(":")]
        kind, width, tap = parts[0], None, False
        for p in parts[1:]:
            if p == "tap":
                tap = True
            else:
                try:
                    width = int(p)
                except ValueError:
                    raise ValueError(f"bad layer field {p!r} in {text!r}") from None
        return cls(kind, width, tap)

    def __str__(self):
        s = self.kind
        if self.width is not None:
            s += f":{self.width}"
        return s + (":tap" if self.tap else "")

    def param_count(self, in_channels: int) -> int:
        w = self.width
        return {
            "dense": in_channels * (w or 0) + (w or 0),
            "conv1x1": in_channels * (w or 0),
            "conv3x3": 9 * in_channels * (w or 0),
            "batchnorm": 2 * in_channels,
        }.get(self.kind, 0)


def parse_layers(text: str) -> list[LayerSpec]:
    return [LayerSpec.parse(t) for t in text.split(",") if t.strip()]


class Layer:
    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...], rng, name: str):
        self.spec = spec
        self.name = name
        self.params: list[Parameter] = []
        self.buffers: dict[str, np.ndarray] = {}
        self.in_shape = in_shape
        kind, c = spec.kind, in_shape[-1]
        rank = len(in_shape)
        if kind == "dense":
            if rank != 1:
                raise ShapeError(f"{name}: dense layer needs vector input, got per-sample shape {in_shape}")
            self.params = [Parameter(glorot(rng, (c, spec.width), c, spec.width), f"{name}.weight"),
                           Parameter(np.zeros(spec.width), f"{name}.bias")]
            self.out_shape = (spec.width,)
        elif kind == "conv1x1":
            if rank != 3:
                raise ShapeError(f"{name}: conv1x1 needs (H, W, C) input, got {in_shape}")
            self.params = [Parameter(glorot(rng, (c, spec.width), c, spec.width), f"{name}.weight")]
            self.out_shape = in_shape[:2] + (spec.width,)
        elif kind == "conv3x3":
            if rank != 3 or in_shape[0] < 3 or in_shape[1] < 3:
                raise ShapeError(f"{name}: conv3x3 needs (H>=3, W>=3, C) input, got {in_shape}")
            w = glorot(rng, (3, 3, c, spec.width), 9 * c, 9 * spec.width)
            self.params = [Parameter(w, f"{name}.weight")]
            self.out_shape = (in_shape[0] - 2, in_shape[1] - 2, spec.width)
        elif kind == "batchnorm":
            self.params = [Parameter(np.ones(c), f"{name}.gamma"),
                           Parameter(np.zeros(c), f"{name}.beta")]
            self.buffers = {"running_mean": np.zeros(c), "running_var": np.ones(c)}
            self.out_shape = in_shape
        elif kind == "global-avg-pool":
            if rank != 3:
                raise ShapeError(f"{name}: global-avg-pool needs (H, W, C) input, got {in_shape}")
            self.out_shape = (c,)
        else:
            self.out_shape = in_shape

    def forward(self, g: Graph, x: Node, training: bool, update_stats: bool) -> Node:
        kind = self.spec.kind
        if kind == "dense":
            w, b = (g.param(p) for p in self.params)
            return ad.add(ad.matmul(x, w), b)
        if kind == "conv1x1":
            return ad.conv1x1(x, g.param(self.params[0]))
        if kind == "conv3x3":
            return ad.conv3x3(x, g.param(self.params[0]))
        if kind == "relu":
            return ad.relu(x)
        if kind == "global-avg-pool":
            return squeeze(x)
        gamma, beta = (g.param(p) for p in self.params)
        out = ad.batchnorm(x, gamma, beta, training=training,
                           running_mean=self.buffers["running_mean"],
                           running_var=self.buffers["running_var"])
        if training and update_stats:
            mu, var = out.extra
            self.buffers["running_mean"] = 0.9 * self.buffers["running_mean"] + 0.1 * mu
            self.buffers["running_var"] = 0.9 * self.buffers["running_var"] + 0.1 * var
        return out


@dataclass
class FeatureTap:
    layer: int
    z: Node

    @property
    def width(self) -> int:
        return self.z.shape[-1]


class Model:
    """Feature extractor (θ_f) followed by a dense label classifier (θ_y).

    Feature maps still carrying spatial extent are squeezed before the
    classifier. The classifier's last layer must be dense with one unit per
    class.
    """

    def __init__(self, input_shape, features: list[LayerSpec], classifier: list[LayerSpec],
                 seed: int = 0):
        if not classifier or classifier[-1].kind != "dense":
            raise ValueError("classifier must end with a dense layer producing class logits")
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.feature_specs = list(features)
        self.classifier_specs = list(classifier)
        self.features: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(features):
            layer = Layer(spec, shape, rng, f"features.{i}")
            self.features.append(layer)
            shape = layer.out_shape
        self.feature_shape = shape
        shape = (shape[-1],)
        self.classifier: list[Layer] = []
        for i, spec in enumerate(classifier):
            if spec.tap:
                raise ValueError("taps belong to the feature extractor")
            layer = Layer(spec, shape, rng, f"classifier.{i}")
            self.classifier.append(layer)
            shape = layer.out_shape
        self.n_classes = shape[0]

    @property
    def tap_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.feature_specs) if s.tap]

    @property
    def tap_widths(self) -> list[int]:
        return [self.features[i].out_shape[-1] for i in self.tap_layers]

    def feature_parameters(self) -> list[Parameter]:
        return [p for layer in self.features for p in layer.params]

    def classifier_parameters(self) -> list[Parameter]:
        return [p for layer in self.classifier for p in layer.params]

    def parameters(self) -> list[Parameter]:
        return self.feature_parameters() + self.classifier_parameters()

    def param_count(self) -> int:
        """Closed form over the layer specs."""
        total, c = 0, self.input_shape[-1]
        for spec in self.feature_specs + self.classifier_specs:
            total += spec.param_count(c)
            if spec.width is not None:
                c = spec.width
        return total

    def forward(self, g: Graph, x: Node, training: bool = True, update_stats: bool = True):
        """Return ``(logits, taps)``; one :class:`FeatureTap` per tapped layer."""
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model input: expected per-sample shape {self.input_shape}, got {x.shape[1:]}")
        taps = []
        h = x
        for i, layer in enumerate(self.features):
            try:
                h = layer.forward(g, h, training, update_stats)
            except ShapeError as e:
                raise ShapeError(f"{layer.name} ({layer.spec}): {e}") from None
            if layer.spec.tap:
                taps.append(FeatureTap(i, squeeze(h) if h.value.ndim == 4 else h))
        if h.value.ndim == 4:
            h = squeeze(h)
        for layer in self.classifier:
            h = layer.forward(g, h, training, update_stats)
        return h, taps

    def predict(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        out = []
        for lo in range(0, len(x), batch):
            g = Graph()
            logits, _ = self.forward(g, g.constant(x[lo:lo + batch]), training=False)
            out.append(logits.value)
        return np.concatenate(out).argmax(axis=1)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value.copy() for p in self.parameters()}
        for layer in self.features + self.classifier:
            for k, v in layer.buffers.items():
                state[f"{layer.name}.{k}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ShapeError(f"{p.name}: stored shape {state[p.name].shape} != {p.shape}")
            p.value = np.array(state[p.name], dtype=np.float64)
        for layer in self.features + self.classifier:
            for k in layer.buffers:
                layer.buffers[k] = np.array(state[f"{layer.name}.{k}"], dtype=np.float64)

    def clone(self) -> Model:
        return copy.deepcopy(self)


@dataclass
class OptimizerState:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if min(self.lr, self.momentum, self.weight_decay) < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")

    @classmethod
    def for_params(cls, params, lr=0.001, momentum=0.9, weight_decay=1e-4) -> OptimizerState:
        return cls(lr, momentum, weight_decay, [np.zeros(p.shape) for p in params])


def sgd_step(params: list[Parameter], grads: list[np.ndarray], state: OptimizerState) -> None:
    """Classical momentum with weight decay folded into the gradient, in place.

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v
    """
    if len(params) != len(grads) or len(params) != len(state.buffers):
        raise ValueError(f"sgd_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.buffers)} momentum buffers")
    for i, (p, grad) in enumerate(zip(params, grads)):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != p.shape or state.buffers[i].shape != p.shape:
            raise ShapeError(f"sgd_step: {p.name or i} has shape {p.shape}, grad {grad.shape}")
        v = state.momentum * state.buffers[i] + (grad + state.weight_decay * p.value)
        state.buffers[i] = v
        p.value = p.value - state.lr * v
