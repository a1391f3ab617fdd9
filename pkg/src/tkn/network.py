"""Declarative network specs, the CNN6/TKN6 builders and the runnable model."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .exceptions import ShapeError
from .layers import ARLayer, Conv2D, Dense, Dropout, Flatten, MaxPool2, ReLU, TargetLayer
from .tensor import check_finite, softmax, softmax_xent

LAYER_KINDS = ("conv", "target", "ar", "maxpool2", "flatten", "dense", "relu", "dropout")


@dataclass
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 0
    units: int = 0
    rate: float = 0.0
    l2: float = 0.0
    family: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_text(self) -> str:
        fields = {k: v for k, v in asdict(self).items() if k != "kind" and v not in (0, 0.0, "")}
        return " ".join([self.kind] + [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                                       for k, v in fields.items()])

    @classmethod
    def from_text(cls, text: str) -> "LayerSpec":
        kind, *pairs = text.split()
        kw = {}
        for pair in pairs:
            key, value = pair.split("=", 1)
            if key in ("channels", "kernel", "units"):
                kw[key] = int(value)
            elif key in ("rate", "l2"):
                kw[key] = float(value)
            elif key == "family":
                kw[key] = value
            else:
                raise ValueError(f"unknown layer field {key!r}")
        return cls(kind, **kw)


@dataclass
class NetworkSpec:
    input_shape: Tuple[int, int, int]
    num_classes: int
    layers: List[LayerSpec] = field(default_factory=list)
    name: str = "custom"

    def shapes(self) -> List[Tuple[int, ...]]:
        """Activation shape after each layer (without batch axis); raises on mismatch."""
        shape = tuple(self.input_shape)
        out = []
        for i, ls in enumerate(self.layers):
            if ls.kind in ("conv", "target", "ar"):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} ({ls.kind}) needs a 3-axis input, got {shape}")
                if ls.kernel % 2 == 0 or ls.kernel > min(shape[1:]):
                    raise ShapeError(f"layer {i}: bad kernel size {ls.kernel} for {shape}")
                shape = (ls.channels, shape[1], shape[2])
            elif ls.kind == "maxpool2":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(f"layer {i}: maxpool2 needs even spatial dims, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif ls.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif ls.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: dense needs a flat input, got {shape}")
                shape = (ls.units,)
            out.append(shape)
        if out and out[-1] != (self.num_classes,):
            raise ShapeError(f"network ends in {out[-1]}, expected ({self.num_classes},)")
        return out

    def input_shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(self.input_shape)] + self.shapes()[:-1]

    def dense_twin(self) -> "NetworkSpec":
        """Same network with every attentive layer swapped back to a plain conv."""
        layers = [
            replace(ls, kind="conv", l2=0.0, family="") if ls.kind in ("target", "ar") else ls
            for ls in self.layers
        ]
        return replace(self, layers=layers, name=self.name + "-dense")


def _six_layer(input_hw, num_classes, conv_kind, channels, fc, dropout, l2=0.0, beta=1.0, family=""):
    h, w = input_hw
    if h % 4 or w % 4:
        raise ShapeError(f"input dims must be divisible by 4, got {h}x{w}")
    attentive = conv_kind != "conv"

    def conv(c, block):
        if not attentive:
            return LayerSpec("conv", channels=c, kernel=5)
        return LayerSpec(conv_kind, channels=c, kernel=5, l2=l2 * beta ** block, family=family)

    layers = [
        conv(channels[0], 0), LayerSpec("relu"), LayerSpec("maxpool2"),
        conv(channels[1], 1), LayerSpec("relu"), LayerSpec("maxpool2"),
        conv(channels[2], 2), LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", units=fc[0]), LayerSpec("relu"),
        LayerSpec("dense", units=fc[1]), LayerSpec("relu"),
        LayerSpec("dropout", rate=dropout),
        LayerSpec("dense", units=num_classes),
    ]
    return NetworkSpec((1, h, w), num_classes, layers)


CNN6_CHANNELS = (256, 256, 128)
MINI_CHANNELS = (32, 32, 16)
FC_UNITS = (328, 192)


def build_cnn6(input_hw=(28, 28), num_classes=10, channels=CNN6_CHANNELS, fc=FC_UNITS, dropout=0.5):
    spec = _six_layer(input_hw, num_classes, "conv", channels, fc, dropout)
    spec.name = "cnn6" if tuple(channels) == CNN6_CHANNELS else "cnn6-mini"
    return spec


def build_tkn6(input_hw=(28, 28), num_classes=10, l2=1e-4, beta=4.0, family="cauchy",
               channels=CNN6_CHANNELS, fc=FC_UNITS, dropout=0.5):
    """CNN6 with its three 5x5 convolutions replaced by target layers.

    The scale penalty builds up with depth: ``l2``, ``beta*l2`` and
    ``beta**2 * l2`` for the three convolution blocks.
    """
    spec = _six_layer(input_hw, num_classes, "target", channels, fc, dropout, l2, beta, family)
    spec.name = "tkn6" if tuple(channels) == CNN6_CHANNELS else "tkn6-mini"
    return spec


def build_named(name: str, input_hw=(28, 28), num_classes=10, l2=1e-4, beta=4.0, family="cauchy"):
    if name == "cnn6":
        return build_cnn6(input_hw, num_classes)
    if name == "cnn6-mini":
        return build_cnn6(input_hw, num_classes, channels=MINI_CHANNELS)
    if name == "tkn6":
        return build_tkn6(input_hw, num_classes, l2, beta, family)
    if name == "tkn6-mini":
        return build_tkn6(input_hw, num_classes, l2, beta, family, channels=MINI_CHANNELS)
    raise ValueError(f"unknown model {name!r}; expected cnn6, cnn6-mini, tkn6 or tkn6-mini")


def count_params(spec: NetworkSpec) -> int:
    total = 0
    for ls, shape in zip(spec.layers, spec.input_shapes()):
        if ls.kind in ("conv", "target", "ar"):
            total += ls.channels * shape[0] * ls.kernel ** 2
            if ls.kind != "conv":
                total += 4 * ls.channels
        elif ls.kind == "dense":
            total += shape[0] * ls.units + ls.units
    return total


_CACHE_ATTRS = ("_cache", "_x", "_cols", "_arg", "_mask")


class Model:
    """A built network: ordered layers plus forward/backward over the stack."""

    def __init__(self, spec: NetworkSpec, dtype=np.float32, seed: int = 0):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.layers = []
        for i, (ls, shape) in enumerate(zip(spec.layers, spec.input_shapes())):
            self.layers.append(self._make(i, ls, shape))

    def _make(self, index, ls: LayerSpec, shape):
        if ls.kind == "conv":
            return Conv2D(shape[0], ls.channels, ls.kernel, shape[1:], self.dtype)
        if ls.kind in ("target", "ar"):
            cls = TargetLayer if ls.kind == "target" else ARLayer
            return cls(shape[0], ls.channels, ls.kernel, shape[1:], ls.family or "cauchy", ls.l2, self.dtype)
        if ls.kind == "dense":
            return Dense(shape[0], ls.units, self.dtype)
        if ls.kind == "dropout":
            ss = np.random.SeedSequence(self.seed, spawn_key=(index,))
            return Dropout(ls.rate, np.random.default_rng(ss))
        return {"relu": ReLU, "maxpool2": MaxPool2, "flatten": Flatten}[ls.kind]()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(f"input {x.shape[1:]} does not match network input {self.spec.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def penalty(self) -> float:
        return sum(layer.penalty() for layer in self.layers)

    def loss_and_grad(self, x, labels, train: bool = True) -> Tuple[float, float]:
        """Forward + backward on one batch; returns ``(cross_entropy, penalty)``."""
        logits = self.forward(x, train)
        xent, g = softmax_xent(logits, labels)
        check_finite(np.asarray(xent), "training loss")
        self.backward(g.astype(self.dtype, copy=False))
        return xent, self.penalty()

    def predict_logits(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return np.concatenate(
            [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        ) if len(x) else np.zeros((0, self.spec.num_classes), dtype=self.dtype)

    def predict_proba(self, x, batch_size: int = 500):
        return softmax(self.predict_logits(x, batch_size))

    def parameters(self) -> Iterator[Tuple[str, object, str, np.ndarray]]:
        """Yield ``(key, layer, name, array)`` in the fixed spec order."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{name}", layer, name, arr

    def state(self) -> List[Tuple[str, np.ndarray]]:
        return [(key, arr) for key, _, _, arr in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        items = list(self.parameters())
        if len(arrays) != len(items):
            raise ShapeError(f"expected {len(items)} arrays, got {len(arrays)}")
        for (key, _, _, dst), src in zip(items, arrays):
            if dst.shape != src.shape:
                raise ShapeError(f"{key}: shape {src.shape} != {dst.shape}")
            dst[...] = src
        self.refresh()

    def refresh(self) -> None:
        for layer in self.layers:
            if hasattr(layer, "refresh"):
                layer.refresh()

    def target_layers(self) -> List[Tuple[int, object]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.kind in ("target", "ar")]

    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.state())

    def copy(self) -> "Model":
        """Deep copy of parameters and rng state; activation caches are not copied."""
        memo = {}
        for layer in self.layers:
            for name, value in vars(layer).items():
                if name in _CACHE_ATTRS and value is not None:
                    memo[id(value)] = None
        return copy.deepcopy(self, memo)

    def astype(self, dtype) -> "Model":
        other = Model(self.spec, dtype, self.seed)
        other.load_state([arr.astype(dtype) for _, arr in self.state()])
        return other


def init_weights(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Model:
    """He-normal kernels and dense weights, zero biases, centered unit-scale windows."""
    model = Model(spec, dtype, seed)
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if hasattr(layer, "kernels"):
            fan_in = layer.c_in * layer.k * layer.k
            layer.kernels[...] = rng.standard_normal(layer.kernels.shape) * np.sqrt(2.0 / fan_in)
        elif isinstance(layer, Dense):
            layer.weights[...] = rng.standard_normal(layer.weights.shape) * np.sqrt(2.0 / layer.n_in)
    model.refresh()
    return model
