"""Dense networks: plain and split-input MLPs, and slice-partitioned classifiers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, concatenate, grad, no_grad

ACTIVATIONS = ("relu", "tanh")
FORMAT_VERSION = 1


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "tanh":
        return x.tanh()
    raise ValueError(f"unknown activation '{kind}'")


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int) -> "Dense":
        weight = _glorot(rng, fan_in, fan_out)
        bound = 1.0 / np.sqrt(fan_in)
        bias = rng.uniform(-bound, bound, size=fan_out)
        return cls(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True))

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class MlpModel:
    """A stack of dense layers with a shared hidden activation.

    With ``split_input`` set, the first layer is two independent blocks: one
    reads the monotone features, the other reads the rest, and their outputs
    are concatenated.  Both blocks are stored in ``layers[0]`` and
    ``layers[1]``; every later entry is an ordinary dense layer.
    """

    layers: list[Dense]
    activation: str = "relu"
    monotone: tuple[int, ...] = ()
    split_input: bool = False
    input_width: int = 0
    activate_output: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got '{self.activation}'")
        self.monotone = tuple(int(i) for i in self.monotone)
        if not self.input_width:
            first = self.layers[:2] if self.split_input else self.layers[:1]
            self.input_width = sum(layer.in_width for layer in first)
        if self.split_input:
            prev = self.layers[0].out_width + self.layers[1].out_width
            later = self.layers[2:]
        else:
            prev = self.layers[0].out_width
            later = self.layers[1:]
        for layer in later:
            if layer.in_width != prev:
                raise ShapeError(f"layer widths do not chain: expected input {prev}, got {layer.in_width}")
            prev = layer.out_width
        if self.split_input:
            rest = self.rest_dims
            if self.layers[0].in_width != len(self.monotone) or self.layers[1].in_width != len(rest):
                raise ShapeError("split blocks do not match the monotone / non-monotone feature counts")

    @classmethod
    def build(
        cls,
        input_width: int,
        output_width: int,
        hidden: Sequence[int] = (100, 100),
        activation: str = "relu",
        monotone: Sequence[int] = (),
        split_input: bool = False,
        activate_output: bool = False,
        rng: np.random.Generator | None = None,
    ) -> "MlpModel":
        """Randomly initialised network; ``len(hidden) + 1`` weight layers deep."""
        rng = rng if rng is not None else np.random.default_rng(0)
        monotone = tuple(sorted(int(i) for i in monotone))
        widths = [input_width, *hidden, output_width]
        layers: list[Dense] = []
        if split_input:
            if not hidden:
                raise ValueError("split_input needs at least one hidden layer")
            n_mono = len(monotone)
            if n_mono == 0 or n_mono == input_width:
                raise ValueError("split_input needs both monotone and non-monotone features")
            width_m = max(1, hidden[0] // 2)
            width_r = hidden[0] - width_m
            if width_r < 1:
                raise ValueError("first hidden layer too narrow to split")
            layers.append(Dense.init(rng, n_mono, width_m))
            layers.append(Dense.init(rng, input_width - n_mono, width_r))
        else:
            layers.append(Dense.init(rng, widths[0], widths[1]))
        for fan_in, fan_out in zip(widths[1:-1], widths[2:]):
            layers.append(Dense.init(rng, fan_in, fan_out))
        return cls(layers, activation, monotone, split_input, input_width, activate_output)

    @property
    def rest_dims(self) -> tuple[int, ...]:
        mono = set(self.monotone)
        return tuple(i for i in range(self.input_width) if i not in mono)

    @property
    def output_width(self) -> int:
        return self.layers[-1].out_width

    @property
    def depth(self) -> int:
        return len(self.layers) - (1 if self.split_input else 0)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"expected input of shape (n, {self.input_width}), got {x.shape}")
        if self.split_input:
            mono = self.layers[0](x[:, list(self.monotone)])
            rest = self.layers[1](x[:, list(self.rest_dims)])
            h = concatenate([mono, rest], axis=1)
            later = self.layers[2:]
        else:
            h = self.layers[0](x)
            later = self.layers[1:]
        for layer in later:
            h = layer(_activate(h, self.activation))
        if self.activate_output:
            h = _activate(h, self.activation)
        return h


@dataclass
class SlicedClassifier:
    """A backbone producing a wide layer ``a``, and a head mapping it to K logits.

    ``a`` is the wide layer's output before its activation; the head applies
    ``head_activation`` (when set) and then its own dense layers.  Hidden
    unit ``w`` belongs to slice ``w // (W // K)`` when that is below K;
    units past ``K * (W // K)`` belong to no slice.
    """

    backbone: MlpModel
    head: MlpModel
    n_classes: int
    slices: list[tuple[int, ...]] = field(default_factory=list)
    head_activation: str | None = "relu"

    def __post_init__(self):
        width = self.backbone.output_width
        if self.head.input_width != width:
            raise ShapeError(f"head expects {self.head.input_width} inputs, backbone emits {width}")
        if self.head.output_width != self.n_classes:
            raise ShapeError("head output width must equal the number of classes")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.head_activation is not None and self.head_activation not in ACTIVATIONS:
            raise ValueError(f"unknown head activation '{self.head_activation}'")
        size = width // self.n_classes
        if size < 1:
            raise ValueError(f"hidden width {width} too small for {self.n_classes} slices")
        if not self.slices:
            self.slices = [tuple(range(k * size, (k + 1) * size)) for k in range(self.n_classes)]
        self.slices = [tuple(int(w) for w in s) for s in self.slices]
        sizes = {len(s) for s in self.slices}
        members = [w for s in self.slices for w in s]
        if len(self.slices) != self.n_classes or sizes != {size} or len(set(members)) != len(members):
            raise ValueError(f"need {self.n_classes} disjoint slices of size {size}")
        if any(not 0 <= w < width for w in members):
            raise ValueError("slice member outside the designated layer")

    @classmethod
    def build(
        cls,
        input_width: int,
        n_classes: int,
        hidden: Sequence[int] = (64,),
        slice_width: int = 64,
        head_hidden: Sequence[int] = (),
        activation: str = "relu",
        rng: np.random.Generator | None = None,
    ) -> "SlicedClassifier":
        rng = rng if rng is not None else np.random.default_rng(0)
        backbone = MlpModel.build(input_width, slice_width, hidden, activation, rng=rng)
        head = MlpModel.build(slice_width, n_classes, head_hidden, activation, rng=rng)
        return cls(backbone, head, n_classes, head_activation=activation)

    @property
    def input_width(self) -> int:
        return self.backbone.input_width

    @property
    def output_width(self) -> int:
        return self.n_classes

    @property
    def slice_size(self) -> int:
        return len(self.slices[0])

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.head.parameters()

    def hidden(self, x: Tensor) -> Tensor:
        return self.backbone(x)

    def logits_from_hidden(self, a: Tensor) -> Tensor:
        if self.head_activation is not None:
            a = _activate(a, self.head_activation)
        return self.head(a)

    def __call__(self, x: Tensor) -> Tensor:
        return self.logits_from_hidden(self.backbone(x))


def _as_batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 1:
        return t.reshape(1, -1), True
    return t, False


def predict(model, x) -> np.ndarray:
    """Network output for a single input vector or a batch of rows."""
    batch, single = _as_batch(x)
    with no_grad():
        out = model(batch).data
    return out[0] if single else out


def input_gradients(model, x, dims: Sequence[int] | None = None, output_index: int | None = None, create_graph: bool = True) -> Tensor:
    """Rows of d h(x) / d x_i for i in ``dims``.

    ``x`` may be a vector or an (n, D) batch; rows are independent so the
    gradient of the summed output recovers per-row gradients.  With
    ``create_graph`` the result stays on the tape.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = data.ndim == 1
    leaf = Tensor(data.reshape(1, -1) if single else data, requires_grad=True)
    out = model(leaf)
    if out.shape[1] != 1 and output_index is None:
        raise ValueError("model has several outputs; choose one with output_index")
    column = out[:, output_index if output_index is not None else 0]
    g = grad(column.sum(), [leaf], create_graph=create_graph)[0]
    if dims is not None:
        dims = list(dims)
        for i in dims:
            if not 0 <= i < leaf.shape[1]:
                raise IndexError(f"dimension {i} out of range for input width {leaf.shape[1]}")
        g = g[:, dims]
    return g[0] if single else g


def slice_total_activation(model: SlicedClassifier, x) -> np.ndarray:
    """Per-class sums of the designated hidden layer's activations."""
    batch, single = _as_batch(x)
    with no_grad():
        a = model.hidden(batch).data
    totals = activation_totals(a, model.slices)
    return totals[0] if single else totals


def activation_totals(activations: np.ndarray, slices: Sequence[Sequence[int]]) -> np.ndarray:
    return np.stack([activations[:, list(s)].sum(axis=1) for s in slices], axis=1)


def slice_total_gradient(model: SlicedClassifier, x, create_graph: bool = True) -> Tensor:
    """(n, K) tensor whose entry k is the sum over slice k of d logit_k / d a_w."""
    batch, single = _as_batch(x)
    a = model.hidden(batch)
    if not a.requires_grad:
        a = Tensor(a.data, requires_grad=True)
    logits = model.logits_from_hidden(a)
    columns = []
    for k, members in enumerate(model.slices):
        g = grad(logits[:, k].sum(), [a], create_graph=create_graph)[0]
        columns.append(g[:, list(members)].sum(axis=1, keepdims=True))
    totals = concatenate(columns, axis=1)
    return totals[0] if single else totals


def slice_label_gradient(model: SlicedClassifier, x, labels, create_graph: bool = True) -> Tensor:
    """(n, K) tensor whose entry k is the sum over slice k of d logit_y / d a_w.

    Row i differentiates the logit of its own label ``labels[i]``, so one
    backward pass covers every slice.
    """
    batch, single = _as_batch(x)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != batch.shape[0]:
        raise ShapeError(f"{batch.shape[0]} inputs but {len(labels)} labels")
    a = model.hidden(batch)
    if not a.requires_grad:
        a = Tensor(a.data, requires_grad=True)
    logits = model.logits_from_hidden(a)
    picked = logits[np.arange(len(labels)), labels].sum()
    g = grad(picked, [a], create_graph=create_graph)[0]
    totals = concatenate([g[:, list(members)].sum(axis=1, keepdims=True) for members in model.slices], axis=1)
    return totals[0] if single else totals


# -- persistence -------------------------------------------------------


def _mlp_to_dict(model: MlpModel) -> dict:
    return {
        "activation": model.activation,
        "monotone": list(model.monotone),
        "split_input": model.split_input,
        "input_width": model.input_width,
        "activate_output": model.activate_output,
        "layers": [
            {
                "shape": list(layer.weight.shape),
                "weight": layer.weight.data.ravel().tolist(),
                "bias": layer.bias.data.tolist(),
            }
            for layer in model.layers
        ],
    }


def _mlp_from_dict(d: dict) -> MlpModel:
    layers = []
    for entry in d["layers"]:
        w = np.array(entry["weight"], dtype=np.float64).reshape(entry["shape"])
        b = np.array(entry["bias"], dtype=np.float64)
        layers.append(Dense(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
    return MlpModel(
        layers,
        d["activation"],
        tuple(d["monotone"]),
        bool(d["split_input"]),
        int(d["input_width"]),
        bool(d["activate_output"]),
    )


def model_to_dict(model) -> dict:
    if isinstance(model, SlicedClassifier):
        return {
            "format": FORMAT_VERSION,
            "kind": "sliced",
            "n_classes": model.n_classes,
            "slices": [list(s) for s in model.slices],
            "head_activation": model.head_activation,
            "backbone": _mlp_to_dict(model.backbone),
            "head": _mlp_to_dict(model.head),
        }
    return {"format": FORMAT_VERSION, "kind": "mlp", **_mlp_to_dict(model)}


def model_from_dict(d: dict):
    if d.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    if d["kind"] == "sliced":
        return SlicedClassifier(
            _mlp_from_dict(d["backbone"]),
            _mlp_from_dict(d["head"]),
            int(d["n_classes"]),
            [tuple(s) for s in d["slices"]],
            d.get("head_activation"),
        )
    if d["kind"] == "mlp":
        return _mlp_from_dict(d)
    raise ValueError(f"unknown model kind {d['kind']!r}")


def save_model(model, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))


def get_weights(model) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def set_weights(model, weights: Sequence[np.ndarray]) -> None:
    params = model.parameters()
    if len(params) != len(weights):
        raise ShapeError("weight list does not match model parameters")
    for p, w in zip(params, weights):
        if p.shape != w.shape:
            raise ShapeError(f"weight shape {w.shape} does not match parameter {p.shape}")
        p.data = np.array(w, dtype=np.float64)
