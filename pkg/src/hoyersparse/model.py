"""Layer graph, LeNet builders, masked forward/backward and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .regularizers import GroupScheme

__all__ = [
    "Layer",
    "Network",
    "build_lenet300100",
    "build_lenet5",
    "build_network",
    "ARCHITECTURES",
    "forward",
    "backward",
    "group_view",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class Layer:
    """One layer of a feed-forward network.

    ``kind`` is one of ``dense``, ``conv``, ``maxpool2``, ``relu``,
    ``flatten``. Dense weights are stored ``(out, in)`` so that a row is
    one output neuron; conv kernels are ``(c_out, c_in, k, k)``.
    """

    kind: str
    n_in: int = 0
    n_out: int = 0
    k: int = 0

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv")

    @property
    def weight_shape(self) -> Optional[tuple]:
        if self.kind == "dense":
            return (self.n_out, self.n_in)
        if self.kind == "conv":
            return (self.n_out, self.n_in, self.k, self.k)
        return None

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return self.n_in
        if self.kind == "conv":
            return self.n_in * self.k * self.k
        return 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "k": self.k}


def Dense(n_in, n_out):
    return Layer("dense", n_in, n_out)


def Conv(c_in, c_out, k):
    return Layer("conv", c_in, c_out, k)


MAXPOOL = Layer("maxpool2")
RELU = Layer("relu")
FLATTEN = Layer("flatten")


class Network:
    """Ordered layers with weights, biases and binary prune masks.

    ``weights``, ``biases`` and ``masks`` are lists indexed by layer
    position; non-parametric layers hold ``None``.
    """

    def __init__(self, layers, input_shape, arch="custom", seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.arch = arch
        self.seed = seed
        self.weights: list = [None] * len(self.layers)
        self.biases: list = [None] * len(self.layers)
        self.masks: list = [None] * len(self.layers)
        self.metadata: dict = {}
        self._check_chain()
        self.init_params(seed)

    def _check_chain(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
        self.output_shape = shape

    @property
    def param_layers(self) -> list:
        return [i for i, layer in enumerate(self.layers) if layer.parametric]

    @property
    def n_classes(self) -> int:
        return int(np.prod(self.output_shape))

    def init_params(self, seed) -> None:
        """Uniform(+-sqrt(1/fan_in)) weights and biases; all-ones masks."""
        rng = np.random.default_rng(seed)
        self.seed = seed
        for i, layer in enumerate(self.layers):
            if not layer.parametric:
                continue
            bound = np.sqrt(1.0 / layer.fan_in)
            self.weights[i] = rng.uniform(-bound, bound, size=layer.weight_shape)
            self.biases[i] = rng.uniform(-bound, bound, size=layer.n_out)
            self.masks[i] = np.ones(layer.weight_shape)

    def apply_masks(self) -> None:
        for i in self.param_layers:
            self.weights[i] *= self.masks[i]

    def set_masks(self, masks) -> None:
        for i in self.param_layers:
            m = np.asarray(masks[i], dtype=np.float64)
            if m.shape != self.layers[i].weight_shape:
                raise nx.DimensionError(
                    f"mask for layer {i} has shape {m.shape}, weights {self.layers[i].weight_shape}"
                )
            if not np.all((m == 0) | (m == 1)):
                raise ValueError(f"mask for layer {i} is not binary")
            self.masks[i] = m
        self.apply_masks()

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.weights = [None if w is None else w.copy() for w in self.weights]
        other.biases = [None if b is None else b.copy() for b in self.biases]
        other.masks = [None if m is None else m.copy() for m in self.masks]
        other.metadata = dict(self.metadata)
        return other

    def n_weights(self) -> int:
        return sum(self.weights[i].size for i in self.param_layers)

    def layer_name(self, i) -> str:
        layer = self.layers[i]
        prefix = "fc" if layer.kind == "dense" else "conv"
        same = [j for j in self.param_layers if self.layers[j].kind == layer.kind]
        return f"{prefix}{same.index(i) + 1}"

    def forward(self, x):
        return forward(self, x)

    def predict(self, x, batch_size=1000) -> np.ndarray:
        out = [forward(self, x[s : s + batch_size]).argmax(axis=1) for s in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _out_shape(layer: Layer, shape: tuple, i: int) -> tuple:
    if layer.kind == "dense":
        if int(np.prod(shape)) != layer.n_in or len(shape) not in (1, 3):
            raise nx.DimensionError(f"layer {i}: dense expects {layer.n_in} inputs, got shape {shape}")
        return (layer.n_out,)
    if layer.kind == "conv":
        if len(shape) != 3 or shape[0] != layer.n_in:
            raise nx.DimensionError(f"layer {i}: conv expects {layer.n_in} channels, got shape {shape}")
        if layer.k > shape[1] or layer.k > shape[2]:
            raise nx.DimensionError(f"layer {i}: kernel {layer.k} larger than input {shape}")
        return (layer.n_out, shape[1] - layer.k + 1, shape[2] - layer.k + 1)
    if layer.kind == "maxpool2":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise nx.DimensionError(f"layer {i}: max-pool needs even spatial dims, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "relu":
        return shape
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def build_lenet300100(seed=0) -> Network:
    layers = [Dense(784, 300), RELU, Dense(300, 100), RELU, Dense(100, 10)]
    return Network(layers, (1, 28, 28), arch="lenet300100", seed=seed)


def build_lenet5(seed=0) -> Network:
    layers = [
        Conv(1, 20, 5), MAXPOOL, RELU,
        Conv(20, 50, 5), MAXPOOL, RELU,
        FLATTEN, Dense(800, 500), RELU, Dense(500, 10),
    ]
    return Network(layers, (1, 28, 28), arch="lenet5", seed=seed)


ARCHITECTURES = {"lenet300100": build_lenet300100, "lenet5": build_lenet5}


def build_network(arch: str, seed=0) -> Network:
    try:
        return ARCHITECTURES[arch](seed=seed)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}") from None


def _check_batch(net: Network, x) -> np.ndarray:
    x = nx.as_tensor(x)
    if x.shape[1:] == net.input_shape:
        return x
    if x.ndim == 2 and x.shape[1] == int(np.prod(net.input_shape)):
        return x.reshape((x.shape[0],) + net.input_shape)
    raise nx.DimensionError(f"batch shape {x.shape} does not match network input {net.input_shape}")


def _run_forward(net: Network, x):
    caches = []
    h = _check_batch(net, x)
    for i, layer in enumerate(net.layers):
        caches.append(h)
        if layer.kind == "dense":
            h = h.reshape(h.shape[0], -1) @ net.weights[i].T + net.biases[i]
        elif layer.kind == "conv":
            h = nx.conv2d_forward(h, net.weights[i], net.biases[i])
        elif layer.kind == "maxpool2":
            h, arg = nx.maxpool2x2(h)
            caches[-1] = arg
        elif layer.kind == "relu":
            h = nx.relu(h)
        elif layer.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    return h, caches


def forward(net: Network, x) -> np.ndarray:
    """Logits ``(N, n_classes)`` for a batch shaped like the network input."""
    return _run_forward(net, x)[0]


def backward(net: Network, x, labels, return_logits=False):
    """Mean cross-entropy over the batch and its parameter gradients.

    Weight gradients are multiplied by the layer mask, so pruned positions
    receive exactly 0. An empty batch yields zero loss and zero gradients.

    Returns:
        (loss, weight_grads, bias_grads), gradient lists indexed like
        ``net.layers``; the batch logits are appended when
        ``return_logits`` is set.
    """
    weight_grads = [None] * len(net.layers)
    bias_grads = [None] * len(net.layers)
    if len(x) == 0:
        for i in net.param_layers:
            weight_grads[i] = np.zeros_like(net.weights[i])
            bias_grads[i] = np.zeros_like(net.biases[i])
        if return_logits:
            return 0.0, weight_grads, bias_grads, np.zeros((0, net.n_classes))
        return 0.0, weight_grads, bias_grads

    logits, caches = _run_forward(net, x)
    loss, g = nx.softmax_cross_entropy(logits, labels)
    for i in range(len(net.layers) - 1, -1, -1):
        layer, inp = net.layers[i], caches[i]
        if layer.kind == "dense":
            flat = inp.reshape(inp.shape[0], -1)
            weight_grads[i] = (g.T @ flat) * net.masks[i]
            bias_grads[i] = g.sum(axis=0)
            g = (g @ net.weights[i]).reshape(inp.shape)
        elif layer.kind == "conv":
            g, gw, gb = nx.conv2d_backward(inp, net.weights[i], g)
            weight_grads[i] = gw * net.masks[i]
            bias_grads[i] = gb
        elif layer.kind == "maxpool2":
            g = nx.maxpool2x2_backward(inp, g)
        elif layer.kind == "relu":
            g = nx.relu_backward(inp, g)
        elif layer.kind == "flatten":
            g = g.reshape(inp.shape)
    if return_logits:
        return loss, weight_grads, bias_grads, logits
    return loss, weight_grads, bias_grads


_SCHEME_FOR = {
    "dense": {"fc_rows": "fc_rows", "fc_columns": "fc_columns", "filter_wise": "fc_rows", "channel_wise": "fc_columns"},
    "conv": {"filter_wise": "filter_wise", "channel_wise": "channel_wise"},
}


def group_view(net: Network, layer: int, kind: str) -> GroupScheme:
    """Partition of one layer's weights into rows/columns or filters/channels.

    For dense layers ``filter_wise`` is accepted as ``fc_rows`` and
    ``channel_wise`` as ``fc_columns``.
    """
    spec = net.layers[layer]
    if not spec.parametric:
        raise ValueError(f"layer {layer} ({spec.kind}) has no weights to group")
    try:
        resolved = _SCHEME_FOR[spec.kind][kind]
    except KeyError:
        raise ValueError(f"scheme {kind!r} does not apply to a {spec.kind} layer") from None
    shape = spec.weight_shape
    if resolved in ("fc_rows", "filter_wise"):
        labels = np.broadcast_to(np.arange(shape[0]).reshape((-1,) + (1,) * (len(shape) - 1)), shape)
        n_groups = shape[0]
    else:
        labels = np.broadcast_to(np.arange(shape[1]).reshape((1, -1) + (1,) * (len(shape) - 2)), shape)
        n_groups = shape[1]
    labels = np.ascontiguousarray(labels).ravel()
    return GroupScheme(resolved, shape, labels, n_groups)


def _to_list(a: np.ndarray) -> list:
    # float repr round-trips exactly through json
    return a.ravel().tolist()


def save_checkpoint(net: Network, path, **metadata) -> None:
    """Write the network as a JSON document.

    Floats are serialized with Python's shortest round-trip repr, so
    :func:`load_checkpoint` reproduces every weight bit for bit.
    """
    meta = dict(net.metadata)
    meta.update(metadata)
    meta.setdefault("seed", net.seed)
    doc = {
        "architecture": net.arch,
        "input_shape": list(net.input_shape),
        "layers": [],
        "metadata": meta,
    }
    for i, layer in enumerate(net.layers):
        entry = layer.to_dict()
        if layer.parametric:
            entry["weight_shape"] = list(layer.weight_shape)
            entry["weights"] = _to_list(net.weights[i])
            entry["biases"] = _to_list(net.biases[i])
            entry["mask"] = [int(v) for v in net.masks[i].ravel()]
        doc["layers"].append(entry)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_checkpoint(path) -> Network:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
        layers = [Layer(e["kind"], e["n_in"], e["n_out"], e["k"]) for e in doc["layers"]]
        net = Network(layers, doc["input_shape"], arch=doc["architecture"], seed=doc["metadata"].get("seed", 0))
        for i, e in enumerate(doc["layers"]):
            if not layers[i].parametric:
                continue
            shape = layers[i].weight_shape
            net.weights[i] = np.array(e["weights"], dtype=np.float64).reshape(shape)
            net.biases[i] = np.array(e["biases"], dtype=np.float64)
            net.masks[i] = np.array(e["mask"], dtype=np.float64).reshape(shape)
        net.metadata = dict(doc["metadata"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return net
