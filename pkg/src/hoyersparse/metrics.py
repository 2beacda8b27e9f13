"""Sparsity accounting: nonzero counts, surviving structure, FLOPs, histograms.

FLOPs are multiply-accumulates of one forward pass through the surviving
structure: ``n_in * n_out`` per dense layer and
``H_out * W_out * k^2 * c_in * c_out`` per convolution.

A structure is a list of neuron counts in this order: for each conv layer
its surviving filters; for the first dense layer its surviving inputs; then
each dense layer's surviving outputs except the classifier's. LeNet-300-100
reads ``784-300-100`` and LeNet-5 ``20-50-800-500``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .model import Network, _out_shape, build_network

__all__ = [
    "count_nonzero",
    "surviving_structure",
    "structure_string",
    "flops",
    "weight_histogram",
    "write_histogram_csv",
    "SparsityReport",
    "sparsity_report",
]


def count_nonzero(net: Network) -> dict:
    """Exact nonzero weight count per layer name, plus ``"total"``."""
    counts = {net.layer_name(i): int(np.count_nonzero(net.weights[i])) for i in net.param_layers}
    counts["total"] = sum(counts.values())
    return counts


def _spatial_out(net: Network) -> dict:
    """(H_out, W_out) of every conv layer."""
    shape = net.input_shape
    out = {}
    for i, layer in enumerate(net.layers):
        shape = _out_shape(layer, shape, i)
        if layer.kind == "conv":
            out[i] = shape[1:]
    return out


def _input_usage(net: Network, i: int) -> np.ndarray:
    """Per input unit of layer ``i``: is any outgoing weight nonzero?"""
    w = net.weights[i]
    if net.layers[i].kind == "conv":
        return np.any(w != 0, axis=(0, 2, 3))
    return np.any(w != 0, axis=0)


def _output_live(net: Network, i: int) -> np.ndarray:
    w = net.weights[i]
    return np.any(w.reshape(w.shape[0], -1) != 0, axis=1)


def surviving_structure(net: Network) -> list:
    """Neuron counts that survive pruning, in structure order.

    A hidden unit survives when its incoming row/filter is nonzero and some
    outgoing weight that consumes it is nonzero; classifier outputs always
    survive. The first dense layer's inputs survive when their column is
    nonzero and, after a conv stack, their source channel survives.
    """
    params = net.param_layers
    structure = []
    alive_channels: Optional[np.ndarray] = None
    for pos, i in enumerate(params):
        layer = net.layers[i]
        last = pos == len(params) - 1
        if layer.kind == "dense" and (pos == 0 or net.layers[params[pos - 1]].kind == "conv"):
            used = _input_usage(net, i)
            if alive_channels is not None:
                per_channel = layer.n_in // alive_channels.size
                used = used & np.repeat(alive_channels, per_channel)
            structure.append(int(used.sum()))
        if last:
            break
        live = _output_live(net, i)
        nxt = params[pos + 1]
        usage = _input_usage(net, nxt)
        if usage.size != live.size:
            # conv feeding a flattened dense layer: any column of the channel
            usage = usage.reshape(live.size, -1).any(axis=1)
        live = live & usage
        if layer.kind == "conv":
            alive_channels = live
        structure.append(int(live.sum()))
    return structure


def structure_string(structure) -> str:
    return "-".join(str(int(s)) for s in structure)


def _resolve_arch(architecture: Union[str, Network]) -> Network:
    if isinstance(architecture, Network):
        return architecture
    return build_network(architecture)


def flops(structure, architecture: Union[str, Network]) -> int:
    """Multiply-accumulate count of the surviving structure of ``architecture``."""
    net = _resolve_arch(architecture)
    structure = [int(s) for s in structure]
    spatial = _spatial_out(net)
    params = net.param_layers

    expected = []
    for pos, i in enumerate(params):
        layer = net.layers[i]
        if layer.kind == "dense" and (pos == 0 or net.layers[params[pos - 1]].kind == "conv"):
            expected.append(layer.n_in)
        if pos < len(params) - 1:
            expected.append(layer.n_out)
    if len(structure) != len(expected):
        raise ValueError(
            f"structure {structure_string(structure)} has {len(structure)} entries; "
            f"{net.arch} needs {len(expected)}"
        )
    for s, full in zip(structure, expected):
        if not 0 <= s <= full:
            raise ValueError(f"structure {structure_string(structure)} is inconsistent with {net.arch}")

    counts = iter(structure)
    total = 0
    prev_out = None
    for pos, i in enumerate(params):
        layer = net.layers[i]
        last = pos == len(params) - 1
        if layer.kind == "conv":
            c_in = layer.n_in if prev_out is None else prev_out
            c_out = layer.n_out if last else next(counts)
            h, w = spatial[i]
            total += h * w * layer.k * layer.k * c_in * c_out
            prev_out = c_out
        else:
            if pos == 0 or net.layers[params[pos - 1]].kind == "conv":
                n_in = next(counts)
            else:
                n_in = prev_out
            n_out = layer.n_out if last else next(counts)
            total += n_in * n_out
            prev_out = n_out
    return int(total)


def weight_histogram(net: Network, layer: int, bins: int = 50, range=None):
    """Histogram of the nonzero weights of one layer.

    Returns ``(edges, counts)``; zeros are excluded before binning.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    w = net.weights[layer].ravel()
    nonzero = w[w != 0]
    counts, edges = np.histogram(nonzero, bins=bins, range=range)
    return edges, counts


def write_histogram_csv(edges, counts, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for left, right, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(left)), repr(float(right)), int(c)])


@dataclass
class SparsityReport:
    architecture: str
    layers: list
    total_nonzero: int
    total_weights: int
    nonzero_percent: float
    structure: list
    structure_str: str
    flops: int
    flops_full: int
    flops_percent: float
    accuracy: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")


def sparsity_report(net: Network, **accuracy) -> SparsityReport:
    counts = count_nonzero(net)
    layers = []
    for i in net.param_layers:
        name = net.layer_name(i)
        size = int(net.weights[i].size)
        layers.append({
            "name": name,
            "nonzero": counts[name],
            "total": size,
            "percent": 100.0 * counts[name] / size,
        })
    total = net.n_weights()
    structure = surviving_structure(net)
    full = flops(_full_structure(net), net)
    fl = flops(structure, net)
    return SparsityReport(
        architecture=net.arch,
        layers=layers,
        total_nonzero=counts["total"],
        total_weights=total,
        nonzero_percent=100.0 * counts["total"] / total,
        structure=structure,
        structure_str=structure_string(structure),
        flops=fl,
        flops_full=full,
        flops_percent=100.0 * fl / full if full else 0.0,
        accuracy={k: v for k, v in accuracy.items() if v is not None},
    )


def _full_structure(net: Network) -> list:
    full = net.copy()
    for i in full.param_layers:
        full.weights[i] = np.ones_like(full.weights[i])
    return surviving_structure(full)
