"""Central finite-difference checks of regularizer and network gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import optim
from . import regularizers as reg
from .data import synthetic_blobs
from .model import build_network

__all__ = [
    "STEP",
    "REG_TOL",
    "NET_TOL",
    "CheckResult",
    "relative_error",
    "central_difference",
    "check_regularizer",
    "check_network",
    "run_all",
]

STEP = 1e-6
REG_TOL = 1e-6
NET_TOL = 1e-5
# absolute floor on the relative-error denominator, for gradient entries
# that are zero or nearly so
DENOM_FLOOR = 1e-4


def relative_error(analytic, numeric, floor=DENOM_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f: Callable[[], float], x: np.ndarray, index, h=STEP) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, restoring ``x[index]`` afterwards."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2.0 * h)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _random_away_from_zero(rng, shape, low=1e-2):
    w = rng.uniform(-1.0, 1.0, size=shape)
    small = np.abs(w) < low
    w[small] = np.copysign(low + rng.uniform(0, 1 - low, size=small.sum()), w[small])
    return w


def check_regularizer(kind: str, probes=50, seed=0, corrupt: bool = False) -> CheckResult:
    """Compare :func:`regularizers.gradient` to central differences at random points.

    Each probe draws a fresh 4x6 weight tensor with every |w| >= 1e-2 and
    checks one random coordinate. ``group_hs`` uses a row partition. The
    difference quotient is taken in extended precision.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        w = _random_away_from_zero(rng, (4, 6))
        scheme = None
        if kind == "group_hs":
            labels = np.repeat(np.arange(4), 6)
            scheme = reg.GroupScheme("fc_rows", (4, 6), labels, 4)
        spec = reg.RegularizerSpec(kind, 1.0, tl1_a=float(rng.uniform(0.5, 2.0)) if kind == "transformed_l1" else 1.0,
                                   group_scheme=scheme)
        grad = reg.gradient(spec, w)
        if corrupt:
            grad = grad * 1.01
        idx = tuple(rng.integers(0, s) for s in w.shape)
        ext = w.astype(np.longdouble)
        num = float(central_difference(lambda: reg.value(spec, ext), ext, idx, np.longdouble(STEP)))
        worst = max(worst, float(relative_error(grad[idx], num)))
    return CheckResult(kind, worst, REG_TOL)


def _layer_extended(net, i, h, w):
    layer = net.layers[i]
    if layer.kind == "dense":
        return h.reshape(len(h), -1) @ w.T + net.biases[i].astype(np.longdouble)
    if layer.kind == "conv":
        k = layer.k
        n, c, hh, ww = h.shape
        oh, ow = hh - k + 1, ww - k + 1
        cols = sliding_window_view(h, (k, k), axis=(2, 3))  # n, c, oh, ow, k, k
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        out = cols @ w.reshape(len(w), -1).T + net.biases[i].astype(np.longdouble)
        return out.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
    if layer.kind == "maxpool2":
        n, c, hh, ww = h.shape
        return h.reshape(n, c, hh // 2, 2, ww // 2, 2).max(axis=(3, 5))
    if layer.kind == "relu":
        return np.maximum(h, 0)
    return h.reshape(len(h), -1)


def _forward_extended(net, x, weights) -> list:
    """Input of every layer followed by the logits, in ``np.longdouble``."""
    acts = [np.asarray(x, dtype=np.longdouble).reshape((len(x),) + net.input_shape)]
    for i in range(len(net.layers)):
        acts.append(_layer_extended(net, i, acts[-1], weights[i]))
    return acts


def _cross_entropy_extended(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def _perturbed_objective(net, y, objective, weights, acts, i, unit):
    """Objective after changing a weight of output unit ``unit`` in layer ``i``.

    Only that unit's output is recomputed from the cached activations.
    Penalties of other layers are left out; they cancel in a difference.
    """
    h = acts[i + 1].copy()
    w = weights[i][unit : unit + 1]
    bias = net.biases[i][unit : unit + 1].astype(np.longdouble)
    if net.layers[i].kind == "dense":
        h[:, unit] = (acts[i].reshape(len(h), -1) @ w.T + bias)[:, 0]
    else:
        saved = net.biases[i]
        try:
            net.biases[i] = bias
            h[:, unit] = _layer_extended(net, i, acts[i], w)[:, 0]
        finally:
            net.biases[i] = saved
    for j in range(i + 1, len(net.layers)):
        h = _layer_extended(net, j, h, weights[j])
    total = _cross_entropy_extended(h, y)
    for term in objective.terms:
        layers = term.layers if term.layers is not None else net.param_layers
        if i in layers:
            spec = optim._layer_spec(term, net, i)
            total += np.longdouble(term.spec.decay) * reg.value(spec, weights[i])
    return total


def check_network(arch="lenet300100", objective: Optional[optim.ObjectiveSpec] = None, probes=50,
                  batch=4, seed=0, corrupt: bool = False) -> CheckResult:
    """Whole-network composite gradient against central differences.

    The difference quotient is evaluated in extended precision so that
    cancellation in large penalty values does not swamp small gradient
    entries. Weights are kept at |w| >= 1e-2 so every penalty is smooth.
    """
    rng = np.random.default_rng(seed)
    net = build_network(arch, seed=seed)
    for i in net.param_layers:
        shape = net.weights[i].shape
        bound = max(np.sqrt(1.0 / net.layers[i].fan_in), 2e-2)
        net.weights[i] = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(1e-2, bound, size=shape)
    if objective is None:
        objective = optim.elementwise_objective("hoyer_square", alpha=1e-3, beta=1e-3)
    ds = synthetic_blobs(batch, 10, seed=seed)
    x, y = ds.images, ds.labels
    cg = optim.composite_gradient(net, x, y, objective)
    ext = [None if w is None else w.astype(np.longdouble) for w in net.weights]
    acts = _forward_extended(net, x, ext)
    h = np.longdouble(STEP)
    worst = 0.0
    layers = net.param_layers
    for _ in range(probes):
        i = layers[rng.integers(len(layers))]
        idx = tuple(rng.integers(0, s) for s in ext[i].shape)
        old = ext[i][idx]
        ext[i][idx] = old + h
        up = _perturbed_objective(net, y, objective, ext, acts, i, idx[0])
        ext[i][idx] = old - h
        down = _perturbed_objective(net, y, objective, ext, acts, i, idx[0])
        ext[i][idx] = old
        num = float((up - down) / (2 * h))
        a = cg.weight_grads[i][idx] * (1.01 if corrupt else 1.0)
        worst = max(worst, float(relative_error(a, num)))
    return CheckResult(f"network:{arch}", worst, NET_TOL)


def run_all(probes=50, seed=0, corrupt: Optional[str] = None, networks=("lenet300100", "lenet5")) -> list:
    """Every regularizer kind plus the composite gradient of each network.

    ``corrupt`` names one item whose analytic gradient is scaled by 1.01,
    as a negative control.
    """
    results = [check_regularizer(k, probes, seed, corrupt=(corrupt == k)) for k in reg.KINDS]
    for arch in networks:
        name = f"network:{arch}"
        results.append(check_network(arch, probes=probes, seed=seed, corrupt=(corrupt == name)))
    return results
