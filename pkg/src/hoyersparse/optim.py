"""Optimizers, composite objectives and the mini-batch training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import regularizers as reg
from .model import Network, backward, group_view

logger = logging.getLogger(__name__)

__all__ = [
    "SGD",
    "Adam",
    "make_optimizer",
    "PenaltyTerm",
    "ObjectiveSpec",
    "elementwise_objective",
    "structural_objective",
    "CompositeGradient",
    "composite_gradient",
    "penalty_values",
    "objective_value",
    "accuracy",
    "train_epochs",
    "write_log_csv",
]


class SGD:
    """SGD with heavy-ball momentum: ``v <- mu v + g; w <- w - lr v``."""

    kind = "sgd"

    def __init__(self, lr=0.01, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.buffers: Optional[list] = None
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        _check_pairs(params, grads)
        if self.buffers is None:
            self.buffers = [np.zeros_like(p) for p in params]
        self.t += 1
        for p, g, v in zip(params, grads, self.buffers):
            if self.momentum:
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                p -= self.lr * g
        return params


class Adam:
    """Adam with bias-corrected moment estimates."""

    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Optional[list] = None
        self.v: Optional[list] = None
        self._tmp: Optional[list] = None
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        _check_pairs(params, grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
            self._tmp = [np.empty_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step_size = self.lr / (1.0 - b1**self.t)
        inv_corr2 = 1.0 / np.sqrt(1.0 - b2**self.t)
        for p, g, m, v, tmp in zip(params, grads, self.m, self.v, self._tmp):
            # m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2
            m *= b1
            np.multiply(g, 1.0 - b1, out=tmp)
            m += tmp
            v *= b2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v += tmp
            # p <- p - step_size * m / (sqrt(v / corr2) + eps)
            np.sqrt(v, out=tmp)
            tmp *= inv_corr2
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step_size
            p -= tmp
        return params


def _check_pairs(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"parameter shape {p.shape} does not match gradient {g.shape}")


def make_optimizer(kind="adam", **kwargs):
    if kind == "adam":
        return Adam(**kwargs)
    if kind == "sgd":
        return SGD(**kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class PenaltyTerm:
    """A decayed penalty applied to a set of layers (``None`` = all weights)."""

    spec: reg.RegularizerSpec
    layers: Optional[Sequence[int]] = None

    @property
    def name(self) -> str:
        if self.spec.kind == "group_hs":
            scheme = self.spec.group_scheme
            label = scheme if isinstance(scheme, str) else scheme.kind
            return f"group_hs[{label}]"
        return self.spec.kind


@dataclass
class ObjectiveSpec:
    terms: list = field(default_factory=list)

    def validate(self, net: Network) -> None:
        params = set(net.param_layers)
        for term in self.terms:
            for i in term.layers or ():
                if i not in params:
                    raise ValueError(f"penalty {term.name} targets non-parametric layer {i}")

    @property
    def names(self) -> list:
        return [t.name for t in self.terms]

    def without(self, kinds) -> "ObjectiveSpec":
        return ObjectiveSpec([t for t in self.terms if t.spec.kind not in kinds])


def elementwise_objective(kind="hoyer_square", alpha=0.0, beta=0.0, tl1_a=1.0) -> ObjectiveSpec:
    """Per-layer ``alpha * R(W) + beta * ||W||_2`` over every weight layer."""
    terms = []
    if alpha:
        terms.append(PenaltyTerm(reg.RegularizerSpec(kind, alpha, tl1_a=tl1_a)))
    if beta:
        terms.append(PenaltyTerm(reg.RegularizerSpec("l2", beta)))
    return ObjectiveSpec(terms)


def structural_objective(alpha_n=0.0, alpha_c=0.0, beta=0.0) -> ObjectiveSpec:
    """Per-layer Group-HS over filters/rows and channels/columns, plus ``beta * ||W||_2``."""
    terms = []
    if alpha_n:
        terms.append(PenaltyTerm(reg.RegularizerSpec("group_hs", alpha_n, group_scheme="filter_wise")))
    if alpha_c:
        terms.append(PenaltyTerm(reg.RegularizerSpec("group_hs", alpha_c, group_scheme="channel_wise")))
    if beta:
        terms.append(PenaltyTerm(reg.RegularizerSpec("l2", beta)))
    return ObjectiveSpec(terms)


def _layer_spec(term: PenaltyTerm, net: Network, i: int) -> reg.RegularizerSpec:
    spec = term.spec
    if spec.kind == "group_hs" and isinstance(spec.group_scheme, str):
        scheme = _scheme_cache(net, i, spec.group_scheme)
        return reg.RegularizerSpec("group_hs", spec.decay, group_scheme=scheme)
    return spec


def _scheme_cache(net: Network, i: int, kind: str) -> reg.GroupScheme:
    cache = net.__dict__.setdefault("_schemes", {})
    key = (i, kind)
    if key not in cache:
        cache[key] = group_view(net, i, kind)
    return cache[key]


def penalty_values(net: Network, objective: ObjectiveSpec) -> dict:
    """Decayed value of each penalty term, summed over its layers."""
    out = {}
    for term in objective.terms:
        layers = term.layers if term.layers is not None else net.param_layers
        total = sum(reg.value(_layer_spec(term, net, i), net.weights[i]) for i in layers)
        out[term.name] = out.get(term.name, 0.0) + term.spec.decay * total
    return out


@dataclass
class CompositeGradient:
    data_loss: float
    penalties: dict
    weight_grads: list
    bias_grads: list

    @property
    def total(self) -> float:
        return self.data_loss + sum(self.penalties.values())


def composite_gradient(net: Network, x, labels, objective: ObjectiveSpec, return_logits=False):
    """Gradient of mean cross-entropy plus every decayed penalty term.

    Pruned positions get exactly zero gradient. With ``return_logits`` a
    ``(CompositeGradient, logits)`` pair is returned.
    """
    loss, wg, bg, logits = backward(net, x, labels, return_logits=True)
    penalties = {}
    for term in objective.terms:
        if term.spec.decay == 0:
            penalties.setdefault(term.name, 0.0)
            continue
        layers = term.layers if term.layers is not None else net.param_layers
        total = 0.0
        for i in layers:
            spec = _layer_spec(term, net, i)
            w = net.weights[i]
            total += reg.value(spec, w)
            wg[i] += term.spec.decay * reg.gradient(spec, w) * net.masks[i]
        penalties[term.name] = penalties.get(term.name, 0.0) + term.spec.decay * total
    result = CompositeGradient(loss, penalties, wg, bg)
    return (result, logits) if return_logits else result


def objective_value(net: Network, x, labels, objective: ObjectiveSpec) -> float:
    """Full objective (mean cross-entropy + decayed penalties) at the current weights."""
    from .model import forward
    from .numerics import softmax_cross_entropy

    loss = softmax_cross_entropy(forward(net, x), labels)[0] if len(x) else 0.0
    return loss + sum(penalty_values(net, objective).values())


def accuracy(net: Network, x, labels, batch_size=1000) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(net.predict(x, batch_size) == np.asarray(labels)))


def _params(net: Network):
    return [net.weights[i] for i in net.param_layers] + [net.biases[i] for i in net.param_layers]


def nonzero_fraction(net: Network) -> float:
    nz = sum(int(np.count_nonzero(net.weights[i])) for i in net.param_layers)
    return nz / net.n_weights()


def train_epochs(
    net: Network,
    train,
    objective: ObjectiveSpec,
    optimizer,
    epochs: int,
    seed: int = 0,
    test=None,
    batch_size: int = 64,
    on_epoch_end: Optional[Callable] = None,
    start_epoch: int = 0,
) -> list:
    """Mini-batch training under a composite objective.

    ``train`` and ``test`` are :class:`~hoyersparse.data.Dataset`-like
    objects with ``images`` and ``labels``. Mini-batch order comes from a
    generator seeded with ``seed``; masks are enforced on every step.

    Returns one dict per epoch with ``epoch``, ``data_loss``, one column per
    penalty term, ``train_acc``, ``test_acc`` and ``nonzero_fraction``.
    ``on_epoch_end(net, record)`` is called after each epoch.
    """
    objective.validate(net)
    n = len(train.labels)
    if n == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(seed)
    log = []
    for epoch in range(start_epoch, start_epoch + epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            xb, yb = train.images[idx], train.labels[idx]
            cg, logits = composite_gradient(net, xb, yb, objective, return_logits=True)
            loss_sum += cg.data_loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == yb))
            wg = [cg.weight_grads[i] for i in net.param_layers]
            bg = [cg.bias_grads[i] for i in net.param_layers]
            optimizer.step(_params(net), wg + bg)
            net.apply_masks()
        record = {"epoch": epoch + 1, "data_loss": loss_sum / n}
        record.update(penalty_values(net, objective))
        record["train_acc"] = correct / n
        record["test_acc"] = accuracy(net, test.images, test.labels) if test is not None else float("nan")
        record["nonzero_fraction"] = nonzero_fraction(net)
        logger.info(
            "epoch %d loss %.4f train %.4f test %.4f nonzero %.4f",
            record["epoch"], record["data_loss"], record["train_acc"], record["test_acc"],
            record["nonzero_fraction"],
        )
        log.append(record)
        if on_epoch_end is not None:
            on_epoch_end(net, record)
    return log


def write_log_csv(log: list, path) -> None:
    """Write a training log as CSV; penalty columns sit between loss and accuracies."""
    head, tail = ["epoch", "data_loss"], ["train_acc", "test_acc", "nonzero_fraction"]
    middle = []
    for rec in log:
        for key in rec:
            if key not in head and key not in tail and key not in middle:
                middle.append(key)
    fields = head + middle + tail
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        for rec in log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
