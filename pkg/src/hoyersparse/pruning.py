"""Sparsify, threshold-prune, masked finetune.

The three stages run on a :class:`~hoyersparse.model.Network` in place.
:func:`run_pipeline` chains them from an :class:`ExperimentConfig`,
writing a checkpoint, a sparsity report, a CSV log and per-layer weight
histograms after every stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics, optim
from .config import ExperimentConfig
from .data import Dataset, load_mnist, synthetic_blobs
from .model import Network, build_network, group_view, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

__all__ = [
    "Threshold",
    "PruneConfig",
    "compute_thresholds",
    "prune_elementwise",
    "prune_structural",
    "structural_schemes",
    "finetune",
    "load_data",
    "sparsify_objective",
    "StageResult",
    "run_pretrain",
    "run_sparsify",
    "run_prune",
    "run_finetune",
    "run_pipeline",
    "STAGES",
]

STAGES = ("pretrain", "sparsify", "prune", "finetune")

# stage seeds are offset so that each stage shuffles differently
_SEED_OFFSET = {"pretrain": 0, "sparsify": 1000, "finetune": 2000}


@dataclass(frozen=True)
class Threshold:
    mode: str = "ratio_of_std"  # or "absolute"
    value: float = 0.0

    def __post_init__(self):
        if self.mode not in ("ratio_of_std", "absolute"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not self.value >= 0:
            raise ValueError(f"threshold value must be >= 0, got {self.value}")


@dataclass
class PruneConfig:
    """Threshold rule per layer (keyed by layer name, e.g. ``fc1``)."""

    default: Threshold = field(default_factory=Threshold)
    layers: dict = field(default_factory=dict)
    mode: str = "elementwise"
    elementwise_within_groups: bool = False

    def threshold_for(self, name: str) -> Threshold:
        return self.layers.get(name, self.default)

    @classmethod
    def from_config(cls, prune: dict) -> "PruneConfig":
        return cls(
            default=Threshold(**prune["threshold"]),
            layers={k: Threshold(**v) for k, v in prune["layers"].items()},
            mode=prune["mode"],
            elementwise_within_groups=prune["elementwise_within_groups"],
        )


def compute_thresholds(net: Network, config: PruneConfig) -> dict:
    """Per-layer threshold: ``ratio * std(W)`` (population std) or a constant."""
    out = {}
    for i in net.param_layers:
        rule = config.threshold_for(net.layer_name(i))
        if rule.mode == "absolute":
            out[i] = float(rule.value)
        else:
            out[i] = float(rule.value * np.std(net.weights[i]))
    return out


def prune_elementwise(net: Network, thresholds: dict) -> list:
    """Mask every weight with ``|w| < tau``; ties survive. Returns the masks."""
    masks = list(net.masks)
    for i in net.param_layers:
        keep = np.abs(net.weights[i]) >= thresholds[i]
        masks[i] = net.masks[i] * keep
    net.set_masks(masks)
    return masks


def structural_schemes(net: Network) -> dict:
    """Rows and columns for dense layers, filters and channels for convs."""
    return {
        i: [group_view(net, i, "filter_wise"), group_view(net, i, "channel_wise")]
        for i in net.param_layers
    }


def prune_structural(net: Network, thresholds: dict, schemes: Optional[dict] = None) -> list:
    """Mask whole groups whose l2 norm is below the layer threshold.

    A weight is kept only if every group containing it is kept.
    """
    if schemes is None:
        schemes = structural_schemes(net)
    masks = list(net.masks)
    for i in net.param_layers:
        keep = np.ones(net.weights[i].size, dtype=bool)
        for scheme in schemes.get(i, ()):
            if scheme.shape != net.weights[i].shape:
                raise ValueError(
                    f"scheme for shape {scheme.shape} does not fit layer {i} weights {net.weights[i].shape}"
                )
            norms = scheme.group_norms(net.weights[i])
            keep &= (norms >= thresholds[i])[scheme.labels]
        masks[i] = net.masks[i] * keep.reshape(net.weights[i].shape)
    net.set_masks(masks)
    return masks


def finetune(net: Network, masks, objective: optim.ObjectiveSpec, epochs: int, train: Dataset,
             test: Optional[Dataset] = None, optimizer=None, seed: int = 0, batch_size: int = 64,
             on_epoch_end=None):
    """Masked training without sparsity penalties; keeps the best-test snapshot.

    Every sparsity penalty in ``objective`` is dropped (an ``l2`` term is
    kept). Returns
    ``(net, log)`` where ``net`` holds the weights of the epoch with the
    highest test accuracy (the starting point counts as epoch 0).
    """
    net.set_masks(masks)
    objective = optim.ObjectiveSpec([t for t in objective.terms if t.spec.kind == "l2"])
    if epochs == 0:
        return net, []
    if optimizer is None:
        optimizer = optim.Adam(lr=1e-3)
    best_acc = optim.accuracy(net, test.images, test.labels) if test is not None else -np.inf
    best = net.copy()

    def keep_best(current, record):
        nonlocal best, best_acc
        if on_epoch_end is not None:
            on_epoch_end(current, record)
        acc = record["test_acc"]
        if test is None or acc > best_acc:
            best_acc = acc
            best = current.copy()

    log = optim.train_epochs(net, train, objective, optimizer, epochs, seed=seed, test=test,
                             batch_size=batch_size, on_epoch_end=keep_best)
    for i in net.param_layers:
        net.weights[i][...] = best.weights[i]
        net.biases[i][...] = best.biases[i]
    return net, log


# ---------------------------------------------------------------- pipeline


def load_data(config: ExperimentConfig):
    data = config["data"]
    if data["synthetic"] is not None:
        syn = data["synthetic"]
        seed = config["seed"]
        train = synthetic_blobs(syn["n_train"] + syn["n_test"], syn["classes"], seed=seed,
                                separation=syn["separation"])
        n = syn["n_train"]
        test = Dataset(train.images[n:], train.labels[n:])
        return Dataset(train.images[:n], train.labels[:n]), test
    path = Path(data["path"])
    if not path.is_dir():
        raise FileNotFoundError(f"MNIST directory not found: {path}")
    return load_mnist(path)


def sparsify_objective(config: ExperimentConfig) -> optim.ObjectiveSpec:
    sp = config["sparsify"]
    if sp["regularizer"] == "group_hs":
        channel = sp["decay"] if sp["decay_channel"] is None else sp["decay_channel"]
        return optim.structural_objective(sp["decay"], channel, sp["beta"])
    return optim.elementwise_objective(sp["regularizer"], sp["decay"], sp["beta"], tl1_a=sp["tl1_a"])


def _make_optimizer(config: ExperimentConfig):
    opt = config["optimizer"]
    if opt["kind"] == "sgd":
        return optim.SGD(lr=opt["lr"], momentum=opt["momentum"])
    return optim.Adam(lr=opt["lr"])


@dataclass
class StageResult:
    net: Network
    report: metrics.SparsityReport
    log: list


def _finish_stage(stage: str, net: Network, config: ExperimentConfig, log: list, test: Dataset,
                  **extra_acc) -> StageResult:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    test_acc = optim.accuracy(net, test.images, test.labels)
    net.metadata.setdefault("accuracy", {})
    net.metadata["accuracy"][stage] = test_acc
    net.metadata["stage"] = stage
    net.metadata["seed"] = config["seed"]
    net.metadata["epoch"] = net.metadata.get("epoch", 0) + len(log)
    accuracies = dict(net.metadata["accuracy"])
    accuracies.update(extra_acc)
    report = metrics.sparsity_report(net, **{f"{k}_test_acc": v for k, v in accuracies.items()})
    save_checkpoint(net, out / f"{stage}.json")
    report.save(out / f"{stage}_report.json")
    if log:
        optim.write_log_csv(log, out / f"{stage}_log.csv")
    bins = config["histogram_bins"]
    for i in net.param_layers:
        edges, counts = metrics.weight_histogram(net, i, bins)
        metrics.write_histogram_csv(edges, counts, out / f"{stage}_hist_{net.layer_name(i)}.csv")
    logger.info("%s: test acc %.4f, nonzero %.2f%%, structure %s, flops %d",
                stage, test_acc, report.nonzero_percent, report.structure_str, report.flops)
    return StageResult(net, report, log)


def run_pretrain(config: ExperimentConfig, data=None) -> StageResult:
    train, test = data if data is not None else load_data(config)
    ck = config["pretrain"]["checkpoint"]
    if ck:
        net = load_checkpoint(ck)
        net.metadata["epoch"] = 0
        log = []
    else:
        net = build_network(config["model"], seed=config["seed"])
        objective = optim.elementwise_objective(beta=config["pretrain"]["beta"])
        net.metadata["pretrain_regularization"] = {"beta": config["pretrain"]["beta"]}
        log = optim.train_epochs(net, train, objective, _make_optimizer(config), config["epochs"]["pretrain"],
                                 seed=config["seed"] + _SEED_OFFSET["pretrain"], test=test,
                                 batch_size=config["batch_size"])
    return _finish_stage("pretrain", net, config, log, test)


def run_sparsify(config: ExperimentConfig, net: Network, data=None) -> StageResult:
    train, test = data if data is not None else load_data(config)
    objective = sparsify_objective(config)
    log = optim.train_epochs(net, train, objective, _make_optimizer(config), config["epochs"]["sparsify"],
                             seed=config["seed"] + _SEED_OFFSET["sparsify"], test=test,
                             batch_size=config["batch_size"])
    return _finish_stage("sparsify", net, config, log, test)


def run_prune(config: ExperimentConfig, net: Network, data=None) -> StageResult:
    _, test = data if data is not None else load_data(config)
    prune_cfg = PruneConfig.from_config(config["prune"])
    thresholds = compute_thresholds(net, prune_cfg)
    if prune_cfg.mode == "structural":
        prune_structural(net, thresholds)
        if prune_cfg.elementwise_within_groups:
            prune_elementwise(net, thresholds)
    else:
        prune_elementwise(net, thresholds)
    net.metadata["thresholds"] = {net.layer_name(i): t for i, t in thresholds.items()}
    return _finish_stage("prune", net, config, [], test)


def run_finetune(config: ExperimentConfig, net: Network, data=None) -> StageResult:
    train, test = data if data is not None else load_data(config)
    objective = optim.elementwise_objective(beta=config["finetune"]["beta"])
    net, log = finetune(net, list(net.masks), objective, config["epochs"]["finetune"], train, test,
                        optimizer=_make_optimizer(config),
                        seed=config["seed"] + _SEED_OFFSET["finetune"], batch_size=config["batch_size"])
    return _finish_stage("finetune", net, config, log, test)


def run_pipeline(config: ExperimentConfig):
    """Pretrain (or load), sparsify, prune, finetune.

    Returns ``(net, report)`` for the final model. Every stage persists its
    outputs under ``config["out"]``; the final report is also written to
    ``report.json``.
    """
    data = load_data(config)
    result = run_pretrain(config, data)
    result = run_sparsify(config, result.net, data)
    result = run_prune(config, result.net, data)
    result = run_finetune(config, result.net, data)
    out = Path(config["out"])
    result.report.save(out / "report.json")
    (out / "config.json").write_text(config.to_json() + "\n")
    return result.net, result.report
