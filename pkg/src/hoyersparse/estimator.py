"""scikit-learn compatible wrapper around the prune-and-finetune pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import metrics, optim
from .data import Dataset
from .model import build_network
from .pruning import (
    PruneConfig,
    Threshold,
    compute_thresholds,
    finetune,
    prune_elementwise,
    prune_structural,
)

__all__ = ["HoyerSparseClassifier"]


class HoyerSparseClassifier(ClassifierMixin, BaseEstimator):
    """LeNet classifier trained with a sparsity penalty, then pruned and finetuned.

    ``fit`` runs the full pipeline: plain pretraining, training with the
    penalty, thresholding at ``threshold_ratio * std(W)`` per layer, and
    masked finetuning that keeps the best epoch on ``(X_val, y_val)`` when
    given (otherwise the last epoch).

    Parameters
    ----------
    architecture : {"lenet300100", "lenet5"}
    regularizer : str
        ``hoyer_square``, ``hoyer``, ``transformed_l1``, ``l1`` (element-wise
        pruning) or ``group_hs`` (structural pruning of rows/columns and
        filters/channels).
    decay : float
        Penalty coefficient.
    threshold_ratio : float
        Pruning threshold as a multiple of each layer's weight std.
    pretrain_epochs, sparsify_epochs, finetune_epochs : int
    lr : float
        Adam learning rate.
    batch_size : int
    random_state : int

    Attributes
    ----------
    network_ : Network
    classes_ : ndarray
    report_ : SparsityReport
    history_ : dict of stage name -> list of epoch records
    """

    def __init__(self, architecture="lenet300100", regularizer="hoyer_square", decay=2e-4,
                 threshold_ratio=0.03, pretrain_epochs=30, sparsify_epochs=50, finetune_epochs=30,
                 lr=1e-3, batch_size=64, random_state=0):
        self.architecture = architecture
        self.regularizer = regularizer
        self.decay = decay
        self.threshold_ratio = threshold_ratio
        self.pretrain_epochs = pretrain_epochs
        self.sparsify_epochs = sparsify_epochs
        self.finetune_epochs = finetune_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _as_images(self, X):
        X = np.asarray(X, dtype=np.float64)
        shape = self.network_.input_shape
        if X.shape[1:] != shape:
            X = X.reshape((X.shape[0],) + shape)
        return X

    def _objective(self):
        if self.regularizer == "group_hs":
            return optim.structural_objective(self.decay, self.decay)
        return optim.elementwise_objective(self.regularizer, self.decay)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_ = unique_labels(y)
        self.network_ = build_network(self.architecture, seed=self.random_state)
        if len(self.classes_) > self.network_.n_classes:
            raise ValueError(
                f"{len(self.classes_)} classes but {self.architecture} has {self.network_.n_classes} outputs"
            )
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        if self.n_features_in_ != int(np.prod(self.network_.input_shape)):
            raise ValueError(
                f"X has {self.n_features_in_} features, {self.architecture} expects "
                f"{int(np.prod(self.network_.input_shape))}"
            )
        encoded = np.searchsorted(self.classes_, y)
        train = Dataset(self._as_images(X), encoded)
        test = None
        if X_val is not None:
            X_val = check_array(X_val, allow_nd=True, dtype=np.float64)
            test = Dataset(self._as_images(X_val), np.searchsorted(self.classes_, np.asarray(y_val)))

        net = self.network_
        seed = self.random_state
        self.history_ = {}
        self.history_["pretrain"] = optim.train_epochs(
            net, train, optim.ObjectiveSpec(), optim.Adam(lr=self.lr), self.pretrain_epochs,
            seed=seed, test=test, batch_size=self.batch_size)
        self.history_["sparsify"] = optim.train_epochs(
            net, train, self._objective(), optim.Adam(lr=self.lr), self.sparsify_epochs,
            seed=seed + 1000, test=test, batch_size=self.batch_size)
        config = PruneConfig(default=Threshold("ratio_of_std", self.threshold_ratio),
                             mode="structural" if self.regularizer == "group_hs" else "elementwise")
        thresholds = compute_thresholds(net, config)
        if config.mode == "structural":
            masks = prune_structural(net, thresholds)
        else:
            masks = prune_elementwise(net, thresholds)
        _, self.history_["finetune"] = finetune(
            net, masks, optim.ObjectiveSpec(), self.finetune_epochs, train, test,
            optimizer=optim.Adam(lr=self.lr), seed=seed + 2000, batch_size=self.batch_size)
        self.report_ = metrics.sparsity_report(net)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        logits = self.network_.forward(self._as_images(X))[:, : len(self.classes_)]
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Class probabilities, so the classifier can sit inside a Pipeline."""
        return self.predict_proba(X)

    @property
    def sparsity_(self) -> float:
        """Fraction of weights that are exactly zero."""
        check_is_fitted(self, "network_")
        return 1.0 - self.report_.total_nonzero / self.report_.total_weights
