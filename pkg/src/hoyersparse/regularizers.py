"""Sparsity penalties and their analytic gradients.

Supported kinds:

* ``l1``            sum |w|
* ``l2``            ||w||_2 (unsquared)
* ``hoyer``         sum |w| / ||w||_2
* ``hoyer_square``  (sum |w|)^2 / sum w^2
* ``group_hs``      (sum_g ||w_g||)^2 / sum_g ||w_g||^2
* ``transformed_l1`` sum (a + 1)|w| / (a + |w|)

The ratio penalties are scale invariant. For an all-zero weight tensor their
value and gradient are defined as 0; there is no epsilon in any denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "KINDS",
    "SCHEME_KINDS",
    "DegenerateInputError",
    "SchemeError",
    "GroupScheme",
    "RegularizerSpec",
    "hoyer_measure",
    "value",
    "gradient",
    "trimming_threshold",
    "descent_path",
]

KINDS = ("l1", "l2", "hoyer", "hoyer_square", "group_hs", "transformed_l1")
SCHEME_KINDS = ("filter_wise", "channel_wise", "fc_rows", "fc_columns")

_KIND_ALIASES = {
    "L1": "l1",
    "L2": "l2",
    "Hoyer": "hoyer",
    "HoyerSquare": "hoyer_square",
    "GroupHS": "group_hs",
    "TransformedL1": "transformed_l1",
}


class DegenerateInputError(ValueError):
    """Raised when a measure is undefined for its input (e.g. all zeros)."""


class SchemeError(ValueError):
    """Raised when a group scheme is not a disjoint cover of a weight tensor."""


def _as_real(w) -> np.ndarray:
    # extended precision passes through untouched, everything else is float64
    w = np.asarray(w)
    return w if w.dtype == np.longdouble else w.astype(np.float64, copy=False)


def _scalar(x):
    return x if isinstance(x, np.longdouble) else float(x)


@dataclass(frozen=True, eq=False)
class GroupScheme:
    """A partition of the flat indices of one weight tensor into groups.

    Stored as a label per flat index, ``labels[i]`` being the group that
    index ``i`` belongs to. Build from explicit index sets with
    :meth:`from_groups`, which checks the partition.
    """

    kind: str
    shape: tuple
    labels: np.ndarray
    n_groups: int

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise SchemeError(f"unknown group scheme kind {self.kind!r}")
        labels = np.asarray(self.labels)
        size = int(np.prod(self.shape))
        if labels.shape != (size,):
            raise SchemeError(f"scheme labels cover {labels.size} indices, tensor has {size}")
        if size and (labels.min() < 0 or labels.max() >= self.n_groups):
            raise SchemeError("group label out of range")
        counts = np.bincount(labels, minlength=self.n_groups)
        if np.any(counts == 0):
            raise SchemeError("every group must be non-empty")

    @classmethod
    def from_groups(cls, kind: str, shape: Sequence[int], groups: Sequence[Sequence[int]]):
        shape = tuple(int(s) for s in shape)
        size = int(np.prod(shape))
        labels = np.full(size, -1, dtype=np.int64)
        for g, idx in enumerate(groups):
            idx = np.asarray(idx, dtype=np.int64).ravel()
            if idx.size == 0:
                raise SchemeError(f"group {g} is empty")
            if idx.min() < 0 or idx.max() >= size:
                raise SchemeError(f"group {g} has an index outside the tensor")
            if np.unique(idx).size != idx.size or np.any(labels[idx] != -1):
                raise SchemeError(f"group {g} overlaps another group")
            labels[idx] = g
        if np.any(labels == -1):
            raise SchemeError(f"groups leave {int(np.sum(labels == -1))} indices uncovered")
        return cls(kind, shape, labels, len(groups))

    @property
    def groups(self) -> list:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(np.bincount(self.labels, minlength=self.n_groups))[:-1]
        return np.split(order, bounds)

    def group_norms(self, w) -> np.ndarray:
        w = _as_real(w)
        if w.shape != self.shape:
            raise SchemeError(f"scheme built for shape {self.shape}, got weights {w.shape}")
        if w.dtype == np.float64:
            sq = np.bincount(self.labels, weights=w.ravel() ** 2, minlength=self.n_groups)
        else:
            # bincount would round the weights to float64
            sq = np.zeros(self.n_groups, dtype=w.dtype)
            np.add.at(sq, self.labels, w.ravel() ** 2)
        return np.sqrt(sq)


@dataclass
class RegularizerSpec:
    """One penalty kind with its decay coefficient.

    ``group_scheme`` is required for ``group_hs`` and forbidden otherwise. It
    may be a concrete :class:`GroupScheme`, or a scheme kind name which is
    resolved per layer when the penalty is applied to a network.
    """

    kind: str
    decay: float = 0.0
    tl1_a: float = 1.0
    group_scheme: Optional[Union[GroupScheme, str]] = field(default=None)

    def __post_init__(self):
        self.kind = _KIND_ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if not self.decay >= 0:
            raise ValueError(f"decay must be >= 0, got {self.decay}")
        if not self.tl1_a > 0:
            raise ValueError(f"tl1_a must be > 0, got {self.tl1_a}")
        if self.kind == "group_hs":
            if self.group_scheme is None:
                raise SchemeError("group_hs requires a group scheme")
            if isinstance(self.group_scheme, str) and self.group_scheme not in SCHEME_KINDS:
                raise SchemeError(f"unknown group scheme kind {self.group_scheme!r}")
        elif self.group_scheme is not None:
            raise SchemeError(f"{self.kind} does not take a group scheme")


def hoyer_measure(x) -> float:
    """Normalized Hoyer sparseness in [0, 1]: 1 for one-hot, 0 for constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise DegenerateInputError("Hoyer measure needs at least 2 elements")
    peak = np.abs(x).max()
    if peak == 0:
        raise DegenerateInputError("Hoyer measure is undefined for an all-zero input")
    # the measure is scale invariant; dividing by the peak makes constant
    # and one-hot inputs exact
    x = x / peak
    l1 = np.abs(x).sum()
    root_n = np.sqrt(n)
    return float((root_n - np.sqrt(l1 * l1 / np.dot(x, x))) / (root_n - 1.0))


def trimming_threshold(w) -> float:
    """sum w^2 / sum |w|: HS descent shrinks entries below it, grows those above."""
    w = np.asarray(w, dtype=np.float64).ravel()
    l1 = np.abs(w).sum()
    return float(np.dot(w, w) / l1) if l1 > 0 else 0.0


def _resolve_scheme(spec: RegularizerSpec, w: np.ndarray) -> GroupScheme:
    scheme = spec.group_scheme
    if not isinstance(scheme, GroupScheme):
        raise SchemeError(
            "group_hs needs a concrete GroupScheme here; resolve the scheme kind "
            "against a layer first (see model.group_view)"
        )
    if scheme.shape != w.shape:
        raise SchemeError(f"scheme built for shape {scheme.shape}, got weights {w.shape}")
    return scheme


def value(spec: RegularizerSpec, w) -> float:
    """Undecayed penalty value of ``w``.

    A ``np.longdouble`` input is evaluated (and returned) in extended
    precision, which finite-difference checks rely on.
    """
    w = _as_real(w)
    if w.size == 0:
        raise ValueError("penalty needs at least one weight")
    kind = spec.kind
    flat = w.ravel()
    if kind == "l1":
        return _scalar(np.abs(flat).sum())
    if kind == "l2":
        return _scalar(np.sqrt(np.dot(flat, flat)))
    if kind == "transformed_l1":
        a = spec.tl1_a
        aw = np.abs(flat)
        return _scalar(((a + 1.0) * aw / (a + aw)).sum())
    # ratio kinds are scale invariant: divide by the peak magnitude so that
    # squares cannot overflow and constant inputs sum exactly
    peak = np.abs(flat).max()
    if peak == 0:
        return _scalar(w.dtype.type(0))
    if kind == "group_hs":
        norms = _resolve_scheme(spec, w).group_norms(w / peak)
        l1, sq = norms.sum(), np.dot(norms, norms)
    else:
        flat = flat / peak
        l1, sq = np.abs(flat).sum(), np.dot(flat, flat)
    if kind == "hoyer":
        return _scalar(l1 / np.sqrt(sq))
    return _scalar(l1 * l1 / sq)


def gradient(spec: RegularizerSpec, w) -> np.ndarray:
    """Analytic gradient of :func:`value` with respect to ``w``.

    Uses sign(0) = 0; for ``group_hs`` an all-zero group contributes 0.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("penalty needs at least one weight")
    kind = spec.kind
    sign = np.sign(w)
    if kind == "l1":
        return sign
    if kind == "transformed_l1":
        a = spec.tl1_a
        return sign * a * (a + 1.0) / (a + np.abs(w)) ** 2

    sq = float(np.dot(w.ravel(), w.ravel()))
    if sq == 0:
        return np.zeros_like(w)
    if kind == "l2":
        return w / np.sqrt(sq)
    if kind == "hoyer":
        l1 = np.abs(w).sum()
        l2 = np.sqrt(sq)
        return sign / l2 - w * (l1 / l2**3)
    if kind == "hoyer_square":
        l1 = np.abs(w).sum()
        return 2.0 * sign * (l1 / sq**2) * (sq - np.abs(w) * l1)
    if kind == "group_hs":
        scheme = _resolve_scheme(spec, w)
        norms = scheme.group_norms(w)
        total = norms.sum()
        denom = np.dot(norms, norms)  # equals sq for a disjoint cover
        own = norms[scheme.labels].reshape(w.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(own > 0, w / own, 0.0)
        return 2.0 * unit * (total / denom**2) * (denom - own * total)
    raise AssertionError(kind)


def descent_path(dim=20, steps=100_000, lr=1e-3, seed=0, stride=1, kind="hoyer_square"):
    """Plain gradient descent on a penalty alone, from a standard-normal start.

    Returns ``(steps_taken, weights, thresholds)`` sampled every ``stride``
    steps (the start and the final step are always included); ``thresholds``
    holds :func:`trimming_threshold` of each recorded point.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    spec = RegularizerSpec(kind, 1.0)
    w = np.random.default_rng(seed).standard_normal(dim)
    record = list(range(0, steps + 1, stride))
    if record[-1] != steps:
        record.append(steps)
    out = np.empty((len(record), dim))
    out[0] = w
    row = 1
    for t in range(1, steps + 1):
        w = w - lr * gradient(spec, w)
        if row < len(record) and record[row] == t:
            out[row] = w
            row += 1
    thresholds = np.array([trimming_threshold(x) for x in out])
    return np.array(record), out, thresholds
