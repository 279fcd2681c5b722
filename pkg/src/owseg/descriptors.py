"""Class-descriptor statistics and the semantic/contrastive decoder losses.

The bank stores per-class running mean, sum of squared deviations and
sample count. Rows are indexed by class id, so a bank for labels 1..K has
K + 1 rows and row 0 simply stays empty (count 0, unusable for scoring).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from .core import check_same_hw
from .errors import (
    DimMismatch,
    EmptyClass,
    OWSegError,
    ShapeMismatch,
    UninitializedClass,
    UnknownClass,
    ZeroNormDescriptor,
    ZeroVariance,
)

VAR_FLOOR = 1e-6


@dataclass
class DescriptorBank:
    """Per-class running mean/variance of D-dimensional pre-logits.

    ``m2`` holds the sum of squared deviations from the mean, so the
    population variance is ``m2 / count``. Updates use the pairwise merge
    of Chan et al., which makes partial banks combinable in any order.
    """

    mean: np.ndarray
    m2: np.ndarray
    count: np.ndarray
    frozen: np.ndarray

    @classmethod
    def empty(cls, num_classes: int, dim: int, frozen: bool = True) -> "DescriptorBank":
        if dim < 1:
            raise DimMismatch("descriptor dimension must be >= 1")
        return cls(
            mean=np.zeros((num_classes, dim)),
            m2=np.zeros((num_classes, dim)),
            count=np.zeros(num_classes, dtype=np.int64),
            frozen=np.full(num_classes, frozen, dtype=bool),
        )

    @classmethod
    def from_moments(cls, mean, var, count, frozen=True) -> "DescriptorBank":
        mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
        var = np.atleast_2d(np.asarray(var, dtype=np.float64))
        count = np.broadcast_to(np.asarray(count, dtype=np.int64), mean.shape[:1]).copy()
        if var.shape != mean.shape:
            raise DimMismatch("mean and variance shapes differ")
        if np.any(var < 0):
            raise OWSegError("variance must be non-negative")
        return cls(
            mean=mean.copy(),
            m2=var * count[:, None],
            count=count,
            frozen=np.broadcast_to(np.asarray(frozen, dtype=bool), count.shape).copy(),
        )

    @property
    def num_classes(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    @property
    def var(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            v = self.m2 / self.count[:, None]
        v[self.count == 0] = np.nan
        return v

    @property
    def usable(self) -> np.ndarray:
        return self.count > 0

    def copy(self) -> "DescriptorBank":
        return DescriptorBank(
            self.mean.copy(), self.m2.copy(), self.count.copy(), self.frozen.copy()
        )

    def add_class(self, frozen: bool = False) -> int:
        """Append an empty row and return its class id."""
        self.mean = np.vstack([self.mean, np.zeros((1, self.dim))])
        self.m2 = np.vstack([self.m2, np.zeros((1, self.dim))])
        self.count = np.append(self.count, 0)
        self.frozen = np.append(self.frozen, frozen)
        return self.num_classes - 1

    def accumulate(self, k: int, samples) -> None:
        """In-place update of class ``k`` with a batch of samples."""
        if not 0 <= k < self.num_classes:
            raise UnknownClass(f"class {k} not in bank of {self.num_classes}")
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimMismatch(f"samples of shape {x.shape} vs bank dim {self.dim}")
        n_b = x.shape[0]
        if n_b == 0:
            return
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        self._merge_row(k, n_b, mean_b, m2_b)

    def _merge_row(self, k, n_b, mean_b, m2_b):
        n_a = self.count[k]
        n = n_a + n_b
        delta = mean_b - self.mean[k]
        self.mean[k] = self.mean[k] + delta * (n_b / n)
        self.m2[k] = self.m2[k] + m2_b + delta**2 * (n_a * n_b / n)
        self.count[k] = n

    def merge(self, other: "DescriptorBank") -> "DescriptorBank":
        """Combine two partial banks built over disjoint sample sets."""
        if other.dim != self.dim:
            raise DimMismatch("cannot merge banks of different dimension")
        n = max(self.num_classes, other.num_classes)
        out = self.copy()
        while out.num_classes < n:
            out.add_class(frozen=bool(other.frozen[out.num_classes]))
        for k in np.flatnonzero(other.count):
            out._merge_row(k, other.count[k], other.mean[k], other.m2[k])
        return out

    def effective_var(self, floor: float = VAR_FLOOR) -> np.ndarray:
        return np.maximum(self.var, floor)


def update_running_stats(bank: DescriptorBank, k: int, samples) -> DescriptorBank:
    """Return a new bank with ``samples`` folded into class ``k``."""
    out = bank.copy()
    out.accumulate(k, samples)
    return out


def combine(weights, parts) -> float:
    """Weighted sum of loss terms."""
    weights = list(weights)
    parts = list(parts)
    if len(weights) != len(parts):
        raise OWSegError("weights and parts differ in length")
    return float(sum(w * p for w, p in zip(weights, parts)))


def _pixels(fm: np.ndarray, target: np.ndarray, ignore_label):
    fm = np.asarray(fm, dtype=np.float64)
    target = np.asarray(target)
    check_same_hw(fm, target)
    x = fm.reshape(-1, fm.shape[-1])
    y = target.ravel().astype(np.int64)
    if ignore_label is not None:
        keep = y != ignore_label
        x, y = x[keep], y[keep]
    return x, y


def weighted_cross_entropy(logits, target, weights, ignore_label=None) -> float:
    """Class-weighted softmax cross-entropy averaged over non-ignored pixels."""
    x, y = _pixels(logits, target, ignore_label)
    weights = np.asarray(weights, dtype=np.float64)
    K = x.shape[1]
    if weights.shape != (K,):
        raise DimMismatch(f"{weights.shape[0]} weights for {K} logits")
    if y.size == 0:
        return 0.0
    if y.max() >= K:
        raise DimMismatch(f"label {y.max()} out of range for K={K}")
    logp = log_softmax(x, axis=1)[np.arange(y.size), y]
    return float(-(weights[y] * logp).sum() / y.size)


def inverse_frequency_weights(labels, num_classes: int, ignore_label=None) -> np.ndarray:
    """Inverse class frequency ``N / (K * n_k)``; the per-pixel mean weight is 1."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in labels:
        lab = np.asarray(lab).ravel()
        if ignore_label is not None:
            lab = lab[lab != ignore_label]
        lab = lab[lab < num_classes]
        counts += np.bincount(lab, minlength=num_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise EmptyClass(f"classes {missing} have no pixels")
    return counts.sum() / (num_classes * counts)


def _check_initialized(bank: DescriptorBank, classes) -> None:
    for k in classes:
        if k >= bank.num_classes:
            raise UnknownClass(f"class {k} not in bank")
        if bank.count[k] == 0:
            raise UninitializedClass(f"class {k} has no accumulated samples")


def feature_loss(prelogits, target, bank: DescriptorBank, var_floor=VAR_FLOOR,
                 ignore_label=None) -> float:
    """Mean per-pixel squared Mahalanobis distance to the own-class descriptor."""
    x, y = _pixels(prelogits, target, ignore_label)
    if x.shape[1] != bank.dim:
        raise DimMismatch(f"pre-logit dim {x.shape[1]} vs bank dim {bank.dim}")
    if y.size == 0:
        return 0.0
    present = np.unique(y)
    _check_initialized(bank, present)
    var = np.maximum(bank.var[present], var_floor)
    if np.any(var <= 0):
        raise ZeroVariance("variance must be positive after flooring")
    var_full = np.empty((bank.num_classes, bank.dim))
    var_full[present] = var
    d2 = ((x - bank.mean[y]) ** 2 / var_full[y]).sum(axis=1)
    return float(d2.sum() / y.size)


def contrastive_loss(prelogits, target, bank: DescriptorBank, tau: float,
                     ignore_label=None) -> float:
    """InfoNCE-style loss between per-image class means and bank directions.

    The sum runs over classes present in the image; the softmax denominator
    covers every initialised class of the bank.
    """
    if tau <= 0:
        raise OWSegError("temperature must be positive")
    x, y = _pixels(prelogits, target, ignore_label)
    if x.shape[1] != bank.dim:
        raise DimMismatch(f"pre-logit dim {x.shape[1]} vs bank dim {bank.dim}")
    if y.size == 0:
        return 0.0
    present = np.unique(y)
    _check_initialized(bank, present)
    cols = np.flatnonzero(bank.usable)
    mu = bank.mean[cols]
    norms = np.linalg.norm(mu, axis=1)
    if np.any(norms == 0):
        raise ZeroNormDescriptor(f"classes {cols[norms == 0].tolist()} have zero-norm means")
    mu_bar = mu / norms[:, None]
    col_of = {int(c): i for i, c in enumerate(cols)}
    total = 0.0
    for k in present:
        ell_bar = x[y == k].mean(axis=0)
        logits = mu_bar @ ell_bar / tau
        total -= logits[col_of[int(k)]] - logsumexp(logits)
    return float(total)


def objectosphere_loss(prelogits, known_mask) -> float:
    """Push known-pixel norms to >= 1 and the remaining pixels to 0."""
    fm = np.asarray(prelogits, dtype=np.float64)
    known = np.asarray(known_mask, dtype=bool)
    if fm.shape[:2] != known.shape:
        raise ShapeMismatch(f"pre-logits {fm.shape[:2]} vs mask {known.shape}")
    sq = (fm**2).sum(axis=-1)
    per_px = np.where(known, np.maximum(1.0 - sq, 0.0), sq)
    return float(per_px.mean()) if per_px.size else 0.0
