"""Test-time post-processing: anomaly decisions, class discovery, instances.

Flow per image::

    score_against_bank -> decide_unknown_semantic --+
                          decide_unknown_contrastive +-> fuse_unknown
    -> discover_classes -> cluster_offsets (thing areas) -> filter_instances_by_semantics
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2
from sklearn.cluster import HDBSCAN

from .core import canonicalize_instances, check_same_hw
from .descriptors import VAR_FLOOR, DescriptorBank
from .errors import DimMismatch, EmptyBank, ShapeMismatch
from .offsets import pointed_locations


@dataclass(frozen=True)
class AnomalyScores:
    best_class: np.ndarray  # (H, W) bank row of the best-fitting class
    dist2: np.ndarray  # (H, W) squared Mahalanobis distance to that class

    @property
    def score(self) -> np.ndarray:
        """Squared-exponential kernel value of the best class."""
        return np.exp(-0.5 * self.dist2)


def score_against_bank(prelogits, bank: DescriptorBank, var_floor: float = VAR_FLOOR,
                       rows=None) -> AnomalyScores:
    """Best-fitting class and its kernel score for every pixel.

    ``rows`` restricts scoring to a subset of bank rows (default: all
    initialised rows).
    """
    fm = np.asarray(prelogits, dtype=np.float64)
    if fm.shape[-1] != bank.dim:
        raise DimMismatch(f"pre-logit dim {fm.shape[-1]} vs bank dim {bank.dim}")
    rows = np.flatnonzero(bank.usable) if rows is None else np.asarray(rows)
    rows = rows[bank.count[rows] > 0]
    if rows.size == 0:
        raise EmptyBank("no initialised class in the bank")
    x = fm.reshape(-1, bank.dim)
    var = np.maximum(bank.var[rows], var_floor)
    mean = bank.mean[rows]
    chunk = max(1, 4_000_000 // (rows.size * bank.dim))
    d2 = np.empty((x.shape[0], rows.size))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - mean[None]
        d2[s:s + chunk] = (diff**2 / var[None]).sum(axis=-1)
    best = d2.argmin(axis=1)
    return AnomalyScores(
        best_class=rows[best].reshape(fm.shape[:2]),
        dist2=d2[np.arange(x.shape[0]), best].reshape(fm.shape[:2]),
    )


def decide_unknown_semantic(scores: AnomalyScores, bank: DescriptorBank) -> np.ndarray:
    """Unknown iff the best-class squared distance exceeds D (1-sigma shell)."""
    return scores.dist2 > bank.dim


def decide_unknown_contrastive(prelogits, radius: float = 1.0) -> np.ndarray:
    """Unknown iff the contrastive pre-logit norm is at most ``radius``."""
    fm = np.asarray(prelogits, dtype=np.float64)
    return np.linalg.norm(fm, axis=-1) <= radius


def fuse_unknown(sem_unknown, con_unknown) -> np.ndarray:
    sem_unknown = np.asarray(sem_unknown, dtype=bool)
    con_unknown = np.asarray(con_unknown, dtype=bool)
    if sem_unknown.shape != con_unknown.shape:
        raise ShapeMismatch(f"{sem_unknown.shape} vs {con_unknown.shape}")
    return sem_unknown & con_unknown


@dataclass(frozen=True)
class DiscoveryConfig:
    """Cold-start and acceptance parameters for discovered classes.

    A new class uses ``var_prior`` per dimension until it has ``prior_count``
    members. A pixel joins an evolving class when its squared distance is
    within the chi-square(D) quantile leaving ``accept_tail`` in the upper
    tail.
    """

    var_prior: float = 1.0
    prior_count: int = 16
    var_floor: float = VAR_FLOOR
    accept_tail: float = 1e-6

    def gate(self, dim: int) -> float:
        return float(chi2.isf(self.accept_tail, dim))


@dataclass
class DiscoveryState:
    """Frozen known descriptors plus the evolving discovered ones."""

    bank: DescriptorBank
    config: DiscoveryConfig = field(default_factory=DiscoveryConfig)

    @classmethod
    def from_known(cls, bank: DescriptorBank, config: DiscoveryConfig | None = None):
        bank = bank.copy()
        bank.frozen[:] = True
        return cls(bank, config or DiscoveryConfig())

    @property
    def next_class_id(self) -> int:
        return self.bank.num_classes

    @property
    def frozen_rows(self) -> np.ndarray:
        return np.flatnonzero(self.bank.frozen & self.bank.usable)

    @property
    def discovered(self) -> np.ndarray:
        return np.flatnonzero(~self.bank.frozen)

    def copy(self) -> "DiscoveryState":
        return DiscoveryState(self.bank.copy(), self.config)


def _evolving_var(bank: DescriptorBank, rows: np.ndarray, cfg: DiscoveryConfig) -> np.ndarray:
    var = np.maximum(bank.var[rows], cfg.var_floor)
    young = bank.count[rows] < cfg.prior_count
    var[young] = cfg.var_prior
    return var


def _discover_image(x: np.ndarray, labels: np.ndarray, anomalous: np.ndarray,
                    state: DiscoveryState) -> None:
    """Assign anomalous pixels (row-major) to evolving classes, in place."""
    bank, cfg = state.bank, state.config
    gate = cfg.gate(bank.dim)
    rows = list(state.discovered)
    if rows:
        means = bank.mean[rows].copy()
        var = _evolving_var(bank, np.asarray(rows), cfg)
    else:
        means = np.empty((0, bank.dim))
        var = np.empty((0, bank.dim))
    for p in np.flatnonzero(anomalous):
        v = x[p]
        if rows:
            d2 = ((v - means) ** 2 / var).sum(axis=1)
            j = int(d2.argmin())
            if d2[j] <= gate:
                k = rows[j]
                bank.accumulate(k, v)
                means[j] = bank.mean[k]
                var[j] = _evolving_var(bank, np.array([k]), cfg)[0]
                labels[p] = k
                continue
        k = bank.add_class(frozen=False)
        bank.accumulate(k, v)
        rows.append(k)
        means = np.vstack([means, v])
        var = np.vstack([var, np.full(bank.dim, cfg.var_prior)])
        labels[p] = k


def discover_classes(stream, state: DiscoveryState):
    """Run class discovery over ``(prelogits, anomaly_mask)`` pairs.

    Known pixels take the best frozen class; anomalous pixels join or create
    evolving classes. Returns ``(masks, new_state)``; the input state is not
    modified.
    """
    state = state.copy()
    masks = []
    for prelogits, anomaly in stream:
        fm = np.asarray(prelogits, dtype=np.float64)
        anomaly = np.asarray(anomaly, dtype=bool)
        check_same_hw(fm, anomaly)
        scores = score_against_bank(fm, state.bank, state.config.var_floor,
                                    rows=state.frozen_rows)
        labels = scores.best_class.ravel().copy()
        _discover_image(fm.reshape(-1, state.bank.dim), labels, anomaly.ravel(), state)
        masks.append(labels.reshape(anomaly.shape))
    return masks, state


def cluster_offsets(field, thing_mask, min_cluster_size: int = 32, eta: float = 1.0) -> np.ndarray:
    """HDBSCAN over pointed locations of thing pixels; noise -> id 0.

    Clusters closer than ``eta`` pixels are merged.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    thing_mask = np.asarray(thing_mask, dtype=bool)
    check_same_hw(field, thing_mask)
    out = np.zeros(thing_mask.shape, dtype=np.int64)
    n = int(thing_mask.sum())
    if n < min_cluster_size:
        return out
    pts = pointed_locations(field)[thing_mask]
    labels = HDBSCAN(
        min_cluster_size=min_cluster_size,
        cluster_selection_method="eom",
        cluster_selection_epsilon=float(eta),
        allow_single_cluster=True,
        copy=True,
    ).fit_predict(pts)
    out[thing_mask] = labels + 1
    return np.asarray(canonicalize_instances(out))


def filter_instances_by_semantics(inst, sem) -> np.ndarray:
    """Split instances along semantic boundaries and re-canonicalise ids."""
    inst = np.asarray(inst, dtype=np.int64)
    sem = np.asarray(sem, dtype=np.int64)
    if inst.shape != sem.shape:
        raise ShapeMismatch(f"instance {inst.shape} vs semantic {sem.shape}")
    fg = inst != 0
    out = np.zeros_like(inst)
    if fg.any():
        _, joint = np.unique(np.stack([inst[fg], sem[fg]]), axis=1, return_inverse=True)
        out[fg] = joint.ravel() + 1
    return np.asarray(canonicalize_instances(out))


@dataclass(frozen=True)
class PipelineConfig:
    thing_classes: frozenset = frozenset()
    min_cluster_size: int = 32
    eta: float = 1.0
    contrastive_radius: float = 1.0


@dataclass(frozen=True)
class PipelineOutput:
    semantic: np.ndarray
    instances: np.ndarray
    anomaly: np.ndarray
    anomaly_score: np.ndarray  # best frozen-class squared distance; higher = more anomalous


def run_pipeline(sem_prelogits, con_prelogits, offsets, state: DiscoveryState,
                 config: PipelineConfig | None = None):
    """Full open-world panoptic post-processing for one image.

    Returns ``(PipelineOutput, new_state)``.
    """
    config = config or PipelineConfig()
    check_same_hw(sem_prelogits, con_prelogits, offsets)
    scores = score_against_bank(sem_prelogits, state.bank, state.config.var_floor,
                                rows=state.frozen_rows)
    anomaly = fuse_unknown(
        decide_unknown_semantic(scores, state.bank),
        decide_unknown_contrastive(con_prelogits, config.contrastive_radius),
    )
    (semantic,), new_state = discover_classes([(sem_prelogits, anomaly)], state)
    things = set(config.thing_classes) | set(new_state.discovered.tolist())
    thing_mask = np.isin(semantic, sorted(things))
    inst = cluster_offsets(offsets, thing_mask, config.min_cluster_size, config.eta)
    inst = filter_instances_by_semantics(inst, semantic)
    out = PipelineOutput(semantic, inst, anomaly, scores.dist2)
    return out, new_state
