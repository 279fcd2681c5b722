"""Shared raster types and validated constructors.

Rasters are plain numpy arrays; the helpers here check shapes/dtypes and
return read-only views so downstream code can treat them as immutable.

* semantic mask: ``(H, W)`` non-negative integers
* instance mask: ``(H, W)`` non-negative integers, 0 = known / no object
* feature map:   ``(H, W, D)`` finite floats
* offset field:  ``(H, W, 2)`` finite floats, ``(dh, dw)`` in pixels

Coordinates are ``(row h, col w)`` with the origin at the top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, astuple

import numpy as np

from .errors import (
    DimMismatch,
    InconsistentPanoptic,
    NonFinite,
    OWSegError,
    ShapeMismatch,
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def semantic_mask(labels, num_classes: int | None = None) -> np.ndarray:
    """Validate a semantic label raster and return a read-only int64 copy."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeMismatch(f"semantic mask must be 2-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise OWSegError("semantic mask must hold integer labels")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise OWSegError("semantic labels must be non-negative")
    if num_classes is not None and arr.size and arr.max() >= num_classes:
        raise OWSegError(f"label {arr.max()} >= class bound {num_classes}")
    return _frozen(arr)


def instance_mask(ids) -> np.ndarray:
    """Validate an instance-id raster (0 = known / no object)."""
    return semantic_mask(ids)


def feature_map(values, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] < 1:
        raise ShapeMismatch(f"feature map must be (H, W, D>=1), got {arr.shape}")
    if dim is not None and arr.shape[2] != dim:
        raise DimMismatch(f"expected D={dim}, got D={arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("feature map contains NaN or Inf")
    return _frozen(arr)


def offset_field(values) -> np.ndarray:
    return feature_map(values, dim=2)


def check_same_hw(*arrays: np.ndarray) -> tuple[int, int]:
    shapes = {tuple(np.shape(a)[:2]) for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatch(f"spatial shapes differ: {sorted(shapes)}")
    return shapes.pop()


@dataclass(frozen=True)
class LossWeights:
    """Loss weights w1..w9, contrastive temperature and clustering radius.

    Defaults are the training values used for the full model; ``eta`` has no
    published value and defaults to one pixel.
    """

    w1: float = 0.8
    w2: float = 0.2
    w3: float = 0.5
    w4: float = 0.5
    w5: float = 0.4
    w6: float = 0.2
    w7: float = 0.1
    w8: float = 0.2
    w9: float = 0.1
    tau: float = 0.1
    eta: float = 1.0

    def __post_init__(self):
        vals = astuple(self)
        if not all(np.isfinite(v) for v in vals):
            raise OWSegError("loss weights must be finite")
        if any(v < 0 for v in vals[:9]):
            raise OWSegError("loss weights must be non-negative")
        if self.tau <= 0 or self.eta <= 0:
            raise OWSegError("tau and eta must be positive")

    @property
    def instance(self) -> tuple[float, float, float, float, float]:
        return (self.w5, self.w6, self.w7, self.w8, self.w9)


def validate_pair(sem, inst) -> tuple[np.ndarray, np.ndarray]:
    """Check that a semantic/instance pair is panoptic-consistent.

    Every non-zero instance id must cover pixels of exactly one semantic
    class. Returns the validated (read-only) pair.
    """
    sem = semantic_mask(sem)
    inst = instance_mask(inst)
    if sem.shape != inst.shape:
        raise ShapeMismatch(f"semantic {sem.shape} vs instance {inst.shape}")
    fg = inst != 0
    if fg.any():
        pairs = np.unique(np.stack([inst[fg], sem[fg]]), axis=1)
        ids, counts = np.unique(pairs[0], return_counts=True)
        bad = ids[counts > 1]
        if bad.size:
            raise InconsistentPanoptic(
                f"instance ids {bad.tolist()} span more than one semantic class"
            )
    return sem, inst


def canonicalize_instances(inst) -> np.ndarray:
    """Relabel instance ids to 1..N by order of first appearance (row-major).

    Id 0 is preserved; the partition into instances is unchanged.
    """
    inst = instance_mask(inst)
    flat = inst.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first)]
    order = order[order != 0]
    lut = {int(old): new for new, old in enumerate(order, start=1)}
    lut[0] = 0
    out = np.array([lut[int(v)] for v in uniq], dtype=np.int64)
    relabeled = out[np.searchsorted(uniq, flat)].reshape(inst.shape)
    return _frozen(relabeled)


def instance_centroids(inst) -> dict[int, np.ndarray]:
    """Mean (h, w) coordinate of every non-zero instance."""
    inst = np.asarray(inst)
    hh, ww = np.indices(inst.shape)
    ids = inst.ravel()
    n = int(ids.max()) + 1 if ids.size else 1
    counts = np.bincount(ids, minlength=n)
    sh = np.bincount(ids, weights=hh.ravel(), minlength=n)
    sw = np.bincount(ids, weights=ww.ravel(), minlength=n)
    return {
        int(j): np.array([sh[j] / counts[j], sw[j] / counts[j]])
        for j in np.flatnonzero(counts)
        if j != 0
    }
