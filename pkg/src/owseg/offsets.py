"""Instance-decoder losses over 2-D offset fields.

An offset field ``O`` has shape ``(H, W, 2)``; pixel ``p = (h, w)`` points at
``e_p = p + O[p]``. The ideal field for an instance is a sink
``O(h, w) = (c_h - h, c_w - w)`` with divergence -2 and zero curl.
"""

from __future__ import annotations

import warnings

import numpy as np

from .core import LossWeights, canonicalize_instances, check_same_hw, instance_centroids
from .errors import EmptyGroundTruthWarning, OWSegError, TooSmall


def pointed_locations(field) -> np.ndarray:
    """``p + O[p]`` for every pixel, shape ``(H, W, 2)``."""
    field = np.asarray(field, dtype=np.float64)
    grid = np.stack(np.indices(field.shape[:2]), axis=-1).astype(np.float64)
    return grid + field


def soft_mask(field, centroid, eta: float) -> np.ndarray:
    """Gaussian membership score of every pixel's pointed location."""
    if eta <= 0:
        raise OWSegError("eta must be positive")
    diff = pointed_locations(field) - np.asarray(centroid, dtype=np.float64)
    return np.exp(-(diff**2).sum(axis=-1) / (2.0 * eta**2))


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge(soft, gt) -> float:
    """Lovasz hinge between a [0, 1] soft mask and a binary mask.

    Scores are mapped to margins ``2 * s - 1``. An empty ground truth gives 0
    and emits :class:`EmptyGroundTruthWarning`.
    """
    soft = np.asarray(soft, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    if soft.shape != gt.shape:
        raise OWSegError(f"soft mask {soft.shape} vs gt {gt.shape}")
    if not gt.any():
        warnings.warn("lovasz hinge on empty ground truth", EmptyGroundTruthWarning)
        return 0.0
    margins = 2.0 * soft.ravel() - 1.0
    signs = np.where(gt.ravel(), 1.0, -1.0)
    errors = np.maximum(1.0 - margins * signs, 0.0)
    order = np.argsort(-errors, kind="stable")
    grad = lovasz_grad(gt.ravel()[order].astype(np.float64))
    return float(errors[order] @ grad)


def offset_loss(field, instances, eta: float) -> float:
    """Mean Lovasz hinge over ground-truth instances (centroids from gt)."""
    inst = canonicalize_instances(instances)
    check_same_hw(field, inst)
    cents = instance_centroids(inst)
    if not cents:
        warnings.warn("offset loss on an image without instances", EmptyGroundTruthWarning)
        return 0.0
    losses = [lovasz_hinge(soft_mask(field, c, eta), inst == j) for j, c in cents.items()]
    return float(np.mean(losses))


def geman_mcclure(x):
    """Robust penalty ``2 x^2 / (x^2 + 4)``; 0 at 0, 1 at |x| = 2, bounded by 2."""
    x2 = np.square(np.asarray(x, dtype=np.float64))
    out = 2.0 * x2 / (x2 + 4.0)
    return float(out) if out.ndim == 0 else out


def _check_size(field):
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[2] != 2:
        raise OWSegError(f"offset field must be (H, W, 2), got {field.shape}")
    if field.shape[0] < 3 or field.shape[1] < 3:
        raise TooSmall(f"need at least 3x3 pixels, got {field.shape[:2]}")
    return field[..., 0], field[..., 1]


def partials(field) -> dict[str, np.ndarray]:
    """Central-difference partials (one-sided at the border)."""
    oh, ow = _check_size(field)
    return {
        "dh_dh": np.gradient(oh, axis=0),
        "dh_dw": np.gradient(oh, axis=1),
        "dw_dh": np.gradient(ow, axis=0),
        "dw_dw": np.gradient(ow, axis=1),
    }


def _forward(a, axis):
    d = np.diff(a, axis=axis)
    last = np.take(d, [-1], axis=axis)
    return np.concatenate([d, last], axis=axis)


def _backward(a, axis):
    d = np.diff(a, axis=axis)
    first = np.take(d, [0], axis=axis)
    return np.concatenate([first, d], axis=axis)


def divergence_losses(field) -> tuple[float, float]:
    """(L_div, L_div_aux): divergence pulled to -2, its two terms pulled equal."""
    p = partials(field)
    div = p["dh_dh"] + p["dw_dw"]
    l_div = geman_mcclure(div + 2.0).mean()
    l_aux = geman_mcclure(p["dh_dh"] - p["dw_dw"]).mean()
    return float(l_div), float(l_aux)


def curl_losses(field) -> tuple[float, float]:
    """(L_curl, L_curl_aux).

    The main term penalises the curl from central differences. The auxiliary
    term penalises the mismatch of the two mixed partials taken with a
    forward stencil for d(o_h)/dw and a backward stencil for d(o_w)/dh, so
    it is not a copy of the main term on non-affine fields.
    """
    oh, ow = _check_size(field)
    p = partials(field)
    curl = p["dh_dw"] - p["dw_dh"]
    l_curl = geman_mcclure(curl).mean()
    l_aux = geman_mcclure(_forward(oh, 1) - _backward(ow, 0)).mean()
    return float(l_curl), float(l_aux)


def instance_loss_parts(field, instances, eta: float) -> tuple[float, ...]:
    """(L_off, L_div, L_div_aux, L_curl, L_curl_aux)."""
    l_off = offset_loss(field, instances, eta)
    return (l_off, *divergence_losses(field), *curl_losses(field))


def instance_loss_total(field, instances, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    parts = instance_loss_parts(field, instances, weights.eta)
    return float(sum(w * v for w, v in zip(weights.instance, parts)))
