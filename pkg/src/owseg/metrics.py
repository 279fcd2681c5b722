"""Evaluation metrics for the four open-world segmentation tasks.

Undefined values (empty denominators) are reported as NaN and skipped by
every mean; they are never silently turned into 0.

All per-image results are mergeable accumulators (``+``) so a dataset is
evaluated by summing image tallies and reducing once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import check_same_hw, validate_pair
from .errors import DegenerateLabels, ShapeMismatch

NAN = float("nan")
F1_THRESHOLDS = tuple(np.round(np.arange(0.25, 0.7501, 0.05), 2))
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _nanmean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else NAN


# --------------------------------------------------------------------------
# pixel level


@dataclass
class ScoreHistogram:
    """Exact per-distinct-score positive/negative counts (mergeable)."""

    scores: np.ndarray = field(default_factory=lambda: np.empty(0))
    pos: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    neg: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @classmethod
    def from_pixels(cls, scores, gt) -> "ScoreHistogram":
        scores = np.asarray(scores, dtype=np.float64).ravel()
        gt = np.asarray(gt, dtype=bool).ravel()
        if scores.shape != gt.shape:
            raise ShapeMismatch(f"{scores.shape} scores vs {gt.shape} labels")
        uniq, inv = np.unique(scores, return_inverse=True)
        pos = np.bincount(inv, weights=gt, minlength=uniq.size).astype(np.int64)
        tot = np.bincount(inv, minlength=uniq.size)
        return cls(uniq, pos, tot - pos)

    def __add__(self, other: "ScoreHistogram") -> "ScoreHistogram":
        scores = np.concatenate([self.scores, other.scores])
        uniq, inv = np.unique(scores, return_inverse=True)
        pos = np.bincount(inv, weights=np.concatenate([self.pos, other.pos]), minlength=uniq.size)
        neg = np.bincount(inv, weights=np.concatenate([self.neg, other.neg]), minlength=uniq.size)
        return ScoreHistogram(uniq, pos.astype(np.int64), neg.astype(np.int64))

    def _curve(self):
        n_pos, n_neg = self.pos.sum(), self.neg.sum()
        if n_pos == 0 or n_neg == 0:
            raise DegenerateLabels("need at least one positive and one negative pixel")
        # descending thresholds: predict positive iff score >= t
        tp = np.cumsum(self.pos[::-1])
        fp = np.cumsum(self.neg[::-1])
        return tp, fp, n_pos, n_neg

    def aupr(self) -> float:
        tp, fp, n_pos, _ = self._curve()
        precision = tp / (tp + fp)
        recall = tp / n_pos
        d_recall = np.diff(np.concatenate([[0.0], recall]))
        return float((d_recall * precision).sum())

    def fpr_at_tpr(self, target: float = 0.95) -> float:
        tp, fp, n_pos, n_neg = self._curve()
        ok = tp / n_pos >= target
        return float((fp[ok] / n_neg).min())


def aupr(scores, gt) -> float:
    """Area under the precision-recall curve, anomalies as positives."""
    return ScoreHistogram.from_pixels(scores, gt).aupr()


def fpr_at_95_tpr(scores, gt) -> float:
    """Smallest false positive rate among thresholds reaching 95% TPR."""
    return ScoreHistogram.from_pixels(scores, gt).fpr_at_tpr(0.95)


# --------------------------------------------------------------------------
# component level


@dataclass
class ComponentMatch:
    siou: list = field(default_factory=list)  # one per gt component
    ppv: list = field(default_factory=list)  # one per predicted component

    def __add__(self, other: "ComponentMatch") -> "ComponentMatch":
        return ComponentMatch(self.siou + other.siou, self.ppv + other.ppv)

    def counts(self, threshold: float) -> tuple[int, int, int]:
        siou = np.asarray(self.siou, dtype=np.float64)
        ppv = np.asarray(self.ppv, dtype=np.float64)
        tp = int((siou > threshold).sum())
        fn = int((siou <= threshold).sum())
        fp = int((ppv <= threshold).sum())
        return tp, fp, fn

    def f1(self, threshold: float) -> float:
        tp, fp, fn = self.counts(threshold)
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom else NAN

    @property
    def mean_siou(self) -> float:
        return _nanmean(self.siou)

    @property
    def mean_ppv(self) -> float:
        return _nanmean(self.ppv)

    @property
    def mean_f1(self) -> float:
        return _nanmean([self.f1(t) for t in F1_THRESHOLDS])


def label_components(mask) -> tuple[np.ndarray, int]:
    """8-connected components of a boolean mask."""
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)


def match_components(pred, gt, ignore=None) -> ComponentMatch:
    """Segment-wise IoU per gt component and precision per predicted component.

    For a gt component K with intersecting predicted components Q, the
    union excludes predicted pixels lying on other gt components.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if ignore is not None:
        ignore = np.asarray(ignore, dtype=bool)
        pred = pred & ~ignore
        gt = gt & ~ignore
    gl, ng = label_components(gt)
    pl, npred = label_components(pred)
    inter = np.zeros((ng + 1, npred + 1), dtype=np.int64)
    np.add.at(inter, (gl.ravel(), pl.ravel()), 1)
    gt_size = inter[1:, :].sum(axis=1)
    pred_size = inter[:, 1:].sum(axis=0)
    hits = inter[1:, 1:] > 0
    siou = []
    for k in range(ng):
        q = hits[k]
        num = inter[k + 1, 1:][q].sum()
        den = gt_size[k] + inter[0, 1:][q].sum()
        siou.append(num / den)
    on_gt = inter[1:, 1:].sum(axis=0)
    ppv = [on_gt[j] / pred_size[j] for j in range(npred)]
    return ComponentMatch([float(v) for v in siou], [float(v) for v in ppv])


def component_level(pred, gt, ignore=None) -> tuple[float, float, float]:
    """(mean sIoU over gt components, mean PPV, mean F1 over the threshold grid)."""
    m = match_components(pred, gt, ignore)
    return m.mean_siou, m.mean_ppv, m.mean_f1


# --------------------------------------------------------------------------
# open-world semantic


@dataclass
class OpenWorldConfusion:
    """Predicted-class x gt-class pixel counts (rows may outnumber columns)."""

    counts: np.ndarray

    @property
    def shape(self):
        return self.counts.shape

    def __add__(self, other: "OpenWorldConfusion") -> "OpenWorldConfusion":
        r = max(self.shape[0], other.shape[0])
        c = max(self.shape[1], other.shape[1])
        out = np.zeros((r, c), dtype=np.int64)
        out[: self.shape[0], : self.shape[1]] += self.counts
        out[: other.shape[0], : other.shape[1]] += other.counts
        return OpenWorldConfusion(out)

    def row_matching(self) -> np.ndarray:
        """gt column matched to every predicted row (-1 for empty rows)."""
        m = self.counts.argmax(axis=1)
        m[self.counts.sum(axis=1) == 0] = -1
        return m


def ow_confusion(pred, gt, ignore_label=None, shape=None) -> OpenWorldConfusion:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    p, g = pred[keep], gt[keep]
    rows = shape[0] if shape else (int(p.max()) + 1 if p.size else 0)
    cols = shape[1] if shape else (int(g.max()) + 1 if g.size else 0)
    counts = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(counts, (p, g), 1)
    return OpenWorldConfusion(counts)


def ow_miou(conf: OpenWorldConfusion) -> tuple[np.ndarray, float]:
    """Per-gt-class IoU with argmax-row matching, and their mean.

    Rows matched to the same gt class are pooled. Gt classes without pixels
    are NaN and excluded from the mean.
    """
    C = conf.counts.astype(np.float64)
    m = conf.row_matching()
    K = C.shape[1]
    row_sum = C.sum(axis=1)
    tp = np.zeros(K)
    pred_mass = np.zeros(K)
    for i, k in enumerate(m):
        if k >= 0:
            tp[k] += C[i, k]
            pred_mass[k] += row_sum[i]
    gt_mass = C.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / (pred_mass + gt_mass - tp)
    iou[gt_mass == 0] = NAN
    return iou, _nanmean(iou)


def homogeneity(conf: OpenWorldConfusion) -> tuple[np.ndarray, float]:
    C = conf.counts.astype(np.float64)
    s = C.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        hom = np.where(s > 0, C.max(axis=1, initial=0) / s, NAN)
    return hom, _nanmean(hom)


def completeness(conf: OpenWorldConfusion) -> tuple[np.ndarray, float]:
    com, mean = homogeneity(OpenWorldConfusion(conf.counts.T))
    return com, mean


# --------------------------------------------------------------------------
# panoptic


@dataclass
class PanopticTally:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "PanopticTally") -> "PanopticTally":
        return PanopticTally(self.iou_sum + other.iou_sum, self.tp + other.tp,
                             self.fp + other.fp, self.fn + other.fn)

    @property
    def defined(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def rq(self) -> float:
        if not self.defined:
            return NAN
        return self.tp / (self.tp + 0.5 * self.fp + 0.5 * self.fn)

    @property
    def sq(self) -> float:
        if not self.defined:
            return NAN
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def pq(self) -> float:
        if not self.defined:
            return NAN
        return self.iou_sum / (self.tp + 0.5 * self.fp + 0.5 * self.fn)


def _segment_ids(keys: np.ndarray, exists: np.ndarray):
    """Dense segment index per pixel (-1 where no segment) and segment keys."""
    seg = np.full(exists.shape, -1, dtype=np.int64)
    if not exists.any():
        return seg, np.empty((keys.shape[0], 0), dtype=np.int64)
    uniq, inv = np.unique(keys[:, exists], axis=1, return_inverse=True)
    seg[exists] = inv.ravel()
    return seg, uniq


def match_segments(pred_cls, pred_key, pred_exists, gt_cls, gt_key, gt_exists, classes):
    """Per-class panoptic tallies for segments matched at IoU > 0.5.

    ``*_cls`` give the class of each pixel's segment, ``*_key`` an integer
    identity within the class; only pixels flagged in ``*_exists`` belong to
    a segment. Segments of different classes never match.
    """
    pseg, pkeys = _segment_ids(np.stack([pred_cls, pred_key]), pred_exists)
    gseg, gkeys = _segment_ids(np.stack([gt_cls, gt_key]), gt_exists)
    n_p, n_g = pkeys.shape[1], gkeys.shape[1]
    p_size = np.bincount(pseg[pred_exists], minlength=n_p)
    g_size = np.bincount(gseg[gt_exists], minlength=n_g)
    both = pred_exists & gt_exists
    pairs, inter = np.unique(np.stack([pseg[both], gseg[both]]), axis=1, return_counts=True)
    p_cls, g_cls = pkeys[0], gkeys[0]
    tallies = {int(c): PanopticTally() for c in classes}
    p_matched = np.zeros(n_p, dtype=bool)
    g_matched = np.zeros(n_g, dtype=bool)
    for (pi, gi), n in zip(pairs.T, inter):
        if p_cls[pi] != g_cls[gi]:
            continue
        iou = n / (p_size[pi] + g_size[gi] - n)
        if iou > 0.5:
            t = tallies.setdefault(int(g_cls[gi]), PanopticTally())
            t.tp += 1
            t.iou_sum += float(iou)
            p_matched[pi] = g_matched[gi] = True
    for pi in np.flatnonzero(~p_matched):
        tallies.setdefault(int(p_cls[pi]), PanopticTally()).fp += 1
    for gi in np.flatnonzero(~g_matched):
        tallies.setdefault(int(g_cls[gi]), PanopticTally()).fn += 1
    return tallies


def open_set_tally(pred_anomaly, pred_inst, gt_anomaly, gt_inst, ignore=None) -> PanopticTally:
    """Unknown-class panoptic tally; the known area is a stuff segment and excluded."""
    pa, pi = validate_pair(np.asarray(pred_anomaly, dtype=np.int64), pred_inst)
    ga, gi = validate_pair(np.asarray(gt_anomaly, dtype=np.int64), gt_inst)
    check_same_hw(pa, ga)
    valid = np.ones(pa.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    pa, ga = (pa > 0).astype(np.int64), (ga > 0).astype(np.int64)
    p_thing = pa == 1
    g_thing = ga == 1
    tallies = match_segments(
        pa, np.where(p_thing, pi, -1), valid & (~p_thing | (pi != 0)),
        ga, np.where(g_thing, gi, -1), valid & (~g_thing | (gi != 0)),
        classes=(1,),
    )
    return tallies[1]


def open_set_pq(pred_anomaly, pred_inst, gt_anomaly, gt_inst, ignore=None):
    """(PQ_unk, SQ_unk, RQ_unk) for class-agnostic unknown instances."""
    t = open_set_tally(pred_anomaly, pred_inst, gt_anomaly, gt_inst, ignore)
    return t.pq, t.sq, t.rq


def open_world_tallies(pred_sem, pred_inst, gt_sem, gt_inst, thing_classes,
                       mapping, ignore_label=None) -> dict[int, PanopticTally]:
    """Per-gt-class tallies after mapping predicted classes through ``mapping``.

    ``mapping[i]`` is the gt class of predicted class ``i`` (-1: unmatched).
    """
    ps, pi = validate_pair(pred_sem, pred_inst)
    gs, gi = validate_pair(gt_sem, gt_inst)
    check_same_hw(ps, gs)
    valid = np.ones(gs.shape, dtype=bool) if ignore_label is None else gs != ignore_label
    mapping = np.asarray(mapping, dtype=np.int64)
    pc = np.full(ps.shape, -1, dtype=np.int64)
    inside = ps < mapping.size
    pc[inside] = mapping[ps[inside]]
    things = np.asarray(sorted(thing_classes), dtype=np.int64)
    p_thing = np.isin(pc, things)
    g_thing = np.isin(gs, things)
    # thing segments keyed by (original predicted class, instance id)
    p_key = np.where(p_thing, ps * (int(pi.max()) + 1 if pi.size else 1) + pi, -1)
    present = np.unique(gs[valid])
    return match_segments(
        pc, p_key, valid & (pc >= 0) & (~p_thing | (pi != 0)),
        gs, np.where(g_thing, gi, -1), valid & (~g_thing | (gi != 0)),
        classes=present,
    )


def aggregate_pq(tallies: dict[int, PanopticTally]) -> dict:
    """Class-averaged PQ and RQ; SQ is the RQ-weighted class average.

    Weighting SQ by RQ skips classes without any match (whose SQ is 0/0)
    and keeps ``PQ == SQ * RQ`` for the aggregate as well as per class.
    """
    defined = {c: t for c, t in tallies.items() if t.defined}
    if not defined:
        return {"PQ": NAN, "SQ": NAN, "RQ": NAN, "per_class": {}}
    pq = np.array([t.pq for t in defined.values()])
    rq = np.array([t.rq for t in defined.values()])
    sq = float(pq.sum() / rq.sum()) if rq.sum() > 0 else 0.0
    return {
        "PQ": float(pq.mean()),
        "SQ": sq,
        "RQ": float(rq.mean()),
        "per_class": {c: (t.pq, t.sq, t.rq) for c, t in sorted(defined.items())},
    }


def open_world_pq(pred_sem, pred_inst, gt_sem, gt_inst, thing_classes, ignore_label=None):
    """Open-world PQ/SQ/RQ with argmax-row class matching.

    Returns a dict with ``PQ``, ``SQ``, ``RQ`` and ``per_class``.
    """
    conf = ow_confusion(pred_sem, gt_sem, ignore_label)
    tallies = open_world_tallies(pred_sem, pred_inst, gt_sem, gt_inst, thing_classes,
                                 conf.row_matching(), ignore_label)
    return aggregate_pq(tallies)
