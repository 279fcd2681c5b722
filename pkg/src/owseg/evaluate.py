"""Dataset-level evaluation for the four benchmark tasks.

Ground truth per image is a semantic mask plus an instance mask. For the
anomaly-type tasks (``anomaly``, ``os_panoptic``) label 0 means known, the
ignore label is skipped and every other label is anomalous.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .errors import MissingPrediction, OWSegError


class Task(str, enum.Enum):
    anomaly = "anomaly"
    ow_semantic = "ow_semantic"
    os_panoptic = "os_panoptic"
    ow_panoptic = "ow_panoptic"

    @classmethod
    def parse(cls, name: str) -> "Task":
        try:
            return cls(name.replace("-", "_"))
        except ValueError:
            raise OWSegError(f"unknown task {name!r}") from None


REQUIRED_PRED = {
    Task.anomaly: ("score", "anomaly"),
    Task.ow_semantic: ("semantic",),
    Task.os_panoptic: ("anomaly", "instance"),
    Task.ow_panoptic: ("semantic", "instance"),
}

REPORT_KEYS = {
    Task.anomaly: ("AUPR", "FPR95", "sIoU_gt", "PPV", "meanF1"),
    Task.ow_semantic: ("mIoU_ow", "Hom", "Com"),
    Task.os_panoptic: ("PQ_unk", "SQ_unk", "RQ_unk"),
    Task.ow_panoptic: ("PQ", "SQ", "RQ", "mIoU_ow", "Hom", "Com"),
}


@dataclass
class Sample:
    semantic: np.ndarray | None = None
    instance: np.ndarray | None = None
    anomaly: np.ndarray | None = None
    score: np.ndarray | None = None


@dataclass(frozen=True)
class EvalConfig:
    ignore_label: int | None = None
    thing_classes: frozenset = field(default_factory=frozenset)
    jobs: int = 1


def _anomaly_gt(gt: Sample, ignore_label):
    sem = np.asarray(gt.semantic)
    ignore = np.zeros(sem.shape, dtype=bool) if ignore_label is None else sem == ignore_label
    return (sem != 0) & ~ignore, ignore


def _zero_instances(gt: Sample, shape):
    return gt.instance if gt.instance is not None else np.zeros(shape, dtype=np.int64)


def _anomaly_image(pred: Sample, gt: Sample, cfg: EvalConfig):
    anom, ignore = _anomaly_gt(gt, cfg.ignore_label)
    score = np.asarray(pred.score, dtype=np.float64)
    if score.ndim == 3:
        score = score[..., 0]
    hist = M.ScoreHistogram.from_pixels(score[~ignore], anom[~ignore])
    comps = M.match_components(np.asarray(pred.anomaly) != 0, anom, ignore)
    return hist, comps


def _os_image(pred: Sample, gt: Sample, cfg: EvalConfig):
    anom, ignore = _anomaly_gt(gt, cfg.ignore_label)
    gi = np.where(anom, _zero_instances(gt, anom.shape), 0)
    return M.open_set_tally(np.asarray(pred.anomaly) != 0, pred.instance, anom, gi, ignore)


def _confusion_image(pred: Sample, gt: Sample, cfg: EvalConfig):
    return M.ow_confusion(pred.semantic, gt.semantic, cfg.ignore_label)


def _sum(items):
    items = list(items)
    total = items[0]
    for x in items[1:]:
        total = total + x
    return total


def evaluate_task(task, preds: dict, gts: dict, config: EvalConfig | None = None) -> dict:
    """Evaluate a prediction set against ground truth.

    ``preds`` and ``gts`` map image ids to :class:`Sample`. Returns the
    task's metric dict (NaN = undefined).
    """
    task = Task.parse(task) if isinstance(task, str) else task
    cfg = config or EvalConfig()
    ids = sorted(gts)
    if not ids:
        raise OWSegError("empty ground-truth set")
    for i in ids:
        if i not in preds:
            raise MissingPrediction(f"no prediction for image {i!r}")
        for attr in REQUIRED_PRED[task]:
            if getattr(preds[i], attr) is None:
                raise MissingPrediction(f"image {i!r} lacks a {attr} prediction")

    def fan_out(fn):
        args = [(preds[i], gts[i], cfg) for i in ids]
        if cfg.jobs > 1:
            with ThreadPoolExecutor(cfg.jobs) as ex:
                return list(ex.map(lambda a: fn(*a), args))
        return [fn(*a) for a in args]

    if task is Task.anomaly:
        parts = fan_out(_anomaly_image)
        hist = _sum(p[0] for p in parts)
        comps = _sum(p[1] for p in parts)
        return {
            "AUPR": hist.aupr(),
            "FPR95": hist.fpr_at_tpr(0.95),
            "sIoU_gt": comps.mean_siou,
            "PPV": comps.mean_ppv,
            "meanF1": comps.mean_f1,
        }
    if task is Task.os_panoptic:
        t = _sum(fan_out(_os_image))
        return {"PQ_unk": t.pq, "SQ_unk": t.sq, "RQ_unk": t.rq}

    conf = _sum(fan_out(_confusion_image))
    report = {
        "mIoU_ow": M.ow_miou(conf)[1],
        "Hom": M.homogeneity(conf)[1],
        "Com": M.completeness(conf)[1],
    }
    if task is Task.ow_semantic:
        return report
    mapping = conf.row_matching()

    def pq_image(pred, gt, cfg):
        gi = _zero_instances(gt, np.shape(gt.semantic))
        return M.open_world_tallies(pred.semantic, pred.instance, gt.semantic, gi,
                                    cfg.thing_classes, mapping, cfg.ignore_label)

    tallies: dict[int, M.PanopticTally] = {}
    for per_image in fan_out(pq_image):
        for c, t in per_image.items():
            tallies[c] = tallies.get(c, M.PanopticTally()) + t
    agg = M.aggregate_pq(tallies)
    report.update(PQ=agg["PQ"], SQ=agg["SQ"], RQ=agg["RQ"])
    return report
