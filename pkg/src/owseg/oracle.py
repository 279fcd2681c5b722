"""Brute-force reference metrics for small images.

Everything here is deliberately naive: explicit threshold enumeration,
flood-fill components, Python sets for segments and exhaustive search over
match assignments. It shares no code with :mod:`owseg.metrics` so the two
can check each other.
"""

from __future__ import annotations

from collections import Counter, deque

import numpy as np

from .errors import TooLarge

MAX_SIDE = 64
MAX_CLASSES = 8
MAX_INSTANCES = 8
NAN = float("nan")
GRID = [0.25 + 0.05 * i for i in range(11)]


def _mean(xs):
    xs = [x for x in xs if x == x]
    return sum(xs) / len(xs) if xs else NAN


# -- pixel level -----------------------------------------------------------


def _pr_points(scores, labels):
    """(threshold, tp, fp) for every distinct threshold, descending."""
    pts = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        pts.append((t, tp, fp))
    return pts


def aupr(scores, labels) -> float:
    scores = [float(s) for s in np.ravel(scores)]
    labels = [bool(y) for y in np.ravel(labels)]
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for _, tp, fp in _pr_points(scores, labels):
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area


def fpr95(scores, labels) -> float:
    scores = [float(s) for s in np.ravel(scores)]
    labels = [bool(y) for y in np.ravel(labels)]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    best = 1.0
    for _, tp, fp in _pr_points(scores, labels):
        if tp / n_pos >= 0.95:
            best = min(best, fp / n_neg)
    return best


# -- components ------------------------------------------------------------


def components(mask) -> list[set]:
    """8-connected components by breadth-first flood fill."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    seen = set()
    comps = []
    for h in range(H):
        for w in range(W):
            if not mask[h, w] or (h, w) in seen:
                continue
            comp = {(h, w)}
            seen.add((h, w))
            queue = deque([(h, w)])
            while queue:
                a, b = queue.popleft()
                for da in (-1, 0, 1):
                    for db in (-1, 0, 1):
                        q = (a + da, b + db)
                        if 0 <= q[0] < H and 0 <= q[1] < W and mask[q] and q not in seen:
                            seen.add(q)
                            comp.add(q)
                            queue.append(q)
            comps.append(comp)
    return comps


def component_scores(pred, gt, ignore=None):
    """(sIoU per gt component, PPV per predicted component)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if ignore is not None:
        keep = ~np.asarray(ignore, dtype=bool)
        pred, gt = pred & keep, gt & keep
    gcs = components(gt)
    pcs = components(pred)
    siou = []
    for k, K in enumerate(gcs):
        Q = set().union(*[P for P in pcs if P & K]) if any(P & K for P in pcs) else set()
        others = set().union(*[G for j, G in enumerate(gcs) if j != k]) if len(gcs) > 1 else set()
        siou.append(len(K & Q) / len(K | (Q - others)))
    all_gt = set().union(*gcs) if gcs else set()
    ppv = [len(P & all_gt) / len(P) for P in pcs]
    return siou, ppv


def mean_f1(siou, ppv) -> float:
    vals = []
    for t in GRID:
        tp = sum(1 for s in siou if s > t)
        fn = sum(1 for s in siou if s <= t)
        fp = sum(1 for p in ppv if p <= t)
        vals.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else NAN)
    return _mean(vals)


# -- open-world semantic ---------------------------------------------------


def confusion(pred, gt, ignore_label=None) -> Counter:
    c = Counter()
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        if g != ignore_label:
            c[(p, g)] += 1
    return c


def argmax_rows(c: Counter) -> dict:
    rows = {}
    for (p, g), n in c.items():
        best = rows.get(p)
        if best is None or n > best[1] or (n == best[1] and g < best[0]):
            rows[p] = (g, n)
    return {p: g for p, (g, _) in rows.items()}


def semantic_scores(c: Counter) -> dict:
    m = argmax_rows(c)
    gts = sorted({g for (_, g) in c})
    preds = sorted({p for (p, _) in c})
    row_sum = {p: sum(n for (q, _), n in c.items() if q == p) for p in preds}
    col_sum = {g: sum(n for (_, h), n in c.items() if h == g) for g in gts}
    ious = []
    for k in gts:
        rows = [p for p in preds if m[p] == k]
        tp = sum(c[(p, k)] for p in rows)
        pm = sum(row_sum[p] for p in rows)
        ious.append(tp / (pm + col_sum[k] - tp))
    hom = [max(n for (q, _), n in c.items() if q == p) / row_sum[p] for p in preds]
    com = [max(n for (_, h), n in c.items() if h == g) / col_sum[g] for g in gts]
    return {"mIoU_ow": _mean(ious), "Hom": _mean(hom), "Com": _mean(com), "mapping": m}


# -- panoptic --------------------------------------------------------------


def _best_matching(pairs):
    """Exhaustive search over one-to-one matchings of (pred, gt, iou) pairs.

    Returns (tp, iou_sum) of the matching maximising tp, then iou_sum.
    """
    best = (0, 0.0)

    def rec(i, used_p, used_g, tp, s):
        nonlocal best
        if i == len(pairs):
            best = max(best, (tp, s))
            return
        rec(i + 1, used_p, used_g, tp, s)
        p, g, iou = pairs[i]
        if p not in used_p and g not in used_g:
            rec(i + 1, used_p | {p}, used_g | {g}, tp + 1, s + iou)

    rec(0, frozenset(), frozenset(), 0, 0.0)
    return best


def panoptic_tally(pred_segs: dict, gt_segs: dict):
    """Segments are name -> pixel set; returns (iou_sum, tp, fp, fn)."""
    pairs = []
    for pn, P in pred_segs.items():
        for gn, G in gt_segs.items():
            iou = len(P & G) / len(P | G)
            if iou > 0.5:
                pairs.append((pn, gn, iou))
    tp, s = _best_matching(pairs)
    return s, tp, len(pred_segs) - tp, len(gt_segs) - tp


def _pq(s, tp, fp, fn):
    if tp + fp + fn == 0:
        return NAN, NAN, NAN
    d = tp + 0.5 * fp + 0.5 * fn
    return s / d, (s / tp if tp else 0.0), tp / d


def _segments(cls_of, inst, valid, things):
    """Segments of one mask: thing -> per (class, instance); stuff -> per class."""
    segs = {}
    H, W = inst.shape
    for h in range(H):
        for w in range(W):
            if not valid[h, w]:
                continue
            c = cls_of[h][w]
            if c is None:
                continue
            if c in things:
                if inst[h, w] == 0:
                    continue
                key = (c, "thing", cls_of.raw[h][w], int(inst[h, w]))
            else:
                key = (c, "stuff")
            segs.setdefault(key, set()).add((h, w))
    return segs


class _Cls(list):
    raw: list


def _classes(sem, mapping=None):
    raw = np.asarray(sem).tolist()
    out = _Cls([[(mapping.get(v) if mapping is not None else v) for v in row] for row in raw])
    out.raw = raw
    return out


def _per_class_tallies(psegs, gsegs, classes):
    out = {}
    for c in classes:
        P = {k: v for k, v in psegs.items() if k[0] == c}
        G = {k: v for k, v in gsegs.items() if k[0] == c}
        if P or G:
            out[c] = panoptic_tally(P, G)
    return out


# -- task entry point ------------------------------------------------------


def _check_size(*arrays):
    for a in arrays:
        if a is None:
            continue
        a = np.asarray(a)
        if a.ndim >= 2 and max(a.shape[:2]) > MAX_SIDE:
            raise TooLarge(f"oracle limited to {MAX_SIDE}x{MAX_SIDE}, got {a.shape[:2]}")


def brute_force_metric_oracle(task, pred, gt, ignore_label=None, thing_classes=()) -> dict:
    """Reference metric report for one image.

    ``pred``/``gt`` expose ``semantic``, ``instance``, ``anomaly`` and
    ``score`` attributes like :class:`owseg.evaluate.Sample`.
    """
    task = getattr(task, "value", task).replace("-", "_")
    _check_size(pred.semantic, pred.instance, pred.anomaly, pred.score, gt.semantic, gt.instance)
    gsem = np.asarray(gt.semantic)
    ignore = (gsem == ignore_label) if ignore_label is not None else np.zeros(gsem.shape, bool)
    anom = (gsem != 0) & ~ignore

    if task == "anomaly":
        score = np.asarray(pred.score, dtype=np.float64)
        if score.ndim == 3:
            score = score[..., 0]
        s = score[~ignore].tolist()
        y = anom[~ignore].tolist()
        siou, ppv = component_scores(np.asarray(pred.anomaly) != 0, anom, ignore)
        return {
            "AUPR": aupr(s, y),
            "FPR95": fpr95(s, y),
            "sIoU_gt": _mean(siou),
            "PPV": _mean(ppv),
            "meanF1": mean_f1(siou, ppv),
        }

    if task == "os_panoptic":
        pa = (np.asarray(pred.anomaly) != 0).astype(int)
        ginst = np.where(anom, np.asarray(gt.instance), 0)
        if len(set(np.unique(pred.instance)) - {0}) > MAX_INSTANCES or \
                len(set(np.unique(ginst)) - {0}) > MAX_INSTANCES:
            raise TooLarge("too many instances for the oracle")
        valid = ~ignore
        psegs = _segments(_classes(pa), np.asarray(pred.instance), valid, {1})
        gsegs = _segments(_classes(anom.astype(int)), ginst, valid, {1})
        t = _per_class_tallies(psegs, gsegs, [1]).get(1, (0.0, 0, 0, 0))
        pq, sq, rq = _pq(*t)
        return {"PQ_unk": pq, "SQ_unk": sq, "RQ_unk": rq}

    c = confusion(pred.semantic, gt.semantic, ignore_label)
    if len({p for p, _ in c}) > MAX_CLASSES or len({g for _, g in c}) > MAX_CLASSES:
        raise TooLarge("too many classes for the oracle")
    sem = semantic_scores(c)
    report = {k: sem[k] for k in ("mIoU_ow", "Hom", "Com")}
    if task == "ow_semantic":
        return report
    if task != "ow_panoptic":
        raise ValueError(f"unknown task {task!r}")
    valid = ~ignore
    things = set(thing_classes)
    psegs = _segments(_classes(pred.semantic, sem["mapping"]), np.asarray(pred.instance), valid, things)
    gsegs = _segments(_classes(gt.semantic), np.asarray(gt.instance), valid, things)
    classes = sorted(set(gsem[valid].tolist()))
    tallies = _per_class_tallies(psegs, gsegs, classes)
    pqs, rqs = [], []
    for t in tallies.values():
        pq, _, rq = _pq(*t)
        pqs.append(pq)
        rqs.append(rq)
    if not pqs:
        report.update(PQ=NAN, SQ=NAN, RQ=NAN)
    else:
        report.update(PQ=sum(pqs) / len(pqs), RQ=sum(rqs) / len(rqs),
                      SQ=(sum(pqs) / sum(rqs) if sum(rqs) > 0 else 0.0))
    return report
