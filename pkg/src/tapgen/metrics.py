"""Temporal localisation quality measures.

Everything here works on plain intervals: proposals are (start, end,
score) per video, ground truth is (start, end) or (start, end, class).
Objects with matching attribute names are accepted too.

Matching is greedy in score order: each proposal, best first, claims
the not-yet-matched ground-truth instance with the highest IoU that
clears the threshold.  Because that assignment for the first N
proposals never depends on later ones, recall at every proposal budget
falls out of a single pass.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def iou_1d(a_start: float, a_end: float, b_start: float, b_end: float) -> float:
    """Intersection over union of two real intervals.

    Both intervals must have positive length, so the union is positive
    and the result lies in [0, 1].
    """
    if not (a_start < a_end) or not (b_start < b_end):
        raise ValueError("intervals need start < end, got (%r, %r), (%r, %r)"
                         % (a_start, a_end, b_start, b_end))
    inter = min(a_end, b_end) - max(a_start, b_start)
    if inter <= 0.0:
        return 0.0
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union


def grid_range(start: float, step: float, stop: float) -> tuple[float, ...]:
    """Inclusive arithmetic grid, robust to float step accumulation."""
    if step <= 0 or stop < start:
        raise ValueError("need step > 0 and stop >= start")
    n = int(round((stop - start) / step))
    return tuple(round(start + i * step, 10) for i in range(n + 1))


def default_iou_grid() -> tuple[float, ...]:
    """IoU thresholds 0.5 to 1.0 in steps of 0.05."""
    return grid_range(0.5, 0.05, 1.0)


def _as_scored(proposals) -> list[tuple[float, float, float]]:
    out = []
    for p in proposals:
        if hasattr(p, "start"):
            out.append((float(p.start), float(p.end), float(p.score)))
        else:
            s, e, sc = p[0], p[1], p[2]
            out.append((float(s), float(e), float(sc)))
    return out


def _as_segments(annotations) -> list[tuple[float, float]]:
    items = getattr(annotations, "instances", annotations)
    out = []
    for g in items:
        if hasattr(g, "start"):
            out.append((float(g.start), float(g.end)))
        else:
            out.append((float(g[0]), float(g[1])))
    return out


def _rank_order(scored) -> list[tuple[float, float, float]]:
    # Highest score first; ties broken by earlier start, then earlier end,
    # so rankings are deterministic however the caller generated the list.
    return sorted(scored, key=lambda p: (-p[2], p[0], p[1]))


def _clears(value: float, threshold: float) -> bool:
    # A zero threshold asks for any strictly positive overlap.
    if threshold == 0.0:
        return value > 0.0
    return value >= threshold


def match_ranks(proposals, ground_truth,
                threshold: float) -> list[Optional[int]]:
    """Greedy one-to-one matching of ranked proposals to instances.

    Returns, for each ground-truth instance, the 1-based rank of the
    proposal that matched it, or None.  Proposals are ranked by
    descending score (ties: earlier start, then earlier end); each takes
    the unmatched instance with the highest IoU clearing ``threshold``
    (lowest instance index on equal IoU).
    """
    ranked = _rank_order(_as_scored(proposals))
    gts = _as_segments(ground_truth)
    matched: list[Optional[int]] = [None] * len(gts)
    for rank, (ps, pe, _) in enumerate(ranked, start=1):
        best = -1
        best_iou = 0.0
        for gi, (gs, ge) in enumerate(gts):
            if matched[gi] is not None:
                continue
            v = iou_1d(ps, pe, gs, ge)
            if _clears(v, threshold) and v > best_iou:
                best = gi
                best_iou = v
        if best >= 0:
            matched[best] = rank
    return matched


def _total_instances(annotations_by_video: Mapping) -> int:
    return sum(len(_as_segments(a)) for a in annotations_by_video.values())


def _match_counts(proposals_by_video: Mapping, annotations_by_video: Mapping,
                  thresholds: Sequence[float],
                  an_max: int) -> tuple[np.ndarray, int]:
    """counts[j, n] = matched instances at IoU thresholds[j] using the
    top n proposals per video, for n = 0..an_max."""
    counts = np.zeros((len(thresholds), an_max + 1), dtype=np.int64)
    for vid, ann in annotations_by_video.items():
        gts = _as_segments(ann)
        if not gts:
            continue
        props = proposals_by_video.get(vid, ())
        for j, thr in enumerate(thresholds):
            for rank in match_ranks(props, gts, thr):
                if rank is not None and rank <= an_max:
                    counts[j, rank] += 1
    return np.cumsum(counts, axis=1), _total_instances(annotations_by_video)


def average_recall_at_an(proposals_by_video: Mapping,
                         annotations_by_video: Mapping,
                         an: int,
                         thresholds: Sequence[float] = ()) -> float:
    """Recall under a per-video proposal budget, averaged over IoU
    thresholds (default grid 0.5:0.05:1.0)."""
    if an < 0:
        raise ValueError("an must be >= 0, got %d" % an)
    thresholds = tuple(thresholds) or default_iou_grid()
    cum, total = _match_counts(proposals_by_video, annotations_by_video,
                               thresholds, an)
    if total == 0:
        raise ValueError("no ground truth instances to evaluate against")
    return float(cum[:, an].mean() / total)


def ar_an_curve(proposals_by_video: Mapping, annotations_by_video: Mapping,
                an_max: int = 100,
                thresholds: Sequence[float] = ()) -> np.ndarray:
    """AR at every budget 0..an_max as one array (AR at 0 is 0)."""
    thresholds = tuple(thresholds) or default_iou_grid()
    cum, total = _match_counts(proposals_by_video, annotations_by_video,
                               thresholds, an_max)
    if total == 0:
        raise ValueError("no ground truth instances to evaluate against")
    return cum.mean(axis=0) / total


def auc_ar_an(proposals_by_video: Mapping, annotations_by_video: Mapping,
              an_max: int = 100, thresholds: Sequence[float] = ()) -> float:
    """Area under the AR-vs-AN curve for AN in [0, an_max], trapezoidal,
    normalised by an_max so the result lies in [0, 1]."""
    if an_max < 1:
        raise ValueError("an_max must be >= 1, got %d" % an_max)
    curve = ar_an_curve(proposals_by_video, annotations_by_video, an_max,
                        thresholds)
    area = float(_trapezoid(curve, dx=1.0))
    return area / an_max


def recall_vs_iou(proposals_by_video: Mapping, annotations_by_video: Mapping,
                  an: int = 100,
                  thresholds: Sequence[float] = ()) -> list[tuple[float, float]]:
    """(threshold, recall) pairs at a fixed proposal budget.

    A threshold of exactly 0 counts any strictly positive overlap.
    """
    thresholds = tuple(thresholds) or default_iou_grid()
    cum, total = _match_counts(proposals_by_video, annotations_by_video,
                               thresholds, an)
    if total == 0:
        raise ValueError("no ground truth instances to evaluate against")
    return [(float(thr), float(cum[j, an] / total))
            for j, thr in enumerate(thresholds)]


def _as_detections(detections) -> list[tuple[float, float, float, int]]:
    out = []
    for d in detections:
        if hasattr(d, "start"):
            out.append((float(d.start), float(d.end), float(d.score),
                        int(d.class_id)))
        else:
            out.append((float(d[0]), float(d[1]), float(d[2]), int(d[3])))
    return out


def _as_class_segments(annotations) -> list[tuple[float, float, int]]:
    items = getattr(annotations, "instances", annotations)
    out = []
    for g in items:
        if hasattr(g, "start"):
            out.append((float(g.start), float(g.end), int(g.class_id)))
        else:
            out.append((float(g[0]), float(g[1]), int(g[2])))
    return out


def _average_precision(flags: Sequence[bool], n_positive: int) -> float:
    """All-points interpolated AP from ranked true/false positive flags."""
    if n_positive == 0:
        raise ValueError("average precision needs at least one positive")
    if not flags:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_positive
    precision = tp / (tp + fp)
    # Envelope from the right, then sum precision where recall steps.
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_iou(detections_by_video: Mapping, annotations_by_video: Mapping,
               threshold: float) -> float:
    """Mean average precision over classes at one IoU threshold.

    Detections carry (start, end, score, class_id); annotations carry
    (start, end, class_id).  Classes are those with at least one ground
    truth instance; detections of other classes are ignored.
    """
    gt_by_class: dict[int, dict[str, list[tuple[float, float]]]] = {}
    for vid, ann in annotations_by_video.items():
        for s, e, c in _as_class_segments(ann):
            gt_by_class.setdefault(c, {}).setdefault(vid, []).append((s, e))
    if not gt_by_class:
        raise ValueError("no ground truth instances to evaluate against")
    det_by_class: dict[int, list[tuple[float, str, float, float]]] = {}
    for vid, dets in detections_by_video.items():
        for s, e, sc, c in _as_detections(dets):
            det_by_class.setdefault(c, []).append((sc, vid, s, e))

    aps = []
    for c in sorted(gt_by_class):
        videos = gt_by_class[c]
        n_positive = sum(len(v) for v in videos.values())
        dets = sorted(det_by_class.get(c, ()),
                      key=lambda d: (-d[0], d[1], d[2], d[3]))
        taken = {vid: [False] * len(gts) for vid, gts in videos.items()}
        flags = []
        for _, vid, s, e in dets:
            gts = videos.get(vid, ())
            best = -1
            best_iou = 0.0
            for gi, (gs, ge) in enumerate(gts):
                if taken[vid][gi]:
                    continue
                v = iou_1d(s, e, gs, ge)
                if _clears(v, threshold) and v > best_iou:
                    best = gi
                    best_iou = v
            if best >= 0:
                taken[vid][best] = True
                flags.append(True)
            else:
                flags.append(False)
        aps.append(_average_precision(flags, n_positive))
    return float(np.mean(aps))


def map_table(detections_by_video: Mapping, annotations_by_video: Mapping,
              thresholds: Sequence[float]) -> list[tuple[float, float]]:
    return [(float(t), map_at_iou(detections_by_video, annotations_by_video, t))
            for t in thresholds]
