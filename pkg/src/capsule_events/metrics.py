"""Frame-level AP/mAP, F1 operating points, temporal IoU, and temporal mAP.

Average precision is the all-points interpolated area under the
precision-recall curve: precision is made monotonically non-increasing
from the right (the PR staircase) and integrated over recall.  Event-level
AP uses greedy score-ordered matching with one-to-one ground-truth
assignment, the usual temporal-action-detection protocol.  The matching
and interpolation rules live only in this module so an alternative scoring
protocol can be swapped in.

Class averaging: classes with at least one ground-truth event anywhere in
the corpus are averaged (AP 0 when they have no correct predictions);
classes that never appear in the ground truth are excluded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BinaryMatrix, EventSet, ProbabilityMatrix
from .errors import ShapeError, TaxonomyError, ValidationError
from .taxonomy import LabelTaxonomy


@dataclass
class ApReport:
    """Per-class average precision plus their mean over defined classes."""

    per_class_ap: dict[str, float | None]
    map: float | None = field(init=False)

    def __post_init__(self):
        defined = [v for v in self.per_class_ap.values() if v is not None]
        self.map = float(np.mean(defined)) if defined else None


@dataclass
class TemporalMapReport:
    """Event-level AP per IoU threshold: {threshold: ApReport}."""

    per_threshold: dict[float, ApReport]

    def map_at(self, thr: float) -> float | None:
        return self.per_threshold[thr].map


# ---------------------------------------------------------------------------
# frame-level
# ---------------------------------------------------------------------------


def _ap_from_ranked_labels(ranked_labels: np.ndarray) -> float:
    """AP of a label sequence already sorted by descending score.

    Pads the PR curve with (recall 0, precision 1) and (recall 1, precision 0),
    takes the running max of precision from the right, and sums precision over
    recall increments.
    """
    total = int(ranked_labels.sum())
    tp = np.cumsum(ranked_labels, dtype=np.float64)
    k = np.arange(1, ranked_labels.size + 1, dtype=np.float64)
    precision = tp / k
    recall = tp / total
    mprec = np.concatenate(([0.0], precision, [0.0]))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def average_precision(scores: Sequence[float], labels: Sequence[bool]) -> float | None:
    """All-points interpolated AP; None when there is no positive label.

    Ties in ``scores`` keep input order (stable sort), so AP depends only on
    the induced ranking.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    if not labels.any():
        return None
    order = np.argsort(-scores, kind="stable")
    return _ap_from_ranked_labels(labels[order])


def frame_ap_report(
    probs: Sequence[ProbabilityMatrix], gt: Sequence[BinaryMatrix]
) -> ApReport:
    """Per-class AP over frames pooled across videos, plus the mean.

    Classes with no positive frame anywhere are reported as None and
    excluded from the mean.
    """
    if len(probs) != len(gt):
        raise ShapeError("need one ground-truth matrix per probability matrix")
    if not probs:
        raise ValidationError("no videos given")
    names = probs[0].class_names
    for pm, bm in zip(probs, gt):
        if pm.class_names != names or bm.class_names != names:
            raise ShapeError("class-name mismatch across videos")
        if pm.frames != bm.frames:
            raise ShapeError(
                f"video {pm.video_id!r}: {pm.frames} probability rows vs {bm.frames} label rows"
            )
    scores = np.concatenate([pm.values for pm in probs], axis=0)
    labels = np.concatenate([bm.values for bm in gt], axis=0)
    per_class = {
        name: average_precision(scores[:, j], labels[:, j]) for j, name in enumerate(names)
    }
    return ApReport(per_class)


def f1_threshold(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Score cut maximizing F1 under "predict positive iff score >= cut".

    Ties break toward the larger cut; 0.5 when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    total = int(labels.sum())
    if total == 0:
        return 0.5
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels, dtype=np.float64)
    k = np.arange(1, scores.size + 1, dtype=np.float64)
    f1 = 2.0 * tp / (k + total)
    # a cut at a tied score admits every item sharing that score
    last_of_value = np.flatnonzero(
        np.concatenate((sorted_scores[1:] != sorted_scores[:-1], [True]))
    )
    best_cut, best_f1 = 0.5, -1.0
    for idx in last_of_value:
        if f1[idx] > best_f1 or (f1[idx] == best_f1 and sorted_scores[idx] > best_cut):
            best_f1 = float(f1[idx])
            best_cut = float(sorted_scores[idx])
    return best_cut


# ---------------------------------------------------------------------------
# event-level
# ---------------------------------------------------------------------------


def temporal_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Intersection-over-union of two half-open frame intervals."""
    (a0, a1), (b0, b1) = a, b
    if a1 <= a0 or b1 <= b0:
        raise ValidationError(f"empty interval in IoU: [{a0},{a1}) vs [{b0},{b1})")
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def _class_event_ap(
    preds: list[tuple[float, str, int, int]],
    gt_by_video: dict[str, list[tuple[int, int]]],
    iou_thr: float,
) -> float:
    """AP for one class: preds are (score, video, start, end) across videos."""
    total_gt = sum(len(v) for v in gt_by_video.values())
    if total_gt == 0 or not preds:
        return 0.0
    preds = sorted(preds, key=lambda p: (-p[0], p[1], p[2], p[3]))
    taken: dict[str, np.ndarray] = {
        vid: np.zeros(len(spans), dtype=bool) for vid, spans in gt_by_video.items()
    }
    hits = np.zeros(len(preds), dtype=bool)
    for i, (_, vid, s, e) in enumerate(preds):
        spans = gt_by_video.get(vid)
        if not spans:
            continue
        used = taken[vid]
        best_iou, best_j = 0.0, -1
        for j, span in enumerate(spans):
            if used[j]:
                continue
            iou = temporal_iou((s, e), span)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thr:
            used[best_j] = True
            hits[i] = True
    tp = np.cumsum(hits, dtype=np.float64)
    k = np.arange(1, len(preds) + 1, dtype=np.float64)
    precision = tp / k
    recall = tp / total_gt
    mprec = np.concatenate(([0.0], precision, [0.0]))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def temporal_map(
    preds: Sequence[EventSet],
    gt: Sequence[EventSet],
    iou_thresholds: Sequence[float] = (0.5, 0.95),
    taxonomy: LabelTaxonomy | None = None,
) -> TemporalMapReport:
    """Event-level mAP at each IoU threshold.

    Predictions must be scored and ground truth unscored.  Per class:
    predictions are sorted by descending score and greedily matched, one to
    one, to the unmatched same-video ground-truth event of highest IoU; a
    match counts as a true positive iff that IoU reaches the threshold.
    """
    for es in gt:
        for ev in es.events:
            if ev.score is not None:
                raise ValidationError(f"ground-truth event {ev} carries a score")
    for es in preds:
        for ev in es.events:
            if ev.score is None:
                raise ValidationError(f"prediction {ev} has no score")
    if taxonomy is not None:
        known = set(taxonomy.classes)
        for es in list(preds) + list(gt):
            unknown = es.labels() - known
            if unknown:
                raise TaxonomyError(
                    f"events reference classes outside the taxonomy: {sorted(unknown)}"
                )

    gt_classes = sorted({ev.label for es in gt for ev in es.events})
    preds_by_class: dict[str, list[tuple[float, str, int, int]]] = {c: [] for c in gt_classes}
    for es in preds:
        for ev in es.events:
            if ev.label in preds_by_class:
                preds_by_class[ev.label].append((float(ev.score), es.video_id, ev.start, ev.end))
    gt_by_class: dict[str, dict[str, list[tuple[int, int]]]] = {c: {} for c in gt_classes}
    for es in gt:
        for ev in es.events:
            gt_by_class[ev.label].setdefault(es.video_id, []).append((ev.start, ev.end))

    per_threshold: dict[float, ApReport] = {}
    for thr in iou_thresholds:
        per_class = {
            c: _class_event_ap(preds_by_class[c], gt_by_class[c], thr) for c in gt_classes
        }
        per_threshold[float(thr)] = ApReport(per_class)
    return TemporalMapReport(per_threshold)
