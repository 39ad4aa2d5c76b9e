"""Class-specific operating thresholds: F1 initialization plus event-level search.

Initial thresholds come from the frame-level precision-recall curve (max-F1
cut per class).  The search then refines each class by coordinate descent on
validation event-level mAP@0.5 through the full decode pipeline: candidates
around the initial cut (local mode) optionally unioned with a coarse global
grid over [0.05, 0.95].  The global arm exists because an F1-derived cut near
one end of the probability range can trap a purely local search far from the
best event-level operating point.

Search state starts from the initial cuts clamped into [0.01, 0.99]; the
clamped start is always a candidate, so every accepted update is
non-decreasing in the objective.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import (
    AnnotationSet,
    BinaryMatrix,
    Event,
    EventSet,
    ProbabilityMatrix,
    frames_from_intervals,
)
from .decoding import (
    DecodeConfig,
    _tuple_spans,
    class_column,
    class_event_spans,
    prepare_video,
    region_block,
    region_events,
)
from .errors import ShapeError, ValidationError
from .metrics import _class_event_ap, f1_threshold
from .taxonomy import LabelTaxonomy

THRESH_LO = 0.01
THRESH_HI = 0.99
LOCAL_RADIUS = 0.15
LOCAL_STEP = 0.01
GLOBAL_LO = 0.05
GLOBAL_HI = 0.95
GLOBAL_STEP = 0.05
MODES = ("local", "local_plus_global")


@dataclass
class ThresholdProfile:
    """F1-derived initial cuts and the searched operating thresholds."""

    init: dict[str, float]
    final: dict[str, float]
    objective_value: float | None = None
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name, tau in self.final.items():
            if not (THRESH_LO - 1e-12 <= tau <= THRESH_HI + 1e-12):
                raise ValidationError(
                    f"final threshold for {name!r} is {tau}, outside [{THRESH_LO}, {THRESH_HI}]"
                )

    def to_document(self) -> dict:
        return {
            "init": self.init,
            "final": self.final,
            "objective_value": self.objective_value,
            "trace": self.trace,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "ThresholdProfile":
        return cls(
            init=dict(doc["init"]),
            final=dict(doc["final"]),
            objective_value=doc.get("objective_value"),
            trace=list(doc.get("trace", [])),
        )


def store_threshold_profile(profile: ThresholdProfile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile.to_document(), fh, indent=1)
        fh.write("\n")


def load_threshold_profile(path: str | Path) -> ThresholdProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return ThresholdProfile.from_document(json.load(fh))


def default_thresholds(taxonomy: LabelTaxonomy, value: float = 0.5) -> ThresholdProfile:
    taus = {c: value for c in taxonomy.classes}
    return ThresholdProfile(init=dict(taus), final=dict(taus))


# ---------------------------------------------------------------------------
# initialization and candidates
# ---------------------------------------------------------------------------


def init_thresholds(
    val_probs: Sequence[ProbabilityMatrix], val_gt_frames: Sequence[BinaryMatrix]
) -> dict[str, float]:
    """Max-F1 cut per class over frames pooled across validation videos."""
    if len(val_probs) != len(val_gt_frames) or not val_probs:
        raise ShapeError("need matching probability and frame-label matrices")
    names = val_probs[0].class_names
    scores = np.concatenate([pm.values for pm in val_probs], axis=0)
    labels = np.concatenate([bm.values for bm in val_gt_frames], axis=0)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    return {name: f1_threshold(scores[:, j], labels[:, j]) for j, name in enumerate(names)}


def candidate_set(
    b_c: float,
    local_radius: float = LOCAL_RADIUS,
    local_step: float = LOCAL_STEP,
    global_lo: float = GLOBAL_LO,
    global_hi: float = GLOBAL_HI,
    global_step: float = GLOBAL_STEP,
    mode: str = "local_plus_global",
) -> list[float]:
    """Sorted unique threshold candidates for one class.

    Local: the ``local_step`` grid spanning ``b_c +- local_radius``, clamped
    into [0.01, 0.99].  Global: the coarse grid over [global_lo, global_hi].
    Values closer than 1e-9 are merged.
    """
    if not (0.0 <= b_c <= 1.0):
        raise ValidationError(f"initial threshold {b_c} outside [0, 1]")
    if mode not in MODES:
        raise ValidationError(f"unknown search mode {mode!r}")
    n_local = int(round(local_radius / local_step))
    values = [b_c + k * local_step for k in range(-n_local, n_local + 1)]
    if mode == "local_plus_global":
        n_global = int(round((global_hi - global_lo) / global_step))
        # canonical decimals, so a 0.85 candidate compares as exactly 0.85
        values += [round(global_lo + j * global_step, 12) for j in range(n_global + 1)]
    values = sorted(min(max(v, THRESH_LO), THRESH_HI) for v in values)
    merged: list[float] = []
    for v in values:
        if not merged or v - merged[-1] > 1e-9:
            merged.append(v)
    return merged


# ---------------------------------------------------------------------------
# coordinate search
# ---------------------------------------------------------------------------


def _frame_gt_for(pm: ProbabilityMatrix, events: EventSet | None, taxonomy: LabelTaxonomy) -> BinaryMatrix:
    intervals = [Event(e.label, e.start, e.end) for e in (events.events if events else [])]
    ann = AnnotationSet(pm.video_id, pm.frames, intervals)
    return frames_from_intervals(ann, taxonomy)


def _pick(
    candidates: Sequence[float], objectives: Sequence[float], b_c: float
) -> tuple[float, float]:
    """Argmax objective; ties go to the candidate nearest b_c, then smaller."""
    best = max(objectives)
    tied = [c for c, o in zip(candidates, objectives) if o >= best - 1e-12]
    chosen = min(tied, key=lambda c: (abs(c - b_c), c))
    return chosen, best


def optimize(
    val_probs: Sequence[ProbabilityMatrix],
    val_gt_events: Sequence[EventSet],
    decode_config: DecodeConfig,
    mode: str = "local_plus_global",
    sweeps: int = 1,
    decode_fn: Callable[[ProbabilityMatrix, Mapping[str, float]], EventSet] | None = None,
    span_fn: Callable[[ProbabilityMatrix, str, float], list[tuple[int, int, float]]] | None = None,
    **candidate_kwargs,
) -> ThresholdProfile:
    """Coordinate search maximizing validation temporal mAP@0.5.

    Classes are visited in taxonomy order; each candidate threshold is scored
    by decoding every validation video with all other thresholds fixed.  With
    the default per-label decoder the objective separates per class, so only
    the swept class is re-decoded; region classes are skipped outright because
    region exclusivity overrides their thresholds (every candidate ties and
    the tie-break keeps the value nearest the initial cut).

    ``span_fn(probs, class, tau) -> [(start, end, score), ...]`` substitutes a
    custom per-label decoder whose classes stay independent (used for the
    plain-thresholding ablation).  ``decode_fn(probs, thresholds) -> EventSet``
    substitutes an arbitrary decoder and forces full re-decoding per candidate.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown search mode {mode!r}")
    if decode_fn is not None and span_fn is not None:
        raise ValidationError("give at most one of decode_fn and span_fn")
    taxonomy = decode_config.taxonomy
    gt_by_vid = {es.video_id: es for es in val_gt_events}
    gt_list = [gt_by_vid.get(pm.video_id) for pm in val_probs]
    frame_gt = [_frame_gt_for(pm, es, taxonomy) for pm, es in zip(val_probs, gt_list)]
    init = init_thresholds(val_probs, frame_gt)
    candidates = {c: candidate_set(init[c], mode=mode, **candidate_kwargs) for c in taxonomy.classes}

    eligible = sorted({ev.label for es in val_gt_events for ev in es.events})
    gt_spans: dict[str, dict[str, list[tuple[int, int]]]] = {c: {} for c in eligible}
    for es in val_gt_events:
        for ev in es.events:
            gt_spans[ev.label].setdefault(es.video_id, []).append((ev.start, ev.end))

    current = {c: min(max(init[c], THRESH_LO), THRESH_HI) for c in taxonomy.classes}
    trace: list[dict] = []

    def nearest_candidate(c: str) -> float:
        return min(candidates[c], key=lambda v: (abs(v - init[c]), v))

    searcher: _PerClassSearch | _JointSearch
    if decode_fn is not None:
        searcher = _JointSearch(
            val_probs,
            eligible,
            gt_spans,
            lambda i, taus: decode_fn(val_probs[i], taus),
            inert=frozenset(),
        )
    elif span_fn is not None:
        searcher = _PerClassSearch(
            val_probs,
            eligible,
            gt_spans,
            lambda i, c, tau: span_fn(val_probs[i], c, tau),
            region_ap=None,
            inert=frozenset(),
            current=current,
        )
    elif decode_config.event_mode == "per_label":
        preps = [prepare_video(pm, decode_config) for pm in val_probs]

        def region_ap(c: str) -> float:
            preds = []
            for pm, prep in zip(val_probs, preps):
                for s, e, score in _region_span_cache(prep, decode_config)[c]:
                    preds.append((score, pm.video_id, s, e))
            return _class_event_ap(preds, gt_spans[c], 0.5)

        searcher = _PerClassSearch(
            val_probs,
            eligible,
            gt_spans,
            lambda i, c, tau: class_event_spans(preps[i], decode_config, c, tau),
            region_ap=region_ap,
            inert=frozenset(taxonomy.regions),
            current=current,
        )
    else:  # tuple mode couples classes through the joint segmentation
        preps = [prepare_video(pm, decode_config) for pm in val_probs]
        searcher = _TupleSearch(val_probs, eligible, gt_spans, preps, decode_config, current)

    obj = searcher.objective(current)
    trace.append({"class": None, "threshold": None, "objective": obj})
    for _ in range(max(1, sweeps)):
        for c in taxonomy.classes:
            if c in searcher.inert or (searcher.skips_ineligible and c not in eligible):
                current[c] = nearest_candidate(c)
                continue
            cands = candidates[c]
            objs = searcher.sweep(c, cands, current)
            chosen, best = _pick(cands, objs, init[c])
            searcher.accept(c, chosen, cands, current)
            current[c] = chosen
            obj = best
            trace.append({"class": c, "threshold": chosen, "objective": obj})

    return ThresholdProfile(init=init, final=current, objective_value=obj, trace=trace)


def _region_span_cache(prep, decode_config) -> dict[str, list[tuple[int, int, float]]]:
    if not hasattr(prep, "_region_spans"):
        prep._region_spans = {
            name: [(ev.start, ev.end, ev.score) for ev in events]
            for name, events in region_events(prep, decode_config).items()
        }
    return prep._region_spans


class _PerClassSearch:
    """Coordinate search where per-class predictions are independent."""

    skips_ineligible = True

    def __init__(self, val_probs, eligible, gt_spans, span_fn, region_ap, inert, current):
        self.val_probs = val_probs
        self.eligible = eligible
        self.gt_spans = gt_spans
        self.span_fn = span_fn  # (video index, class, tau) -> [(s, e, score)]
        self.inert = inert
        self.ap: dict[str, float] = {}
        for c in eligible:
            if region_ap is not None and c in inert:
                self.ap[c] = region_ap(c)
            else:
                self.ap[c] = self._class_ap(c, current[c])
        self._last_aps: list[float] = []

    def _class_ap(self, c: str, tau: float) -> float:
        preds = []
        for i, pm in enumerate(self.val_probs):
            for s, e, score in self.span_fn(i, c, tau):
                preds.append((score, pm.video_id, s, e))
        return _class_event_ap(preds, self.gt_spans[c], 0.5)

    def objective(self, current) -> float:
        return float(np.mean([self.ap[c] for c in self.eligible])) if self.eligible else 0.0

    def sweep(self, c, cands, current) -> list[float]:
        self._last_aps = [self._class_ap(c, tau) for tau in cands]
        others = [self.ap[k] for k in self.eligible if k != c]
        return [float(np.mean(others + [a])) for a in self._last_aps]

    def accept(self, c, chosen, cands, current) -> None:
        self.ap[c] = self._last_aps[cands.index(chosen)]


class _JointSearch:
    """Fallback for arbitrary decoders: full re-decode per candidate."""

    skips_ineligible = False

    def __init__(self, val_probs, eligible, gt_spans, fn, inert):
        self.val_probs = val_probs
        self.eligible = eligible
        self.gt_spans = gt_spans
        self.fn = fn  # (video index, thresholds) -> EventSet
        self.inert = inert
        self._current_obj: float | None = None

    def _objective_at(self, taus: Mapping[str, float]) -> float:
        preds: dict[str, list[tuple[float, str, int, int]]] = {c: [] for c in self.eligible}
        for i, pm in enumerate(self.val_probs):
            for ev in self.fn(i, taus).events:
                if ev.label in preds:
                    preds[ev.label].append((ev.score, pm.video_id, ev.start, ev.end))
        if not self.eligible:
            return 0.0
        return float(
            np.mean([_class_event_ap(preds[c], self.gt_spans[c], 0.5) for c in self.eligible])
        )

    def objective(self, current) -> float:
        return self._objective_at(current)

    def sweep(self, c, cands, current) -> list[float]:
        return [self._objective_at({**current, c: tau}) for tau in cands]

    def accept(self, c, chosen, cands, current) -> None:
        pass


class _TupleSearch(_JointSearch):
    """Tuple-mode search with cached binary columns (only the swept one moves)."""

    skips_ineligible = False

    def __init__(self, val_probs, eligible, gt_spans, preps, config, current):
        super().__init__(val_probs, eligible, gt_spans, fn=None, inert=frozenset(config.taxonomy.regions))
        self.preps = preps
        self.config = config
        taxonomy = config.taxonomy
        self.names = taxonomy.classes
        self.non_regions = [c for c in self.names if c not in taxonomy.regions]
        self.columns: list[dict[str, np.ndarray]] = []
        self.region_cols: list[np.ndarray] = []
        for prep in preps:
            block = region_block(prep, config)
            self.region_cols.append(block)
            self.columns.append(
                {c: class_column(prep, config, c, current[c]) for c in self.non_regions}
            )

    def _objective_with(self, swap_class: str | None, swap_cols) -> float:
        preds: dict[str, list[tuple[float, str, int, int]]] = {c: [] for c in self.eligible}
        taxonomy = self.config.taxonomy
        region_index = {name: i for i, name in enumerate(taxonomy.regions)}
        for i, pm in enumerate(self.val_probs):
            cols = []
            for name in self.names:
                if name == swap_class:
                    cols.append(swap_cols[i])
                elif name in region_index:
                    cols.append(self.region_cols[i][:, region_index[name]])
                else:
                    cols.append(self.columns[i][name])
            b = np.column_stack(cols)
            for j, s, e, score in _tuple_spans(b, self.preps[i].smoothed.values):
                name = self.names[j]
                if name in preds:
                    preds[name].append((score, pm.video_id, s, e))
        if not self.eligible:
            return 0.0
        return float(
            np.mean([_class_event_ap(preds[c], self.gt_spans[c], 0.5) for c in self.eligible])
        )

    def objective(self, current) -> float:
        return self._objective_with(None, None)

    def sweep(self, c, cands, current) -> list[float]:
        out = []
        for tau in cands:
            cols = [class_column(prep, self.config, c, tau) for prep in self.preps]
            out.append(self._objective_with(c, cols))
        return out

    def accept(self, c, chosen, cands, current) -> None:
        for i, prep in enumerate(self.preps):
            self.columns[i][c] = class_column(prep, self.config, c, chosen)
