"""Anatomy-aware temporal event decoding.

Converts a per-frame probability matrix into labeled events in a fixed
order: temporal smoothing, mutually-exclusive region resolution under the
monotone transit constraint, class thresholds (regions overridden by the
resolved exclusivity), landmark gating near valid regions, per-class
morphological closing then opening, region coverage repair, and finally
event extraction (independent per label by default, or tuple-segmented at
every change of the joint active-label set for ablation).

Event scores are the mean smoothed probability of the class over the event
span; the evaluation protocol needs a ranking and the frame probabilities
are the only confidence signal available after thresholding.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .corpus import BinaryMatrix, Event, EventSet, ProbabilityMatrix
from .errors import ShapeError, TaxonomyError, ValidationError
from .taxonomy import LabelTaxonomy

DEFAULT_MORPHOLOGY = {
    # (open_len, close_len) per class kind
    "region": (5, 15),
    "landmark": (3, 9),
    "pathology": (3, 5),
}
DEFAULT_LANDMARK_MARGIN = 15


@dataclass(frozen=True)
class DecodeConfig:
    taxonomy: LabelTaxonomy
    thresholds: Mapping[str, float]
    open_len: Mapping[str, int]
    close_len: Mapping[str, int]
    landmark_margin: int = DEFAULT_LANDMARK_MARGIN
    transit_mode: str = "dp"  # "dp" | "ratchet"
    event_mode: str = "per_label"  # "per_label" | "tuple"

    def __post_init__(self):
        if self.transit_mode not in ("dp", "ratchet"):
            raise ValidationError(f"unknown transit mode {self.transit_mode!r}")
        if self.event_mode not in ("per_label", "tuple"):
            raise ValidationError(f"unknown event mode {self.event_mode!r}")
        if self.landmark_margin < 0:
            raise ValidationError("landmark_margin must be >= 0")
        for name in self.taxonomy.classes:
            if self.open_len.get(name, 1) < 1 or self.close_len.get(name, 1) < 1:
                raise ValidationError(f"morphology lengths for {name!r} must be >= 1")

    @classmethod
    def defaults(
        cls,
        taxonomy: LabelTaxonomy,
        thresholds: Mapping[str, float] | None = None,
        morphology: Mapping[str, tuple[int, int]] | None = None,
        **kwargs,
    ) -> "DecodeConfig":
        """Config with 0.5 thresholds and per-kind morphology defaults."""
        morph = dict(DEFAULT_MORPHOLOGY)
        if morphology:
            morph.update(morphology)
        open_len = {c: morph[taxonomy.kind(c)][0] for c in taxonomy.classes}
        close_len = {c: morph[taxonomy.kind(c)][1] for c in taxonomy.classes}
        if thresholds is None:
            thresholds = {c: 0.5 for c in taxonomy.classes}
        return cls(taxonomy, dict(thresholds), open_len, close_len, **kwargs)

    def with_thresholds(self, thresholds: Mapping[str, float]) -> "DecodeConfig":
        return replace(self, thresholds=dict(thresholds))


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def _smooth_column(col: np.ndarray, window: int) -> np.ndarray:
    if window == 1:
        return col.copy()
    half = window // 2
    t = col.shape[0]
    csum = np.concatenate(([0.0], np.cumsum(col, dtype=np.float64)))
    lo = np.clip(np.arange(t) - half, 0, t)
    hi = np.clip(np.arange(t) + half + 1, 0, t)
    return (csum[hi] - csum[lo]) / (hi - lo)


def smooth(probs: ProbabilityMatrix, taxonomy: LabelTaxonomy) -> ProbabilityMatrix:
    """Per-class centered moving average; windows truncate at sequence edges."""
    probs.check_taxonomy(taxonomy)
    out = np.empty_like(probs.values)
    for j, name in enumerate(probs.class_names):
        out[:, j] = _smooth_column(probs.values[:, j], taxonomy.smoothing_window[name])
    # means of values in [0,1] stay in [0,1]; clip away accumulation dust
    return ProbabilityMatrix(probs.video_id, probs.class_names, np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# region resolution (mutual exclusivity + monotone transit)
# ---------------------------------------------------------------------------


def _region_probs(probs: ProbabilityMatrix, taxonomy: LabelTaxonomy) -> np.ndarray:
    missing = [r for r in taxonomy.regions if r not in probs.class_names]
    if missing:
        raise TaxonomyError(f"probability matrix lacks region classes {missing}")
    cols = [probs.class_names.index(r) for r in taxonomy.regions]
    return probs.values[:, cols]


def _monotone_path_dp(region_probs: np.ndarray) -> np.ndarray:
    """Non-decreasing path maximizing the summed per-frame region probability.

    Reformulated over cut points: region r occupies [t_r, t_{r+1}).  For each
    region boundary the best earlier cut is a running prefix maximum, so the
    whole program is O(T * R).  Ties prefer later cuts, i.e. lower regions.
    """
    t, r = region_probs.shape
    if r == 1:
        return np.zeros(t, dtype=np.int64)
    csum = np.concatenate((np.zeros((1, r)), np.cumsum(region_probs, axis=0)), axis=0)
    positions = np.arange(t + 1)
    best = csum[:, 0]  # best total using regions[0..k] with cut grid at t
    argmax_at: list[np.ndarray] = []
    for k in range(1, r):
        gain = best - csum[:, k]
        running = np.maximum.accumulate(gain)
        # rightmost index attaining the running max (>= catches exact ties)
        marks = np.where(gain >= running, positions, 0)
        arg = np.maximum.accumulate(marks)
        argmax_at.append(arg)
        best = csum[:, k] + running
    cuts = np.empty(r + 1, dtype=np.int64)
    cuts[0], cuts[r] = 0, t
    for k in range(r - 1, 0, -1):
        cuts[k] = argmax_at[k - 1][cuts[k + 1]]
    path = np.empty(t, dtype=np.int64)
    for k in range(r):
        path[cuts[k] : cuts[k + 1]] = k
    return path


def _monotone_path_ratchet(region_probs: np.ndarray) -> np.ndarray:
    """Framewise argmax (ties to the lower region) forced non-decreasing."""
    return np.maximum.accumulate(np.argmax(region_probs, axis=1))


def resolve_regions(
    probs: ProbabilityMatrix, taxonomy: LabelTaxonomy, transit_mode: str = "dp"
) -> tuple[np.ndarray, BinaryMatrix]:
    """Assign exactly one region per frame under the transit-order constraint.

    ``dp`` maximizes the total retained region probability over all
    non-decreasing paths; ``ratchet`` keeps the framewise argmax but never
    steps backward.  Returns the ordinal path and a one-hot mask over the
    region classes.
    """
    rp = _region_probs(probs, taxonomy)
    if transit_mode == "dp":
        path = _monotone_path_dp(rp)
    elif transit_mode == "ratchet":
        path = _monotone_path_ratchet(rp)
    else:
        raise ValidationError(f"unknown transit mode {transit_mode!r}")
    mask = np.zeros(rp.shape, dtype=bool)
    mask[np.arange(rp.shape[0]), path] = True
    return path, BinaryMatrix(probs.video_id, taxonomy.regions, mask)


# ---------------------------------------------------------------------------
# thresholds, gating, morphology, coverage
# ---------------------------------------------------------------------------


def binarize(
    probs: ProbabilityMatrix,
    thresholds: Mapping[str, float],
    region_mask: BinaryMatrix | None = None,
    taxonomy: LabelTaxonomy | None = None,
) -> BinaryMatrix:
    """Per-class threshold at p >= tau; the region mask, when given,
    overrides region columns (exclusivity beats thresholds)."""
    taus = np.empty(probs.num_classes)
    for j, name in enumerate(probs.class_names):
        if name not in thresholds:
            raise ValidationError(f"no threshold for class {name!r}")
        taus[j] = thresholds[name]
    values = probs.values >= taus
    if region_mask is not None:
        if taxonomy is None:
            raise ValidationError("taxonomy required to apply a region mask")
        for i, name in enumerate(taxonomy.regions):
            values[:, probs.class_names.index(name)] = region_mask.values[:, i]
    return BinaryMatrix(probs.video_id, probs.class_names, values)


def _within_margin(valid: np.ndarray, margin: int) -> np.ndarray:
    """True where some valid frame lies within +-margin."""
    if margin == 0:
        return valid.copy()
    t = valid.shape[0]
    csum = np.concatenate(([0], np.cumsum(valid.astype(np.int64))))
    lo = np.clip(np.arange(t) - margin, 0, t)
    hi = np.clip(np.arange(t) + margin + 1, 0, t)
    return (csum[hi] - csum[lo]) > 0


def gate_landmarks(
    binary: BinaryMatrix,
    region_path: np.ndarray,
    taxonomy: LabelTaxonomy,
    landmark_margin: int = DEFAULT_LANDMARK_MARGIN,
) -> BinaryMatrix:
    """Clear landmark positives that are nowhere near their valid regions.

    A landmark frame survives iff some frame within ``landmark_margin`` is
    assigned one of the landmark's valid neighboring regions.
    """
    values = binary.values.copy()
    for name, valid_regions in taxonomy.landmarks.items():
        ordinals = [taxonomy.region_index(r) for r in valid_regions]
        near = _within_margin(np.isin(region_path, ordinals), landmark_margin)
        j = binary.class_names.index(name)
        values[:, j] &= near
    return BinaryMatrix(binary.video_id, binary.class_names, values)


def _runs(col: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Starts and (exclusive) ends of maximal True runs."""
    diff = np.diff(col.astype(np.int8), prepend=0, append=0)
    return np.flatnonzero(diff == 1), np.flatnonzero(diff == -1)


def _close_open_column(col: np.ndarray, close_len: int, open_len: int) -> np.ndarray:
    """Closing (fill interior gaps < close_len) then opening (drop runs < open_len).

    Sequence boundaries terminate gaps: leading/trailing false stretches are
    never filled.
    """
    out = col.copy()
    if close_len > 1:
        starts, ends = _runs(out)
        if len(starts) > 1:
            gap_lo, gap_hi = ends[:-1], starts[1:]
            for lo, hi in zip(gap_lo, gap_hi):
                if hi - lo < close_len:
                    out[lo:hi] = True
    if open_len > 1:
        starts, ends = _runs(out)
        for s, e in zip(starts, ends):
            if e - s < open_len:
                out[s:e] = False
    return out


def morph_refine(
    binary: BinaryMatrix,
    open_len: Mapping[str, int],
    close_len: Mapping[str, int],
) -> BinaryMatrix:
    """Per-class run-length closing then opening (idempotent as a pair)."""
    values = binary.values.copy()
    for j, name in enumerate(binary.class_names):
        o = int(open_len.get(name, 1))
        c = int(close_len.get(name, 1))
        if o < 1 or c < 1:
            raise ValidationError(f"morphology lengths for {name!r} must be >= 1")
        if o > 1 or c > 1:
            values[:, j] = _close_open_column(values[:, j], c, o)
    return BinaryMatrix(binary.video_id, binary.class_names, values)


def ensure_coverage(
    binary: BinaryMatrix, smoothed_probs: ProbabilityMatrix, taxonomy: LabelTaxonomy
) -> BinaryMatrix:
    """Repair region coverage so exactly one region is active per frame.

    Frames morphology left with no region get the one with maximal smoothed
    probability; frames with several keep only the most probable survivor.
    Ties go to the lower region ordinal.
    """
    cols = [binary.class_names.index(r) for r in taxonomy.regions]
    region_bin = binary.values[:, cols]
    region_probs = _region_probs(smoothed_probs, taxonomy)
    covered = region_bin.any(axis=1)
    among_active = np.argmax(np.where(region_bin, region_probs, -np.inf), axis=1)
    among_all = np.argmax(region_probs, axis=1)
    choice = np.where(covered, among_active, among_all)
    values = binary.values.copy()
    for i, j in enumerate(cols):
        values[:, j] = choice == i
    return BinaryMatrix(binary.video_id, binary.class_names, values)


# ---------------------------------------------------------------------------
# event extraction
# ---------------------------------------------------------------------------


def _run_spans_scores(col: np.ndarray, prob_col: np.ndarray) -> list[tuple[int, int, float]]:
    """(start, end, mean probability) per maximal True run, scored via cumsums."""
    starts, ends = _runs(col)
    if len(starts) == 0:
        return []
    csum = np.concatenate(([0.0], np.cumsum(prob_col, dtype=np.float64)))
    scores = np.clip((csum[ends] - csum[starts]) / (ends - starts), 0.0, 1.0)
    return [(int(s), int(e), float(v)) for s, e, v in zip(starts, ends, scores)]


def _column_events(label: str, col: np.ndarray, prob_col: np.ndarray) -> list[Event]:
    return [Event(label, s, e, v) for s, e, v in _run_spans_scores(col, prob_col)]


def extract_events_per_label(
    binary: BinaryMatrix, smoothed_probs: ProbabilityMatrix
) -> EventSet:
    """One event per maximal per-class positive run, scored by mean probability."""
    if binary.values.shape != smoothed_probs.values.shape:
        raise ShapeError("binary and probability matrices disagree in shape")
    events: list[Event] = []
    for j, name in enumerate(binary.class_names):
        events.extend(_column_events(name, binary.values[:, j], smoothed_probs.values[:, j]))
    return EventSet(binary.video_id, events)


def _tuple_spans(b: np.ndarray, probs: np.ndarray) -> list[tuple[int, int, int, float]]:
    """(column, start, end, score) per active label per constant-label segment."""
    t = b.shape[0]
    changed = np.flatnonzero(np.any(b[1:] != b[:-1], axis=1)) + 1
    bounds = np.concatenate(([0], changed, [t]))
    csum = np.concatenate((np.zeros((1, b.shape[1])), np.cumsum(probs, axis=0)), axis=0)
    out: list[tuple[int, int, int, float]] = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        for j in np.flatnonzero(b[s]):
            score = float(np.clip((csum[e, j] - csum[s, j]) / (e - s), 0.0, 1.0))
            out.append((int(j), int(s), int(e), score))
    return out


def extract_events_tuple(
    binary: BinaryMatrix, smoothed_probs: ProbabilityMatrix, taxonomy: LabelTaxonomy
) -> EventSet:
    """Segment at every change of the joint active-label set (ablation mode).

    Each maximal constant-label-set segment emits one event per active label,
    so events fragment wherever any co-occurring label switches.
    """
    if binary.values.shape != smoothed_probs.values.shape:
        raise ShapeError("binary and probability matrices disagree in shape")
    events = [
        Event(binary.class_names[j], s, e, score)
        for j, s, e, score in _tuple_spans(binary.values, smoothed_probs.values)
    ]
    return EventSet(binary.video_id, events)


# ---------------------------------------------------------------------------
# full decode
# ---------------------------------------------------------------------------


@dataclass
class PreparedVideo:
    """Threshold-independent decode state, reusable across threshold sweeps."""

    smoothed: ProbabilityMatrix
    region_path: np.ndarray
    region_mask: BinaryMatrix
    landmark_near: dict[str, np.ndarray]


def prepare_video(probs: ProbabilityMatrix, config: DecodeConfig) -> PreparedVideo:
    taxonomy = config.taxonomy
    probs.check_taxonomy(taxonomy)
    smoothed = smooth(probs, taxonomy)
    path, mask = resolve_regions(smoothed, taxonomy, config.transit_mode)
    near = {
        name: _within_margin(
            np.isin(path, [taxonomy.region_index(r) for r in valid]), config.landmark_margin
        )
        for name, valid in taxonomy.landmarks.items()
    }
    return PreparedVideo(smoothed, path, mask, near)


def region_block(prep: PreparedVideo, config: DecodeConfig) -> np.ndarray:
    """T x R one-hot region assignment after morphology and coverage repair."""
    taxonomy = config.taxonomy
    bin_regions = morph_refine(prep.region_mask, config.open_len, config.close_len)
    region_probs = _region_probs(prep.smoothed, taxonomy)
    covered = bin_regions.values.any(axis=1)
    among_active = np.argmax(np.where(bin_regions.values, region_probs, -np.inf), axis=1)
    among_all = np.argmax(region_probs, axis=1)
    choice = np.where(covered, among_active, among_all)
    block = np.zeros(region_probs.shape, dtype=bool)
    block[np.arange(block.shape[0]), choice] = True
    return block


def region_events(prep: PreparedVideo, config: DecodeConfig) -> dict[str, list[Event]]:
    """Region events after morphology and coverage repair; threshold-free."""
    taxonomy = config.taxonomy
    block = region_block(prep, config)
    region_probs = _region_probs(prep.smoothed, taxonomy)
    return {
        name: _column_events(name, block[:, i], region_probs[:, i])
        for i, name in enumerate(taxonomy.regions)
    }


def class_column(prep: PreparedVideo, config: DecodeConfig, name: str, tau: float) -> np.ndarray:
    """Binary column for one non-region class at threshold ``tau``."""
    taxonomy = config.taxonomy
    j = prep.smoothed.class_names.index(name)
    col = prep.smoothed.values[:, j] >= tau
    if name in taxonomy.landmarks:
        col &= prep.landmark_near[name]
    return _close_open_column(col, config.close_len.get(name, 1), config.open_len.get(name, 1))


def class_events(prep: PreparedVideo, config: DecodeConfig, name: str, tau: float) -> list[Event]:
    col = class_column(prep, config, name, tau)
    j = prep.smoothed.class_names.index(name)
    return _column_events(name, col, prep.smoothed.values[:, j])


def class_event_spans(
    prep: PreparedVideo, config: DecodeConfig, name: str, tau: float
) -> list[tuple[int, int, float]]:
    """Like class_events but as raw (start, end, score) tuples (hot search path)."""
    col = class_column(prep, config, name, tau)
    j = prep.smoothed.class_names.index(name)
    return _run_spans_scores(col, prep.smoothed.values[:, j])


def decode_prepared(prep: PreparedVideo, config: DecodeConfig) -> EventSet:
    taxonomy = config.taxonomy
    binary = binarize(prep.smoothed, config.thresholds, prep.region_mask, taxonomy)
    binary = gate_landmarks(binary, prep.region_path, taxonomy, config.landmark_margin)
    binary = morph_refine(binary, config.open_len, config.close_len)
    binary = ensure_coverage(binary, prep.smoothed, taxonomy)
    if config.event_mode == "tuple":
        return extract_events_tuple(binary, prep.smoothed, taxonomy)
    return extract_events_per_label(binary, prep.smoothed)


def decode(probs: ProbabilityMatrix, config: DecodeConfig) -> EventSet:
    """Full pipeline: smooth, resolve regions, threshold, gate, refine, extract."""
    return decode_prepared(prepare_video(probs, config), config)


def plain_events(
    probs: ProbabilityMatrix,
    thresholds: Mapping[str, float],
    event_mode: str = "per_label",
    taxonomy: LabelTaxonomy | None = None,
) -> EventSet:
    """Threshold raw probabilities and extract events with no other processing.

    The structured-decoding-off ablation arm: no smoothing, no anatomical
    constraints, no morphology; scores are mean raw probabilities.
    """
    binary = binarize(probs, thresholds)
    if event_mode == "tuple":
        if taxonomy is None:
            raise ValidationError("taxonomy required for tuple extraction")
        return extract_events_tuple(binary, probs, taxonomy)
    return extract_events_per_label(binary, probs)
