"""Synthetic corpora for desk-scale, fully deterministic verification.

``synth_corpus`` builds videos with a monotone region partition, landmark
windows straddling region boundaries, sparse non-overlapping pathology
events, per-backbone feature tables, and per-head probability matrices
obtained by pushing the (optionally flipped) frame labels through logits
plus head-specific Gaussian noise.  All randomness flows from one seed via
``numpy.random.SeedSequence`` spawn keys, so every artifact is reproducible
independently of generation order.

``skew_corpus`` is a hand-built corpus whose frame-level F1 operating point
(0.30) is far from the event-level one (0.90): pairs of strong events are
connected by probability bridges that only a high threshold severs, while
low-scored bait events anchor the F1 cut.  A local-only threshold search
stays trapped at low thresholds; adding the coarse global grid recovers the
strong operating point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .corpus import (
    AnnotationSet,
    BinaryMatrix,
    Event,
    EventSet,
    FeatureTable,
    ProbabilityMatrix,
    events_from_annotations,
    frames_from_intervals,
)
from .decoding import DecodeConfig
from .errors import ValidationError
from .taxonomy import LabelTaxonomy, default_taxonomy, make_taxonomy

DEFAULT_BACKBONES: dict[str, tuple[float, ...]] = {
    "tempo": (0.25, 0.4, 0.6),
    "spatial": (0.5, 0.8, 1.2),
}


@dataclass(frozen=True)
class SynthParams:
    videos: int = 20
    frames: int = 10000
    taxonomy: LabelTaxonomy | None = None  # default shipped taxonomy
    backbones: Mapping[str, tuple[float, ...]] = field(
        default_factory=lambda: dict(DEFAULT_BACKBONES)
    )
    event_rate: float = 0.4  # expected pathology events per 1000 frames
    event_len: tuple[int, int] = (80, 240)
    event_gap: int = 64  # min frames between same-class events
    landmark_len: tuple[int, int] = (24, 48)
    min_region_len: int = 200
    flip_rate: float = 0.01
    squash_logit: float = 4.0
    feature_extra_dims: int = 4
    feature_noise: float = 0.1
    seed: int = 0
    video_prefix: str = "vid"

    def __post_init__(self):
        if self.videos < 1 or self.frames < 1:
            raise ValidationError("videos and frames must be >= 1")
        if not (0.0 <= self.flip_rate <= 1.0):
            raise ValidationError("flip_rate must be in [0, 1]")
        if self.event_rate < 0:
            raise ValidationError("event_rate must be >= 0")
        for scales in self.backbones.values():
            if any(s < 0 for s in scales):
                raise ValidationError("noise scales must be >= 0")

    def resolve_taxonomy(self) -> LabelTaxonomy:
        return self.taxonomy if self.taxonomy is not None else default_taxonomy()


@dataclass
class SynthCorpus:
    params: SynthParams
    taxonomy: LabelTaxonomy
    video_ids: list[str]
    annotations: dict[str, AnnotationSet]
    gt_events: dict[str, EventSet]
    gt_frames: dict[str, BinaryMatrix]
    features: dict[str, dict[str, FeatureTable]]  # backbone -> video -> table
    head_probs: dict[str, dict[str, dict[str, ProbabilityMatrix]]]  # backbone -> head -> video

    def head_names(self, backbone: str) -> list[str]:
        return sorted(self.head_probs[backbone])


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _region_intervals(
    rng: np.random.Generator, params: SynthParams, taxonomy: LabelTaxonomy
) -> tuple[list[Event], np.ndarray]:
    r = taxonomy.num_regions
    t = params.frames
    min_len = min(params.min_region_len, t // (2 * r)) or 1
    extra = t - r * min_len
    lengths = min_len + rng.multinomial(extra, np.full(r, 1.0 / r))
    bounds = np.concatenate(([0], np.cumsum(lengths)))
    return [
        Event(name, int(bounds[i]), int(bounds[i + 1])) for i, name in enumerate(taxonomy.regions)
    ], bounds


def _landmark_intervals(
    rng: np.random.Generator, params: SynthParams, taxonomy: LabelTaxonomy, bounds: np.ndarray
) -> list[Event]:
    lo, hi = params.landmark_len
    out = []
    for name, valid in taxonomy.landmarks.items():
        ordinals = sorted(taxonomy.region_index(r) for r in valid)
        if len(ordinals) == 2:
            center = int(bounds[ordinals[1]])  # boundary between the two regions
        else:
            center = int(bounds[ordinals[0]]) + int(rng.integers(lo, hi + 1))
        before = int(rng.integers(lo // 2, hi // 2 + 1))
        after = int(rng.integers(lo // 2, hi // 2 + 1))
        start = max(0, center - before)
        end = min(params.frames, center + after)
        if end > start:
            out.append(Event(name, start, end))
    return out


def _pathology_intervals(
    rng: np.random.Generator, params: SynthParams, taxonomy: LabelTaxonomy
) -> list[Event]:
    lo, hi = params.event_len
    t = params.frames
    out = []
    for name in taxonomy.pathologies:
        n = int(rng.poisson(params.event_rate * t / 1000.0))
        if n == 0:
            continue
        lengths = rng.integers(lo, hi + 1, size=n)
        starts = np.sort(rng.integers(0, max(t - hi, 1), size=n))
        prev_end = -params.event_gap
        for s, ln in zip(starts, lengths):
            if s >= prev_end + params.event_gap and s + ln <= t:
                out.append(Event(name, int(s), int(s + ln)))
                prev_end = int(s + ln)
    return out


def synth_corpus(params: SynthParams) -> SynthCorpus:
    """Generate a corpus; bit-identical for identical params."""
    taxonomy = params.resolve_taxonomy()
    n_classes = taxonomy.num_classes
    video_ids = [f"{params.video_prefix}_{i:03d}" for i in range(params.videos)]
    backbone_names = list(params.backbones)

    annotations: dict[str, AnnotationSet] = {}
    gt_events: dict[str, EventSet] = {}
    gt_frames: dict[str, BinaryMatrix] = {}
    features: dict[str, dict[str, FeatureTable]] = {b: {} for b in backbone_names}
    head_probs: dict[str, dict[str, dict[str, ProbabilityMatrix]]] = {
        b: {f"h{m}": {} for m in range(len(scales))} for b, scales in params.backbones.items()
    }

    for vi, vid in enumerate(video_ids):
        rng_v = _rng(params.seed, 0, vi)
        region_iv, bounds = _region_intervals(rng_v, params, taxonomy)
        intervals = (
            region_iv
            + _landmark_intervals(rng_v, params, taxonomy, bounds)
            + _pathology_intervals(rng_v, params, taxonomy)
        )
        ann = AnnotationSet(vid, params.frames, intervals)
        annotations[vid] = ann
        gt_events[vid] = events_from_annotations(ann)
        frames = frames_from_intervals(ann, taxonomy)
        gt_frames[vid] = frames
        y = frames.values

        # flips model hard frames: a per-frame property shared by every head,
        # so fusion cannot average it away (only structured decoding can)
        rng_flip = _rng(params.seed, 1, vi)
        flips = rng_flip.random(y.shape) < params.flip_rate
        y_obs = np.logical_xor(y, flips)
        base_logits = (2.0 * y_obs - 1.0) * params.squash_logit

        for bi, b in enumerate(backbone_names):
            rng_f = _rng(params.seed, 2, bi, vi)
            signal = (2.0 * y - 1.0) * 2.0
            noise_cols = rng_f.normal(0.0, 1.0, (params.frames, params.feature_extra_dims))
            x = np.concatenate(
                [signal + params.feature_noise * rng_f.normal(0.0, 1.0, y.shape), noise_cols],
                axis=1,
            )
            features[b][vid] = FeatureTable(vid, x, backbone_tag=b)
            for mi, scale in enumerate(params.backbones[b]):
                rng_h = _rng(params.seed, 3, bi, mi, vi)
                logits = base_logits
                if scale > 0:
                    logits = logits + rng_h.normal(0.0, scale, y.shape)
                head_probs[b][f"h{mi}"][vid] = ProbabilityMatrix(
                    vid, taxonomy.classes, expit(logits)
                )

    return SynthCorpus(
        params=params,
        taxonomy=taxonomy,
        video_ids=video_ids,
        annotations=annotations,
        gt_events=gt_events,
        gt_frames=gt_frames,
        features=features,
        head_probs=head_probs,
    )


# ---------------------------------------------------------------------------
# calibration-skew corpus
# ---------------------------------------------------------------------------


@dataclass
class SkewCorpus:
    taxonomy: LabelTaxonomy
    probs: list[ProbabilityMatrix]
    gt_events: list[EventSet]
    decode_config: DecodeConfig


def skew_corpus(n_videos: int = 2, frames: int = 2000) -> SkewCorpus:
    """Deterministic corpus where the F1 cut (0.30) misleads a local search.

    Each video holds four pairs of 60-frame events at probability 0.95 whose
    12-frame gaps are bridged at 0.85 (a merged pair has IoU 60/132 < 0.5
    with either ground-truth event), plus two isolated 60-frame events at
    probability 0.30.  Frame F1 peaks at cut 0.30 (full recall, almost no
    false positives), but every threshold below 0.85 leaves the pairs merged;
    only cuts in (0.85, 0.95] detect them, and the nearest global candidate
    is 0.90.
    """
    taxonomy = make_taxonomy(
        ["body"],
        {},
        ["lesion"],
        window_by_kind={"region": 1, "pathology": 1},
    )
    pair_starts = (100, 400, 700, 1000)
    bait_starts = (1400, 1600)
    length, gap = 60, 12
    probs_list, gt_list = [], []
    for v in range(n_videos):
        vid = f"skew_{v:02d}"
        values = np.full((frames, 2), 0.02)
        values[:, 0] = 1.0  # single region covers the whole video
        events = [Event("body", 0, frames)]
        for a in pair_starts:
            for s in (a, a + length + gap):
                values[s : s + length, 1] = 0.95
                events.append(Event("lesion", s, s + length))
            values[a + length : a + length + gap, 1] = 0.85
        for s in bait_starts:
            values[s : s + length, 1] = 0.30
            events.append(Event("lesion", s, s + length))
        probs_list.append(ProbabilityMatrix(vid, taxonomy.classes, values))
        gt_list.append(EventSet(vid, events))
    config = DecodeConfig.defaults(
        taxonomy, morphology={"region": (1, 1), "pathology": (1, 1)}
    )
    return SkewCorpus(taxonomy, probs_list, gt_list, config)
