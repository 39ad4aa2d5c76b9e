"""Validation-guided weighted fusion of head and backbone probabilities.

Head weights are per-class validation AP normalized over the heads of one
backbone; backbone weights are validation frame-level mAP normalized over
backbones; both fall back to uniform when every score is zero or undefined.
The fused matrix is recalibrated by temperature scaling
``p ~ sigmoid(logit(p) / T)`` with T picked by grid search.

The temperature objective is mean per-frame multi-label binary cross-entropy
on the validation split.  Frame AP is provably invariant under temperature
(it only reorders nothing), so a ranking objective would be flat; NLL is the
standard calibration criterion and is documented here as the swappable choice.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from .corpus import BinaryMatrix, ProbabilityMatrix
from .errors import ShapeError, ValidationError
from .metrics import frame_ap_report

LOGIT_EPS = 1e-7
DEFAULT_TEMPERATURE_GRID = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0)

# alpha[backbone][head][class] -> weight; beta[backbone] -> weight
AlphaMap = dict[str, dict[str, dict[str, float]]]
BetaMap = dict[str, float]


@dataclass
class FusionProfile:
    alpha: AlphaMap
    beta: BetaMap
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        for b, heads in self.alpha.items():
            per_class: dict[str, float] = {}
            for weights in heads.values():
                for c, w in weights.items():
                    per_class[c] = per_class.get(c, 0.0) + w
            for c, total in per_class.items():
                if abs(total - 1.0) > 1e-9:
                    raise ValidationError(
                        f"alpha weights for backbone {b!r} class {c!r} sum to {total}, not 1"
                    )
        total_beta = sum(self.beta.values())
        if self.beta and abs(total_beta - 1.0) > 1e-9:
            raise ValidationError(f"beta weights sum to {total_beta}, not 1")

    def to_document(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "temperature": self.temperature}

    @classmethod
    def from_document(cls, doc: dict) -> "FusionProfile":
        return cls(alpha=doc["alpha"], beta=doc["beta"], temperature=float(doc["temperature"]))


def store_fusion_profile(profile: FusionProfile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile.to_document(), fh, indent=1)
        fh.write("\n")


def load_fusion_profile(path: str | Path) -> FusionProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return FusionProfile.from_document(json.load(fh))


# ---------------------------------------------------------------------------
# weight fitting
# ---------------------------------------------------------------------------


def head_weights(val_ap: Mapping[str, Mapping[str, Mapping[str, float | None]]]) -> AlphaMap:
    """Normalize per-class validation AP into head weights per backbone.

    ``val_ap[backbone][head][class]`` is the class AP or None when undefined.
    Classes where every head's AP is undefined or zero get uniform weights.
    """
    alpha: AlphaMap = {}
    for b, heads in val_ap.items():
        if not heads:
            raise ValidationError(f"backbone {b!r} has no heads")
        head_names = list(heads)
        classes = set()
        for per_class in heads.values():
            classes.update(per_class)
        alpha[b] = {m: {} for m in head_names}
        for c in classes:
            aps = np.array(
                [max(float(heads[m].get(c) or 0.0), 0.0) for m in head_names], dtype=np.float64
            )
            if (aps < 0).any() or (aps > 1).any():
                raise ValidationError("AP values must lie in [0, 1]")
            total = aps.sum()
            if total > 0:
                weights = aps / total
            else:
                weights = np.full(len(head_names), 1.0 / len(head_names))
            for m, w in zip(head_names, weights):
                alpha[b][m][c] = float(w)
    return alpha


def backbone_weights(val_map: Mapping[str, float]) -> BetaMap:
    """Normalize validation frame mAP into backbone weights (uniform fallback)."""
    if not val_map:
        raise ValidationError("no backbones given")
    names = list(val_map)
    scores = np.array([float(val_map[b]) for b in names], dtype=np.float64)
    if (scores < 0).any() or (scores > 1).any():
        raise ValidationError("mAP values must lie in [0, 1]")
    total = scores.sum()
    if total > 0:
        weights = scores / total
    else:
        weights = np.full(len(names), 1.0 / len(names))
    return {b: float(w) for b, w in zip(names, weights)}


def uniform_alpha(head_names_by_backbone: Mapping[str, Sequence[str]], class_names: Sequence[str]) -> AlphaMap:
    """Equal head weights; the uniform-fusion ablation arm."""
    return {
        b: {m: {c: 1.0 / len(heads) for c in class_names} for m in heads}
        for b, heads in head_names_by_backbone.items()
    }


def uniform_beta(backbones: Sequence[str]) -> BetaMap:
    return {b: 1.0 / len(backbones) for b in backbones}


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _weighted_sum(
    mats: Mapping[str, ProbabilityMatrix], weights_per_key: Mapping[str, np.ndarray]
) -> ProbabilityMatrix:
    first = next(iter(mats.values()))
    out = np.zeros_like(first.values)
    for key, pm in mats.items():
        if pm.values.shape != first.values.shape or pm.class_names != first.class_names:
            raise ShapeError(f"matrix for {key!r} does not match the others")
        out += pm.values * weights_per_key[key]
    return ProbabilityMatrix(first.video_id, first.class_names, np.clip(out, 0.0, 1.0))


def fuse_heads(per_head: Mapping[str, ProbabilityMatrix], alpha_b: Mapping[str, Mapping[str, float]]) -> ProbabilityMatrix:
    """Convex per-class combination of one backbone's head outputs."""
    if not per_head:
        raise ValidationError("no head matrices given")
    first = next(iter(per_head.values()))
    weights = {}
    for m in per_head:
        if m not in alpha_b:
            raise ValidationError(f"no weights for head {m!r}")
        weights[m] = np.array([alpha_b[m][c] for c in first.class_names], dtype=np.float64)
    return _weighted_sum(per_head, weights)


def fuse_backbones(per_backbone: Mapping[str, ProbabilityMatrix], beta: BetaMap) -> ProbabilityMatrix:
    """Convex combination of backbone-fused matrices."""
    if not per_backbone:
        raise ValidationError("no backbone matrices given")
    weights = {}
    for b, pm in per_backbone.items():
        if b not in beta:
            raise ValidationError(f"no weight for backbone {b!r}")
        weights[b] = np.full(pm.num_classes, beta[b], dtype=np.float64)
    return _weighted_sum(per_backbone, weights)


def temperature_scale(pm: ProbabilityMatrix, temperature: float) -> ProbabilityMatrix:
    """Monotone recalibration sigmoid(logit(p) / T); identity at T=1 up to the clamp."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    clamped = np.clip(pm.values, LOGIT_EPS, 1.0 - LOGIT_EPS)
    scaled = expit(logit(clamped) / temperature)
    return ProbabilityMatrix(pm.video_id, pm.class_names, scaled)


def _mean_bce(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, LOGIT_EPS, 1.0 - LOGIT_EPS)
    ll = np.where(labels, np.log(p), np.log1p(-p))
    return float(-ll.mean())


def fit_temperature(
    val_probs: Sequence[ProbabilityMatrix],
    val_gt: Sequence[BinaryMatrix],
    grid: Sequence[float] = DEFAULT_TEMPERATURE_GRID,
) -> float:
    """Grid-search T minimizing validation NLL; ties go to the T nearest 1."""
    if not grid:
        raise ValidationError("temperature grid is empty")
    if len(val_probs) != len(val_gt) or not val_probs:
        raise ShapeError("need matching probability and label matrices")
    probs = np.concatenate([pm.values for pm in val_probs], axis=0)
    labels = np.concatenate([bm.values for bm in val_gt], axis=0)
    if probs.shape != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} vs labels {labels.shape}")
    logits = logit(np.clip(probs, LOGIT_EPS, 1.0 - LOGIT_EPS))
    best_t, best_key = None, None
    for t in grid:
        if t <= 0:
            raise ValidationError(f"temperature must be positive, got {t}")
        nll = _mean_bce(expit(logits / t), labels)
        key = (nll, abs(t - 1.0), t)
        if best_key is None or key < best_key:
            best_key, best_t = key, float(t)
    return best_t


def apply_fusion(
    per_backbone_heads: Mapping[str, Mapping[str, ProbabilityMatrix]],
    profile: FusionProfile,
) -> ProbabilityMatrix:
    """Full fusion for one video: heads -> backbones -> temperature."""
    per_backbone = {
        b: fuse_heads(heads, profile.alpha[b]) for b, heads in per_backbone_heads.items()
    }
    fused = fuse_backbones(per_backbone, profile.beta)
    return temperature_scale(fused, profile.temperature)
