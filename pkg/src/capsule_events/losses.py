"""Imbalance-aware multi-label losses with analytic gradients.

Three losses over per-class logits x, probabilities p = sigmoid(x), and
binary targets y, each summed over classes:

* ``bce_pos_weight``  L = -[w * y * log p + (1-y) * log(1-p)] with a
  per-class positive weight w,
* ``focal``           L = -[y * (1-p)^g * log p + (1-y) * p^g * log(1-p)],
* ``asymmetric``      positives as focal with g+, negatives with the shifted
  probability p_m = max(p - m, 0):  L- = -(p_m)^g- * log(1 - p_m).

Gradients are with respect to the logits and differentiate the exact
expressions above (the probability shift contributes a subgradient of 0 at
the clip point).  Everything is computed from logits via log-sigmoid for
numerical stability.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError, ValidationError


@dataclass(frozen=True)
class LossSpec:
    """Which loss to use and its parameters."""

    kind: str = "bce_pos_weight"
    gamma: float = 2.0  # focal
    gamma_pos: float = 0.0  # asymmetric
    gamma_neg: float = 4.0  # asymmetric
    clip: float = 0.05  # asymmetric probability shift on negatives

    def __post_init__(self):
        if self.kind not in ("bce_pos_weight", "focal", "asymmetric"):
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if self.gamma < 0 or self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValidationError("focusing parameters must be >= 0")
        if not (0.0 <= self.clip < 1.0):
            raise ValidationError(f"clip must be in [0, 1), got {self.clip}")

    def to_document(self) -> dict:
        return {
            "kind": self.kind,
            "gamma": self.gamma,
            "gamma_pos": self.gamma_pos,
            "gamma_neg": self.gamma_neg,
            "clip": self.clip,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "LossSpec":
        return cls(**doc)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _bce_elements(x, y, w):
    p = expit(x)
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    loss = -(w * y * log_p + (1.0 - y) * log_q)
    grad = -w * y * (1.0 - p) + (1.0 - y) * p
    return loss, grad


def _focal_elements(x, y, gamma):
    p = expit(x)
    q = 1.0 - p
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    # q^g and p^g via exp(g * log .) so saturated logits stay finite
    q_g = np.exp(gamma * log_q)
    p_g = np.exp(gamma * log_p)
    loss_pos = -q_g * log_p
    loss_neg = -p_g * log_q
    grad_pos = gamma * p * q_g * log_p - q_g * q
    grad_neg = -gamma * q * p_g * log_q + p_g * p
    return (
        y * loss_pos + (1.0 - y) * loss_neg,
        y * grad_pos + (1.0 - y) * grad_neg,
    )


def _asymmetric_elements(x, y, gamma_pos, gamma_neg, clip):
    p = expit(x)
    q = 1.0 - p
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    q_gp = np.exp(gamma_pos * log_q)
    loss_pos = -q_gp * log_p
    grad_pos = gamma_pos * p * q_gp * log_p - q_gp * q

    if clip == 0.0:
        pm, log_qm, q_over_qm = p, log_q, np.ones_like(p)
    else:
        pm = np.clip(p - clip, 0.0, None)
        log_qm = np.log1p(-pm)
        q_over_qm = q / (1.0 - pm)  # 1 - pm >= clip, division safe
    active = pm > 0.0
    safe_pm = np.where(active, pm, 1.0)
    pm_g = np.where(active, safe_pm**gamma_neg, 0.0)
    if gamma_neg > 0.0:
        focus = q * gamma_neg * safe_pm ** (gamma_neg - 1.0) * log_qm
    else:
        focus = 0.0
    loss_neg = -pm_g * log_qm
    grad_neg = np.where(active, p * (pm_g * q_over_qm - focus), 0.0)
    return (
        y * loss_pos + (1.0 - y) * loss_neg,
        y * grad_pos + (1.0 - y) * grad_neg,
    )


def loss_elements(
    spec: LossSpec, logits: np.ndarray, targets: np.ndarray, pos_weight: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise loss and d(loss)/d(logit); shapes follow broadcasting."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("non-finite logits")
    if spec.kind == "bce_pos_weight":
        w = np.ones_like(x) if pos_weight is None else np.asarray(pos_weight, dtype=np.float64)
        if not np.isfinite(w).all() or (w <= 0).any():
            raise NumericError("pos_weight must be finite and positive")
        return _bce_elements(x, y, w)
    if spec.kind == "focal":
        return _focal_elements(x, y, spec.gamma)
    return _asymmetric_elements(x, y, spec.gamma_pos, spec.gamma_neg, spec.clip)


def loss_and_gradient(
    spec: LossSpec,
    logits: np.ndarray,
    targets: np.ndarray,
    pos_weight: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Loss summed over classes and its gradient w.r.t. the logits.

    ``logits`` and ``targets`` are length-C vectors for a single frame;
    ``pos_weight`` applies to ``bce_pos_weight`` only.
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets)
    if x.ndim != 1 or y.shape != x.shape:
        raise ShapeError(f"logits {x.shape} vs targets {np.shape(y)}")
    loss, grad = loss_elements(spec, x, y, pos_weight)
    return float(loss.sum()), grad
