"""Lightweight multi-label classifier heads over fixed per-frame features.

Heads are linear or one-hidden-layer MLPs trained with mini-batch gradient
descent (momentum 0.9, fixed learn rate, Xavier-uniform init).  Diversity
comes from mixing architectures with the three imbalance losses; the default
ensemble is five heads per backbone.  Training is deterministic given the
config seed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .corpus import BinaryMatrix, FeatureTable, ProbabilityMatrix, read_container, write_container
from .errors import FormatError, ShapeError, ValidationError
from .losses import LossSpec, loss_elements

POS_WEIGHT_MAX = 100.0
MOMENTUM = 0.9


@dataclass(frozen=True)
class HeadConfig:
    architecture: str = "linear"  # "linear" | "mlp"
    hidden_width: int = 256
    loss: LossSpec = field(default_factory=LossSpec)
    learn_rate: float = 0.1
    epochs: int = 20
    batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ("linear", "mlp"):
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        if self.hidden_width < 1:
            raise ValidationError("hidden_width must be >= 1")
        if self.learn_rate <= 0:
            raise ValidationError("learn_rate must be positive")
        if self.epochs < 0 or self.batch < 1:
            raise ValidationError("epochs must be >= 0 and batch >= 1")

    def to_document(self) -> dict:
        return {
            "architecture": self.architecture,
            "hidden_width": self.hidden_width,
            "loss": self.loss.to_document(),
            "learn_rate": self.learn_rate,
            "epochs": self.epochs,
            "batch": self.batch,
            "seed": self.seed,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "HeadConfig":
        doc = dict(doc)
        doc["loss"] = LossSpec.from_document(doc["loss"])
        return cls(**doc)


@dataclass
class TrainedHead:
    """Dense parameter blocks plus the config that produced them."""

    weights: list[tuple[np.ndarray, np.ndarray]]  # [(W, b), ...] per layer
    config: HeadConfig
    class_names: tuple[str, ...]
    history: list[float] = field(default_factory=list)  # mean loss per epoch; [0] = init

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        for W, b in self.weights:
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValidationError("head parameters must be finite")
        if self.weights[-1][0].shape[1] != len(self.class_names):
            raise ShapeError("output width must equal the number of classes")

    @property
    def input_dim(self) -> int:
        return self.weights[0][0].shape[0]


def default_head_configs(seed: int = 0, epochs: int = 20, learn_rate: float = 0.1) -> list[HeadConfig]:
    """The five-head ensemble used per backbone unless configured otherwise."""
    combos = [
        ("linear", LossSpec("bce_pos_weight")),
        ("linear", LossSpec("focal", gamma=2.0)),
        ("linear", LossSpec("asymmetric", gamma_pos=0.0, gamma_neg=4.0, clip=0.05)),
        ("mlp", LossSpec("bce_pos_weight")),
        ("mlp", LossSpec("asymmetric", gamma_pos=0.0, gamma_neg=4.0, clip=0.05)),
    ]
    return [
        HeadConfig(architecture=arch, loss=loss, seed=seed + i, epochs=epochs, learn_rate=learn_rate)
        for i, (arch, loss) in enumerate(combos)
    ]


def pos_weight_from_labels(labels: np.ndarray) -> np.ndarray:
    """Per-class (#negative / #positive), clamped to [1, 100]; 1 when no positives."""
    n = labels.shape[0]
    pos = labels.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore"):
        w = np.where(pos > 0, (n - pos) / np.maximum(pos, 1.0), 1.0)
    return np.clip(w, 1.0, POS_WEIGHT_MAX)


def _xavier_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_weights(config: HeadConfig, dim: int, n_classes: int, rng: np.random.Generator):
    if config.architecture == "linear":
        return [(_xavier_init(rng, dim, n_classes), np.zeros(n_classes))]
    hidden = config.hidden_width
    return [
        (_xavier_init(rng, dim, hidden), np.zeros(hidden)),
        (_xavier_init(rng, hidden, n_classes), np.zeros(n_classes)),
    ]


def _forward(weights, X):
    """Returns (logits, hidden activations or None)."""
    if len(weights) == 1:
        W, b = weights[0]
        return X @ W + b, None
    (W1, b1), (W2, b2) = weights
    H = np.maximum(X @ W1 + b1, 0.0)
    return H @ W2 + b2, H


def _mean_loss(spec: LossSpec, weights, X, Y, pos_weight) -> float:
    logits, _ = _forward(weights, X)
    loss, _ = loss_elements(spec, logits, Y, pos_weight)
    return float(loss.sum(axis=1).mean())


def train_head(
    features: Sequence[FeatureTable],
    labels: Sequence[BinaryMatrix],
    config: HeadConfig,
) -> TrainedHead:
    """Train one head on the concatenated frames of all given videos.

    The objective is the per-frame loss (summed over classes) averaged over
    the mini-batch; ``pos_weight`` is computed once from the full label set.
    """
    if len(features) != len(labels) or not features:
        raise ShapeError("need one label matrix per feature table")
    for ft, bm in zip(features, labels):
        if ft.frames != bm.frames:
            raise ShapeError(
                f"video {ft.video_id!r}: {ft.frames} feature rows vs {bm.frames} label rows"
            )
    class_names = labels[0].class_names
    X = np.concatenate([ft.values.astype(np.float64) for ft in features], axis=0)
    Y = np.concatenate([bm.values for bm in labels], axis=0).astype(np.float64)
    n, dim = X.shape
    n_classes = Y.shape[1]
    pos_weight = pos_weight_from_labels(Y)

    rng = np.random.default_rng(config.seed)
    weights = _init_weights(config, dim, n_classes, rng)
    velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights]
    history = [_mean_loss(config.loss, weights, X, Y, pos_weight)]

    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch):
            idx = order[lo : lo + config.batch]
            Xb, Yb = X[idx], Y[idx]
            m = len(idx)
            logits, H = _forward(weights, Xb)
            loss, dlogits = loss_elements(config.loss, logits, Yb, pos_weight)
            epoch_loss += float(loss.sum())
            dZ = dlogits / m
            grads = []
            if len(weights) == 1:
                grads.append((Xb.T @ dZ, dZ.sum(axis=0)))
            else:
                (W1, b1), (W2, b2) = weights
                grads_w2 = (H.T @ dZ, dZ.sum(axis=0))
                dH = (dZ @ W2.T) * (H > 0.0)
                grads = [(Xb.T @ dH, dH.sum(axis=0)), grads_w2]
            new_weights, new_velocity = [], []
            for (W, b), (vW, vb), (gW, gb) in zip(weights, velocity, grads):
                vW = MOMENTUM * vW - config.learn_rate * gW
                vb = MOMENTUM * vb - config.learn_rate * gb
                new_weights.append((W + vW, b + vb))
                new_velocity.append((vW, vb))
            weights, velocity = new_weights, new_velocity
        history.append(epoch_loss / n)

    return TrainedHead(weights, config, class_names, history)


def predict(head: TrainedHead, features: FeatureTable) -> ProbabilityMatrix:
    """Per-frame class probabilities from a trained head (logistic outputs)."""
    X = features.values.astype(np.float64)
    if X.shape[1] != head.input_dim:
        raise ShapeError(
            f"feature width {X.shape[1]} does not match head input width {head.input_dim}"
        )
    logits, _ = _forward(head.weights, X)
    return ProbabilityMatrix(features.video_id, head.class_names, expit(logits))


# ---------------------------------------------------------------------------
# persistence: JSON preamble + one binary block per parameter matrix
# ---------------------------------------------------------------------------


def store_head(head: TrainedHead, path: str | Path) -> None:
    preamble = json.dumps(
        {
            "config": head.config.to_document(),
            "class_names": list(head.class_names),
            "layers": len(head.weights),
            "history": head.history,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(preamble)))
        fh.write(preamble)
        for W, b in head.weights:
            write_container(fh, [], W)
            write_container(fh, [], b.reshape(1, -1))


def load_head(path: str | Path) -> TrainedHead:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated preamble length")
        (plen,) = struct.unpack("<I", raw)
        try:
            meta = json.loads(fh.read(plen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad preamble") from exc
        weights = []
        for _ in range(meta["layers"]):
            _, W = read_container(fh, str(path))
            _, b = read_container(fh, str(path))
            weights.append((np.asarray(W, dtype=np.float64), np.asarray(b[0], dtype=np.float64)))
    return TrainedHead(
        weights,
        HeadConfig.from_document(meta["config"]),
        tuple(meta["class_names"]),
        list(meta.get("history", [])),
    )
