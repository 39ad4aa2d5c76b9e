"""End-to-end orchestration: train, fuse, calibrate, search, decode, evaluate.

The pipeline operates on an in-memory :class:`CorpusBundle` (head
probability matrices per backbone, ground-truth events, optional features
for head training) plus :class:`PipelineOptions`.  A JSON config file can
describe both; all paths inside it resolve relative to the config file.

``run_pipeline`` executes the stages in order, persists every intermediate
artifact when an output directory is given, and emits a versioned JSON
report.  With ``ablation`` enabled the report also contains one row per
configuration axis: each single backbone, fusion weighting variants
(uniform vs validation-weighted at head and backbone level), tuple-based
event generation, and plain thresholding without structured decoding.
Every ablation row re-fits its temperature and re-searches its thresholds
so rows are compared at their own operating points.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import (
    AnnotationSet,
    BinaryMatrix,
    Event,
    EventSet,
    FeatureTable,
    ProbabilityMatrix,
    frames_from_intervals,
    load_annotations,
    load_events,
    load_feature_table,
    load_probability_matrix,
    store_events,
    store_probability_matrix,
)
from .decoding import DecodeConfig, decode, plain_events
from .errors import ValidationError
from .fusion import (
    DEFAULT_TEMPERATURE_GRID,
    FusionProfile,
    apply_fusion,
    backbone_weights,
    fit_temperature,
    fuse_backbones,
    fuse_heads,
    head_weights,
    store_fusion_profile,
    temperature_scale,
    uniform_alpha,
    uniform_beta,
)
from .heads import HeadConfig, default_head_configs, predict, store_head, train_head
from .metrics import frame_ap_report, temporal_map
from .taxonomy import LabelTaxonomy, load_taxonomy
from .thresholds import (
    ThresholdProfile,
    default_thresholds,
    optimize,
    store_threshold_profile,
)

REPORT_SCHEMA_VERSION = 1


class StageError(RuntimeError):
    """Failure attributed to one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CorpusBundle:
    """Everything the pipeline consumes, already in memory."""

    taxonomy: LabelTaxonomy
    val_ids: list[str]
    test_ids: list[str]
    head_probs: dict[str, dict[str, dict[str, ProbabilityMatrix]]]  # backbone -> head -> video
    gt_events: dict[str, EventSet]
    train_ids: list[str] = field(default_factory=list)
    features: dict[str, dict[str, FeatureTable]] = field(default_factory=dict)
    frames: dict[str, int] = field(default_factory=dict)
    _gt_cache: dict[str, BinaryMatrix] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.val_ids or not self.test_ids:
            raise ValidationError("val and test splits must be non-empty")
        if not self.frames:
            self.frames = {}
            for heads in self.head_probs.values():
                for mats in heads.values():
                    for vid, pm in mats.items():
                        self.frames.setdefault(vid, pm.frames)

    @property
    def backbones(self) -> list[str]:
        return list(self.head_probs)

    def frame_gt(self, vid: str) -> BinaryMatrix:
        if vid not in self._gt_cache:
            events = self.gt_events.get(vid)
            intervals = [Event(e.label, e.start, e.end) for e in (events.events if events else [])]
            ann = AnnotationSet(vid, self.frames[vid], intervals)
            self._gt_cache[vid] = frames_from_intervals(ann, self.taxonomy)
        return self._gt_cache[vid]

    @classmethod
    def from_synth(cls, corpus, val_fraction: float = 0.5) -> "CorpusBundle":
        """Split a synthetic corpus into validation and test halves."""
        n_val = max(1, int(round(len(corpus.video_ids) * val_fraction)))
        if n_val >= len(corpus.video_ids):
            n_val = len(corpus.video_ids) - 1
        return cls(
            taxonomy=corpus.taxonomy,
            val_ids=corpus.video_ids[:n_val],
            test_ids=corpus.video_ids[n_val:],
            head_probs=corpus.head_probs,
            gt_events=corpus.gt_events,
            features=corpus.features,
            frames={vid: corpus.params.frames for vid in corpus.video_ids},
        )


@dataclass
class PipelineOptions:
    head_weighting: str = "ap"  # "ap" | "uniform"
    backbone_weighting: str = "map"  # "map" | "uniform"
    temperature_grid: tuple[float, ...] = DEFAULT_TEMPERATURE_GRID
    morphology: Mapping[str, tuple[int, int]] | None = None
    landmark_margin: int = 15
    transit_mode: str = "dp"
    event_mode: str = "per_label"
    threshold_mode: str = "local_plus_global"  # "local" | "local_plus_global" | "fixed"
    fixed_threshold: float = 0.5
    sweeps: int = 1
    train: bool = False
    head_configs: Mapping[str, Sequence[HeadConfig]] = field(default_factory=dict)
    ablation: bool = True
    iou_thresholds: tuple[float, ...] = (0.5, 0.95)
    seed: int = 0

    def __post_init__(self):
        if self.head_weighting not in ("ap", "uniform"):
            raise ValidationError(f"unknown head weighting {self.head_weighting!r}")
        if self.backbone_weighting not in ("map", "uniform"):
            raise ValidationError(f"unknown backbone weighting {self.backbone_weighting!r}")
        if self.threshold_mode not in ("local", "local_plus_global", "fixed"):
            raise ValidationError(f"unknown threshold mode {self.threshold_mode!r}")

    def decode_config(self, taxonomy: LabelTaxonomy, thresholds=None, event_mode=None) -> DecodeConfig:
        return DecodeConfig.defaults(
            taxonomy,
            thresholds=thresholds,
            morphology=self.morphology,
            landmark_margin=self.landmark_margin,
            transit_mode=self.transit_mode,
            event_mode=event_mode or self.event_mode,
        )

    def to_document(self) -> dict:
        return {
            "head_weighting": self.head_weighting,
            "backbone_weighting": self.backbone_weighting,
            "temperature_grid": list(self.temperature_grid),
            "morphology": {k: list(v) for k, v in self.morphology.items()} if self.morphology else None,
            "landmark_margin": self.landmark_margin,
            "transit_mode": self.transit_mode,
            "event_mode": self.event_mode,
            "threshold_mode": self.threshold_mode,
            "fixed_threshold": self.fixed_threshold,
            "sweeps": self.sweeps,
            "train": self.train,
            "head_configs": {
                b: [hc.to_document() for hc in cfgs] for b, cfgs in self.head_configs.items()
            },
            "ablation": self.ablation,
            "iou_thresholds": list(self.iou_thresholds),
            "seed": self.seed,
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "PipelineOptions":
        doc = dict(doc)
        if doc.get("morphology"):
            doc["morphology"] = {k: tuple(v) for k, v in doc["morphology"].items()}
        doc["temperature_grid"] = tuple(doc.get("temperature_grid", DEFAULT_TEMPERATURE_GRID))
        doc["iou_thresholds"] = tuple(doc.get("iou_thresholds", (0.5, 0.95)))
        doc["head_configs"] = {
            b: [HeadConfig.from_document(h) for h in cfgs]
            for b, cfgs in (doc.get("head_configs") or {}).items()
        }
        return cls(**doc)


# ---------------------------------------------------------------------------
# stage helpers
# ---------------------------------------------------------------------------


def _train_stage(bundle: CorpusBundle, options: PipelineOptions, out_dir: Path | None):
    """Replace head probabilities with predictions from freshly trained heads."""
    train_ids = bundle.train_ids or bundle.val_ids
    labels = {vid: bundle.frame_gt(vid) for vid in train_ids}
    new_probs: dict[str, dict[str, dict[str, ProbabilityMatrix]]] = {}
    for bi, b in enumerate(bundle.backbones):
        if b not in bundle.features:
            raise ValidationError(f"training requested but no features for backbone {b!r}")
        configs = list(options.head_configs.get(b, default_head_configs(options.seed + 100 * bi)))
        feats = bundle.features[b]
        new_probs[b] = {}
        for mi, cfg in enumerate(configs):
            head = train_head([feats[v] for v in train_ids], [labels[v] for v in train_ids], cfg)
            name = f"h{mi}"
            new_probs[b][name] = {
                vid: predict(head, feats[vid]) for vid in bundle.val_ids + bundle.test_ids
            }
            if out_dir is not None:
                hd = out_dir / "heads"
                hd.mkdir(parents=True, exist_ok=True)
                store_head(head, hd / f"{b}_{name}.head")
    return new_probs


class _FusionCache:
    """Validation artifacts shared across ablation variants.

    Per-head validation AP and per-backbone head-fused matrices depend only
    on the head matrices and the weighting kind, so each is computed once.
    """

    def __init__(self, bundle: CorpusBundle, head_probs):
        self.bundle = bundle
        self.head_probs = head_probs
        self.val_gt = [bundle.frame_gt(v) for v in bundle.val_ids]
        self._head_ap: dict[str, dict[str, dict]] = {}
        self._alpha: dict[tuple[str, str], dict] = {}
        self._fused_val: dict[tuple[str, str], list[ProbabilityMatrix]] = {}
        self._backbone_map: dict[tuple[str, str], float] = {}

    def head_names(self, b: str) -> list[str]:
        return sorted(self.head_probs[b])

    def head_ap(self, b: str) -> dict[str, dict]:
        if b not in self._head_ap:
            self._head_ap[b] = {
                h: frame_ap_report(
                    [self.head_probs[b][h][v] for v in self.bundle.val_ids], self.val_gt
                ).per_class_ap
                for h in self.head_names(b)
            }
        return self._head_ap[b]

    def alpha_for(self, b: str, kind: str) -> dict:
        key = (b, kind)
        if key not in self._alpha:
            if kind == "ap":
                self._alpha[key] = head_weights({b: self.head_ap(b)})[b]
            else:
                self._alpha[key] = uniform_alpha(
                    {b: self.head_names(b)}, self.bundle.taxonomy.classes
                )[b]
        return self._alpha[key]

    def fused_val(self, b: str, kind: str) -> list[ProbabilityMatrix]:
        key = (b, kind)
        if key not in self._fused_val:
            alpha_b = self.alpha_for(b, kind)
            self._fused_val[key] = [
                fuse_heads(
                    {h: self.head_probs[b][h][v] for h in self.head_names(b)}, alpha_b
                )
                for v in self.bundle.val_ids
            ]
        return self._fused_val[key]

    def backbone_map(self, b: str, kind: str) -> float:
        key = (b, kind)
        if key not in self._backbone_map:
            self._backbone_map[key] = (
                frame_ap_report(self.fused_val(b, kind), self.val_gt).map or 0.0
            )
        return self._backbone_map[key]


def _fusion_stage(
    cache: _FusionCache,
    head_weighting: str,
    backbone_weighting: str,
    temperature_grid: Sequence[float],
    backbones: Sequence[str],
) -> FusionProfile:
    """Fit alpha/beta/temperature on the validation split."""
    alpha = {b: cache.alpha_for(b, head_weighting) for b in backbones}
    if backbone_weighting == "map":
        beta = backbone_weights({b: cache.backbone_map(b, head_weighting) for b in backbones})
    else:
        beta = uniform_beta(list(backbones))
    dual_val = [
        fuse_backbones(
            {b: cache.fused_val(b, head_weighting)[i] for b in backbones}, beta
        )
        for i in range(len(cache.bundle.val_ids))
    ]
    temperature = fit_temperature(dual_val, cache.val_gt, temperature_grid)
    return FusionProfile(alpha=alpha, beta=beta, temperature=temperature)


def _fused_matrices(
    bundle: CorpusBundle,
    head_probs,
    profile: FusionProfile,
    vids: Sequence[str],
    backbones: Sequence[str],
) -> list[ProbabilityMatrix]:
    out = []
    for v in vids:
        per_backbone = {
            b: {h: head_probs[b][h][v] for h in profile.alpha[b]} for b in backbones
        }
        out.append(apply_fusion(per_backbone, profile))
    return out


def _threshold_stage(
    bundle: CorpusBundle,
    options: PipelineOptions,
    fused_val: Sequence[ProbabilityMatrix],
    event_mode: str,
    structured: bool = True,
) -> ThresholdProfile:
    if options.threshold_mode == "fixed":
        return default_thresholds(bundle.taxonomy, options.fixed_threshold)
    val_gt_events = [bundle.gt_events.get(v, EventSet(v)) for v in bundle.val_ids]
    config = options.decode_config(bundle.taxonomy, event_mode=event_mode)
    decode_fn = None
    if not structured:
        decode_fn = lambda pm, taus: plain_events(pm, taus, event_mode, bundle.taxonomy)
    return optimize(
        fused_val,
        val_gt_events,
        config,
        mode=options.threshold_mode,
        sweeps=options.sweeps,
        decode_fn=decode_fn,
    )


def _decode_and_score(
    bundle: CorpusBundle,
    options: PipelineOptions,
    fused_test: Sequence[ProbabilityMatrix],
    thresholds: ThresholdProfile,
    event_mode: str,
    structured: bool = True,
):
    if structured:
        config = options.decode_config(
            bundle.taxonomy, thresholds=thresholds.final, event_mode=event_mode
        )
        preds = [decode(pm, config) for pm in fused_test]
    else:
        preds = [
            plain_events(pm, thresholds.final, event_mode, bundle.taxonomy) for pm in fused_test
        ]
    gts = [bundle.gt_events.get(pm.video_id, EventSet(pm.video_id)) for pm in fused_test]
    report = temporal_map(preds, gts, options.iou_thresholds, bundle.taxonomy)
    return preds, report


def _metrics_doc(report) -> dict:
    return {
        f"{thr:g}": {
            "map": ap.map,
            "per_class": {k: v for k, v in sorted(ap.per_class_ap.items())},
        }
        for thr, ap in report.per_threshold.items()
    }


def _run_variant(
    bundle: CorpusBundle,
    options: PipelineOptions,
    head_probs,
    backbones: Sequence[str],
    head_weighting: str,
    backbone_weighting: str,
    event_mode: str,
    structured: bool,
):
    """One complete configuration: fuse, calibrate, search, decode, score."""
    profile = _fusion_stage(
        bundle, head_probs, head_weighting, backbone_weighting, options.temperature_grid, backbones
    )
    fused_val = _fused_matrices(bundle, head_probs, profile, bundle.val_ids, backbones)
    thresholds = _threshold_stage(bundle, options, fused_val, event_mode, structured)
    fused_test = _fused_matrices(bundle, head_probs, profile, bundle.test_ids, backbones)
    preds, report = _decode_and_score(
        bundle, options, fused_test, thresholds, event_mode, structured
    )
    return profile, thresholds, preds, report


def run_pipeline(
    bundle: CorpusBundle, options: PipelineOptions, out_dir: str | Path | None = None
) -> dict:
    """Execute all stages and return the JSON-ready report."""
    started = time.perf_counter()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    head_probs = bundle.head_probs
    if options.train:
        try:
            head_probs = _train_stage(bundle, options, out_path)
        except Exception as exc:
            raise StageError("train", exc) from exc

    backbones = list(head_probs)
    try:
        profile, thresholds, preds, test_report = _run_variant(
            bundle,
            options,
            head_probs,
            backbones,
            options.head_weighting,
            options.backbone_weighting,
            options.event_mode,
            structured=True,
        )
    except StageError:
        raise
    except Exception as exc:
        raise StageError("fuse_calibrate_search_decode", exc) from exc

    report: dict = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": options.seed,
        "splits": {"val": bundle.val_ids, "test": bundle.test_ids},
        "fusion": profile.to_document(),
        "thresholds": {
            "mode": options.threshold_mode,
            "init": thresholds.init,
            "final": thresholds.final,
            "objective_value": thresholds.objective_value,
        },
        "test_metrics": _metrics_doc(test_report),
    }

    if options.ablation:
        try:
            report["ablation"] = _ablation_stage(
                bundle, options, head_probs, backbones, profile, thresholds, test_report
            )
        except Exception as exc:
            raise StageError("ablation", exc) from exc

    if out_path is not None:
        try:
            store_fusion_profile(profile, out_path / "fusion_profile.json")
            store_threshold_profile(thresholds, out_path / "threshold_profile.json")
            fused_dir = out_path / "fused"
            fused_dir.mkdir(exist_ok=True)
            for pm in _fused_matrices(
                bundle, head_probs, profile, bundle.val_ids + bundle.test_ids, backbones
            ):
                store_probability_matrix(pm, fused_dir / f"{pm.video_id}.vsta")
            store_events(preds, out_path / "events_pred.json")
            with open(out_path / "report.json", "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=1)
                fh.write("\n")
        except Exception as exc:
            raise StageError("persist", exc) from exc

    report["elapsed_seconds"] = round(time.perf_counter() - started, 3)
    return report


def _ablation_stage(
    bundle: CorpusBundle,
    options: PipelineOptions,
    head_probs,
    backbones: Sequence[str],
    main_profile: FusionProfile,
    main_thresholds: ThresholdProfile,
    main_report,
) -> list[dict]:
    rows: list[dict] = []

    def add_row(name, bbs, head_w, backbone_w, event_mode, structured, precomputed=None):
        if precomputed is None:
            _, _, _, rep = _run_variant(
                bundle, options, head_probs, bbs, head_w, backbone_w, event_mode, structured
            )
        else:
            rep = precomputed
        decoding = (
            ("full_ated_" + event_mode) if structured else (event_mode + "_events_only")
        )
        rows.append(
            {
                "name": name,
                "backbones": list(bbs),
                "head_weighting": head_w,
                "backbone_weighting": backbone_w,
                "decoding": decoding,
                "metrics": {
                    f"{thr:g}": rep.per_threshold[thr].map for thr in options.iou_thresholds
                },
            }
        )

    for b in backbones:
        add_row(f"single_{b}", [b], "ap", "map", "per_label", True)
    if len(backbones) > 1:
        add_row("dual_no_ated", backbones, "ap", "map", "per_label", False)
        add_row("dual_tuple", backbones, "ap", "map", "tuple", True)
        add_row("dual_uniform_uniform", backbones, "uniform", "uniform", "per_label", True)
        add_row("dual_uniform_map", backbones, "uniform", "map", "per_label", True)
        add_row("dual_ap_uniform", backbones, "ap", "uniform", "per_label", True)
        main_matches = (
            options.head_weighting == "ap"
            and options.backbone_weighting == "map"
            and options.event_mode == "per_label"
        )
        add_row(
            "dual_ap_map",
            backbones,
            "ap",
            "map",
            "per_label",
            True,
            precomputed=main_report if main_matches else None,
        )
    return rows


# ---------------------------------------------------------------------------
# config file loading
# ---------------------------------------------------------------------------


def load_pipeline_config(path: str | Path):
    """Read a pipeline config JSON into (bundle, options).

    Relative paths resolve against the config file's directory.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    taxonomy = load_taxonomy(resolve(doc["taxonomy"]))
    gt = load_events(resolve(doc["gt_events"]))
    splits = doc.get("splits", {})
    videos = doc["videos"]

    head_probs: dict[str, dict[str, dict[str, ProbabilityMatrix]]] = {}
    features: dict[str, dict[str, FeatureTable]] = {}
    frames: dict[str, int] = {}
    for vid, spec in videos.items():
        frames[vid] = int(spec["frames"])
        for b, heads in spec.get("head_probs", {}).items():
            for h, rel in heads.items():
                pm = load_probability_matrix(resolve(rel), video_id=vid)
                head_probs.setdefault(b, {}).setdefault(h, {})[vid] = pm
        for b, rel in spec.get("features", {}).items():
            features.setdefault(b, {})[vid] = load_feature_table(
                resolve(rel), video_id=vid, backbone_tag=b
            )

    bundle = CorpusBundle(
        taxonomy=taxonomy,
        val_ids=list(splits.get("val", [])),
        test_ids=list(splits.get("test", [])),
        train_ids=list(splits.get("train", [])),
        head_probs=head_probs,
        gt_events={vid: es for vid, es in gt.items()},
        features=features,
        frames=frames,
    )
    options = PipelineOptions.from_document(doc.get("options", {}))
    return bundle, options


def write_corpus_tree(corpus, out_dir: str | Path, val_fraction: float = 0.5, options: PipelineOptions | None = None) -> Path:
    """Persist a synthetic corpus as the on-disk layout plus a pipeline config.

    Returns the path of the written config file.
    """
    from .corpus import store_annotations
    from .taxonomy import store_taxonomy

    out = Path(out_dir)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    store_taxonomy(corpus.taxonomy, out / "taxonomy.json")
    store_events(corpus.gt_events.values(), out / "gt_events.json")

    videos_doc: dict[str, dict] = {}
    for vid in corpus.video_ids:
        store_annotations(corpus.annotations[vid], out / "annotations" / f"{vid}.json")
        videos_doc[vid] = {
            "frames": corpus.params.frames,
            "annotations": f"annotations/{vid}.json",
            "head_probs": {},
            "features": {},
        }
    for b, heads in corpus.head_probs.items():
        for h, mats in heads.items():
            d = out / "probs" / b / h
            d.mkdir(parents=True, exist_ok=True)
            for vid, pm in mats.items():
                store_probability_matrix(pm, d / f"{vid}.vsta")
                videos_doc[vid]["head_probs"].setdefault(b, {})[h] = f"probs/{b}/{h}/{vid}.vsta"
    for b, tables in corpus.features.items():
        d = out / "features" / b
        d.mkdir(parents=True, exist_ok=True)
        for vid, ft in tables.items():
            from .corpus import store_feature_table

            store_feature_table(ft, d / f"{vid}.vsta")
            videos_doc[vid]["features"][b] = f"features/{b}/{vid}.vsta"

    n_val = max(1, int(round(len(corpus.video_ids) * val_fraction)))
    if n_val >= len(corpus.video_ids):
        n_val = len(corpus.video_ids) - 1
    doc = {
        "schema_version": 1,
        "taxonomy": "taxonomy.json",
        "gt_events": "gt_events.json",
        "splits": {
            "val": corpus.video_ids[:n_val],
            "test": corpus.video_ids[n_val:],
        },
        "videos": videos_doc,
        "options": (options or PipelineOptions(seed=corpus.params.seed)).to_document(),
    }
    config_path = out / "pipeline.json"
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return config_path
