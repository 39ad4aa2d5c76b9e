"""Label taxonomy: anatomical regions, landmarks, and pathology classes.

The taxonomy partitions the full class list into three kinds:

* regions    -- mutually exclusive anatomical segments in transit order
                (first entry is entered first, last entry last),
* landmarks  -- transition structures valid only near specific regions,
* pathologies -- everything else; multi-label, possibly overlapping regions.

It is a data file, not code: decoding logic stays independent of any one
dataset's label inventory.  Instances are immutable after load and safe to
share across workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .errors import FormatError, TaxonomyError, ValidationError

_REQUIRED_KEYS = ("classes", "regions", "landmarks", "pathologies", "smoothing_window")


@dataclass(frozen=True)
class LabelTaxonomy:
    """Ordered label space plus the anatomical structure used by decoding.

    ``classes`` fixes the column order of every probability/binary matrix
    that is used together with this taxonomy.
    """

    classes: tuple[str, ...]
    regions: tuple[str, ...]
    landmarks: Mapping[str, frozenset[str]]
    pathologies: tuple[str, ...]
    smoothing_window: Mapping[str, int]
    _region_ord: Mapping[str, int] = field(init=False, repr=False, compare=False)
    _class_ord: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_region_ord", {r: i for i, r in enumerate(self.regions)})
        object.__setattr__(self, "_class_ord", {c: i for i, c in enumerate(self.classes)})
        self._validate()

    def _validate(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise TaxonomyError("duplicate class names")
        if len(self.regions) < 1:
            raise TaxonomyError("at least one region is required")
        region_set = set(self.regions)
        landmark_set = set(self.landmarks)
        pathology_set = set(self.pathologies)
        pieces = [region_set, landmark_set, pathology_set]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = pieces[i] & pieces[j]
                if overlap:
                    raise TaxonomyError(f"classes in more than one kind: {sorted(overlap)}")
        union = region_set | landmark_set | pathology_set
        if union != set(self.classes):
            raise TaxonomyError(
                f"regions+landmarks+pathologies must partition classes; "
                f"mismatch on {sorted(union ^ set(self.classes))}"
            )
        for name, valid in self.landmarks.items():
            if not valid:
                raise TaxonomyError(f"landmark {name!r} has an empty valid-region set")
            unknown = valid - region_set
            if unknown:
                raise TaxonomyError(f"landmark {name!r} references unknown regions {sorted(unknown)}")
            if len(valid) > 2:
                raise TaxonomyError(f"landmark {name!r} lists more than two valid regions")
            if len(valid) == 2:
                a, b = sorted(self._region_ord[r] for r in valid)
                if b - a != 1:
                    raise TaxonomyError(
                        f"landmark {name!r} valid regions are not adjacent in transit order"
                    )
        for name, win in self.smoothing_window.items():
            if name not in self._class_ord:
                raise TaxonomyError(f"smoothing window for unknown class {name!r}")
            if not isinstance(win, int) or win < 1 or win % 2 == 0:
                raise ValidationError(f"smoothing window for {name!r} must be odd and >= 1, got {win}")
        missing = set(self.classes) - set(self.smoothing_window)
        if missing:
            raise ValidationError(f"classes without a smoothing window: {sorted(missing)}")

    # -- lookups -------------------------------------------------------

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    def class_index(self, name: str) -> int:
        try:
            return self._class_ord[name]
        except KeyError:
            raise TaxonomyError(f"unknown class {name!r}") from None

    def region_index(self, name: str) -> int | None:
        """Ordinal in transit order for region classes, None otherwise."""
        if name not in self._class_ord:
            raise TaxonomyError(f"unknown class {name!r}")
        return self._region_ord.get(name)

    def kind(self, name: str) -> str:
        """'region', 'landmark', or 'pathology'."""
        if name in self._region_ord:
            return "region"
        if name in self.landmarks:
            return "landmark"
        if name in self._class_ord:
            return "pathology"
        raise TaxonomyError(f"unknown class {name!r}")

    def region_columns(self) -> list[int]:
        return [self._class_ord[r] for r in self.regions]

    def to_document(self) -> dict:
        return {
            "classes": list(self.classes),
            "regions": list(self.regions),
            "landmarks": {k: sorted(v) for k, v in self.landmarks.items()},
            "pathologies": list(self.pathologies),
            "smoothing_window": dict(self.smoothing_window),
        }


def taxonomy_from_document(doc: Mapping) -> LabelTaxonomy:
    for key in _REQUIRED_KEYS:
        if key not in doc:
            raise FormatError(f"taxonomy document missing key {key!r}")
    return LabelTaxonomy(
        classes=tuple(doc["classes"]),
        regions=tuple(doc["regions"]),
        landmarks={k: frozenset(v) for k, v in doc["landmarks"].items()},
        pathologies=tuple(doc["pathologies"]),
        smoothing_window={k: int(v) for k, v in doc["smoothing_window"].items()},
    )


def load_taxonomy(path: str | Path) -> LabelTaxonomy:
    """Load a taxonomy from a JSON document; validates all invariants."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return taxonomy_from_document(doc)


def store_taxonomy(taxonomy: LabelTaxonomy, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(taxonomy.to_document(), fh, indent=2, sort_keys=False)
        fh.write("\n")


def default_taxonomy() -> LabelTaxonomy:
    """Taxonomy shipped with the package: 5 GI regions, 3 landmarks, 6 findings."""
    text = resources.files("capsule_events").joinpath("data/default_taxonomy.json").read_text()
    return taxonomy_from_document(json.loads(text))


def make_taxonomy(
    regions: Sequence[str],
    landmarks: Mapping[str, Sequence[str]] | None = None,
    pathologies: Sequence[str] = (),
    smoothing: Mapping[str, int] | None = None,
    window_by_kind: Mapping[str, int] | None = None,
) -> LabelTaxonomy:
    """Build a taxonomy programmatically (tests, synthetic corpora).

    ``window_by_kind`` supplies per-kind smoothing defaults, overridden by
    entries in ``smoothing``.
    """
    landmarks = dict(landmarks or {})
    kinds = {"region": 31, "landmark": 15, "pathology": 7}
    if window_by_kind:
        kinds.update(window_by_kind)
    classes = list(regions) + list(landmarks) + list(pathologies)
    windows: dict[str, int] = {}
    for name in classes:
        if name in set(regions):
            windows[name] = kinds["region"]
        elif name in landmarks:
            windows[name] = kinds["landmark"]
        else:
            windows[name] = kinds["pathology"]
    if smoothing:
        windows.update({k: int(v) for k, v in smoothing.items()})
    return LabelTaxonomy(
        classes=tuple(classes),
        regions=tuple(regions),
        landmarks={k: frozenset(v) for k, v in landmarks.items()},
        pathologies=tuple(pathologies),
        smoothing_window=windows,
    )
