"""Anomaly taxonomies, layer test samples, and one-hot ground-truth encoding.

A taxonomy fixes the ordered list of anomaly names for a dataset; that order
defines the bit positions of every one-hot vector derived from it. Test
samples carry exactly two stage-labeled layer images (post-melting and
post-spreading) plus the set of anomalies annotated for that layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .errors import DatasetError

POST_MELTING = "post_melting"
POST_SPREADING = "post_spreading"
STAGES = (POST_MELTING, POST_SPREADING)

# Fixed wording; detection prompts embed these strings verbatim.
STAGE_DESCRIPTIONS: Mapping[str, str] = {
    POST_MELTING: "image captured post-melting",
    POST_SPREADING: "image captured after powder spreading",
}


@dataclass(frozen=True)
class AnomalyTaxonomy:
    """Ordered, unique anomaly names; order defines one-hot indices."""

    dataset_id: str
    anomalies: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "anomalies", tuple(self.anomalies))
        if not self.anomalies:
            raise DatasetError(f"taxonomy {self.dataset_id!r} has an empty anomaly list")
        seen: set[str] = set()
        for name in self.anomalies:
            if not name or not name.strip():
                raise DatasetError(f"taxonomy {self.dataset_id!r} contains an empty anomaly name")
            key = name.strip().lower()
            if key in seen:
                raise DatasetError(f"duplicate anomaly name {name!r} in taxonomy {self.dataset_id!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.anomalies)

    def __iter__(self):
        return iter(self.anomalies)

    def __contains__(self, name: object) -> bool:
        return name in self.anomalies

    def index_of(self, name: str) -> int:
        try:
            return self.anomalies.index(name)
        except ValueError:
            raise DatasetError(f"anomaly {name!r} is not in taxonomy {self.dataset_id!r}") from None


@dataclass(frozen=True)
class StageImage:
    """One layer image plus the fixed description of its capture stage."""

    stage: str
    image_ref: Path
    stage_description: str

    def __post_init__(self):
        if self.stage not in STAGE_DESCRIPTIONS:
            raise DatasetError(f"unknown image stage {self.stage!r}")
        if self.stage_description != STAGE_DESCRIPTIONS[self.stage]:
            raise DatasetError(
                f"stage description for {self.stage!r} must be {STAGE_DESCRIPTIONS[self.stage]!r}"
            )

    @classmethod
    def for_stage(cls, stage: str, image_ref: str | Path) -> "StageImage":
        if stage not in STAGE_DESCRIPTIONS:
            raise DatasetError(f"unknown image stage {stage!r}")
        return cls(stage=stage, image_ref=Path(image_ref), stage_description=STAGE_DESCRIPTIONS[stage])


@dataclass(frozen=True)
class TestSample:
    """One build layer: both stage images plus the annotated anomaly set."""

    sample_id: str
    dataset_id: str
    images: tuple[StageImage, ...]
    ground_truth: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "ground_truth", frozenset(self.ground_truth))
        stages = [img.stage for img in self.images]
        for stage in STAGES:
            if stages.count(stage) != 1:
                raise DatasetError(
                    f"sample {self.sample_id!r} must have exactly one {stage} image"
                )

    def image_for(self, stage: str) -> StageImage:
        for img in self.images:
            if img.stage == stage:
                return img
        raise DatasetError(f"sample {self.sample_id!r} has no {stage} image")

    def ordered_images(self) -> tuple[StageImage, ...]:
        """Images in fixed stage order (post-melting first)."""
        return tuple(self.image_for(stage) for stage in STAGES)


@dataclass(frozen=True)
class OneHotVector:
    """Fixed-order binary membership vector over a taxonomy's anomalies."""

    dataset_id: str
    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise DatasetError("one-hot bits must all be 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    def popcount(self) -> int:
        return sum(self.bits)


def load_taxonomy(config_path: str | Path) -> AnomalyTaxonomy:
    """Load a dataset config file: {"dataset_id": str, "anomalies": [str]}."""
    path = Path(config_path)
    if not path.is_file():
        raise DatasetError(f"dataset config not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"dataset config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DatasetError(f"dataset config {path} must be a JSON object")
    unknown = set(raw) - {"dataset_id", "anomalies"}
    if unknown:
        raise DatasetError(f"dataset config {path} has unknown keys: {sorted(unknown)}")
    dataset_id = raw.get("dataset_id")
    anomalies = raw.get("anomalies")
    if not isinstance(dataset_id, str) or not dataset_id:
        raise DatasetError(f"dataset config {path}: 'dataset_id' must be a non-empty string")
    if not isinstance(anomalies, list) or not all(isinstance(a, str) for a in anomalies):
        raise DatasetError(f"dataset config {path}: 'anomalies' must be a list of strings")
    return AnomalyTaxonomy(dataset_id=dataset_id, anomalies=tuple(anomalies))


def read_annotation_file(path: Path) -> list[dict]:
    """Default annotation adapter for the native JSON schema.

    Other annotation schemas plug in by passing a different adapter to the
    loaders below; an adapter returns rows shaped like
    {"sample_id": str, "images": {stage: path}, "anomalies": [str]}.
    """
    if not path.is_file():
        raise DatasetError(f"annotation file not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"annotation file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise DatasetError(f"annotation file {path} must be a JSON array")
    rows = []
    for i, row in enumerate(raw):
        if not isinstance(row, dict):
            raise DatasetError(f"annotation file {path}: entry {i} is not an object")
        unknown = set(row) - {"sample_id", "images", "anomalies"}
        if unknown:
            raise DatasetError(f"annotation file {path}: entry {i} has unknown keys: {sorted(unknown)}")
        sample_id = row.get("sample_id")
        if not isinstance(sample_id, str) or not sample_id:
            raise DatasetError(f"annotation file {path}: entry {i} needs a non-empty 'sample_id'")
        images = row.get("images")
        if not isinstance(images, dict):
            raise DatasetError(f"annotation file {path}: sample {sample_id!r} needs an 'images' object")
        anomalies = row.get("anomalies", [])
        if not isinstance(anomalies, list) or not all(isinstance(a, str) for a in anomalies):
            raise DatasetError(
                f"annotation file {path}: sample {sample_id!r} 'anomalies' must be a list of strings"
            )
        rows.append({"sample_id": sample_id, "images": dict(images), "anomalies": list(anomalies)})
    return rows


AnnotationAdapter = Callable[[Path], list[dict]]


def load_ground_truth(
    annotations_path: str | Path,
    taxonomy: AnomalyTaxonomy,
    adapter: AnnotationAdapter = read_annotation_file,
) -> dict[str, frozenset[str]]:
    """Map sample_id to its annotated anomaly set (empty set = normal layer)."""
    rows = adapter(Path(annotations_path))
    truth: dict[str, frozenset[str]] = {}
    for row in rows:
        sample_id = row["sample_id"]
        if sample_id in truth:
            raise DatasetError(f"duplicate sample_id {sample_id!r} in annotations")
        for name in row["anomalies"]:
            if name not in taxonomy:
                raise DatasetError(
                    f"sample {sample_id!r} lists unknown anomaly {name!r} "
                    f"(not in taxonomy {taxonomy.dataset_id!r})"
                )
        truth[sample_id] = frozenset(row["anomalies"])
    return truth


def load_samples(
    annotations_path: str | Path,
    taxonomy: AnomalyTaxonomy,
    base_dir: str | Path | None = None,
    adapter: AnnotationAdapter = read_annotation_file,
) -> list[TestSample]:
    """Load full test samples; rejects samples missing either stage image."""
    annotations_path = Path(annotations_path)
    base = Path(base_dir) if base_dir is not None else annotations_path.parent
    truth = load_ground_truth(annotations_path, taxonomy, adapter)
    rows = adapter(annotations_path)
    samples = []
    for row in rows:
        sample_id = row["sample_id"]
        images = []
        for stage in STAGES:
            ref = row["images"].get(stage)
            if not ref:
                raise DatasetError(f"sample {sample_id!r} is missing its {stage} image")
            path = Path(ref)
            if not path.is_absolute():
                path = base / path
            if not path.is_file():
                raise DatasetError(f"sample {sample_id!r}: image file not found: {path}")
            images.append(StageImage.for_stage(stage, path))
        samples.append(
            TestSample(
                sample_id=sample_id,
                dataset_id=taxonomy.dataset_id,
                images=tuple(images),
                ground_truth=truth[sample_id],
            )
        )
    return samples


def encode_one_hot(truth: Iterable[str], taxonomy: AnomalyTaxonomy) -> OneHotVector:
    """bits[i] == 1 iff taxonomy.anomalies[i] is in the truth set."""
    truth_set = set(truth)
    unknown = truth_set - set(taxonomy.anomalies)
    if unknown:
        raise DatasetError(
            f"anomalies {sorted(unknown)} are not in taxonomy {taxonomy.dataset_id!r}"
        )
    bits = tuple(1 if name in truth_set else 0 for name in taxonomy.anomalies)
    return OneHotVector(dataset_id=taxonomy.dataset_id, bits=bits)


def decode_one_hot(vector: OneHotVector, taxonomy: AnomalyTaxonomy) -> frozenset[str]:
    """Inverse of encode_one_hot."""
    if len(vector.bits) != len(taxonomy.anomalies):
        raise DatasetError(
            f"one-hot length {len(vector.bits)} does not match taxonomy size {len(taxonomy.anomalies)}"
        )
    return frozenset(name for name, bit in zip(taxonomy.anomalies, vector.bits) if bit)
