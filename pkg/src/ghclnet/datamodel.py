"""Label taxonomy, sample/manifest schema and the expert relabeling maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional


class LabelClass(str, Enum):
    NO_LENS = "no_lens"
    SOFT_LENS = "soft_lens"
    COSMETIC_LENS = "cosmetic_lens"


# Row/column order used by confusion matrices and CCR tables.
LABEL_ORDER = (LabelClass.NO_LENS, LabelClass.SOFT_LENS, LabelClass.COSMETIC_LENS)


class ExpertKind(str, Enum):
    TEXTURED_DETECTOR = "textured"
    LENS_DETECTOR = "lens"


class BinaryLabel(int, Enum):
    NEGATIVE = 0
    POSITIVE = 1


class Eye(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    UNKNOWN = "unknown"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class ManifestError(ValueError):
    """Raised when a manifest file cannot be parsed into a valid manifest."""


class UndefinedRelabelError(ValueError):
    """A (label, expert) pair that has no binary label was forced to one."""


_RELABEL = {
    (LabelClass.COSMETIC_LENS, ExpertKind.TEXTURED_DETECTOR): BinaryLabel.POSITIVE,
    (LabelClass.NO_LENS, ExpertKind.TEXTURED_DETECTOR): BinaryLabel.NEGATIVE,
    (LabelClass.SOFT_LENS, ExpertKind.TEXTURED_DETECTOR): BinaryLabel.NEGATIVE,
    (LabelClass.SOFT_LENS, ExpertKind.LENS_DETECTOR): BinaryLabel.POSITIVE,
    (LabelClass.NO_LENS, ExpertKind.LENS_DETECTOR): BinaryLabel.NEGATIVE,
}


def relabel_for_expert(label: LabelClass, kind: ExpertKind) -> Optional[BinaryLabel]:
    """Binary target of ``label`` for the given expert.

    Returns ``None`` for cosmetic lenses under the lens detector: that class is
    not part of the lens detector's training or validation pool.
    """
    return _RELABEL.get((LabelClass(label), ExpertKind(kind)))


def require_binary_label(label: LabelClass, kind: ExpertKind) -> BinaryLabel:
    out = relabel_for_expert(label, kind)
    if out is None:
        raise UndefinedRelabelError(
            f"{LabelClass(label).value} has no binary label for the {ExpertKind(kind).value} expert"
        )
    return out


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: Path
    sensor_id: str
    subject_id: str
    eye: Eye
    label: LabelClass
    split: Split

    def to_json(self, base_dir: Optional[Path] = None) -> dict:
        path = Path(self.image_path)
        if base_dir is not None:
            try:
                path = path.relative_to(base_dir)
            except ValueError:
                pass
        return {
            "sample_id": self.sample_id,
            "image_path": path.as_posix(),
            "sensor_id": self.sensor_id,
            "subject_id": self.subject_id,
            "eye": self.eye.value,
            "label": self.label.value,
            "split": self.split.value,
        }


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: tuple[SampleRecord, ...] = ()
    sensor_ids: frozenset[str] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "sensor_ids", frozenset(r.sensor_id for r in self.records))
        seen: set[str] = set()
        for r in self.records:
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
            seen.add(r.sample_id)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, split: Split) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def subjects(self, split: Split) -> set[str]:
        return {r.subject_id for r in self.records if r.split == split}


@dataclass(frozen=True)
class Violation:
    kind: str  # "subject_overlap" | "missing_file" | "duplicate_id"
    detail: str
    sample_id: Optional[str] = None


ValidationReport = list[Violation]

_FIELDS = ("sample_id", "image_path", "sensor_id", "subject_id", "eye", "label", "split")


def _parse_record(obj: dict, base_dir: Path, where: str) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object, got {type(obj).__name__}")
    missing = [f for f in _FIELDS if f not in obj]
    if missing:
        raise ManifestError(f"{where}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(_FIELDS))
    if extra:
        raise ManifestError(f"{where}: unexpected field(s) {', '.join(extra)}")
    try:
        label = LabelClass(obj["label"])
    except ValueError:
        raise ManifestError(f"{where}: unknown label {obj['label']!r}") from None
    try:
        split = Split(obj["split"])
    except ValueError:
        raise ManifestError(f"{where}: unknown split {obj['split']!r}") from None
    try:
        eye = Eye(obj["eye"])
    except ValueError:
        raise ManifestError(f"{where}: unknown eye {obj['eye']!r}") from None
    return SampleRecord(
        sample_id=str(obj["sample_id"]),
        image_path=base_dir / obj["image_path"],
        sensor_id=str(obj["sensor_id"]),
        subject_id=str(obj["subject_id"]),
        eye=eye,
        label=label,
        split=split,
    )


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON-lines manifest. Image paths resolve against the manifest's directory."""
    path = Path(path)
    base_dir = path.parent
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{where}: {exc.msg}") from exc
            rec = _parse_record(obj, base_dir, where)
            if rec.sample_id in seen:
                raise ManifestError(
                    f"{where}: duplicate sample_id {rec.sample_id!r} (first seen on line {seen[rec.sample_id]})"
                )
            seen[rec.sample_id] = lineno
            records.append(rec)
    return DatasetManifest(name=path.stem, records=tuple(records))


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base_dir = path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_json(base_dir), sort_keys=False) + "\n")
    return path


def subject_overlap(records: Iterable[SampleRecord]) -> set[str]:
    train, test = set(), set()
    for r in records:
        (train if r.split == Split.TRAIN else test).add(r.subject_id)
    return train & test


def validate_manifest(m: DatasetManifest, check_files: bool = True) -> ValidationReport:
    report: ValidationReport = []
    seen: set[str] = set()
    for r in m.records:
        if r.sample_id in seen:
            report.append(Violation("duplicate_id", f"duplicate sample_id {r.sample_id!r}", r.sample_id))
        seen.add(r.sample_id)
    for subj in sorted(subject_overlap(m.records)):
        report.append(Violation("subject_overlap", f"subject {subj!r} appears in both train and test"))
    if check_files:
        for r in m.records:
            if not Path(r.image_path).is_file():
                report.append(Violation("missing_file", f"missing image {r.image_path}", r.sample_id))
    return report


def merge_manifests(name: str, manifests: Iterable[DatasetManifest]) -> DatasetManifest:
    records = []
    for m in manifests:
        records.extend(m.records)
    return DatasetManifest(name=name, records=tuple(records))
