"""Cross-sensor evaluation protocols, confusion matrices and CCR reporting."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from decimal import Decimal
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .backbone import BackboneConfig, ExpertModel, save_checkpoint
from .cascade import CascadeThresholds, cascade_predict
from .datamodel import (
    LABEL_ORDER,
    DatasetManifest,
    ExpertKind,
    LabelClass,
    SampleRecord,
    Split,
)
from .ingestion import ImageDecodeError, prepare_input
from .training import ImageCache, TrainConfig, TrainHistory, train_expert

log = logging.getLogger(__name__)

ROW_NAMES = ("N-N", "S-S", "C-C", "Aggregate")


class ProtocolError(ValueError):
    pass


class ProtocolKind(str, Enum):
    INTRA_SENSOR = "intra"
    INTER_SENSOR = "inter"
    MULTI_SENSOR = "multi"
    COMBINED_SENSOR = "combined"


@dataclass(frozen=True)
class ProtocolSpec:
    """One evaluation protocol.

    INTRA uses ``sensor``; INTER uses ``train_sensor``/``test_sensor``; MULTI
    uses ``sensor_set``; COMBINED trains on the union of ``manifest_set`` and
    tests on each manifest in ``test_manifests`` separately.
    """

    kind: ProtocolKind
    sensor: Optional[str] = None
    train_sensor: Optional[str] = None
    test_sensor: Optional[str] = None
    sensor_set: tuple[str, ...] = ()
    manifest_set: tuple[str, ...] = ()
    test_manifests: tuple[str, ...] = ()
    name: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ProtocolKind(self.kind))
        object.__setattr__(self, "sensor_set", tuple(self.sensor_set))
        object.__setattr__(self, "manifest_set", tuple(self.manifest_set))
        object.__setattr__(self, "test_manifests", tuple(self.test_manifests))
        k = self.kind
        if k == ProtocolKind.INTRA_SENSOR and not self.sensor:
            raise ProtocolError("intra-sensor protocol needs a sensor")
        if k == ProtocolKind.INTER_SENSOR:
            if not (self.train_sensor and self.test_sensor):
                raise ProtocolError("inter-sensor protocol needs train and test sensors")
            if self.train_sensor == self.test_sensor:
                raise ProtocolError("inter-sensor protocol needs two different sensors")
        if k == ProtocolKind.MULTI_SENSOR and len(set(self.sensor_set)) < 2:
            raise ProtocolError("multi-sensor protocol needs at least two sensors")
        if k == ProtocolKind.COMBINED_SENSOR:
            if not self.manifest_set or not self.test_manifests:
                raise ProtocolError("combined-sensor protocol needs manifests and test manifest(s)")
            missing = set(self.test_manifests) - set(self.manifest_set)
            if missing:
                raise ProtocolError(f"test manifest(s) {sorted(missing)} not in the combined set")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == ProtocolKind.INTRA_SENSOR:
            return self.sensor
        if self.kind == ProtocolKind.INTER_SENSOR:
            return f"{self.train_sensor}->{self.test_sensor}"
        if self.kind == ProtocolKind.MULTI_SENSOR:
            return "+".join(self.sensor_set)
        return self.test_manifests[0] if len(self.test_manifests) == 1 else "+".join(self.test_manifests)

    def per_test(self) -> list["ProtocolSpec"]:
        """Single-test-pool specs (only COMBINED can expand to several)."""
        if self.kind != ProtocolKind.COMBINED_SENSOR or len(self.test_manifests) == 1:
            return [self]
        return [replace(self, test_manifests=(t,), name=None) for t in self.test_manifests]

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        for f in ("sensor", "train_sensor", "test_sensor", "name"):
            if getattr(self, f):
                d[f] = getattr(self, f)
        for f in ("sensor_set", "manifest_set", "test_manifests"):
            if getattr(self, f):
                d[f] = list(getattr(self, f))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolSpec":
        return cls(**d)


# --------------------------------------------------------------------------
# splits

def _as_manifest_map(manifests) -> dict[str, DatasetManifest]:
    if isinstance(manifests, DatasetManifest):
        return {manifests.name: manifests}
    if isinstance(manifests, Mapping):
        return dict(manifests)
    return {m.name: m for m in manifests}


def _by_sensor(records: Iterable[SampleRecord], sensors: Iterable[str], split: Split) -> list[SampleRecord]:
    sensors = set(sensors)
    return [r for r in records if r.sensor_id in sensors and r.split == split]


def check_split_hygiene(train: Sequence[SampleRecord], test: Sequence[SampleRecord],
                        disjoint_sensors: bool = False) -> list[str]:
    """Problems with a (train, test) pair; empty when the split is clean."""
    problems = []
    ids = {r.sample_id for r in train} & {r.sample_id for r in test}
    if ids:
        problems.append(f"sample(s) in both pools: {sorted(ids)[:5]}")
    subjects = {r.subject_id for r in train} & {r.subject_id for r in test}
    if subjects:
        problems.append(f"subject(s) in both pools: {sorted(subjects)[:5]}")
    if disjoint_sensors:
        sensors = {r.sensor_id for r in train} & {r.sensor_id for r in test}
        if sensors:
            problems.append(f"sensor(s) in both pools: {sorted(sensors)}")
    return problems


def build_protocol_splits(spec: ProtocolSpec, manifests) -> tuple[list[SampleRecord], list[SampleRecord]]:
    mmap = _as_manifest_map(manifests)
    if spec.kind == ProtocolKind.COMBINED_SENSOR:
        if len(spec.test_manifests) != 1:
            raise ProtocolError("expand combined protocols with several test manifests via per_test()")
        missing = [n for n in spec.manifest_set if n not in mmap]
        if missing:
            raise ProtocolError(f"manifest(s) not found: {missing}")
        train = [r for n in spec.manifest_set for r in mmap[n].records if r.split == Split.TRAIN]
        test = mmap[spec.test_manifests[0]].split(Split.TEST)
    else:
        records = [r for m in mmap.values() for r in m.records]
        known = {r.sensor_id for r in records}
        if spec.kind == ProtocolKind.INTRA_SENSOR:
            train_s, test_s = [spec.sensor], [spec.sensor]
        elif spec.kind == ProtocolKind.INTER_SENSOR:
            train_s, test_s = [spec.train_sensor], [spec.test_sensor]
        else:
            train_s = test_s = list(spec.sensor_set)
        missing = sorted(set(train_s + test_s) - known)
        if missing:
            raise ProtocolError(f"sensor(s) not found: {missing}")
        train = _by_sensor(records, train_s, Split.TRAIN)
        test = _by_sensor(records, test_s, Split.TEST)
    if not train:
        raise ProtocolError(f"{spec.label}: empty training pool")
    if not test:
        raise ProtocolError(f"{spec.label}: empty test pool")
    problems = check_split_hygiene(train, test, spec.kind == ProtocolKind.INTER_SENSOR)
    if problems:
        raise ProtocolError(f"{spec.label}: " + "; ".join(problems))
    return train, test


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """3x3 counts, rows = true class, columns = predicted, ordered (NO, SOFT, COSMETIC)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (3, 3) or (c < 0).any():
            raise ValueError("confusion matrix must be 3x3 with nonnegative counts")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_pairs(cls, true: Iterable[LabelClass], pred: Iterable[LabelClass]) -> "ConfusionMatrix":
        idx = {c: i for i, c in enumerate(LABEL_ORDER)}
        c = np.zeros((3, 3), dtype=np.int64)
        for t, p in zip(true, pred, strict=True):
            c[idx[LabelClass(t)], idx[LabelClass(p)]] += 1
        return cls(c)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tolist(self) -> list[list[int]]:
        return self.counts.tolist()


@dataclass(frozen=True)
class CCRValues:
    nn: Optional[float]
    ss: Optional[float]
    cc: Optional[float]
    aggregate: Optional[float]

    def rows(self) -> tuple[Optional[float], ...]:
        return (self.nn, self.ss, self.cc, self.aggregate)


def aggregate_ccr(counts: np.ndarray) -> Optional[float]:
    """Overall accuracy: 100 * trace / total."""
    total = counts.sum()
    return None if total == 0 else 100.0 * float(np.trace(counts)) / float(total)


def compute_ccr(cm: ConfusionMatrix) -> CCRValues:
    """Per-class CCR (None for an empty class) and aggregate CCR, in percent."""
    c = cm.counts
    per = []
    for i in range(3):
        n = c[i].sum()
        per.append(None if n == 0 else 100.0 * float(c[i, i]) / float(n))
    return CCRValues(*per, aggregate_ccr(c))


@dataclass
class CCRReport:
    label: str
    protocol_kind: ProtocolKind
    ccr: CCRValues
    counts: Optional[ConfusionMatrix] = None  # None for transcribed or averaged rows
    protocol: Optional[ProtocolSpec] = None
    excluded: list[tuple[str, str]] = field(default_factory=list)
    n_evaluated: int = 0
    source: str = "measured"
    predictions: list[dict] = field(default_factory=list, repr=False)

    @property
    def ccr_nn(self):
        return self.ccr.nn

    @property
    def ccr_ss(self):
        return self.ccr.ss

    @property
    def ccr_cc(self):
        return self.ccr.cc

    @property
    def aggregate(self):
        return self.ccr.aggregate

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "protocol_kind": self.protocol_kind.value,
            "protocol": self.protocol.to_dict() if self.protocol else None,
            "source": self.source,
            "ccr": dict(zip(ROW_NAMES, self.ccr.rows())),
            "confusion_matrix": self.counts.tolist() if self.counts is not None else None,
            "n_evaluated": self.n_evaluated,
            "excluded": [{"sample_id": s, "reason": why} for s, why in self.excluded],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CCRReport":
        ccr = d["ccr"]
        return cls(
            label=d["label"],
            protocol_kind=ProtocolKind(d["protocol_kind"]),
            ccr=CCRValues(*(ccr[k] for k in ROW_NAMES)),
            counts=ConfusionMatrix(np.array(d["confusion_matrix"])) if d.get("confusion_matrix") else None,
            protocol=ProtocolSpec.from_dict(d["protocol"]) if d.get("protocol") else None,
            excluded=[(e["sample_id"], e["reason"]) for e in d.get("excluded", [])],
            n_evaluated=d.get("n_evaluated", 0),
            source=d.get("source", "measured"),
        )


def report_from_counts(cm: ConfusionMatrix, spec: ProtocolSpec, **kw) -> CCRReport:
    return CCRReport(label=spec.label, protocol_kind=spec.kind, ccr=compute_ccr(cm),
                     counts=cm, protocol=spec, n_evaluated=cm.total, **kw)


def average_report(reports: Sequence[CCRReport], label: str = "Avg") -> CCRReport:
    """Row-wise unweighted mean over reports, skipping undefined cells."""
    def mean(vals):
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else None

    rows = [mean(r.ccr.rows()[i] for r in reports) for i in range(4)]
    kind = reports[0].protocol_kind if reports else ProtocolKind.COMBINED_SENSOR
    return CCRReport(label=label, protocol_kind=kind, ccr=CCRValues(*rows), source="average")


def evaluate(expert_t: ExpertModel, expert_l: ExpertModel, test_records: Sequence[SampleRecord],
             thresholds: CascadeThresholds = CascadeThresholds(), spec: ProtocolSpec | None = None,
             chunk: int = 32) -> CCRReport:
    """Cascade predictions over ``test_records`` accumulated into a CCR report.

    Undecodable images are excluded and listed in ``report.excluded``.
    """
    if not test_records:
        raise ProtocolError("no test records to evaluate")
    spec = spec or ProtocolSpec(ProtocolKind.INTRA_SENSOR, sensor="unspecified", name="evaluation")
    cm = ConfusionMatrix()
    excluded: list[tuple[str, str]] = []
    predictions = []
    for start in range(0, len(test_records), chunk):
        part = test_records[start:start + chunk]
        tensors, kept = [], []
        for r in part:
            try:
                tensors.append(prepare_input(r.image_path, expert_t.normalization, r.sample_id))
                kept.append(r)
            except ImageDecodeError as exc:
                excluded.append((r.sample_id, str(exc)))
        decisions = cascade_predict(expert_t, expert_l, tensors, thresholds)
        cm = cm + ConfusionMatrix.from_pairs([r.label for r in kept], [d.label for d in decisions])
        for r, d in zip(kept, decisions):
            predictions.append({"sample_id": r.sample_id, "true": r.label.value, **d.to_json()})
    report = report_from_counts(cm, spec, excluded=excluded, predictions=predictions)
    assert report.n_evaluated + len(excluded) == len(test_records)
    return report


# --------------------------------------------------------------------------
# protocol driver

def _pool_key(kind: ExpertKind, train: Sequence[SampleRecord], train_cfg: TrainConfig,
              backbone_cfg: BackboneConfig) -> str:
    h = hashlib.sha256()
    h.update(kind.value.encode())
    h.update(json.dumps(train_cfg.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(backbone_cfg.to_dict(), sort_keys=True).encode())
    for r in sorted(train, key=lambda r: r.sample_id):
        h.update(f"{r.sample_id}\0{r.image_path}\0{r.label.value}\n".encode())
    return h.hexdigest()


class ExpertCache:
    """Trained experts keyed by (kind, training pool, configs).

    Training is deterministic, so protocols that share a training pool
    (e.g. intra on A and inter A->B) can reuse one trained expert.
    """

    def __init__(self):
        self._store: dict[str, tuple[ExpertModel, TrainHistory]] = {}
        self.images = ImageCache()

    def get(self, kind: ExpertKind, train, train_cfg, backbone_cfg):
        key = _pool_key(kind, train, train_cfg, backbone_cfg)
        if key not in self._store:
            self._store[key] = train_expert(kind, train, train_cfg, backbone_cfg, cache=self.images)
        return self._store[key]


def run_protocol(spec: ProtocolSpec, manifests, train_cfg: TrainConfig, backbone_cfg: BackboneConfig,
                 out_dir=None, thresholds: CascadeThresholds = CascadeThresholds(),
                 cache: ExpertCache | None = None) -> list[CCRReport]:
    """Split, train both experts, evaluate.

    Returns one report per test pool; COMBINED protocols with several test
    manifests get an extra ``Avg`` row.
    """
    cache = cache or ExpertCache()
    subspecs = spec.per_test()
    splits = [build_protocol_splits(s, manifests) for s in subspecs]
    train = splits[0][0]
    experts = {k: cache.get(k, train, train_cfg, backbone_cfg) for k in ExpertKind}
    reports = [
        evaluate(experts[ExpertKind.TEXTURED_DETECTOR][0], experts[ExpertKind.LENS_DETECTOR][0],
                 test, thresholds, s)
        for s, (_, test) in zip(subspecs, splits)
    ]
    if len(reports) > 1:
        reports.append(average_report(reports))
    if out_dir is not None:
        persist_run(Path(out_dir), spec, reports, experts, train_cfg, backbone_cfg, thresholds)
    return reports


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


def persist_run(out_dir: Path, spec: ProtocolSpec, reports: list[CCRReport], experts,
                train_cfg: TrainConfig, backbone_cfg: BackboneConfig,
                thresholds: CascadeThresholds) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        "protocol": spec.to_dict(),
        "train": train_cfg.to_dict(),
        "backbone": backbone_cfg.to_dict(),
        "thresholds": {"t_textured": thresholds.t_textured, "t_lens": thresholds.t_lens},
    }
    ckpts = {}
    for kind, (model, history) in experts.items():
        d = out_dir / "experts" / kind.value
        save_checkpoint(model, d)
        (d / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
        ckpts[kind.value] = str(d.relative_to(out_dir))
    write_json(out_dir / "resolved_config.json", resolved)
    write_json(out_dir / "report.json", {
        "config_hash": config_hash(resolved),
        "checkpoints": ckpts,
        "reports": [r.to_json() for r in reports],
    })
    with open(out_dir / "predictions.jsonl", "w") as fh:
        for r in reports:
            for p in r.predictions:
                fh.write(json.dumps({"protocol": r.label, **p}) + "\n")
    (out_dir / "report.txt").write_text(render_report(reports))


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_run_reports(run_dir) -> list[CCRReport]:
    data = json.loads((Path(run_dir) / "report.json").read_text())
    return [CCRReport.from_json(d) for d in data["reports"]]


# --------------------------------------------------------------------------
# reference numbers and rendering

@dataclass(frozen=True)
class ReferenceColumn:
    method: str
    rows: dict[tuple[str, str], tuple[Optional[float], ...]]  # (protocol kind, label) -> 4 rows

    def lookup(self, report: CCRReport):
        return self.rows.get((report.protocol_kind.value, report.label))


def _load_tables(path=None) -> dict:
    if path is None or str(path) == "paper_tables":
        text = resources.files("ghclnet").joinpath("data/paper_tables.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)["tables"]


def load_reference(method: str = "GHCLNet", path=None) -> ReferenceColumn:
    rows = {}
    for kind, table in _load_tables(path).items():
        for label, methods in table["rows"].items():
            if method in methods:
                rows[(kind, label)] = tuple(methods[method][k] for k in ROW_NAMES)
    if not rows:
        raise KeyError(f"no reference values for method {method!r}")
    return ReferenceColumn(method, rows)


def reference_reports(kind: str, method: str = "GHCLNet", path=None) -> list[CCRReport]:
    """Transcribed rows of one table as reports (no counts)."""
    table = _load_tables(path)[ProtocolKind(kind).value]
    out = []
    for label, methods in table["rows"].items():
        if method in methods:
            vals = [methods[method][k] for k in ROW_NAMES]
            out.append(CCRReport(label=label, protocol_kind=ProtocolKind(kind),
                                 ccr=CCRValues(*(float(v) for v in vals)), source=f"transcribed:{method}"))
    return out


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def _delta(a, b) -> str:
    if a is None or b is None:
        return "-"
    d = Decimal(f"{a:.2f}") - Decimal(f"{b:.2f}")
    return f"{d:+.2f}"


def render_report(reports: Sequence[CCRReport], reference: ReferenceColumn | None = None,
                  measured_name: str = "CCR(%)") -> str:
    """Fixed-width text: one block of N-N, S-S, C-C, Aggregate rows per report."""
    blocks = []
    for rep in reports:
        ref = reference.lookup(rep) if reference else None
        header = f"{'Class':<11}{measured_name:>10}"
        if reference:
            header += f"{reference.method:>14}{'Delta':>9}"
        lines = [f"[{rep.protocol_kind.value}] {rep.label}", header]
        for i, name in enumerate(ROW_NAMES):
            v = rep.ccr.rows()[i]
            line = f"{name:<11}{_fmt(v):>10}"
            if reference:
                r = ref[i] if ref else None
                line += f"{_fmt(r):>14}{_delta(v, r):>9}"
            lines.append(line)
        if rep.excluded:
            lines.append(f"excluded: {len(rep.excluded)} sample(s)")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def report_json(reports: Sequence[CCRReport], reference: ReferenceColumn | None = None) -> dict:
    out = []
    for rep in reports:
        d = rep.to_json()
        ref = reference.lookup(rep) if reference else None
        if ref:
            d["reference"] = {"method": reference.method, "ccr": dict(zip(ROW_NAMES, ref))}
        out.append(d)
    return {"reports": out}
