import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ghclnet.datamodel import (
    BinaryLabel,
    DatasetManifest,
    ExpertKind,
    Eye,
    LabelClass,
    ManifestError,
    SampleRecord,
    Split,
    UndefinedRelabelError,
    load_manifest,
    relabel_for_expert,
    require_binary_label,
    save_manifest,
    validate_manifest,
)


def rec(sid, subject="S1", split=Split.TRAIN, sensor="A", label=LabelClass.NO_LENS, path="x.png"):
    return SampleRecord(sid, Path(path), sensor, subject, Eye.LEFT, label, split)


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def line(sid, sensor="A", subject="S1", label="no_lens", split="train"):
    return {"sample_id": sid, "image_path": f"img/{sid}.png", "sensor_id": sensor,
            "subject_id": subject, "eye": "left", "label": label, "split": split}


def test_load_manifest_four_records_two_sensors(tmp_path):
    p = tmp_path / "m.jsonl"
    write_lines(p, [line("a", "A", "S1"), line("b", "A", "S2", split="test"),
                    line("c", "B", "S3"), line("d", "B", "S4", split="test")])
    m = load_manifest(p)
    assert len(m) == 4
    assert m.sensor_ids == {"A", "B"}
    assert m.records[0].image_path == tmp_path / "img" / "a.png"


def test_duplicate_sample_id_named(tmp_path):
    p = tmp_path / "m.jsonl"
    write_lines(p, [line("dup"), line("ok"), line("dup")])
    with pytest.raises(ManifestError, match="'dup'"):
        load_manifest(p)


def test_unknown_label_and_parse_location(tmp_path):
    p = tmp_path / "m.jsonl"
    write_lines(p, [line("a"), line("b", label="hard_lens")])
    with pytest.raises(ManifestError, match=r"m\.jsonl:2: unknown label 'hard_lens'"):
        load_manifest(p)
    p.write_text(json.dumps(line("a")) + "\n{not json\n")
    with pytest.raises(ManifestError, match=r":2:"):
        load_manifest(p)


def test_missing_and_extra_fields(tmp_path):
    p = tmp_path / "m.jsonl"
    obj = line("a")
    del obj["eye"]
    write_lines(p, [obj])
    with pytest.raises(ManifestError, match="missing field"):
        load_manifest(p)
    write_lines(p, [{**line("a"), "extra": 1}])
    with pytest.raises(ManifestError, match="unexpected field"):
        load_manifest(p)


def test_iiitd_sized_manifest_counts_preserved(tmp_path):
    # 6,570 records, 3,285 train / 3,285 test, two sensors
    objs = []
    for i in range(6570):
        split = "train" if i < 3285 else "test"
        subject = f"{split}-{i % 50}"
        objs.append(line(f"s{i}", "Cogent" if i % 2 else "Vista", subject,
                         ["no_lens", "soft_lens", "cosmetic_lens"][i % 3], split))
    p = tmp_path / "iiitd.jsonl"
    write_lines(p, objs)
    m = load_manifest(p)
    assert len(m) == 6570
    assert len(m.split(Split.TRAIN)) == 3285 and len(m.split(Split.TEST)) == 3285
    assert m.sensor_ids == {"Cogent", "Vista"}
    assert validate_manifest(m, check_files=False) == []


def test_validate_subject_overlap_named(tmp_path):
    m = DatasetManifest("m", (rec("a", "S1", Split.TRAIN), rec("b", "S1", Split.TEST), rec("c", "S2", Split.TEST)))
    report = validate_manifest(m, check_files=False)
    assert [v.kind for v in report] == ["subject_overlap"]
    assert "S1" in report[0].detail


def test_validate_empty_and_missing_file(tmp_path):
    assert validate_manifest(DatasetManifest("empty")) == []
    (tmp_path / "here.png").write_bytes(b"")
    m = DatasetManifest("m", (rec("a", path=tmp_path / "here.png"), rec("b", path=tmp_path / "gone.png")))
    report = validate_manifest(m)
    assert len(report) == 1 and report[0].kind == "missing_file" and report[0].sample_id == "b"


def test_validate_does_not_mutate():
    m = DatasetManifest("m", (rec("a", "S1", Split.TRAIN), rec("b", "S1", Split.TEST)))
    before = m.records
    validate_manifest(m, check_files=False)
    assert m.records == before


@pytest.mark.parametrize("label,kind,expected", [
    (LabelClass.COSMETIC_LENS, ExpertKind.TEXTURED_DETECTOR, BinaryLabel.POSITIVE),
    (LabelClass.SOFT_LENS, ExpertKind.TEXTURED_DETECTOR, BinaryLabel.NEGATIVE),
    (LabelClass.NO_LENS, ExpertKind.TEXTURED_DETECTOR, BinaryLabel.NEGATIVE),
    (LabelClass.SOFT_LENS, ExpertKind.LENS_DETECTOR, BinaryLabel.POSITIVE),
    (LabelClass.NO_LENS, ExpertKind.LENS_DETECTOR, BinaryLabel.NEGATIVE),
    (LabelClass.COSMETIC_LENS, ExpertKind.LENS_DETECTOR, None),
])
def test_relabel_table(label, kind, expected):
    assert relabel_for_expert(label, kind) == expected


def test_forcing_undefined_pair_is_an_error():
    with pytest.raises(UndefinedRelabelError):
        require_binary_label(LabelClass.COSMETIC_LENS, ExpertKind.LENS_DETECTOR)


@given(st.sampled_from(LabelClass), st.sampled_from(ExpertKind))
def test_relabel_total_except_one_pair(label, kind):
    out = relabel_for_expert(label, kind)
    assert out == relabel_for_expert(label, kind)
    if (label, kind) == (LabelClass.COSMETIC_LENS, ExpertKind.LENS_DETECTOR):
        assert out is None
    else:
        assert out in (BinaryLabel.POSITIVE, BinaryLabel.NEGATIVE)


record_st = st.builds(
    lambda i, sensor, subj, eye, label, split: SampleRecord(
        f"id{i}", Path(f"imgs/{i}.png"), sensor, subj, eye, label, split),
    st.integers(0, 10**6), st.sampled_from(["A", "B", "ND-I"]), st.text("abcS0123", min_size=1, max_size=4),
    st.sampled_from(Eye), st.sampled_from(LabelClass), st.sampled_from(Split),
)


@given(st.lists(record_st, max_size=20, unique_by=lambda r: r.sample_id))
def test_manifest_roundtrip(tmp_path_factory, records):
    d = tmp_path_factory.mktemp("rt")
    records = [SampleRecord(r.sample_id, d / r.image_path, r.sensor_id, r.subject_id, r.eye, r.label, r.split)
               for r in records]
    m = DatasetManifest("m", tuple(records))
    p = save_manifest(m, d / "m.jsonl")
    back = load_manifest(p)
    assert back.records == m.records
