import json

import pytest

from src.dataio import (
    DetectionSet,
    file_digest,
    load_detections,
    load_fused,
    load_ground_truth,
    load_report,
    load_scored,
    manifest_digest,
    read_detections,
    write_detections,
    write_fused,
    write_ground_truth,
    write_manifest,
    write_report,
)
from src.errors import RecordParseError
from src.evaluation import evaluate
from src.fusion import wcf
from src.schemas import Circle, Detection, GroundTruth, RunManifest


def _write(path, *records):
    path.write_text("\n".join(json.dumps(r) for r in records) + ("\n" if records else ""), encoding="utf-8")
    return path


def det(image_id="img", model_id="A", cx=10.0, cy=10.0, r=5.0, score=0.9):
    return {"image_id": image_id, "model_id": model_id, "cx": cx, "cy": cy, "r": r, "score": score}


def test_load_detections_groups_by_image_and_model(tmp_path):
    p = _write(tmp_path / "d.jsonl", det(model_id="A"), det(model_id="B", cx=11))
    ds = load_detections(p)
    assert ds.image_ids() == ["img"]
    assert ds.model_order == ["A", "B"]
    assert [len(s) for s in ds.model_sets("img")] == [1, 1]


def test_load_detections_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("", encoding="utf-8")
    ds = load_detections(p)
    assert len(ds) == 0
    assert ds.image_ids() == []


def test_load_detections_keeps_duplicates_and_extra_fields(tmp_path):
    extra = {**det(), "label": "glomerulus"}
    ds = load_detections(_write(tmp_path / "d.jsonl", extra, det()))
    assert len(ds) == 2


def test_score_out_of_range_names_line_and_field(tmp_path):
    p = _write(tmp_path / "d.jsonl", det(), det(score=1.5))
    with pytest.raises(RecordParseError) as info:
        load_detections(p)
    assert info.value.line_no == 2
    assert info.value.field == "score"
    assert ":2" in str(info.value)


def test_malformed_json_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps(det()) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(RecordParseError) as info:
        load_detections(p)
    assert info.value.line_no == 2


def test_invalid_utf8_line_names_path_and_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_bytes(json.dumps(det()).encode("utf-8") + b'\n{"image_id": "\xff\xfe"}\n')
    with pytest.raises(RecordParseError) as info:
        load_detections(p)
    assert info.value.line_no == 2
    assert f"{p}:2" in str(info.value)


def test_read_detections_keeps_line_order(tmp_path):
    p = _write(tmp_path / "d.jsonl", det(model_id="B", cx=1), det(model_id="A", cx=2), det(model_id="B", cx=3))
    assert [(d.model_id, d.circle.cx) for d in read_detections(p)] == [("B", 1.0), ("A", 2.0), ("B", 3.0)]



def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_detections(tmp_path / "missing.jsonl")


def test_load_ground_truth_groups_interleaved_images(tmp_path):
    p = _write(
        tmp_path / "gt.jsonl",
        {"image_id": "a", "cx": 1, "cy": 1, "r": 1},
        {"image_id": "b", "cx": 2, "cy": 2, "r": 1},
        {"image_id": "a", "cx": 3, "cy": 3, "r": 1},
    )
    gts = load_ground_truth(p)
    assert list(gts) == ["a", "b"]
    assert [c.cx for c in gts["a"].circles] == [1, 3]
    assert len(gts["b"].circles) == 1


def test_ground_truth_missing_radius(tmp_path):
    p = _write(tmp_path / "gt.jsonl", {"image_id": "a", "cx": 1, "cy": 1})
    with pytest.raises(RecordParseError) as info:
        load_ground_truth(p)
    assert info.value.field == "r"


def test_detection_round_trip_is_exact(tmp_path):
    dets = [
        Detection(circle=Circle(cx=0.1 + 0.2, cy=1 / 3, r=2.718281828459045), score=0.7, model_id="A", image_id="x"),
        Detection(circle=Circle(cx=5, cy=6, r=7), score=1.0, model_id="B", image_id="x"),
    ]
    p = write_detections(tmp_path / "out.jsonl", dets)
    assert load_detections(p).detections() == dets


def test_ground_truth_round_trip(tmp_path):
    gts = [GroundTruth(image_id="a", circles=[Circle(cx=1.5, cy=2.25, r=3.125)])]
    p = write_ground_truth(tmp_path / "gt.jsonl", gts)
    assert list(load_ground_truth(p).values()) == gts


def test_empty_result_writes_empty_file(tmp_path):
    p = write_fused(tmp_path / "fused.jsonl", [])
    assert p.read_bytes() == b""


def test_fused_output_fixed_key_order_and_reload(tmp_path):
    d1 = Detection(circle=Circle(cx=10, cy=10, r=5), score=0.8, model_id="A", image_id="img")
    d2 = Detection(circle=Circle(cx=10.5, cy=10, r=5), score=0.6, model_id="B", image_id="img")
    entries = wcf([[d1], [d2]])
    p = write_fused(tmp_path / "fused.jsonl", entries)
    line = json.loads(p.read_text(encoding="utf-8").splitlines()[0])
    assert list(line) == ["image_id", "cx", "cy", "r", "mean_score", "count", "source_models"]
    records = load_fused(p)
    assert records[0].count == 2
    assert records[0].source_models == ["A", "B"]
    scored = load_scored(p)
    assert scored.model_order == ["wcf"]
    assert scored.detections()[0].score == pytest.approx(0.7)


def test_fused_record_count_must_match_sources(tmp_path):
    p = _write(
        tmp_path / "fused.jsonl",
        {"image_id": "a", "cx": 1, "cy": 1, "r": 1, "mean_score": 0.5, "count": 2, "source_models": ["A"]},
    )
    with pytest.raises(RecordParseError):
        load_fused(p)


def test_report_round_trip(tmp_path):
    gt = GroundTruth(image_id="img", circles=[Circle(cx=10, cy=10, r=5)])
    d = Detection(circle=Circle(cx=10, cy=10, r=5), score=0.9, model_id="A", image_id="img")
    report = evaluate([d], [gt])
    p = write_report(tmp_path / "report.json", report)
    data = json.loads(p.read_text(encoding="utf-8"))
    assert list(data)[:4] == ["map_50_95", "map_50", "map_75", "ar_50_95"]
    assert load_report(p) == report


def test_manifest_digest_ignores_timestamp(tmp_path):
    base = dict(command="fuse", config={"t_score": 0.9}, model_order=["A"], tool_version="1.0.0")
    a = RunManifest(timestamp="2024-01-01T00:00:00", **base)
    b = RunManifest(timestamp="2025-06-01T12:00:00", **base)
    assert manifest_digest(a) == manifest_digest(b)
    p = write_manifest(tmp_path / "m.json", a)
    assert json.loads(p.read_text(encoding="utf-8"))["digest"] == manifest_digest(a)


def test_file_digest_changes_with_content(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("a", encoding="utf-8")
    first = file_digest(p)
    p.write_text("b", encoding="utf-8")
    assert file_digest(p) != first


def test_detection_set_model_sets_fill_missing_models():
    ds = DetectionSet()
    ds.add(Detection(circle=Circle(cx=1, cy=1, r=1), score=0.5, model_id="A", image_id="x"))
    ds.add(Detection(circle=Circle(cx=1, cy=1, r=1), score=0.5, model_id="B", image_id="y"))
    assert [len(s) for s in ds.model_sets("x")] == [1, 0]
    assert [len(s) for s in ds.model_sets("y")] == [0, 1]
