"""在默认合成场景上复现双阈值剔除误检与精度/召回取舍的方向。"""
import pytest

from src.evaluation import evaluate
from src.fusion import circle_nms, wcf, wcf_merge
from src.geometry import ciou
from src.main import main
from src.schemas import SynthConfig, WcfConfig
from src.synth import generate

FP_MAX_OVERLAP = 0.1


@pytest.fixture(scope="module")
def scenario():
    cfg = SynthConfig(
        n_images=20,
        gt_per_image=10,
        n_models=5,
        detect_prob=0.9,
        fp_per_image_rate=2.0,
        fp_score_range=(0.05, 0.8),
        seed=2024,
    )
    result = generate(cfg)
    ds = result.detection_set()
    sets = {image_id: ds.model_sets(image_id) for image_id in ds.image_ids()}
    return result, sets


def _is_false_positive(circle, gt):
    return all(ciou(circle, c) < FP_MAX_OVERLAP for c in gt.circles)


def _wcf_detections(sets, cfg=None):
    return [e.to_detection() for image_id in sorted(sets) for e in wcf(sets[image_id], cfg)]


def _nms_detections(sets):
    return [d for image_id in sorted(sets) for d in circle_nms([d for s in sets[image_id] for d in s], 0.5)]


def test_false_positive_entries_are_dropped(scenario):
    result, sets = scenario
    cfg = WcfConfig()
    n_fp_entries = 0
    for image_id, model_sets in sets.items():
        gt = result.ground_truth[image_id]
        for entry in wcf_merge(model_sets, cfg):
            if all(_is_false_positive(d.circle, gt) for _, d in entry.constituents):
                n_fp_entries += 1
                assert entry.count == 1
                assert entry.mean_score < 0.9
        survivors = wcf(model_sets, cfg)
        assert all(not _is_false_positive(e.circle, gt) for e in survivors)
    assert n_fp_entries > 0


def test_ground_truth_seen_by_two_models_survives(scenario):
    result, sets = scenario
    for image_id, model_sets in sets.items():
        gt = result.ground_truth[image_id]
        survivors = wcf(model_sets)
        for c in gt.circles:
            hits = sum(
                any(ciou(d.circle, c) >= 0.5 for d in dets)
                for dets in model_sets
            )
            if hits >= 2:
                assert any(ciou(e.circle, c) >= 0.5 for e in survivors)


def test_wcf_precision_beats_pooled_nms(scenario):
    result, sets = scenario
    wcf_report = evaluate(_wcf_detections(sets), result.ground_truth)
    nms_report = evaluate(_nms_detections(sets), result.ground_truth)
    assert wcf_report.precision_50 > nms_report.precision_50


def test_precision_recall_tradeoff_direction(scenario):
    result, sets = scenario
    wcf_report = evaluate(_wcf_detections(sets), result.ground_truth)
    nms_report = evaluate(_nms_detections(sets), result.ground_truth)
    assert wcf_report.tp <= nms_report.tp
    assert wcf_report.recall_50 <= nms_report.recall_50
    assert wcf_report.map_50_95 > nms_report.map_50_95


def test_scenario_is_deterministic(scenario):
    result, _ = scenario
    again = generate(SynthConfig(n_images=20, seed=2024))
    assert again.ground_truth == result.ground_truth
    assert again.model_detections == result.model_detections


@pytest.mark.parametrize("seed", range(10))
def test_rotcheck_command_passes(tmp_path, seed):
    synth_dir = tmp_path / "synth"
    assert main(["synth", "--n-images", "5", "--seed", str(seed), "--out", str(synth_dir), "--quiet"]) == 0
    out = tmp_path / "rot.json"
    inputs = [str(synth_dir / f"model{k}.jsonl") for k in range(1, 6)]
    assert main(["rotcheck", *inputs, "--tolerance", "1e-6", "--out", str(out), "--quiet"]) == 0
