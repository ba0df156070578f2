"""随机化的不变量检查，每组至少 1000 个带种子的用例。"""
import itertools

import numpy as np
import pytest

from src.dataio import load_detections, write_detections
from src.fusion import circle_nms, wcf_merge
from src.geometry import circle_area, circle_intersection_area, ciou
from src.schemas import Circle, Detection, WcfConfig
from src.synth import mc_ciou_oracle

N_CASES = 1000


def _random_circle(rng, span=100.0, r_lo=1.0, r_hi=20.0) -> Circle:
    return Circle(cx=float(rng.uniform(0, span)), cy=float(rng.uniform(0, span)), r=float(rng.uniform(r_lo, r_hi)))


def _random_model_sets(rng, image_id="img"):
    """以若干目标为中心，各模型带噪声地检测，外加随机误检"""
    objects = [_random_circle(rng, span=200.0, r_lo=5.0) for _ in range(int(rng.integers(1, 6)))]
    sets = []
    for m in range(int(rng.integers(1, 5))):
        dets = []
        for obj in objects:
            if rng.random() < 0.8:
                dets.append(Detection(
                    circle=Circle(
                        cx=obj.cx + float(rng.normal(0, 1.5)),
                        cy=obj.cy + float(rng.normal(0, 1.5)),
                        r=obj.r * float(np.exp(rng.normal(0, 0.05))),
                    ),
                    score=float(rng.uniform(0.05, 1.0)),
                    model_id=f"m{m + 1}",
                    image_id=image_id,
                ))
        for _ in range(int(rng.integers(0, 3))):
            dets.append(Detection(
                circle=_random_circle(rng, span=200.0),
                score=float(rng.uniform(0.05, 1.0)),
                model_id=f"m{m + 1}",
                image_id=image_id,
            ))
        sets.append(dets)
    return sets


def test_ciou_symmetric_and_bounded():
    rng = np.random.default_rng(100)
    for _ in range(N_CASES):
        a, b = _random_circle(rng, span=40.0), _random_circle(rng, span=40.0)
        value = ciou(a, b)
        assert value == ciou(b, a)
        assert 0.0 <= value <= 1.0
        inter = circle_intersection_area(a, b)
        assert 0.0 <= inter <= min(circle_area(a), circle_area(b)) * (1 + 1e-12)
    for _ in range(N_CASES):
        c = _random_circle(rng)
        assert ciou(c, c) == 1.0


def test_nms_output_is_antichain_and_covers_input():
    rng = np.random.default_rng(101)
    for _ in range(N_CASES):
        sets = _random_model_sets(rng)
        pooled = [d for s in sets for d in s]
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        kept = circle_nms(pooled, thr)
        for a, b in itertools.combinations(kept, 2):
            assert ciou(a.circle, b.circle) <= thr
        # 被删除的检测必与某个保留检测重叠超过阈值
        kept_ids = {id(d) for d in kept}
        for d in pooled:
            if id(d) not in kept_ids:
                assert any(ciou(k.circle, d.circle) > thr for k in kept)
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)


def test_wcf_conserves_counts_and_weighted_means():
    rng = np.random.default_rng(102)
    for _ in range(N_CASES):
        sets = _random_model_sets(rng)
        merged = wcf_merge(sets, WcfConfig())
        assert sum(e.count for e in merged) == sum(len(s) for s in sets)
        for e in merged:
            # 每个模型最多贡献一个检测
            models = e.source_models
            assert len(set(models)) == len(models)
            assert e.count <= len(sets)
            dets = [d for _, d in e.constituents]
            w = sum(d.score for d in dets)
            assert e.circle.cx == pytest.approx(sum(d.circle.cx * d.score for d in dets) / w, rel=1e-9, abs=1e-9)
            assert e.circle.cy == pytest.approx(sum(d.circle.cy * d.score for d in dets) / w, rel=1e-9, abs=1e-9)
            assert e.circle.r == pytest.approx(sum(d.circle.r * d.score for d in dets) / w, rel=1e-9)
            assert e.mean_score == pytest.approx(w / e.count, rel=1e-12)
            assert min(d.score for d in dets) - 1e-12 <= e.mean_score <= max(d.score for d in dets) + 1e-12


def test_detection_file_round_trip(tmp_path):
    rng = np.random.default_rng(103)
    dets = [
        Detection(
            circle=_random_circle(rng, span=1000.0, r_lo=0.5, r_hi=50.0),
            score=float(rng.uniform(1e-6, 1.0)),
            model_id=f"m{int(rng.integers(1, 4))}",
            image_id=f"img{int(rng.integers(0, 10)):02d}",
        )
        for _ in range(N_CASES)
    ]
    path = write_detections(tmp_path / "dets.jsonl", dets)
    loaded = load_detections(path)
    assert len(loaded) == N_CASES
    assert sorted(loaded.detections(), key=repr) == sorted(dets, key=repr)


def test_analytic_ciou_agrees_with_monte_carlo():
    rng = np.random.default_rng(104)
    within = 0
    for seed in range(100):
        a = _random_circle(rng, span=10.0, r_lo=1.0, r_hi=5.0)
        b = Circle(cx=a.cx + float(rng.uniform(-6, 6)), cy=a.cy + float(rng.uniform(-6, 6)), r=float(rng.uniform(1, 5)))
        est = mc_ciou_oracle(a, b, samples=10_000_000, seed=seed)
        if abs(ciou(a, b) - est.estimate) <= 3 * est.std_error:
            within += 1
    assert within >= 99


def test_ciou_is_one_exactly_for_identical_circles():
    rng = np.random.default_rng(105)
    for _ in range(N_CASES):
        a = _random_circle(rng)
        assert ciou(a, Circle(cx=a.cx, cy=a.cy, r=a.r)) == 1.0
        step = float(10 ** rng.uniform(-5, 0))
        moved = [
            Circle(cx=a.cx + step, cy=a.cy, r=a.r),
            Circle(cx=a.cx, cy=a.cy - step, r=a.r),
            Circle(cx=a.cx, cy=a.cy, r=a.r + step),
            Circle(cx=a.cx + step, cy=a.cy + step, r=a.r * 1.5),
        ]
        for b in moved:
            assert ciou(a, b) < 1.0
            assert ciou(b, a) < 1.0
