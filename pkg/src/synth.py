"""
带种子的合成集成场景生成器，以及 cIoU / 相交面积的蒙特卡洛估计。

生成器模拟多个检测模型的两类典型错误：漏检（detect_prob）与误检（fp_per_image_rate）。
误检与所有标注圆、所有真检测以及同图其它误检的 cIoU 都小于 0.1，
因此在 WCF 中误检永远不会与其它检测融合（count 恒为 1）。
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Union

import numpy as np

from src.dataio import DetectionSet, write_detections, write_ground_truth, write_json
from src.errors import DomainError
from src.geometry import ciou
from src.schemas import Circle, Detection, GroundTruth, SynthConfig

PRNG_NAME = "numpy.random.PCG64"
MAX_PLACEMENT_ATTEMPTS = 1000
GT_MAX_OVERLAP = 0.1
FP_MAX_OVERLAP = 0.1
MIN_ORACLE_SAMPLES = 100_000
_CHUNK = 1 << 20


class McEstimate(NamedTuple):
    estimate: float
    std_error: float
    samples: int


@dataclass
class SynthResult:
    ground_truth: "OrderedDict[str, GroundTruth]" = field(default_factory=OrderedDict)
    model_detections: "OrderedDict[str, List[Detection]]" = field(default_factory=OrderedDict)

    def detection_set(self) -> DetectionSet:
        result = DetectionSet()
        for dets in self.model_detections.values():
            for d in dets:
                result.add(d)
        return result


def _place_circle(
    rng: np.random.Generator,
    cfg: SynthConfig,
    avoid: Sequence[Circle],
    max_overlap: float,
    strict: bool,
    what: str,
) -> Circle:
    r_lo, r_hi = cfg.radius_range
    width, height = cfg.frame.width, cfg.frame.height
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        r = float(rng.uniform(r_lo, r_hi))
        candidate = Circle(
            cx=float(rng.uniform(r, width - r)),
            cy=float(rng.uniform(r, height - r)),
            r=r,
        )
        overlaps = (ciou(candidate, other) for other in avoid)
        if strict:
            ok = all(o < max_overlap for o in overlaps)
        else:
            ok = all(o <= max_overlap for o in overlaps)
        if ok:
            return candidate
    raise DomainError(
        f"放置{what}失败（已重试 {MAX_PLACEMENT_ATTEMPTS} 次），"
        "请降低 gt_per_image / fp_per_image_rate 或减小 radius_range、增大画幅"
    )


def _jitter(rng: np.random.Generator, cfg: SynthConfig, c: Circle) -> Circle:
    dx, dy = rng.normal(0.0, cfg.pos_jitter_sigma, size=2)
    scale = math.exp(float(rng.normal(0.0, cfg.radius_jitter_frac)))
    return Circle(
        cx=min(max(c.cx + float(dx), 0.0), cfg.frame.width),
        cy=min(max(c.cy + float(dy), 0.0), cfg.frame.height),
        r=c.r * scale,
    )


def generate(cfg: SynthConfig) -> SynthResult:
    """完全由 cfg.seed 决定的合成标注与各模型检测。"""
    rng = np.random.default_rng(cfg.seed)
    model_ids = [f"model{k + 1}" for k in range(cfg.n_models)]
    result = SynthResult(model_detections=OrderedDict((m, []) for m in model_ids))

    for i in range(cfg.n_images):
        image_id = f"img{i:04d}"
        gt_circles: List[Circle] = []
        for _ in range(cfg.gt_per_image):
            gt_circles.append(
                _place_circle(rng, cfg, gt_circles, GT_MAX_OVERLAP, strict=False, what="标注圆")
            )
        result.ground_truth[image_id] = GroundTruth(image_id=image_id, circles=gt_circles)

        occupied: List[Circle] = list(gt_circles)
        for model_id in model_ids:
            for gt_circle in gt_circles:
                hit = rng.random() < cfg.detect_prob
                circle = _jitter(rng, cfg, gt_circle)
                score = float(rng.uniform(*cfg.tp_score_range))
                if not hit:
                    continue
                occupied.append(circle)
                result.model_detections[model_id].append(
                    Detection(circle=circle, score=score, model_id=model_id, image_id=image_id)
                )

        for model_id in model_ids:
            for _ in range(int(rng.poisson(cfg.fp_per_image_rate))):
                circle = _place_circle(rng, cfg, occupied, FP_MAX_OVERLAP, strict=True, what="误检圆")
                occupied.append(circle)
                score = float(rng.uniform(*cfg.fp_score_range))
                result.model_detections[model_id].append(
                    Detection(circle=circle, score=score, model_id=model_id, image_id=image_id)
                )

    return result


def write_synth(result: SynthResult, cfg: SynthConfig, out_dir: Union[str, Path]) -> List[Path]:
    """写出 gt.jsonl、每个模型一个检测文件以及 synth_meta.json 元数据。"""
    out_dir = Path(out_dir)
    written = [write_ground_truth(out_dir / "gt.jsonl", result.ground_truth.values())]
    for model_id, dets in result.model_detections.items():
        written.append(write_detections(out_dir / f"{model_id}.jsonl", dets))
    meta = {
        "config": cfg.model_dump(mode="json"),
        "prng": PRNG_NAME,
        "seed": cfg.seed,
        "files": [p.name for p in written],
    }
    written.append(write_json(out_dir / "synth_meta.json", meta))
    return written


# ------------------------------------------------------------------ #
# 蒙特卡洛估计
# ------------------------------------------------------------------ #

def _sample_counts(a: Circle, b: Circle, samples: int, seed: int) -> Dict[str, float]:
    if samples < MIN_ORACLE_SAMPLES:
        raise DomainError(f"蒙特卡洛样本数至少为 {MIN_ORACLE_SAMPLES}，实际为 {samples}")
    x_lo, x_hi = min(a.cx - a.r, b.cx - b.r), max(a.cx + a.r, b.cx + b.r)
    y_lo, y_hi = min(a.cy - a.r, b.cy - b.r), max(a.cy + a.r, b.cy + b.r)
    rng = np.random.default_rng(seed)

    n_both = n_either = 0
    remaining = samples
    while remaining > 0:
        n = min(_CHUNK, remaining)
        xs = rng.uniform(x_lo, x_hi, n)
        ys = rng.uniform(y_lo, y_hi, n)
        in_a = (xs - a.cx) ** 2 + (ys - a.cy) ** 2 < a.r * a.r
        in_b = (xs - b.cx) ** 2 + (ys - b.cy) ** 2 < b.r * b.r
        n_both += int(np.count_nonzero(in_a & in_b))
        n_either += int(np.count_nonzero(in_a | in_b))
        remaining -= n
    return {
        "both": n_both,
        "either": n_either,
        "box_area": (x_hi - x_lo) * (y_hi - y_lo),
    }


def mc_ciou_oracle(a: Circle, b: Circle, samples: int = 10_000_000, seed: int = 0) -> McEstimate:
    """在两圆联合外接矩形内均匀采样估计 cIoU，返回估计值与标准误。"""
    counts = _sample_counts(a, b, samples, seed)
    n_either = counts["either"]
    if n_either == 0:
        return McEstimate(0.0, 0.0, samples)
    p = counts["both"] / n_either
    return McEstimate(p, math.sqrt(p * (1.0 - p) / n_either), samples)


def mc_intersection_area(a: Circle, b: Circle, samples: int = 10_000_000, seed: int = 0) -> McEstimate:
    counts = _sample_counts(a, b, samples, seed)
    p = counts["both"] / samples
    box = counts["box_area"]
    return McEstimate(box * p, box * math.sqrt(p * (1.0 - p) / samples), samples)
