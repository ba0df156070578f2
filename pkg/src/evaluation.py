"""
基于圆 IoU 的 COCO 风格检测评估：固定阈值 AP、0.5:0.95 mAP 与平均召回率。

约定：
- 101 点插值 AP（召回率 0.00, 0.01, ..., 1.00 处取精度包络）；
- 每张图像最多取分数最高的 max_dets=100 个检测，AP 与 AR 均适用；
- 匹配为按分数降序的贪心匹配，同分保持输入顺序；每个标注圆最多匹配一次；
- 标注集合为空时所有指标记为 0.0。
"""
import math
from collections import OrderedDict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import DomainError
from src.fusion import circle_nms, circle_soft_nms, wcf
from src.geometry import ciou, rotate90ccw, rotate_detection
from src.schemas import (
    Detection,
    EvalReport,
    Frame,
    GroundTruth,
    RotationCheck,
    SoftNmsConfig,
    WcfConfig,
)

COCO_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0
DEFAULT_MAX_DETS = 100
METHOD_NAMES = ("nms", "soft_nms", "wcf")

GroundTruths = Union[Mapping[str, GroundTruth], Iterable[GroundTruth]]
Match = Tuple[Detection, Optional[int]]


def _gt_index(gts: GroundTruths) -> Dict[str, GroundTruth]:
    if isinstance(gts, Mapping):
        return dict(gts)
    index: Dict[str, GroundTruth] = {}
    for gt in gts:
        if gt.image_id in index:
            merged = index[gt.image_id].circles + gt.circles
            index[gt.image_id] = GroundTruth(image_id=gt.image_id, circles=merged)
        else:
            index[gt.image_id] = gt
    return index


def _score_order(dets: Sequence[Detection]) -> List[int]:
    # sorted() 稳定，同分保持输入顺序
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def _greedy_match(overlaps: np.ndarray, ciou_threshold: float) -> List[Optional[int]]:
    """overlaps 的行已按分数降序排列，返回每行匹配到的标注下标。"""
    n_dets, n_gt = overlaps.shape
    taken = np.zeros(n_gt, dtype=bool)
    result: List[Optional[int]] = []
    for row in range(n_dets):
        best_idx, best = None, -1.0
        for g in range(n_gt):
            if taken[g]:
                continue
            o = overlaps[row, g]
            if o >= ciou_threshold and o > best:
                best_idx, best = g, o
        if best_idx is not None:
            taken[best_idx] = True
        result.append(best_idx)
    return result


def _overlap_matrix(dets: Sequence[Detection], gt_circles) -> np.ndarray:
    overlaps = np.zeros((len(dets), len(gt_circles)))
    for i, d in enumerate(dets):
        for g, c in enumerate(gt_circles):
            overlaps[i, g] = ciou(d.circle, c)
    return overlaps


def match_detections(
    dets: Sequence[Detection],
    gt: GroundTruth,
    ciou_threshold: float,
) -> List[Match]:
    """单张图像上的贪心匹配，按分数降序返回 (检测, 匹配标注下标或 None)。"""
    ordered = [dets[i] for i in _score_order(dets)]
    overlaps = _overlap_matrix(ordered, gt.circles)
    return list(zip(ordered, _greedy_match(overlaps, ciou_threshold)))


class _ImageMatcher:
    """缓存一张图像的排序与 cIoU 矩阵，供多个阈值复用。"""

    def __init__(self, dets: Sequence[Detection], gt: GroundTruth, max_dets: int):
        order = _score_order(dets)[:max_dets]
        self.dets = [dets[i] for i in order]
        self.n_gt = len(gt.circles)
        self.overlaps = _overlap_matrix(self.dets, gt.circles)

    def flags(self, ciou_threshold: float) -> List[bool]:
        return [m is not None for m in _greedy_match(self.overlaps, ciou_threshold)]


def _build_matchers(
    dets: Iterable[Detection],
    gts: GroundTruths,
    max_dets: int,
) -> Tuple[List[_ImageMatcher], int]:
    gt_index = _gt_index(gts)
    by_image: Dict[str, List[Detection]] = OrderedDict()
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)

    matchers = []
    for image_id in sorted(set(by_image) | set(gt_index)):
        gt = gt_index.get(image_id) or GroundTruth(image_id=image_id)
        matchers.append(_ImageMatcher(by_image.get(image_id, []), gt, max_dets))
    n_gt = sum(len(gt.circles) for gt in gt_index.values())
    return matchers, n_gt


def _pooled_flags(matchers: Sequence[_ImageMatcher], ciou_threshold: float) -> np.ndarray:
    scores: List[float] = []
    flags: List[bool] = []
    for m in matchers:
        scores.extend(d.score for d in m.dets)
        flags.extend(m.flags(ciou_threshold))
    if not scores:
        return np.zeros(0, dtype=bool)
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    return np.asarray(flags, dtype=bool)[order]


def _interpolated_ap(tp_flags: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # 精度包络：从右向左取累计最大值
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(
    dets: Iterable[Detection],
    gts: GroundTruths,
    ciou_threshold: float,
    max_dets: int = DEFAULT_MAX_DETS,
) -> float:
    """跨图像汇总检测、按分数排序后的 101 点插值 AP。"""
    matchers, n_gt = _build_matchers(dets, gts, max_dets)
    return _interpolated_ap(_pooled_flags(matchers, ciou_threshold), n_gt)


def recall_at(
    dets: Iterable[Detection],
    gts: GroundTruths,
    ciou_threshold: float,
    max_dets: int = DEFAULT_MAX_DETS,
) -> float:
    matchers, n_gt = _build_matchers(dets, gts, max_dets)
    if n_gt == 0:
        return 0.0
    return sum(sum(m.flags(ciou_threshold)) for m in matchers) / n_gt


def evaluate(
    dets: Iterable[Detection],
    gts: GroundTruths,
    max_dets: int = DEFAULT_MAX_DETS,
) -> EvalReport:
    matchers, n_gt = _build_matchers(dets, gts, max_dets)

    per_threshold_ap: List[Tuple[float, float]] = []
    recalls: List[float] = []
    tp_50 = n_dets = 0
    for threshold in COCO_THRESHOLDS:
        flags = _pooled_flags(matchers, threshold)
        per_threshold_ap.append((threshold, _interpolated_ap(flags, n_gt)))
        n_tp = int(flags.sum())
        recalls.append(n_tp / n_gt if n_gt else 0.0)
        if threshold == 0.5:
            tp_50, n_dets = n_tp, int(flags.size)

    ap = dict(per_threshold_ap)
    return EvalReport(
        map_50_95=float(np.mean([v for _, v in per_threshold_ap])),
        map_50=ap[0.5],
        map_75=ap[0.75],
        ar_50_95=float(np.mean(recalls)),
        per_threshold_ap=per_threshold_ap,
        tp=tp_50,
        fp=n_dets - tp_50,
        fn=n_gt - tp_50,
    )


def compare_methods(
    model_sets_by_image: Mapping[str, Sequence[Sequence[Detection]]],
    gts: GroundTruths,
    model_order: Sequence[str],
    wcf_cfg: Optional[WcfConfig] = None,
    nms_threshold: float = 0.5,
    soft_cfg: Optional[SoftNmsConfig] = None,
) -> "OrderedDict[str, EvalReport]":
    """
    在同一输入上评估各单模型、合并后的 NMS / Soft-NMS 与 WCF。

    model_sets_by_image 的每个值按 model_order 给出各模型的检测列表。
    """
    wcf_cfg = wcf_cfg or WcfConfig()
    soft_cfg = soft_cfg or SoftNmsConfig()
    clashes = set(model_order) & set(METHOD_NAMES)
    if clashes or len(set(model_order)) != len(model_order):
        raise DomainError(
            f"模型名称必须唯一且不能与方法名 {METHOD_NAMES} 重复，实际为 {list(model_order)}"
        )

    per_model: Dict[str, List[Detection]] = {m: [] for m in model_order}
    nms_out: List[Detection] = []
    soft_out: List[Detection] = []
    wcf_out: List[Detection] = []
    for image_id in sorted(model_sets_by_image):
        sets = model_sets_by_image[image_id]
        pooled = [d for s in sets for d in s]
        for model_id, dets in zip(model_order, sets):
            per_model[model_id].extend(dets)
        nms_out.extend(circle_nms(pooled, nms_threshold))
        soft_out.extend(circle_soft_nms(pooled, **soft_cfg.model_dump()))
        wcf_out.extend(entry.to_detection() for entry in wcf(sets, wcf_cfg))

    reports: "OrderedDict[str, EvalReport]" = OrderedDict()
    for model_id in model_order:
        reports[model_id] = evaluate(per_model[model_id], gts)
    reports["nms"] = evaluate(nms_out, gts)
    reports["soft_nms"] = evaluate(soft_out, gts)
    reports["wcf"] = evaluate(wcf_out, gts)
    return reports


def rotation_check(
    model_sets_by_image: Mapping[str, Sequence[Sequence[Detection]]],
    frame: Frame,
    cfg: Optional[WcfConfig] = None,
    tolerance: float = 1e-6,
) -> RotationCheck:
    """
    顺时针旋转全部输入后做 WCF，再逆时针旋转回原画幅，逐条目与直接 WCF 的结果比较。
    圆心越出画幅时抛出 DomainError。
    """
    cfg = cfg or WcfConfig()
    rotated_frame = Frame(width=frame.height, height=frame.width)
    entries = mismatches = 0
    max_center = max_radius = max_score = 0.0

    for image_id in sorted(model_sets_by_image):
        sets = model_sets_by_image[image_id]
        direct = wcf(sets, cfg)
        rotated_sets = [[rotate_detection(d, frame) for d in s] for s in sets]
        via_rotation = wcf(rotated_sets, cfg)

        entries += len(direct)
        if len(direct) != len(via_rotation):
            mismatches += abs(len(direct) - len(via_rotation))
        for a, b in zip(direct, via_rotation):
            back, _ = rotate90ccw(b.circle, rotated_frame)
            if a.count != b.count:
                mismatches += 1
            max_center = max(max_center, math.hypot(a.circle.cx - back.cx, a.circle.cy - back.cy))
            max_radius = max(max_radius, abs(a.circle.r - back.r))
            max_score = max(max_score, abs(a.mean_score - b.mean_score))

    passed = mismatches == 0 and max(max_center, max_radius, max_score) <= tolerance
    return RotationCheck(
        passed=passed,
        tolerance=tolerance,
        images=len(model_sets_by_image),
        entries=entries,
        count_mismatches=mismatches,
        max_center_discrepancy=max_center,
        max_radius_discrepancy=max_radius,
        max_score_discrepancy=max_score,
    )
