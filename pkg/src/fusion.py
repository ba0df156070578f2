"""
加权圆融合（Weighted Circle Fusion, WCF）以及 circle-NMS / circle-Soft-NMS 基线。

WCF 流程：
1. 第一个模型的检测结果作为初始融合列表 R；
2. 依次处理后续模型：每个检测（按分数降序）与 R 中 cIoU 最高且超过阈值、
   本轮尚未吸收过检测的条目融合，否则作为新条目追加到 R；
3. 融合后的几何为所有组成检测的分数加权平均，分数为组成检测分数的算术平均；
4. 最后用 T score / T count 双阈值剔除不可靠的条目。

所有函数都是纯函数，融合状态 R 只存在于单次调用内部。
"""
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from src.errors import DomainError
from src.geometry import ciou
from src.schemas import Circle, Detection, WcfConfig


@dataclass(frozen=True)
class FusedCircle:
    """融合列表 R 中的一个条目"""
    circle: Circle
    mean_score: float
    count: int
    constituents: Tuple[Tuple[str, Detection], ...]
    weight_sum: float  # Σ s_i
    weighted_sums: Tuple[float, float, float]  # (Σ x_i s_i, Σ y_i s_i, Σ r_i s_i)

    @classmethod
    def from_detection(cls, d: Detection) -> "FusedCircle":
        _check_weight(d)
        s = d.score
        return cls(
            circle=d.circle,
            mean_score=s,
            count=1,
            constituents=((d.model_id, d),),
            weight_sum=s,
            weighted_sums=(d.circle.cx * s, d.circle.cy * s, d.circle.r * s),
        )

    @property
    def image_id(self) -> str:
        return self.constituents[0][1].image_id

    @property
    def source_models(self) -> List[str]:
        return [model_id for model_id, _ in self.constituents]

    def to_detection(self, model_id: str = "wcf") -> Detection:
        return Detection(
            circle=self.circle,
            score=self.mean_score,
            model_id=model_id,
            image_id=self.image_id,
        )


def _check_weight(d: Detection) -> None:
    if not d.score > 0:
        raise DomainError(f"检测分数必须为正才能参与加权融合，实际为 {d.score}")


def _processing_order(dets: Sequence[Detection]) -> List[int]:
    """分数降序；同分时半径降序，再按输入顺序。"""
    return sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, -dets[i].circle.r, i),
    )


def _single_image_id(dets: Iterable[Detection]) -> Optional[str]:
    image_ids = {d.image_id for d in dets}
    if len(image_ids) > 1:
        raise DomainError(f"一次融合只能处理单张图像，实际包含: {sorted(image_ids)}")
    return next(iter(image_ids), None)


def fuse_pair(f: FusedCircle, d: Detection) -> FusedCircle:
    """
    把检测 d 并入条目 f，返回新的条目。

    通过累计加权和维护几何，所以结果始终是全部组成检测的分数加权平均；
    count == 2 时即为两两融合公式。
    """
    _check_weight(d)
    if d.image_id != f.image_id:
        raise DomainError(f"不能融合不同图像的检测: {f.image_id} / {d.image_id}")

    s = d.score
    weight_sum = f.weight_sum + s
    sx, sy, sr = f.weighted_sums
    weighted_sums = (sx + d.circle.cx * s, sy + d.circle.cy * s, sr + d.circle.r * s)
    count = f.count + 1
    return FusedCircle(
        circle=Circle(
            cx=weighted_sums[0] / weight_sum,
            cy=weighted_sums[1] / weight_sum,
            r=weighted_sums[2] / weight_sum,
        ),
        mean_score=weight_sum / count,
        count=count,
        constituents=f.constituents + ((d.model_id, d),),
        weight_sum=weight_sum,
        weighted_sums=weighted_sums,
    )


def wcf_merge(
    model_sets: Sequence[Sequence[Detection]],
    cfg: Optional[WcfConfig] = None,
) -> List[FusedCircle]:
    """按模型顺序逐个融合，返回阈值过滤前的 R（保持插入顺序）。"""
    cfg = cfg or WcfConfig()
    sets = [list(s) for s in model_sets]
    if not sets:
        return []
    _single_image_id(d for s in sets for d in s)

    if cfg.pre_nms_threshold is not None:
        sets = [circle_nms(s, cfg.pre_nms_threshold) for s in sets]

    fused: List[FusedCircle] = [FusedCircle.from_detection(d) for d in sets[0]]

    for incoming in sets[1:]:
        # 本轮新追加的条目不参与本轮匹配，同一模型不会对同一目标投两票
        eligible = len(fused)
        absorbed = [False] * eligible
        for i in _processing_order(incoming):
            d = incoming[i]
            best_idx, best_overlap = None, cfg.ciou_threshold
            for idx in range(eligible):
                if absorbed[idx]:
                    continue
                overlap = ciou(fused[idx].circle, d.circle)
                if overlap > best_overlap:
                    best_idx, best_overlap = idx, overlap
            if best_idx is None:
                fused.append(FusedCircle.from_detection(d))
            else:
                fused[best_idx] = fuse_pair(fused[best_idx], d)
                absorbed[best_idx] = True

    return fused


def passes_thresholds(entry: FusedCircle, cfg: WcfConfig) -> bool:
    score_ok = entry.mean_score >= cfg.t_score
    count_ok = entry.count >= cfg.t_count
    if cfg.rule == "and":
        return score_ok and count_ok
    return score_ok or count_ok


def wcf(
    model_sets: Sequence[Sequence[Detection]],
    cfg: Optional[WcfConfig] = None,
) -> List[FusedCircle]:
    """完整 WCF：融合后用双阈值过滤。"""
    cfg = cfg or WcfConfig()
    return [entry for entry in wcf_merge(model_sets, cfg) if passes_thresholds(entry, cfg)]


# ------------------------------------------------------------------ #
# 基线方法
# ------------------------------------------------------------------ #

def circle_nms(dets: Sequence[Detection], ciou_threshold: float = 0.5) -> List[Detection]:
    """贪心 NMS：保留最高分检测，删除与其 cIoU 超过阈值的其余检测。"""
    remaining = [dets[i] for i in _processing_order(dets)]
    keep: List[Detection] = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [d for d in remaining if ciou(best.circle, d.circle) <= ciou_threshold]
    return keep


def circle_soft_nms(
    dets: Sequence[Detection],
    ciou_threshold: float = 0.3,
    mode: str = "linear",
    sigma: float = 0.5,
    final_score_cut: float = 0.001,
) -> List[Detection]:
    """
    Soft-NMS：不直接删除重叠检测，而是按重叠度衰减其分数。

    linear:   s <- s * (1 - o)
    gaussian: s <- s * exp(-o^2 / sigma)
    只对 cIoU 超过阈值的检测衰减；输出为选出顺序，衰减后低于 final_score_cut 的被丢弃。
    """
    if sigma <= 0:
        raise DomainError(f"sigma 必须为正，实际为 {sigma}")
    if mode not in ("linear", "gaussian"):
        raise DomainError(f"未知的 Soft-NMS 模式: {mode}")

    # (检测, 当前分数, 输入位置)
    pool = [(d, d.score, i) for i, d in enumerate(dets)]
    emitted: List[Tuple[Detection, float]] = []
    while pool:
        k = min(
            range(len(pool)),
            key=lambda j: (-pool[j][1], -pool[j][0].circle.r, pool[j][2]),
        )
        best, best_score, _ = pool.pop(k)
        emitted.append((best, best_score))

        decayed = []
        for d, s, pos in pool:
            overlap = ciou(best.circle, d.circle)
            if overlap > ciou_threshold:
                if mode == "linear":
                    s = s * (1.0 - overlap)
                else:
                    s = s * math.exp(-(overlap * overlap) / sigma)
            decayed.append((d, s, pos))
        pool = decayed

    return [
        d if s == d.score else d.model_copy(update={"score": s})
        for d, s in emitted
        if s >= final_score_cut and s > 0
    ]
