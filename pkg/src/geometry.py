"""
圆几何基元：面积、两圆相交面积（解析解）、cIoU 以及 90° 刚体旋转。

所有函数均为不可变值上的纯函数，可在任意线程中并发调用。
"""
import math
from typing import Tuple

from src.errors import DomainError
from src.schemas import Circle, Detection, Frame, GroundTruth


def circle_area(c: Circle) -> float:
    return math.pi * c.r * c.r


def circle_intersection_area(a: Circle, b: Circle) -> float:
    """
    两圆相交面积的解析解。

    - 圆心距 d >= r_a + r_b：相离或外切，面积为 0；
    - d <= |r_a - r_b|：一圆包含另一圆（含内切），面积为小圆面积；
    - 其余情况使用透镜（两段弓形）公式。
    等号时走闭式分支。
    """
    # 固定参数顺序，保证 f(a, b) 与 f(b, a) 逐位相同
    if (a.r, a.cx, a.cy) > (b.r, b.cx, b.cy):
        a, b = b, a
    d = math.hypot(b.cx - a.cx, b.cy - a.cy)
    ra, rb = a.r, b.r
    if d >= ra + rb:
        return 0.0
    if d <= abs(ra - rb):
        r_min = min(ra, rb)
        return math.pi * r_min * r_min

    ra2, rb2, d2 = ra * ra, rb * rb, d * d
    # acos 参数可能因舍入略微越出 [-1, 1]
    alpha = math.acos(max(-1.0, min(1.0, (d2 + ra2 - rb2) / (2 * d * ra))))
    beta = math.acos(max(-1.0, min(1.0, (d2 + rb2 - ra2) / (2 * d * rb))))
    kite = 0.5 * math.sqrt(
        max(0.0, (-d + ra + rb) * (d + ra - rb) * (d - ra + rb) * (d + ra + rb))
    )
    area = ra2 * alpha + rb2 * beta - kite
    return min(max(area, 0.0), math.pi * min(ra2, rb2))


def ciou(a: Circle, b: Circle) -> float:
    """圆 IoU：交集面积 / 并集面积，取值 [0, 1]，对称。"""
    inter = circle_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = circle_area(a) + circle_area(b) - inter
    return min(1.0, inter / union)


# ------------------------------------------------------------------ #
# 90° 旋转（连续坐标，顺时针）
# ------------------------------------------------------------------ #

def _check_inside(c: Circle, f: Frame) -> None:
    if not (0.0 <= c.cx <= f.width and 0.0 <= c.cy <= f.height):
        raise DomainError(
            f"圆心 ({c.cx}, {c.cy}) 不在画幅 {f.width}x{f.height} 内，无法旋转"
        )


def rotate90cw(c: Circle, f: Frame) -> Tuple[Circle, Frame]:
    """(cx, cy) -> (H - cy, cx)，半径不变，画幅变为 (H, W)。"""
    _check_inside(c, f)
    rotated = Circle(cx=f.height - c.cy, cy=c.cx, r=c.r)
    return rotated, Frame(width=f.height, height=f.width)


def rotate90ccw(c: Circle, f: Frame) -> Tuple[Circle, Frame]:
    """rotate90cw 的逆变换：(cx, cy) -> (cy, W - cx)。"""
    _check_inside(c, f)
    rotated = Circle(cx=c.cy, cy=f.width - c.cx, r=c.r)
    return rotated, Frame(width=f.height, height=f.width)


def rotate_detection(d: Detection, f: Frame, clockwise: bool = True) -> Detection:
    rotate = rotate90cw if clockwise else rotate90ccw
    circle, _ = rotate(d.circle, f)
    return d.model_copy(update={"circle": circle})


def rotate_ground_truth(gt: GroundTruth, f: Frame, clockwise: bool = True) -> GroundTruth:
    rotate = rotate90cw if clockwise else rotate90ccw
    return GroundTruth(
        image_id=gt.image_id,
        circles=[rotate(c, f)[0] for c in gt.circles],
    )
