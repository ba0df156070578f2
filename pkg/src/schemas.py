from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Circle(BaseModel):
    """圆表示：圆心坐标与半径，单位为像素"""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    cx: float = Field(description="圆心 x 坐标")
    cy: float = Field(description="圆心 y 坐标")
    r: float = Field(gt=0, description="半径，必须为正")


class Frame(BaseModel):
    """图像画幅（连续坐标系下的宽与高）"""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    width: float = Field(gt=0)
    height: float = Field(gt=0)


class Detection(BaseModel):
    """单个模型在单张图像上的一个带分数的圆检测"""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    circle: Circle
    score: float = Field(gt=0, le=1, description="置信度 (0, 1]")
    model_id: str
    image_id: str


class WcfConfig(BaseModel):
    """加权圆融合配置，默认值与实验设置一致"""
    model_config = ConfigDict(frozen=True)

    ciou_threshold: float = Field(default=0.5, gt=0, lt=1, description="融合所需的 cIoU 下限（严格大于）")
    t_score: float = Field(default=0.9, ge=0, le=1, description="平均分阈值 T score")
    t_count: int = Field(default=2, ge=1, description="融合数量阈值 T count")
    rule: Literal["or", "and"] = Field(
        default="or",
        description="or：两个阈值满足其一即保留；and：两者都需满足",
    )
    pre_nms_threshold: Optional[float] = Field(
        default=None,
        gt=0,
        lt=1,
        description="融合前对每个模型先做 circle-NMS 的阈值；None 表示不做",
    )


class SoftNmsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    ciou_threshold: float = Field(default=0.3, ge=0, lt=1)
    mode: Literal["linear", "gaussian"] = "linear"
    sigma: float = Field(default=0.5, gt=0)
    final_score_cut: float = Field(default=0.001, ge=0, le=1)


class GroundTruth(BaseModel):
    """单张图像的标注圆（无分数）"""
    image_id: str
    circles: List[Circle] = Field(default_factory=list)


class EvalReport(BaseModel):
    """COCO 风格 cIoU 评估结果，字段顺序即报告文件中的键顺序"""
    map_50_95: float = Field(ge=0, le=1)
    map_50: float = Field(ge=0, le=1)
    map_75: float = Field(ge=0, le=1)
    ar_50_95: float = Field(ge=0, le=1)
    per_threshold_ap: List[Tuple[float, float]] = Field(
        default_factory=list,
        description="(阈值, AP) 列表，阈值 0.50:0.05:0.95",
    )
    tp: int = Field(ge=0, description="cIoU 0.5 下的真阳性数")
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)

    @property
    def matched_counts(self) -> Tuple[int, int, int]:
        return self.tp, self.fp, self.fn

    @property
    def precision_50(self) -> float:
        total = self.tp + self.fp
        return self.tp / total if total else 0.0

    @property
    def recall_50(self) -> float:
        total = self.tp + self.fn
        return self.tp / total if total else 0.0


# ------------------------------------------------------------------ #
# 文件记录（每行一个 JSON 对象）
# ------------------------------------------------------------------ #

class DetectionRecord(BaseModel):
    # 检测器导出脚本可能附带额外字段，静默忽略
    model_config = ConfigDict(extra="ignore", allow_inf_nan=False)

    image_id: str
    model_id: str
    cx: float
    cy: float
    r: float = Field(gt=0)
    score: float = Field(gt=0, le=1)


class GroundTruthRecord(BaseModel):
    model_config = ConfigDict(extra="ignore", allow_inf_nan=False)

    image_id: str
    cx: float
    cy: float
    r: float = Field(gt=0)


class FusedRecord(BaseModel):
    model_config = ConfigDict(extra="ignore", allow_inf_nan=False)

    image_id: str
    cx: float
    cy: float
    r: float = Field(gt=0)
    mean_score: float = Field(gt=0, le=1)
    count: int = Field(ge=1)
    source_models: List[str] = Field(default_factory=list, description="参与融合的模型，按融合顺序")

    @model_validator(mode="after")
    def _check_provenance(self) -> "FusedRecord":
        if self.source_models and len(self.source_models) != self.count:
            raise ValueError(
                f"count={self.count} 与 source_models 数量 {len(self.source_models)} 不一致"
            )
        return self


# ------------------------------------------------------------------ #
# 合成数据与运行清单
# ------------------------------------------------------------------ #

class SynthConfig(BaseModel):
    """合成集成场景配置"""
    model_config = ConfigDict(frozen=True)

    n_images: int = Field(default=20, ge=1)
    gt_per_image: int = Field(default=10, ge=0)
    n_models: int = Field(default=5, ge=1)
    pos_jitter_sigma: float = Field(default=0.5, ge=0, description="圆心高斯扰动标准差（像素）")
    radius_jitter_frac: float = Field(default=0.02, ge=0, description="半径对数正态扰动的标准差")
    detect_prob: float = Field(default=0.9, ge=0, le=1)
    fp_per_image_rate: float = Field(default=2.0, ge=0, description="每个模型每张图像的误检期望数")
    fp_score_range: Tuple[float, float] = (0.05, 0.8)
    tp_score_range: Tuple[float, float] = (0.5, 1.0)
    radius_range: Tuple[float, float] = (20.0, 40.0)
    seed: int = 0
    frame: Frame = Frame(width=512, height=512)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        for name in ("fp_score_range", "tp_score_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{name} 需满足 0 < lo <= hi <= 1，实际为 {(lo, hi)}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"radius_range 需满足 0 < lo <= hi，实际为 {(lo, hi)}")
        if 2 * hi > min(self.frame.width, self.frame.height):
            raise ValueError("radius_range 上限过大，圆无法完整放入画幅")
        return self


class FileDigest(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    """每次命令运行随输出写出的清单"""
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: List[FileDigest] = Field(default_factory=list)
    outputs: List[FileDigest] = Field(default_factory=list)
    model_order: List[str] = Field(default_factory=list, description="融合顺序即命令行文件顺序")
    tool_version: str
    timestamp: str
    digest: str = Field(default="", description="除 timestamp 外全部内容的 sha256")


class RotationCheck(BaseModel):
    """旋转一致性检查结果：wcf(x) 与 rotate⁻¹(wcf(rotate(x))) 的最大差异"""
    passed: bool
    tolerance: float
    images: int = 0
    entries: int = 0
    count_mismatches: int = Field(default=0, description="条目数量或 count 不一致的次数")
    max_center_discrepancy: float = 0.0
    max_radius_discrepancy: float = 0.0
    max_score_discrepancy: float = 0.0
