"""
检测、标注、融合结果与评估报告的文件格式。

检测 / 标注 / 融合文件均为 UTF-8 的逐行 JSON（JSONL），每行一条记录；
报告为单个 JSON 文档。写出时键顺序固定，浮点数使用最短可往返表示，
因此相同输入重复运行得到逐字节相同的文件。
"""
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

from pydantic import BaseModel, ValidationError

from src.errors import RecordParseError
from src.fusion import FusedCircle
from src.schemas import (
    Circle,
    Detection,
    DetectionRecord,
    EvalReport,
    FusedRecord,
    GroundTruth,
    GroundTruthRecord,
    RunManifest,
)

PathLike = Union[str, Path]
R = TypeVar("R", bound=BaseModel)

DETECTION_KEYS = ("image_id", "model_id", "cx", "cy", "r", "score")
GT_KEYS = ("image_id", "cx", "cy", "r")
FUSED_KEYS = ("image_id", "cx", "cy", "r", "mean_score", "count", "source_models")
REPORT_KEYS = ("map_50_95", "map_50", "map_75", "ar_50_95", "per_threshold_ap", "tp", "fp", "fn")


@dataclass
class DetectionSet:
    """按 图像 -> 模型 -> 有序检测列表 组织的检测集合"""
    images: Dict[str, Dict[str, List[Detection]]] = field(default_factory=OrderedDict)
    model_order: List[str] = field(default_factory=list)

    def add(self, d: Detection) -> None:
        if d.model_id not in self.model_order:
            self.model_order.append(d.model_id)
        per_image = self.images.setdefault(d.image_id, OrderedDict())
        per_image.setdefault(d.model_id, []).append(d)

    def extend(self, other: "DetectionSet") -> None:
        for d in other.detections():
            self.add(d)

    def image_ids(self) -> List[str]:
        return sorted(self.images)

    def model_sets(self, image_id: str) -> List[List[Detection]]:
        """按 model_order 返回该图像上各模型的检测列表（未出现的模型为空列表）。"""
        per_image = self.images.get(image_id, {})
        return [list(per_image.get(model_id, [])) for model_id in self.model_order]

    def detections(self, image_id: Optional[str] = None) -> List[Detection]:
        image_ids = [image_id] if image_id is not None else list(self.images)
        out: List[Detection] = []
        for iid in image_ids:
            for dets in self.images.get(iid, {}).values():
                out.extend(dets)
        return out

    def __len__(self) -> int:
        return sum(len(dets) for per_image in self.images.values() for dets in per_image.values())


# ------------------------------------------------------------------ #
# 读取
# ------------------------------------------------------------------ #

def _iter_records(path: PathLike, parse: Callable[[Dict[str, Any]], R]) -> Iterator[Tuple[int, R]]:
    path = Path(path)
    try:
        handle = path.open("rb")
    except OSError as exc:
        raise OSError(f"无法读取 {path}: {exc}") from exc
    with handle:
        for line_no, raw in enumerate(handle, 1):
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError as exc:
                raise RecordParseError(path, line_no, None, f"不是合法的 UTF-8: {exc.reason}") from exc
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(path, line_no, None, f"不是合法的 JSON: {exc.msg}") from exc
            if not isinstance(payload, dict):
                raise RecordParseError(path, line_no, None, "每行必须是一个 JSON 对象")
            try:
                yield line_no, parse(payload)
            except ValidationError as exc:
                first = exc.errors()[0]
                field_name = ".".join(str(p) for p in first.get("loc", ())) or None
                raise RecordParseError(path, line_no, field_name, first.get("msg", str(exc))) from exc


def _detection_from_record(rec: DetectionRecord) -> Detection:
    return Detection(
        circle=Circle(cx=rec.cx, cy=rec.cy, r=rec.r),
        score=rec.score,
        model_id=rec.model_id,
        image_id=rec.image_id,
    )


def read_detections(path: PathLike) -> List[Detection]:
    """按行顺序读取检测文件，完全重复的记录也保留。"""
    return [_detection_from_record(rec) for _, rec in _iter_records(path, DetectionRecord.model_validate)]


def load_detections(path: PathLike) -> DetectionSet:
    """读取检测文件并按 图像 -> model_id 分组；同一组内保持行顺序。"""
    result = DetectionSet()
    for d in read_detections(path):
        result.add(d)
    return result


def load_ground_truth(path: PathLike) -> "OrderedDict[str, GroundTruth]":
    grouped: "OrderedDict[str, List[Circle]]" = OrderedDict()
    for _, rec in _iter_records(path, GroundTruthRecord.model_validate):
        grouped.setdefault(rec.image_id, []).append(Circle(cx=rec.cx, cy=rec.cy, r=rec.r))
    return OrderedDict(
        (image_id, GroundTruth(image_id=image_id, circles=circles))
        for image_id, circles in grouped.items()
    )


def load_fused(path: PathLike) -> List[FusedRecord]:
    return [rec for _, rec in _iter_records(path, FusedRecord.model_validate)]


def load_scored(path: PathLike, fused_model_id: str = "wcf") -> DetectionSet:
    """读取检测文件或融合结果文件；融合记录以 mean_score 作为分数。"""

    def parse(payload: Dict[str, Any]) -> Detection:
        if "mean_score" in payload:
            rec = FusedRecord.model_validate(payload)
            return Detection(
                circle=Circle(cx=rec.cx, cy=rec.cy, r=rec.r),
                score=rec.mean_score,
                model_id=fused_model_id,
                image_id=rec.image_id,
            )
        return _detection_from_record(DetectionRecord.model_validate(payload))

    result = DetectionSet()
    for _, det in _iter_records(path, parse):
        result.add(det)
    return result


# ------------------------------------------------------------------ #
# 写出
# ------------------------------------------------------------------ #

def _dump_line(values: Dict[str, Any], keys: Sequence[str]) -> str:
    return json.dumps({k: values[k] for k in keys}, ensure_ascii=False, allow_nan=False)


def _write_lines(path: PathLike, lines: Iterable[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
    except OSError as exc:
        raise OSError(f"写入 {path} 失败: {exc}") from exc
    return path


def detection_to_record(d: Detection) -> Dict[str, Any]:
    return {
        "image_id": d.image_id,
        "model_id": d.model_id,
        "cx": d.circle.cx,
        "cy": d.circle.cy,
        "r": d.circle.r,
        "score": d.score,
    }


def fused_to_record(entry: FusedCircle) -> Dict[str, Any]:
    return {
        "image_id": entry.image_id,
        "cx": entry.circle.cx,
        "cy": entry.circle.cy,
        "r": entry.circle.r,
        "mean_score": entry.mean_score,
        "count": entry.count,
        "source_models": entry.source_models,
    }


def write_detections(path: PathLike, detections: Iterable[Detection]) -> Path:
    return _write_lines(path, (_dump_line(detection_to_record(d), DETECTION_KEYS) for d in detections))


def write_ground_truth(path: PathLike, gts: Iterable[GroundTruth]) -> Path:
    lines = (
        _dump_line({"image_id": gt.image_id, "cx": c.cx, "cy": c.cy, "r": c.r}, GT_KEYS)
        for gt in gts
        for c in gt.circles
    )
    return _write_lines(path, lines)


def write_fused(path: PathLike, results: Iterable[FusedCircle]) -> Path:
    return _write_lines(path, (_dump_line(fused_to_record(e), FUSED_KEYS) for e in results))


def report_to_dict(report: EvalReport) -> "OrderedDict[str, Any]":
    data = report.model_dump()
    data["per_threshold_ap"] = [[t, ap] for t, ap in report.per_threshold_ap]
    return OrderedDict((k, data[k]) for k in REPORT_KEYS)


def write_json(path: PathLike, payload: Any) -> Path:
    text = json.dumps(payload, ensure_ascii=False, indent=2, allow_nan=False)
    return _write_lines(path, [text])


def write_report(path: PathLike, report: EvalReport) -> Path:
    return write_json(path, report_to_dict(report))


def load_report(path: PathLike) -> EvalReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"无法读取 {path}: {exc}") from exc
    return EvalReport.model_validate(data)


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_digest(manifest: RunManifest) -> str:
    payload = manifest.model_dump(mode="json", exclude={"timestamp", "digest"})
    text = json.dumps(payload, ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(path: PathLike, manifest: RunManifest) -> Path:
    sealed = manifest.model_copy(update={"digest": manifest_digest(manifest)})
    return write_json(path, sealed.model_dump(mode="json"))
