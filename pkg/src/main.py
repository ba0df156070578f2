import argparse
import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from src.batch_jobs import BatchRunner, StreamHandler
from src.config import (
    DEFAULT_CIOU_THRESH,
    DEFAULT_FRAME,
    DEFAULT_SIGMA,
    DEFAULT_SOFTNMS_THRESH,
    DEFAULT_T_COUNT,
    DEFAULT_T_SCORE,
    VERSION,
    env_default,
    get_output_dir,
    optional_float,
    parse_frame,
)
from src.dataio import (
    DetectionSet,
    file_digest,
    load_detections,
    load_ground_truth,
    load_scored,
    read_detections,
    report_to_dict,
    write_detections,
    write_fused,
    write_json,
    write_manifest,
    write_report,
)
from src.errors import DomainError, RecordParseError
from src.evaluation import compare_methods, evaluate, rotation_check
from src.fusion import circle_nms, circle_soft_nms, wcf
from src.geometry import rotate_detection, rotate_ground_truth
from src.schemas import (
    Detection,
    EvalReport,
    FileDigest,
    Frame,
    RunManifest,
    SoftNmsConfig,
    SynthConfig,
    WcfConfig,
)
from src.synth import PRNG_NAME, generate, write_synth

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


def _float_pair(text: str):
    lo, hi = (float(p) for p in text.split(","))
    return lo, hi


# ------------------------------------------------------------------ #
# 参数解析
# ------------------------------------------------------------------ #

def _add_common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--out", default=env_default("--out", None, str), help=out_help)
    p.add_argument(
        "--quiet",
        action="store_true",
        default=env_default("--quiet", False, lambda s: s.lower() in {"1", "true", "yes"}),
        help="关闭控制台输出，仅写入日志文件。",
    )
    p.add_argument("--log", default=env_default("--log", None, str), help="JSONL 事件日志路径（可选）")


def _add_workers(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--workers",
        type=int,
        default=env_default("--workers", 1, int),
        help="逐图像并行的线程数，默认 1；不影响输出字节",
    )


def _add_wcf_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--ciou-thresh",
        type=float,
        default=env_default("--ciou-thresh", DEFAULT_CIOU_THRESH, float),
        help="融合所需的 cIoU 阈值，默认 0.5",
    )
    p.add_argument(
        "--t-score",
        type=float,
        default=env_default("--t-score", DEFAULT_T_SCORE, float),
        help="平均分阈值 T score，默认 0.9",
    )
    p.add_argument(
        "--t-count",
        type=int,
        default=env_default("--t-count", DEFAULT_T_COUNT, int),
        help="融合数量阈值 T count，默认 2",
    )
    p.add_argument(
        "--rule",
        choices=["or", "and"],
        default=env_default("--rule", "or", str),
        help="双阈值组合方式：or（满足其一即保留，默认）或 and",
    )
    p.add_argument(
        "--pre-nms",
        type=optional_float,
        default=env_default("--pre-nms", None, optional_float),
        help="融合前对每个模型先做 circle-NMS 的阈值，默认关闭",
    )


def _add_softnms_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--mode",
        choices=["linear", "gaussian"],
        default=env_default("--mode", "linear", str),
        help="Soft-NMS 衰减方式，默认 linear",
    )
    p.add_argument(
        "--sigma",
        type=float,
        default=env_default("--sigma", DEFAULT_SIGMA, float),
        help="gaussian 模式的 sigma，默认 0.5",
    )
    p.add_argument(
        "--score-cut",
        type=float,
        default=env_default("--score-cut", 0.001, float),
        help="衰减后低于该分数的检测被丢弃，默认 0.001",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m src.main",
        description="圆表示检测结果的加权圆融合（WCF）、circle-NMS / Soft-NMS 基线与 cIoU 评估工具。",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="对多个模型的检测做 WCF 融合")
    p.add_argument("inputs", nargs="+", help="检测文件，按融合顺序给出（第一个文件初始化融合列表）")
    _add_wcf_flags(p)
    _add_workers(p)
    _add_common(p, "融合结果路径，默认 $OUTPUT_DIR/fused.jsonl")

    p = sub.add_parser("nms", help="对合并后的检测做 circle-NMS")
    p.add_argument("inputs", nargs="+", help="检测文件（多个文件会按图像合并）")
    p.add_argument(
        "--ciou-thresh",
        type=float,
        default=env_default("--ciou-thresh", DEFAULT_CIOU_THRESH, float),
        help="抑制阈值，默认 0.5",
    )
    _add_workers(p)
    _add_common(p, "输出路径，默认 $OUTPUT_DIR/nms.jsonl")

    p = sub.add_parser("softnms", help="对合并后的检测做 circle-Soft-NMS")
    p.add_argument("inputs", nargs="+", help="检测文件（多个文件会按图像合并）")
    p.add_argument(
        "--ciou-thresh",
        type=float,
        default=env_default("--ciou-thresh", DEFAULT_SOFTNMS_THRESH, float),
        help="衰减阈值，默认 0.3",
    )
    _add_softnms_flags(p)
    _add_workers(p)
    _add_common(p, "输出路径，默认 $OUTPUT_DIR/softnms.jsonl")

    p = sub.add_parser("eval", help="cIoU 下的 mAP / AR 评估")
    p.add_argument("dets", help="检测文件或融合结果文件")
    p.add_argument("gt", help="标注文件")
    p.add_argument("--max-dets", type=int, default=env_default("--max-dets", 100, int))
    _add_common(p, "报告路径，默认 $OUTPUT_DIR/report.json")

    p = sub.add_parser("rotcheck", help="WCF 的 90° 旋转一致性检查")
    p.add_argument("inputs", nargs="+", help="检测文件，按融合顺序给出")
    p.add_argument(
        "--frame",
        type=parse_frame,
        default=env_default("--frame", DEFAULT_FRAME, str),
        help="画幅尺寸 WxH，默认 512x512",
    )
    p.add_argument("--gt", default=env_default("--gt", None, str), help="可选：同时评估旋转前后的结果")
    p.add_argument("--tolerance", type=float, default=env_default("--tolerance", 1e-6, float))
    _add_wcf_flags(p)
    _add_common(p, "检查报告路径，默认 $OUTPUT_DIR/rotcheck.json")

    p = sub.add_parser("compare", help="同一输入上比较各单模型、NMS、Soft-NMS 与 WCF")
    p.add_argument("inputs", nargs="+", help="检测文件，按融合顺序给出")
    p.add_argument("--gt", default=env_default("--gt", None, str), help="标注文件（必需，可用 WCF_GT 指定）")
    p.add_argument(
        "--nms-thresh",
        type=float,
        default=env_default("--nms-thresh", DEFAULT_CIOU_THRESH, float),
        help="NMS 阈值，默认 0.5",
    )
    p.add_argument(
        "--softnms-thresh",
        type=float,
        default=env_default("--softnms-thresh", DEFAULT_SOFTNMS_THRESH, float),
        help="Soft-NMS 阈值，默认 0.3",
    )
    _add_wcf_flags(p)
    _add_softnms_flags(p)
    _add_common(p, "比较结果路径，默认 $OUTPUT_DIR/compare.json")

    p = sub.add_parser("synth", help="生成带种子的合成集成场景")
    p.add_argument("--n-images", type=int, default=env_default("--n-images", 20, int))
    p.add_argument("--gt-per-image", type=int, default=env_default("--gt-per-image", 10, int))
    p.add_argument("--n-models", type=int, default=env_default("--n-models", 5, int))
    p.add_argument("--jitter", type=float, default=env_default("--jitter", 0.5, float), help="圆心扰动标准差（像素）")
    p.add_argument("--radius-jitter", type=float, default=env_default("--radius-jitter", 0.02, float))
    p.add_argument("--detect-prob", type=float, default=env_default("--detect-prob", 0.9, float))
    p.add_argument("--fp-rate", type=float, default=env_default("--fp-rate", 2.0, float), help="每模型每图像误检期望数")
    p.add_argument("--fp-scores", type=_float_pair, default=env_default("--fp-scores", "0.05,0.8", str), help="LO,HI")
    p.add_argument("--tp-scores", type=_float_pair, default=env_default("--tp-scores", "0.5,1.0", str), help="LO,HI")
    p.add_argument("--radius-range", type=_float_pair, default=env_default("--radius-range", "20,40", str), help="LO,HI")
    p.add_argument("--seed", type=int, default=env_default("--seed", 0, int))
    p.add_argument("--frame", type=parse_frame, default=env_default("--frame", DEFAULT_FRAME, str))
    _add_common(p, "输出目录，默认 $OUTPUT_DIR/synth")

    return parser


# ------------------------------------------------------------------ #
# 事件输出
# ------------------------------------------------------------------ #

def build_stream_handler(log_path: Optional[Path], mirror_stdout: bool) -> StreamHandler:
    log_file = None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("a", encoding="utf-8")

    def handler(event_type: str, payload: Dict[str, Any]):
        if log_file is not None:
            entry = {
                "ts": datetime.now().isoformat(),
                "event": event_type,
                "payload": payload,
            }
            log_file.write(json.dumps(entry, ensure_ascii=False) + "\n")
            log_file.flush()

        if not mirror_stdout:
            return

        if event_type == "image_done":
            print(f"🖼️  {payload.get('image_id')} 完成 ({payload.get('done')}/{payload.get('total')})")
        elif event_type == "command_done":
            print(f"✅ {payload.get('text', '')}")
        elif event_type == "warning":
            print(f"⚠️ {payload.get('text', '')}")
        elif event_type == "summary":
            print(payload.get("text", ""))

    def close():
        if log_file is not None:
            log_file.close()

    handler.close = close  # type: ignore[attr-defined]
    return handler


# ------------------------------------------------------------------ #
# 公共工具
# ------------------------------------------------------------------ #

def _out_path(args: argparse.Namespace, default_name: str) -> Path:
    return Path(args.out) if args.out else get_output_dir() / default_name


def _load_many(paths: Sequence[str]) -> DetectionSet:
    """按参数顺序读取并合并检测文件，用于 NMS / Soft-NMS 这类只看合并结果的命令。"""
    merged = DetectionSet()
    for path in paths:
        merged.extend(load_detections(path))
    return merged


def _input_labels(paths: Sequence[str]) -> List[str]:
    """每个输入文件的名称（文件名去后缀），重名时追加参数序号。"""
    stems = [Path(p).stem for p in paths]
    return [
        stem if stems.count(stem) == 1 else f"{stem}#{k + 1}"
        for k, stem in enumerate(stems)
    ]


def _load_model_sets(paths: Sequence[str]) -> Dict[str, List[List[Detection]]]:
    """
    每个输入文件是一个模型集合，融合顺序即参数顺序。

    返回 image_id -> 按文件顺序排列的检测列表；与记录中的 model_id 无关，
    同一个 model_id 出现在两个文件中也会被当作两个模型。
    """
    grouped: Dict[str, List[List[Detection]]] = {}
    for k, path in enumerate(paths):
        for d in read_detections(path):
            grouped.setdefault(d.image_id, [[] for _ in paths])[k].append(d)
    return {image_id: grouped[image_id] for image_id in sorted(grouped)}


def _digests(paths: Sequence[Path]) -> List[FileDigest]:
    return [FileDigest(path=str(p), sha256=file_digest(p)) for p in paths]


def _emit_manifest(
    manifest_path: Path,
    command: str,
    config: Dict[str, Any],
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    model_order: Sequence[str] = (),
) -> Path:
    manifest = RunManifest(
        command=command,
        config=config,
        inputs=_digests(inputs),
        outputs=_digests(outputs),
        model_order=list(model_order),
        tool_version=VERSION,
        timestamp=datetime.now().isoformat(),
    )
    return write_manifest(manifest_path, manifest)


def _manifest_path_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _wcf_config(args: argparse.Namespace) -> WcfConfig:
    return WcfConfig(
        ciou_threshold=args.ciou_thresh,
        t_score=args.t_score,
        t_count=args.t_count,
        rule=args.rule,
        pre_nms_threshold=args.pre_nms,
    )


def format_report_table(reports: Dict[str, EvalReport]) -> str:
    header = f"{'method':<12}{'mAP(0.5:0.95)':>15}{'mAP@0.5':>10}{'mAP@0.75':>10}{'AR(0.5:0.95)':>14}"
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        lines.append(
            f"{name:<12}{r.map_50_95:>15.3f}{r.map_50:>10.3f}{r.map_75:>10.3f}{r.ar_50_95:>14.3f}"
        )
    return "\n".join(lines)


# ------------------------------------------------------------------ #
# 子命令
# ------------------------------------------------------------------ #

def cmd_fuse(args: argparse.Namespace, handler: StreamHandler) -> int:
    cfg = _wcf_config(args)
    sets_by_image = _load_model_sets(args.inputs)
    runner = BatchRunner(workers=args.workers, stream_handler=handler)
    results = runner.run(sets_by_image, lambda image_id: wcf(sets_by_image[image_id], cfg))
    entries = [entry for _, per_image in results for entry in per_image]

    out = write_fused(_out_path(args, "fused.jsonl"), entries)
    _emit_manifest(
        _manifest_path_for(out),
        "fuse",
        cfg.model_dump(mode="json"),
        [Path(p) for p in args.inputs],
        [out],
        _input_labels(args.inputs),
    )
    n_inputs = sum(len(s) for sets in sets_by_image.values() for s in sets)
    handler("command_done", {
        "text": f"融合完成: {len(results)} 张图像, 输入 {n_inputs} 个检测, 保留 {len(entries)} 个融合圆 -> {out}",
    })
    return EXIT_OK


def _run_suppression(
    args: argparse.Namespace,
    handler: StreamHandler,
    command: str,
    suppress: Callable[[list], list],
    config: Dict[str, Any],
) -> int:
    ds = _load_many(args.inputs)
    runner = BatchRunner(workers=args.workers, stream_handler=handler)
    results = runner.run(ds.image_ids(), lambda image_id: suppress(ds.detections(image_id)))
    kept = [d for _, per_image in results for d in per_image]

    out = write_detections(_out_path(args, f"{command}.jsonl"), kept)
    _emit_manifest(
        _manifest_path_for(out),
        command,
        config,
        [Path(p) for p in args.inputs],
        [out],
        _input_labels(args.inputs),
    )
    handler("command_done", {"text": f"{command} 完成: 输入 {len(ds)} 个检测, 保留 {len(kept)} 个 -> {out}"})
    return EXIT_OK


def cmd_nms(args: argparse.Namespace, handler: StreamHandler) -> int:
    threshold = args.ciou_thresh
    return _run_suppression(
        args,
        handler,
        "nms",
        lambda dets: circle_nms(dets, threshold),
        {"ciou_threshold": threshold},
    )


def cmd_softnms(args: argparse.Namespace, handler: StreamHandler) -> int:
    cfg = SoftNmsConfig(
        ciou_threshold=args.ciou_thresh,
        mode=args.mode,
        sigma=args.sigma,
        final_score_cut=args.score_cut,
    )
    return _run_suppression(
        args,
        handler,
        "softnms",
        lambda dets: circle_soft_nms(dets, **cfg.model_dump()),
        cfg.model_dump(mode="json"),
    )


def cmd_eval(args: argparse.Namespace, handler: StreamHandler) -> int:
    dets = load_scored(args.dets)
    gts = load_ground_truth(args.gt)
    report = evaluate(dets.detections(), gts, max_dets=args.max_dets)

    out = write_report(_out_path(args, "report.json"), report)
    _emit_manifest(
        _manifest_path_for(out),
        "eval",
        {"max_dets": args.max_dets},
        [Path(args.dets), Path(args.gt)],
        [out],
    )
    handler("summary", {"text": format_report_table({"result": report})})
    handler("command_done", {"text": f"评估完成 (TP={report.tp}, FP={report.fp}, FN={report.fn}) -> {out}"})
    return EXIT_OK


def cmd_rotcheck(args: argparse.Namespace, handler: StreamHandler) -> int:
    cfg = _wcf_config(args)
    width, height = args.frame
    frame = Frame(width=width, height=height)
    sets_by_image = _load_model_sets(args.inputs)
    check = rotation_check(sets_by_image, frame, cfg, tolerance=args.tolerance)

    payload: Dict[str, Any] = check.model_dump()
    inputs = [Path(p) for p in args.inputs]
    if args.gt:
        gts = load_ground_truth(args.gt)
        direct = [e.to_detection() for sets in sets_by_image.values() for e in wcf(sets, cfg)]
        rotated_sets = {
            image_id: [[rotate_detection(d, frame) for d in s] for s in sets]
            for image_id, sets in sets_by_image.items()
        }
        rotated = [e.to_detection() for sets in rotated_sets.values() for e in wcf(sets, cfg)]
        rotated_gts = {image_id: rotate_ground_truth(gt, frame) for image_id, gt in gts.items()}
        payload["eval_original"] = report_to_dict(evaluate(direct, gts))
        payload["eval_rotated"] = report_to_dict(evaluate(rotated, rotated_gts))
        inputs.append(Path(args.gt))

    out = write_json(_out_path(args, "rotcheck.json"), payload)
    _emit_manifest(
        _manifest_path_for(out),
        "rotcheck",
        {**cfg.model_dump(mode="json"), "frame": [width, height], "tolerance": args.tolerance},
        inputs,
        [out],
        _input_labels(args.inputs),
    )
    verdict = "通过" if check.passed else "未通过"
    text = (
        f"旋转一致性{verdict}: 圆心最大偏差 {check.max_center_discrepancy:.3e} px, "
        f"半径 {check.max_radius_discrepancy:.3e} px, 分数 {check.max_score_discrepancy:.3e} -> {out}"
    )
    handler("command_done" if check.passed else "warning", {"text": text})
    return EXIT_OK if check.passed else EXIT_DOMAIN


def cmd_compare(args: argparse.Namespace, handler: StreamHandler) -> int:
    wcf_cfg = _wcf_config(args)
    soft_cfg = SoftNmsConfig(
        ciou_threshold=args.softnms_thresh,
        mode=args.mode,
        sigma=args.sigma,
        final_score_cut=args.score_cut,
    )
    labels = _input_labels(args.inputs)
    gts = load_ground_truth(args.gt)
    reports = compare_methods(
        _load_model_sets(args.inputs),
        gts,
        labels,
        wcf_cfg=wcf_cfg,
        nms_threshold=args.nms_thresh,
        soft_cfg=soft_cfg,
    )

    out = write_json(
        _out_path(args, "compare.json"),
        {name: report_to_dict(report) for name, report in reports.items()},
    )
    _emit_manifest(
        _manifest_path_for(out),
        "compare",
        {
            "wcf": wcf_cfg.model_dump(mode="json"),
            "nms_threshold": args.nms_thresh,
            "soft_nms": soft_cfg.model_dump(mode="json"),
        },
        [Path(p) for p in args.inputs] + [Path(args.gt)],
        [out],
        labels,
    )
    handler("summary", {"text": format_report_table(reports)})
    handler("command_done", {"text": f"比较完成 -> {out}"})
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, handler: StreamHandler) -> int:
    width, height = args.frame
    cfg = SynthConfig(
        n_images=args.n_images,
        gt_per_image=args.gt_per_image,
        n_models=args.n_models,
        pos_jitter_sigma=args.jitter,
        radius_jitter_frac=args.radius_jitter,
        detect_prob=args.detect_prob,
        fp_per_image_rate=args.fp_rate,
        fp_score_range=args.fp_scores,
        tp_score_range=args.tp_scores,
        radius_range=args.radius_range,
        seed=args.seed,
        frame=Frame(width=width, height=height),
    )
    out_dir = Path(args.out) if args.out else get_output_dir() / "synth"
    result = generate(cfg)
    written = write_synth(result, cfg, out_dir)
    _emit_manifest(
        out_dir / "manifest.json",
        "synth",
        {**cfg.model_dump(mode="json"), "prng": PRNG_NAME},
        [],
        written,
        list(result.model_detections),
    )
    handler("command_done", {"text": f"合成数据已写入 {out_dir}（{len(written)} 个文件）"})
    return EXIT_OK


COMMANDS = {
    "fuse": cmd_fuse,
    "nms": cmd_nms,
    "softnms": cmd_softnms,
    "eval": cmd_eval,
    "rotcheck": cmd_rotcheck,
    "compare": cmd_compare,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        parser = build_parser()
    except ValueError as exc:
        # 环境变量覆盖值无法解析
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    if args.command == "compare" and not args.gt:
        parser.error("compare 需要 --gt 标注文件（或设置环境变量 WCF_GT）")

    handler = build_stream_handler(Path(args.log) if args.log else None, mirror_stdout=not args.quiet)
    try:
        return COMMANDS[args.command](args, handler)
    except (DomainError, RecordParseError, ValidationError, ValueError, OSError) as exc:
        handler("error", {"message": str(exc)})
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    finally:
        if hasattr(handler, "close"):
            handler.close()  # type: ignore[attr-defined]


if __name__ == "__main__":
    sys.exit(main())
