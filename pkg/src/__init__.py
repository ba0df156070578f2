"""
使 src 成为可导入的 Python 包。

命令行入口：

    python -m src.main fuse model1.jsonl model2.jsonl ... --out fused.jsonl

库用法见 `src.fusion`（WCF 与 NMS 基线）、`src.evaluation`（cIoU 评估）、
`src.synth`（合成场景与蒙特卡洛估计）。
"""
