"""
训练产物：metrics.jsonl 流式写入、summary.json、CSV 导出、run 登记表
"""
import csv
import io
import json
import os
import uuid
from typing import Iterable, List, Optional, Sequence

from pydantic import BaseModel
from sqlmodel import Session, select

from app.core.logger import logger
from app.models.tables import RunRecord

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"

CSV_COLUMNS = [
    "step", "epoch", "question_id", "rho_t", "mean_rho", "gate_open",
    "pseudo_label", "anchor_majority", "label_correct", "anchor_label_correct",
    "fallback_used", "n_train", "reward_mean", "n_reward_one", "n_reward_one_true",
    "anchor_entropy", "explorer_entropy",
]


class MetricsWriter:
    """一行一条记录，只追加；记录里没有时间戳，同样的配置 + 种子写出逐字节相同的文件"""

    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "w", encoding="utf-8", newline="\n")

    def write(self, record: BaseModel) -> None:
        self._f.write(record.model_dump_json() + "\n")

    def close(self) -> None:
        if not self._f.closed:
            self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_jsonl(rows: Iterable[BaseModel], path: str) -> int:
    n = 0
    with MetricsWriter(path) as writer:
        for row in rows:
            writer.write(row)
            n += 1
    return n


def read_jsonl(path: str) -> List[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def summarize(records: Sequence[dict], method: str, seed: int) -> dict:
    """
    final_label_accuracy: 每道题最后一次出现时伪标签是否正确，再取平均
    reward_correctness:   奖励为 1 的轨迹里答案恰好是 y_true 的比例
    """
    last = {}
    for rec in records:
        last[rec["question_id"]] = rec
    n_one = sum(rec["n_reward_one"] for rec in records)
    n_one_true = sum(rec["n_reward_one_true"] for rec in records)
    mean = (lambda xs: float(sum(xs) / len(xs)) if xs else 0.0)
    return {
        "method": method,
        "seed": seed,
        "n_records": len(records),
        "n_questions": len(last),
        "final_label_accuracy": mean([float(r["label_correct"]) for r in last.values()]),
        "anchor_label_accuracy": mean([float(r["anchor_label_correct"]) for r in last.values()]),
        "reward_correctness": n_one_true / n_one if n_one else 0.0,
        "fallback_rate": mean([float(r["fallback_used"]) for r in records]),
        "mean_gate_open": mean([float(r["gate_open"]) for r in records]),
    }


def write_summary(summary: dict, out_dir: str) -> str:
    path = os.path.join(out_dir, SUMMARY_FILE)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, ensure_ascii=False, indent=2, sort_keys=True)
    return path


def read_summary(out_dir: str) -> dict:
    with open(os.path.join(out_dir, SUMMARY_FILE), "r", encoding="utf-8") as f:
        return json.load(f)


def label_accuracy_curve(records: Sequence[dict]) -> List[dict]:
    """每一步的伪标签准确率 vs anchor 多数票准确率"""
    by_step = {}
    for rec in records:
        by_step.setdefault(rec["step"], []).append(rec)
    curve = []
    for step in sorted(by_step):
        rows = by_step[step]
        curve.append({
            "step": step,
            "label_accuracy": sum(r["label_correct"] for r in rows) / len(rows),
            "anchor_label_accuracy": sum(r["anchor_label_correct"] for r in rows) / len(rows),
            "mean_rho": rows[0]["mean_rho"],
        })
    return curve


def metrics_to_csv(records: Sequence[dict]) -> str:
    # 1. 内存里的 CSV 缓冲区
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    # 2. 表头
    writer.writerow(CSV_COLUMNS)
    # 3. 数据行
    for rec in records:
        writer.writerow(["" if rec.get(col) is None else rec.get(col) for col in CSV_COLUMNS])
    return output.getvalue()


def export_csv(out_dir: str, csv_path: Optional[str] = None) -> str:
    records = read_jsonl(os.path.join(out_dir, METRICS_FILE))
    csv_path = csv_path or os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(metrics_to_csv(records))
    logger.info(f"📄 [Reports] 导出 {len(records)} 条记录到 {csv_path}")
    return csv_path


def register_run(session: Session, summary: dict, output_dir: str, status: str = "finished") -> RunRecord:
    """把一次训练登记到数据库；同一个输出目录重复登记时覆盖旧记录"""
    output_dir = os.path.abspath(output_dir)
    run = session.exec(select(RunRecord).where(RunRecord.output_dir == output_dir)).first()
    if run is None:
        run = RunRecord(run_id=f"{summary['method'].lower()}-s{summary['seed']}-{uuid.uuid4().hex[:8]}", output_dir=output_dir)
    run.method = summary["method"]
    run.seed = summary["seed"]
    run.n_records = summary["n_records"]
    run.final_label_accuracy = summary["final_label_accuracy"]
    run.anchor_label_accuracy = summary["anchor_label_accuracy"]
    run.reward_correctness = summary["reward_correctness"]
    run.status = status
    session.add(run)
    session.commit()
    session.refresh(run)
    logger.info(f"🗂️ [Registry] 已登记 run {run.run_id} -> {output_dir}")
    return run
