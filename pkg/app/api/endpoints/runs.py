import os
from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, Query
from sqlmodel import Session, select

from app.api.deps import get_metrics_path, get_run
from app.core.database import get_session
from app.models.tables import RunRecord
from app.services.reports import SUMMARY_FILE, read_jsonl, read_summary

router = APIRouter()


@router.get("/", response_model=List[RunRecord])
def list_runs(session: Session = Depends(get_session)):
    """所有登记过的训练 run，新的在前"""
    return session.exec(select(RunRecord).order_by(RunRecord.created_at.desc())).all()


@router.get("/{run_id}")
def run_summary(run: RunRecord = Depends(get_run)):
    if not os.path.exists(os.path.join(run.output_dir, SUMMARY_FILE)):
        raise HTTPException(status_code=404, detail=f"run {run.run_id} 没有 summary.json")
    return {"run_id": run.run_id, "status": run.status, "summary": read_summary(run.output_dir)}


@router.get("/{run_id}/metrics")
def run_metrics(
    path: str = Depends(get_metrics_path),
    question_id: Optional[str] = None,
    limit: int = Query(default=1000, ge=1, le=100000),
    offset: int = Query(default=0, ge=0),
):
    # 1. 读全部记录，按题号过滤
    records = read_jsonl(path)
    if question_id is not None:
        records = [r for r in records if r["question_id"] == question_id]
    # 2. 分页
    return {"total": len(records), "records": records[offset:offset + limit]}
