# app/api/deps.py
import os

from fastapi import Depends, HTTPException, status
from sqlmodel import Session, select

from app.core.database import get_session
from app.models.tables import RunRecord
from app.services.reports import METRICS_FILE


def get_run(run_id: str, session: Session = Depends(get_session)) -> RunRecord:
    run = session.exec(select(RunRecord).where(RunRecord.run_id == run_id)).first()
    if run is None:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"run {run_id} 不存在")
    return run


def get_metrics_path(run: RunRecord = Depends(get_run)) -> str:
    path = os.path.join(run.output_dir, METRICS_FILE)
    if not os.path.exists(path):
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"{path} 不存在")
    return path
