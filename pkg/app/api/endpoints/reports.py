from fastapi import APIRouter, Depends
from fastapi.responses import StreamingResponse

from app.api.deps import get_metrics_path, get_run
from app.models.tables import RunRecord
from app.services.reports import metrics_to_csv, read_jsonl

router = APIRouter()


@router.get("/{run_id}/csv")
def export_metrics_csv(run: RunRecord = Depends(get_run), path: str = Depends(get_metrics_path)):
    """
    把一次 run 的 metrics.jsonl 导出为 CSV 文件
    """
    content = metrics_to_csv(read_jsonl(path))

    # 以流的形式返回，浏览器会自动触发下载
    response = StreamingResponse(iter([content]), media_type="text/csv")
    response.headers["Content-Disposition"] = f"attachment; filename={run.run_id}_metrics.csv"
    return response
