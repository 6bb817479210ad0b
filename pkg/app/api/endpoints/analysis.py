from fastapi import APIRouter, Depends

from app.api.deps import get_metrics_path
from app.services.reports import label_accuracy_curve, read_jsonl

router = APIRouter()


@router.get("/{run_id}/label-accuracy")
def label_accuracy(path: str = Depends(get_metrics_path)):
    """
    每一步的伪标签准确率曲线
    label_accuracy: 本方法选出的伪标签；anchor_label_accuracy: anchor 多数票
    """
    records = read_jsonl(path)
    curve = label_accuracy_curve(records)
    return {
        "steps": len(curve),
        "curve": curve,
        "final_label_accuracy": curve[-1]["label_accuracy"] if curve else None,
    }
