from datetime import datetime
from typing import Optional

from sqlmodel import Field, SQLModel


# --- 训练 run 登记表 ---
# 只在训练结束后写一次；学习路径从不读它，也不影响 metrics 的字节
class RunRecord(SQLModel, table=True):
    __tablename__ = "runrecord"

    id: Optional[int] = Field(default=None, primary_key=True)
    run_id: str = Field(index=True, unique=True)
    method: str = Field(default="DCRL", index=True)
    seed: int = 0
    output_dir: str = Field(index=True)
    n_records: int = 0
    final_label_accuracy: float = 0.0
    anchor_label_accuracy: float = 0.0
    reward_correctness: float = 0.0
    status: str = Field(default="finished")
    created_at: datetime = Field(default_factory=datetime.now, index=True)
