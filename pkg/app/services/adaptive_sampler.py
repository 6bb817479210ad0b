"""
Adaptive Sampling：共识率 ρ_t、最近 K 步滑动均值 ρ̄_t、以及决定哪些轨迹参与更新的门控
ρ̄_t ≤ threshold → 只用 anchor；ρ̄_t > threshold → anchor ∪ explorer
"""
from collections import deque
from enum import Enum
from typing import List, Optional, Sequence

from pydantic import BaseModel, Field

from app.core.errors import InvalidInputError
from app.services.policy import Answer, Trajectory


class GateMode(str, Enum):
    WINDOWED = "windowed"            # 用滑动均值 ρ̄_t
    INSTANTANEOUS = "instantaneous"  # 用当步当题的 ρ_t
    ALWAYS_OPEN = "always_open"      # 消融：始终 anchor ∪ explorer
    ANCHOR_ONLY = "anchor_only"      # 始终只用 anchor (多数票基线)


class SamplerConfig(BaseModel):
    K: int = Field(default=8, ge=1)
    threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    gate_mode: GateMode = GateMode.WINDOWED


class ConsensusTracker:
    """全局共识率窗口，每个训练步只写一次"""

    def __init__(self, K: int = 8, threshold: float = 0.5):
        if K < 1:
            raise InvalidInputError(f"窗口大小 K 必须为正数, 当前 {K}")
        self.K = K
        self.threshold = threshold
        self.window: deque = deque(maxlen=K)

    @property
    def steps_seen(self) -> int:
        return len(self.window)

    def mean(self) -> Optional[float]:
        """当前窗口均值；还没有任何记录时返回 None (预热期)"""
        if not self.window:
            return None
        return sum(self.window) / len(self.window)

    def update_and_mean(self, rho: float) -> float:
        if not 0.0 <= rho <= 1.0:
            raise InvalidInputError(f"共识率必须在 [0, 1] 内, 当前 {rho}")
        self.window.append(float(rho))
        return self.mean()


def consensus_rate(anchor_rollouts: Sequence[Trajectory], anchor_majority: Optional[Answer]) -> float:
    if not anchor_rollouts:
        raise InvalidInputError("consensus_rate 需要非空的 anchor 轨迹集合")
    if anchor_majority is None:
        return 0.0
    hits = sum(1 for traj in anchor_rollouts if traj.answer == anchor_majority)
    return hits / len(anchor_rollouts)


def gate_open(mean_rho: Optional[float], threshold: float = 0.5) -> bool:
    # 预热期 (还没有 ρ̄) 按低共识处理；边界 ρ̄ = threshold 也只用 anchor
    return mean_rho is not None and mean_rho > threshold


def select_training_set(
    mean_rho: Optional[float],
    anchor: Sequence[Trajectory],
    explorer: Sequence[Trajectory],
    threshold: float = 0.5,
) -> List[Trajectory]:
    if gate_open(mean_rho, threshold):
        return list(anchor) + list(explorer)
    return list(anchor)


def gate_decision(mode: GateMode, mean_rho: Optional[float], rho_t: float, threshold: float = 0.5) -> bool:
    """按门控模式决定本步是否把 explorer 轨迹放进训练集"""
    mode = GateMode(mode)
    if mode == GateMode.WINDOWED:
        return gate_open(mean_rho, threshold)
    if mode == GateMode.INSTANTANEOUS:
        return gate_open(rho_t, threshold)
    return mode == GateMode.ALWAYS_OPEN
