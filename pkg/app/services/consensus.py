"""
Harmonic Election + 保守奖励

p0 / p1 是 anchor / explorer 两组 rollout 的经验答案频率 (分母是 G，INVALID 也算在分母里)
y* = argmax_a 2·p0(a)·p1(a) / (p0(a) + p1(a))
奖励: 命中 y* → 1；命中 anchor 多数票 → 0.5；其余 (含 INVALID) → 0
"""
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

from app.core.errors import InvalidInputError
from app.core.logger import logger
from app.services.policy import Answer, Trajectory


def argmax_answer(scores: Dict[Answer, float]) -> Optional[Answer]:
    """取最大值；并列时取字典序最小的答案；空字典返回 None"""
    best: Optional[Answer] = None
    for answer in sorted(scores):
        if best is None or scores[answer] > scores[best]:
            best = answer
    return best


@dataclass(frozen=True)
class AnswerHistogram:
    counts: Dict[Answer, int]
    total: int

    def prob(self, answer: Optional[Answer]) -> float:
        if answer is None:
            return 0.0
        return self.counts.get(answer, 0) / self.total

    def majority(self) -> Optional[Answer]:
        return argmax_answer({a: float(c) for a, c in self.counts.items()})

    def __bool__(self) -> bool:
        return bool(self.counts)


@dataclass
class ConsensusOutcome:
    pseudo_label: Optional[Answer]
    anchor_majority: Optional[Answer]
    scores: Dict[Answer, float] = field(default_factory=dict)
    fallback_used: bool = False


class ConsensusStrategy(str, Enum):
    ANCHOR_MAJORITY = "AnchorMajority"
    POOLED_MAJORITY = "PooledMajority"
    HARMONIC = "Harmonic"


class RewardScheme(str, Enum):
    CONSERVATIVE = "conservative"
    BINARY = "binary"


def histogram(rollouts: Sequence[Trajectory]) -> AnswerHistogram:
    if not rollouts:
        raise InvalidInputError("histogram 需要非空的 rollout 集合")
    counts = Counter(traj.answer for traj in rollouts if traj.answer is not None)
    return AnswerHistogram(counts=dict(counts), total=len(rollouts))


def harmonic_score(p0: float, p1: float) -> float:
    if p0 + p1 <= 0.0:
        return 0.0
    return 2.0 * p0 * p1 / (p0 + p1)


def pooled_majority(h0: AnswerHistogram, h1: AnswerHistogram) -> Optional[Answer]:
    pooled = Counter(h0.counts)
    pooled.update(h1.counts)
    return argmax_answer({a: float(c) for a, c in pooled.items()})


def elect(h0: AnswerHistogram, h1: AnswerHistogram) -> ConsensusOutcome:
    if h0.total != h1.total:
        raise InvalidInputError(f"两组 rollout 数量必须相同: {h0.total} vs {h1.total}")

    anchor_majority = h0.majority()
    candidates = set(h0.counts) | set(h1.counts)
    if not candidates:
        # 全部 INVALID：调用方应把这组奖励全记 0 并跳过
        return ConsensusOutcome(pseudo_label=None, anchor_majority=None)

    scores = {a: harmonic_score(h0.prob(a), h1.prob(a)) for a in candidates}
    best = argmax_answer(scores)
    if scores[best] > 0.0:
        return ConsensusOutcome(pseudo_label=best, anchor_majority=anchor_majority, scores=scores)

    # 两组没有共同支持的答案 → 退回 anchor 多数票；anchor 也没有合法答案就用合并多数票
    fallback = anchor_majority if anchor_majority is not None else pooled_majority(h0, h1)
    logger.debug(f"⚠️ [Election] 调和分数全为 0, 回退到 {fallback}")
    return ConsensusOutcome(
        pseudo_label=fallback,
        anchor_majority=anchor_majority,
        scores=scores,
        fallback_used=True,
    )


def majority_outcome(h0: AnswerHistogram) -> ConsensusOutcome:
    """单策略多数票：伪标签就是 anchor 多数票"""
    majority = h0.majority()
    return ConsensusOutcome(pseudo_label=majority, anchor_majority=majority)


def pooled_outcome(h0: AnswerHistogram, h1: AnswerHistogram) -> ConsensusOutcome:
    return ConsensusOutcome(pseudo_label=pooled_majority(h0, h1), anchor_majority=h0.majority())


def assign_rewards(
    rollouts: Iterable[Trajectory],
    outcome: ConsensusOutcome,
    scheme: RewardScheme = RewardScheme.CONSERVATIVE,
) -> List[float]:
    """按答案给奖励，anchor / explorer 轨迹一视同仁；先判 y* 再判多数票"""
    rewards = []
    for traj in rollouts:
        if traj.answer is None or outcome.pseudo_label is None:
            rewards.append(0.0)
        elif traj.answer == outcome.pseudo_label:
            rewards.append(1.0)
        elif scheme == RewardScheme.CONSERVATIVE and traj.answer == outcome.anchor_majority:
            rewards.append(0.5)
        else:
            rewards.append(0.0)
    return rewards


def baseline_select(h0: AnswerHistogram, h1: AnswerHistogram, strategy: ConsensusStrategy) -> Optional[Answer]:
    strategy = ConsensusStrategy(strategy)
    if strategy == ConsensusStrategy.ANCHOR_MAJORITY:
        return h0.majority()
    if strategy == ConsensusStrategy.POOLED_MAJORITY:
        return pooled_majority(h0, h1)
    return elect(h0, h1).pseudo_label
