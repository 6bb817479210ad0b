"""
GRPO：组内归一化优势 + 截断代理目标 (+ 可选 KL) + 梯度上升更新

Â_i = (r_i - r̄) / σ_r                     (总体标准差；σ_r = 0 时整组优势为 0)
J = 1/n Σ min(ρ_i Â_i, clip(ρ_i, 1-ε, 1+ε) Â_i) - β·KL
∇ρ_i = ρ_i ∇log π_θ(y_i)
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core.errors import InvalidInputError
from app.core.logger import logger
from app.services.policy import (
    Gradient,
    PolicyParams,
    Trajectory,
    exact_seq_log_prob,
    exact_seq_prob,
    grad_add,
    log_softmax,
    logprob_grad,
)


class RatioMode(str, Enum):
    BEHAVIOR = "behavior"        # 分母用各自的行为策略 (anchor 用 π_old，explorer 用 π_explorer)
    ANCHOR_ONLY = "anchor_only"  # 字面读法：分母一律用 π_old


class GrpoConfig(BaseModel):
    eps_clip: float = Field(default=0.2, gt=0.0, lt=1.0)
    beta: float = Field(default=0.04, ge=0.0)
    kl_enabled: bool = False
    eta_grpo: float = Field(default=0.5, ge=0.0)
    inner_epochs: int = Field(default=1, ge=1)
    ratio_mode: RatioMode = RatioMode.BEHAVIOR


@dataclass
class AdvantageGroup:
    rewards: np.ndarray
    advantages: np.ndarray
    degenerate: bool


@dataclass
class PreparedGroup:
    trajectories: List[Trajectory]
    advantages: np.ndarray
    old_probs: np.ndarray
    degenerate: bool

    def pairs(self) -> List[Tuple[Trajectory, float]]:
        return list(zip(self.trajectories, (float(a) for a in self.advantages)))


def normalize_advantages(rewards: Sequence[float]) -> AdvantageGroup:
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise InvalidInputError("normalize_advantages 需要非空的奖励向量")
    sigma = float(r.std())
    if sigma <= 1e-12:
        return AdvantageGroup(rewards=r, advantages=np.zeros_like(r), degenerate=True)
    return AdvantageGroup(rewards=r, advantages=(r - r.mean()) / sigma, degenerate=False)


def check_advantage_group(group: AdvantageGroup) -> None:
    """优势的不变量：非退化组均值 0、方差 1；退化组全 0"""
    adv = group.advantages
    if group.degenerate:
        if np.any(adv != 0.0):
            raise InvalidInputError("退化组的优势必须全为 0")
        return
    if abs(float(adv.mean())) > 1e-9 or abs(float(adv.std()) - 1.0) > 1e-6:
        raise InvalidInputError(f"优势归一化失败: mean={adv.mean():.3e}, std={adv.std():.9f}")


def kl_penalty(policy: PolicyParams, ref: PolicyParams, trajectories: Sequence[Trajectory]) -> Tuple[float, Gradient]:
    """
    沿轨迹访问过的前缀计算 KL(π_θ || π_ref) 的精确值，按 token 取平均
    ∂KL/∂z_j = p_j · (log p_j - log q_j - KL)
    """
    n_tokens = sum(len(traj) for traj in trajectories)
    if n_tokens == 0:
        return 0.0, {}
    total = 0.0
    grad: Gradient = {}
    for traj in trajectories:
        tokens = traj.tokens
        for t in range(len(tokens)):
            prefix = tokens[:t]
            if len(prefix) >= policy.max_len:
                # 强制 EOS 处两边都是 onehot，KL = 0
                continue
            log_p = log_softmax(policy.row(prefix))
            log_q = log_softmax(ref.row(prefix))
            p = np.exp(log_p)
            kl = float(np.dot(p, log_p - log_q))
            total += kl
            grad_add(grad, {prefix: p * (log_p - log_q - kl)})
    scale = 1.0 / n_tokens
    return total * scale, {prefix: g * scale for prefix, g in grad.items()}


def surrogate_loss(
    policy: PolicyParams,
    old_probs: Sequence[float],
    group: Sequence[Tuple[Trajectory, float]],
    cfg: GrpoConfig,
    ref: Optional[PolicyParams] = None,
) -> Tuple[float, Gradient]:
    """返回 (要最大化的目标值, 对 logits 的梯度)"""
    if len(old_probs) != len(group):
        raise InvalidInputError(f"old_probs 长度 {len(old_probs)} 与组大小 {len(group)} 不一致")
    if not group:
        raise InvalidInputError("surrogate_loss 需要非空的轨迹组")
    if any(p <= 0.0 for p in old_probs):
        raise InvalidInputError("行为策略概率必须为正")

    n = len(group)
    lo, hi = 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip
    total = 0.0
    grad: Gradient = {}
    for (traj, adv), old in zip(group, old_probs):
        ratio = math.exp(exact_seq_log_prob(policy, traj.tokens) - math.log(old))
        unclipped = ratio * adv
        clipped = min(max(ratio, lo), hi) * adv
        total += min(unclipped, clipped)
        if unclipped <= clipped and adv != 0.0:
            # 未截断分支生效时才有梯度
            grad_add(grad, logprob_grad(policy, traj.tokens), adv * ratio / n)

    value = total / n
    if cfg.kl_enabled and ref is not None and cfg.beta > 0.0:
        kl, kl_grad = kl_penalty(policy, ref, [traj for traj, _ in group])
        value -= cfg.beta * kl
        grad_add(grad, kl_grad, -cfg.beta)
    return value, grad


def prepare_group(
    trajectories: Sequence[Trajectory],
    rewards: Sequence[float],
    policy_old: PolicyParams,
    cfg: GrpoConfig,
) -> PreparedGroup:
    """一道题的 O_train → 优势 + 行为概率"""
    adv_group = normalize_advantages(rewards)
    if __debug__:
        check_advantage_group(adv_group)
    if cfg.ratio_mode == RatioMode.BEHAVIOR:
        old_probs = np.array([traj.behavior_prob for traj in trajectories])
    else:
        old_probs = np.array([exact_seq_prob(policy_old, traj.tokens) for traj in trajectories])
    return PreparedGroup(
        trajectories=list(trajectories),
        advantages=adv_group.advantages,
        old_probs=old_probs,
        degenerate=adv_group.degenerate,
    )


def update_policy(
    policy: PolicyParams,
    groups: Sequence[PreparedGroup],
    cfg: GrpoConfig,
    ref: Optional[PolicyParams] = None,
) -> PolicyParams:
    """θ ← θ + η_GRPO · ∇J，J 按固定顺序对批内所有组取平均

    退化组 (奖励全相同) 的贡献恰好为 0：代理项没有梯度，KL 项也跳过，
    所以全退化的批不改策略。它们仍占平均的分母，J 始终是整批的均值。
    """
    used = [g for g in groups if not g.degenerate]
    current = policy.copy()
    if not used or cfg.eta_grpo == 0.0:
        return current
    n_groups = len(groups)

    for epoch in range(cfg.inner_epochs):
        acc: Gradient = {}
        objective = 0.0
        for g in used:
            value, grad = surrogate_loss(current, g.old_probs, g.pairs(), cfg, ref)
            objective += value / n_groups
            grad_add(acc, grad, 1.0 / n_groups)
        current = current.apply_gradient(acc, cfg.eta_grpo)
        logger.debug(f"📈 [GRPO] q={policy.question_id} epoch={epoch} J={objective:.6f}")
    return current
