"""
Unlearn Then Explore：用截断的遗忘损失对 anchor 做一步临时梯度下降，得到 explorer

L_unlearn = -log(1 - clip(π_anchor(token | prefix), ε, 1-ε))
对所有 anchor 轨迹的所有 token 取均值 (MeanOverTokens)
"""
import math
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core.errors import InvalidInputError
from app.core.logger import logger
from app.services.policy import Gradient, PolicyParams, Trajectory, answer_key, grad_add, softmax


class UnlearnConfig(BaseModel):
    # 允许 η = 0：恒等步，explorer 与 anchor 参数完全相同
    eta_u: float = Field(default=0.5, ge=0.0)
    eps_u: float = Field(default=0.01, gt=0.0, lt=0.5)
    reduction: Literal["mean_over_tokens"] = "mean_over_tokens"


def nll_loss(params: PolicyParams, trajectory: Trajectory) -> float:
    """逐 token 负对数似然的均值"""
    tokens = trajectory.tokens
    total = 0.0
    for t, tok in enumerate(tokens):
        total -= math.log(params.probs(tokens[:t])[tok])
    return total / len(tokens)


def clip_prob(p: float, eps_u: float) -> float:
    return min(max(p, eps_u), 1.0 - eps_u)


def _token_loss_and_row(p_row: np.ndarray, tok: int, eps_u: float) -> Tuple[float, Optional[np.ndarray]]:
    """
    单个 token 的遗忘损失及其对 logits 的梯度行
    截断区间外 clip 是常数，梯度为 0 (返回 None)
    """
    p = float(p_row[tok])
    loss = -math.log(1.0 - clip_prob(p, eps_u))
    if not eps_u < p < 1.0 - eps_u:
        return loss, None
    # d(-log(1-p_k))/dz = p_k/(1-p_k) · (onehot(k) - softmax)
    row = -p_row.copy()
    row[tok] += 1.0
    return loss, (p / (1.0 - p)) * row


def _validate(trajectories: Sequence[Trajectory], weights: Optional[Sequence[float]]) -> np.ndarray:
    if not trajectories:
        raise InvalidInputError("遗忘损失需要非空的 anchor 轨迹集合")
    if weights is None:
        return np.ones(len(trajectories))
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(trajectories),) or np.any(w < 0) or w.sum() <= 0:
        raise InvalidInputError("weights 必须与轨迹一一对应且非负、和为正")
    return w


def unlearn_loss_and_grad(
    params: PolicyParams,
    trajectories: Sequence[Trajectory],
    cfg: UnlearnConfig,
    weights: Optional[Sequence[float]] = None,
) -> Tuple[float, Gradient]:
    """
    返回 (均值遗忘损失, 梯度)
    weights 为空时每条轨迹权重为 1；传入精确路径概率即为 "精确模式" (期望梯度)
    """
    w = _validate(trajectories, weights)
    n_tokens = float(sum(wi * len(traj) for wi, traj in zip(w, trajectories)))

    total = 0.0
    grad: Gradient = {}
    row_cache = {}
    for wi, traj in zip(w, trajectories):
        if wi == 0.0:
            continue
        tokens = traj.tokens
        for t, tok in enumerate(tokens):
            prefix = tokens[:t]
            if len(prefix) >= params.max_len:
                # 强制 EOS：概率恒为 1，被截断成 1-ε，没有梯度
                total += wi * -math.log(cfg.eps_u)
                continue
            p_row = row_cache.get(prefix)
            if p_row is None:
                p_row = row_cache[prefix] = softmax(params.row(prefix))
            loss, row = _token_loss_and_row(p_row, tok, cfg.eps_u)
            total += wi * loss
            if row is not None:
                grad_add(grad, {prefix: row}, wi)

    scale = 1.0 / n_tokens
    return total * scale, {prefix: g * scale for prefix, g in grad.items()}


def unlearn_loss(
    params: PolicyParams,
    trajectories: Sequence[Trajectory],
    cfg: UnlearnConfig,
    weights: Optional[Sequence[float]] = None,
) -> float:
    loss, _ = unlearn_loss_and_grad(params, trajectories, cfg, weights)
    return loss


def make_explorer(
    anchor: PolicyParams,
    anchor_rollouts: Sequence[Trajectory],
    cfg: UnlearnConfig,
    weights: Optional[Sequence[float]] = None,
) -> PolicyParams:
    """
    θ' ← θ' - η ∇L_unlearn(θ')，只走一步
    返回新的策略对象；anchor 本身不动 (临时更新)
    """
    loss, grad = unlearn_loss_and_grad(anchor, anchor_rollouts, cfg, weights)
    explorer = anchor.apply_gradient(grad, -cfg.eta_u)
    logger.debug(f"🧹 [Unlearn] q={anchor.question_id} loss={loss:.4f} touched_prefixes={len(grad)}")
    return explorer


def sweep_unlearn_lr(
    anchor: PolicyParams,
    rollouts: Sequence[Trajectory],
    etas: Sequence[float],
    cfg: Optional[UnlearnConfig] = None,
    weights: Optional[Sequence[float]] = None,
) -> List[dict]:
    """
    遗忘学习率敏感性扫描：每个 η 下 explorer 的答案分布、熵和 INVALID 质量
    """
    from app.services.oracle import exact_answer_distribution

    cfg = cfg or UnlearnConfig()
    anchor_dist = exact_answer_distribution(anchor)
    _, grad = unlearn_loss_and_grad(anchor, rollouts, cfg, weights)

    rows = []
    for eta in etas:
        explorer = anchor.apply_gradient(grad, -float(eta))
        dist = exact_answer_distribution(explorer)
        rows.append({
            "eta_u": float(eta),
            "anchor_entropy": anchor_dist.entropy(),
            "explorer_entropy": dist.entropy(),
            "invalid_mass": dist.invalid_mass,
            "explorer_dist": {answer_key(a): p for a, p in sorted(dist.probs.items())},
        })
    return rows
