"""
暴力真值 (oracle)：
1. 前缀树穷举 -> 精确答案分布
2. 调和分数的闭式解 S̃(a) = 2·π_a(a)·π_e(a) / (π_a(a) + π_e(a))
3. 定理检查器：多数票选中伪众数、调和选举选中真答案，在什么条件下成立
4. 有限差分梯度校验
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core.logger import logger
from app.services.consensus import argmax_answer, elect, harmonic_score, histogram
from app.services.grpo import GrpoConfig, kl_penalty, surrogate_loss
from app.services.policy import (
    Answer,
    Gradient,
    PolicyParams,
    Prefix,
    Trajectory,
    TrajectorySource,
    Vocab,
    answer_key,
    check_enumeration_bound,
    exact_seq_log_prob,
    exact_seq_prob,
    extract_answer,
    logprob_grad,
    sample_group,
)
from app.services.unlearning import UnlearnConfig, make_explorer, unlearn_loss, unlearn_loss_and_grad

# 精确模式 explorer 的路径剪枝阈值
EXPLORER_MIN_PROB = 1e-12
# 定理检查 / 校准时的剪枝阈值：饱和行的旁支 (≈e^-40) 不再展开，丢掉的总质量远小于 1e-9
FAST_MIN_PROB = 1e-15


@dataclass
class ExactDistribution:
    probs: Dict[Answer, float] = field(default_factory=dict)
    invalid_mass: float = 0.0

    def prob(self, answer: Optional[Answer]) -> float:
        if answer is None:
            return self.invalid_mass
        return self.probs.get(answer, 0.0)

    def mode(self) -> Optional[Answer]:
        return argmax_answer(self.probs)

    def total(self) -> float:
        return sum(self.probs.values()) + self.invalid_mass

    def entropy(self) -> float:
        """答案分布的香农熵 (nats)

        INVALID 当作一个独立结果计入，和其它答案一样贡献 -p·log p，
        所以有无效质量时结果不等于只在有效答案上算的熵。
        """
        masses = list(self.probs.values()) + [self.invalid_mass]
        return float(-sum(p * math.log(p) for p in masses if p > 0.0))

    def to_dict(self) -> Dict[str, float]:
        out = {answer_key(a): p for a, p in sorted(self.probs.items())}
        out[answer_key(None)] = self.invalid_mass
        return out


# =================================================================
# 穷举
# =================================================================

def _walk(params: PolicyParams, min_prob: float) -> Iterator[Tuple[Tuple[int, ...], Tuple[float, ...], float]]:
    """深度优先，按 token 字典序；前缀概率 ≤ min_prob 的分支直接剪掉 (min_prob=0 只剪概率为 0 的分支)"""
    eos = params.vocab.eos_token

    def visit(prefix: Tuple[int, ...], steps: Tuple[float, ...], mass: float):
        p = params.probs(prefix)
        for tok in range(params.vocab.size):
            child = mass * float(p[tok])
            if child <= min_prob:
                continue
            tokens = prefix + (tok,)
            child_steps = steps + (float(p[tok]),)
            if tok == eos:
                yield tokens, child_steps, child
            else:
                yield from visit(tokens, child_steps, child)

    yield from visit((), (), 1.0)


def enumerate_paths(params: PolicyParams, min_prob: float = 0.0) -> List[Tuple[Tuple[int, ...], float]]:
    """所有以 EOS 结束的路径及其精确概率"""
    check_enumeration_bound(params)
    return [(tokens, mass) for tokens, _, mass in _walk(params, min_prob)]


def exact_answer_distribution(params: PolicyParams, min_prob: float = 0.0) -> ExactDistribution:
    check_enumeration_bound(params)
    probs: Dict[Answer, float] = {}
    invalid = 0.0
    for tokens, _, mass in _walk(params, min_prob):
        answer = extract_answer(tokens, params.vocab)
        if answer is None:
            invalid += mass
        else:
            probs[answer] = probs.get(answer, 0.0) + mass
    return ExactDistribution(probs=probs, invalid_mass=invalid)


def exact_rollouts(params: PolicyParams, min_prob: float = EXPLORER_MIN_PROB) -> Tuple[List[Trajectory], np.ndarray]:
    """把穷举出的路径包装成带权 rollout (权重 = 精确路径概率)"""
    check_enumeration_bound(params)
    trajectories, weights = [], []
    for tokens, steps, mass in _walk(params, min_prob):
        trajectories.append(Trajectory(
            tokens=tokens,
            step_probs=steps,
            answer=extract_answer(tokens, params.vocab),
            source=TrajectorySource.ANCHOR,
        ))
        weights.append(mass)
    return trajectories, np.asarray(weights)


def exact_explorer(anchor: PolicyParams, cfg: UnlearnConfig) -> PolicyParams:
    """G→∞ 极限下的 explorer：遗忘梯度按 anchor 的精确路径概率加权"""
    rollouts, weights = exact_rollouts(anchor)
    return make_explorer(anchor, rollouts, cfg, weights)


def exact_pass_at_k(params: PolicyParams, answer: Answer, k: int = 1, min_prob: float = 0.0) -> float:
    p = exact_answer_distribution(params, min_prob).prob(tuple(answer))
    return 1.0 - (1.0 - p) ** k


# =================================================================
# 闭式调和分数
# =================================================================

def closed_form_scores(anchor_dist: ExactDistribution, explorer_dist: ExactDistribution) -> Dict[Answer, float]:
    answers = set(anchor_dist.probs) | set(explorer_dist.probs)
    return {a: harmonic_score(anchor_dist.prob(a), explorer_dist.prob(a)) for a in answers}


def closed_form_pick(anchor_dist: ExactDistribution, explorer_dist: ExactDistribution) -> Tuple[Optional[Answer], bool]:
    """返回 (精确选举结果, 是否回退)；分数全 0 时回退到 anchor 众数"""
    scores = closed_form_scores(anchor_dist, explorer_dist)
    best = argmax_answer(scores)
    if best is not None and scores[best] > 0.0:
        return best, False
    return anchor_dist.mode(), True


def robustness_ratio(anchor_dist: ExactDistribution, explorer_dist: ExactDistribution, answer: Answer) -> Optional[float]:
    """r = π_explorer(a) / π_anchor(a)；anchor 上没有质量时无定义"""
    base = anchor_dist.prob(answer)
    if base <= 0.0:
        return None
    return explorer_dist.prob(answer) / base


# =================================================================
# 定理检查
# =================================================================

class TheoremThresholds(BaseModel):
    gap_min: float = Field(default=2.0, ge=1.0)
    ratio_min: float = Field(default=4.0, ge=1.0)
    suppression: float = Field(default=0.5, gt=0.0, le=0.5)
    lln_min_mass: float = Field(default=0.05, ge=0.0)
    # None 表示 3·sqrt(0.25/G)，即 3 个最坏情况的二项标准差
    lln_tol: Optional[float] = Field(default=None, gt=0.0)

    def lln_tolerance(self, G: int) -> float:
        return self.lln_tol if self.lln_tol is not None else 3.0 * math.sqrt(0.25 / G)


class TheoremReport(BaseModel):
    question_id: str
    G: int
    y_true: List[int]
    y_sp: Optional[List[int]] = None
    anchor_dist: Dict[str, float]
    explorer_dist: Dict[str, float]
    scores: Dict[str, float]
    r_true: Optional[float] = None
    r_sp: Optional[float] = None
    mv_pick: Optional[str] = None
    dc_pick_exact: Optional[str] = None
    dc_fallback_used: bool = False
    one_sided_true: bool = False
    score_margin: float = 0.0
    mv_pick_monte_carlo: Optional[str] = None
    dc_pick_monte_carlo: Optional[str] = None
    lln_deviation: float = 0.0
    a1_gap: bool = False
    a1_mode: bool = False
    a2_ratio: bool = False
    a2_suppression: bool = False
    a3_lln: bool = False
    assumptions_satisfied: bool = False
    theorem_holds: bool = False


def _suppression_holds(
    anchor_dist: ExactDistribution,
    explorer_dist: ExactDistribution,
    y_true: Answer,
    suppression: float,
) -> bool:
    m = min(anchor_dist.prob(y_true), explorer_dist.prob(y_true))
    if m <= 0.0:
        return False
    competitors = (set(anchor_dist.probs) | set(explorer_dist.probs)) - {y_true}
    return all(min(anchor_dist.prob(a), explorer_dist.prob(a)) <= suppression * m for a in competitors)


def check_theorem(
    spec,
    unlearn_cfg: UnlearnConfig,
    G: int = 64,
    thresholds: Optional[TheoremThresholds] = None,
) -> TheoremReport:
    """
    一个场景：建 anchor -> 精确模式 explorer -> 闭式选举 + G 个样本的蒙特卡洛选举
    并逐条判断前提在数值上是否成立：伪众数在 anchor 下占优、真答案比伪众数更经得起遗忘、explorer 压低其余高频答案
    """
    from app.services.taskgen import build_task

    thresholds = thresholds or TheoremThresholds()
    anchor = build_task(spec, unlearn_cfg)
    explorer = exact_explorer(anchor, unlearn_cfg)
    anchor_dist = exact_answer_distribution(anchor, FAST_MIN_PROB)
    explorer_dist = exact_answer_distribution(explorer, FAST_MIN_PROB)

    y_true = tuple(spec.true_answer)
    y_sp = tuple(spec.spurious_answer) if spec.spurious_answer is not None else None

    # 1. 精确选举
    scores = closed_form_scores(anchor_dist, explorer_dist)
    dc_exact, fallback = closed_form_pick(anchor_dist, explorer_dist)
    mv_exact = anchor_dist.mode()
    ranked = sorted(scores.values(), reverse=True)
    margin = ranked[0] - ranked[1] if len(ranked) > 1 else (ranked[0] if ranked else 0.0)

    # 2. 蒙特卡洛选举 (有限 G)
    rng = np.random.default_rng([spec.seed, G])
    anchor_rollouts = sample_group(anchor, G, rng, TrajectorySource.ANCHOR)
    explorer_rollouts = sample_group(explorer, G, rng, TrajectorySource.EXPLORER)
    h0, h1 = histogram(anchor_rollouts), histogram(explorer_rollouts)
    outcome = elect(h0, h1)

    # 3. 假设检查
    lln_dev = max(
        (abs(h0.prob(a) - p) for a, p in anchor_dist.probs.items() if p >= thresholds.lln_min_mass),
        default=0.0,
    )
    r_true = robustness_ratio(anchor_dist, explorer_dist, y_true)
    r_sp = robustness_ratio(anchor_dist, explorer_dist, y_sp) if y_sp is not None else None

    a1_gap = a1_mode = a2_ratio = False
    if y_sp is not None:
        a1_gap = anchor_dist.prob(y_sp) >= thresholds.gap_min * anchor_dist.prob(y_true)
        a1_mode = mv_exact == y_sp
        a2_ratio = r_true is not None and r_sp is not None and r_true >= thresholds.ratio_min * r_sp
    a2_suppression = _suppression_holds(anchor_dist, explorer_dist, y_true, thresholds.suppression)
    satisfied = y_sp is not None and a1_gap and a1_mode and a2_ratio and a2_suppression

    if y_sp is not None:
        holds = mv_exact == y_sp and dc_exact == y_true
    else:
        holds = mv_exact == y_true and dc_exact == y_true

    return TheoremReport(
        question_id=spec.question_id,
        G=G,
        y_true=list(y_true),
        y_sp=list(y_sp) if y_sp is not None else None,
        anchor_dist=anchor_dist.to_dict(),
        explorer_dist=explorer_dist.to_dict(),
        scores={answer_key(a): s for a, s in sorted(scores.items())},
        r_true=r_true,
        r_sp=r_sp,
        mv_pick=answer_key(mv_exact) if mv_exact is not None else None,
        dc_pick_exact=answer_key(dc_exact) if dc_exact is not None else None,
        dc_fallback_used=fallback,
        one_sided_true=min(anchor_dist.prob(y_true), explorer_dist.prob(y_true)) <= 0.0,
        score_margin=margin,
        mv_pick_monte_carlo=answer_key(h0.majority()) if h0.majority() is not None else None,
        dc_pick_monte_carlo=answer_key(outcome.pseudo_label) if outcome.pseudo_label is not None else None,
        lln_deviation=lln_dev,
        a1_gap=a1_gap,
        a1_mode=a1_mode,
        a2_ratio=a2_ratio,
        a2_suppression=a2_suppression,
        a3_lln=lln_dev <= thresholds.lln_tolerance(G),
        assumptions_satisfied=satisfied,
        theorem_holds=holds,
    )


class TheoremGridConfig(BaseModel):
    gaps: List[float] = Field(default_factory=lambda: [2.5, 3.0, 4.0])
    sp_ratios: List[float] = Field(default_factory=lambda: [0.02, 0.05, 0.1])
    tail_masses: List[float] = Field(default_factory=lambda: [0.06, 0.1])
    reasoning_len: int = Field(default=2, ge=0)
    repeats: int = Field(default=1, ge=1)
    G: int = Field(default=64, ge=1)
    seed: int = 0
    calibration: UnlearnConfig = Field(default_factory=lambda: UnlearnConfig(eta_u=20.0))
    thresholds: TheoremThresholds = Field(default_factory=TheoremThresholds)


def theorem_grid(cfg: TheoremGridConfig) -> Iterator[TheoremReport]:
    """扫描 (gap, r_sp, 尾部质量) 网格，每个格点 repeats 个不同种子的场景"""
    from app.services.taskgen import make_spurious_spec

    idx = 0
    for rep in range(cfg.repeats):
        for gap in cfg.gaps:
            for r_sp in cfg.sp_ratios:
                for tail in cfg.tail_masses:
                    rng = np.random.default_rng([cfg.seed, idx])
                    spec = make_spurious_spec(
                        question_id=f"theorem-{idx:04d}",
                        gap=gap,
                        sp_ratio=r_sp,
                        tail_mass=tail,
                        reasoning_len=cfg.reasoning_len,
                        ratio_min=cfg.thresholds.ratio_min,
                        rng=rng,
                        calibration=cfg.calibration,
                    )
                    idx += 1
                    yield check_theorem(spec, cfg.calibration, cfg.G, cfg.thresholds)


# =================================================================
# 有限差分梯度校验
# =================================================================

def finite_difference(
    fn: Callable[[PolicyParams], float],
    params: PolicyParams,
    prefixes: Iterable[Prefix],
    h: float = 1e-5,
) -> Gradient:
    """中心差分：对每个给定前缀的每个 logit 分量做 ±h 扰动"""
    work = params.copy()
    grad: Gradient = {}
    for prefix in prefixes:
        prefix = tuple(prefix)
        had_row = prefix in work.logits
        base = work.row(prefix).copy()
        g = np.zeros_like(base)
        for j in range(base.size):
            bumped = base.copy()
            bumped[j] = base[j] + h
            work.logits[prefix] = bumped
            f_plus = fn(work)
            bumped = base.copy()
            bumped[j] = base[j] - h
            work.logits[prefix] = bumped
            f_minus = fn(work)
            g[j] = (f_plus - f_minus) / (2.0 * h)
        if had_row:
            work.logits[prefix] = base
        else:
            del work.logits[prefix]
        grad[prefix] = g
    return grad


def relative_error(a: Gradient, b: Gradient) -> float:
    """‖a-b‖ / max(‖a‖, ‖b‖)；两边都接近 0 时退化为绝对误差"""
    keys = set(a) | set(b)
    diff = na = nb = 0.0
    for k in keys:
        ga = a.get(k)
        gb = b.get(k)
        if ga is None:
            ga = np.zeros_like(gb)
        if gb is None:
            gb = np.zeros_like(ga)
        diff += float(np.sum((ga - gb) ** 2))
        na += float(np.sum(ga ** 2))
        nb += float(np.sum(gb ** 2))
    diff, scale = math.sqrt(diff), max(math.sqrt(na), math.sqrt(nb))
    if scale < 1e-8:
        return diff
    return diff / scale


class GradCheckReport(BaseModel):
    n_instances: int
    tol: float
    logprob_max_rel_err: float
    unlearn_max_rel_err: float
    surrogate_max_rel_err: float
    kl_max_rel_err: float
    passed: bool


def _visited_prefixes(trajectories: Sequence[Trajectory]) -> List[Prefix]:
    seen = []
    for traj in trajectories:
        for t in range(len(traj.tokens)):
            prefix = traj.tokens[:t]
            if prefix not in seen:
                seen.append(prefix)
    return seen


def _random_policy(rng: np.random.Generator, vocab: Vocab, max_len: int, question_id: str) -> PolicyParams:
    params = PolicyParams(vocab, max_len, question_id)
    frontier: List[Prefix] = [()]
    while frontier:
        prefix = frontier.pop()
        params.set_row(prefix, rng.normal(0.0, 1.5, vocab.size))
        if len(prefix) + 1 < max_len:
            frontier.extend(prefix + (t,) for t in range(vocab.size) if t != vocab.eos_token)
    return params


def grad_check(n_instances: int = 100, seed: int = 0, tol: float = 1e-5, h: float = 1e-5) -> GradCheckReport:
    """
    随机小策略上比较解析梯度与中心差分：
    log π(y)、遗忘损失、GRPO 代理目标、KL 惩罚
    """
    rng = np.random.default_rng(seed)
    vocab = Vocab(size=5, sep_token=3, eos_token=4)
    unlearn_cfg = UnlearnConfig(eta_u=0.5, eps_u=0.01)
    grpo_cfg = GrpoConfig(eps_clip=0.2)
    errs = {"logprob": 0.0, "unlearn": 0.0, "surrogate": 0.0, "kl": 0.0}

    for i in range(n_instances):
        params = _random_policy(rng, vocab, max_len=3, question_id=f"gc-{i}")
        rollouts = sample_group(params, 4, rng)
        prefixes = _visited_prefixes(rollouts)

        # 1. log π(y)
        tokens = rollouts[0].tokens
        analytic = logprob_grad(params, tokens)
        numeric = finite_difference(lambda p: exact_seq_log_prob(p, tokens), params, prefixes, h)
        errs["logprob"] = max(errs["logprob"], relative_error(analytic, numeric))

        # 2. 遗忘损失
        _, analytic = unlearn_loss_and_grad(params, rollouts, unlearn_cfg)
        numeric = finite_difference(lambda p: unlearn_loss(p, rollouts, unlearn_cfg), params, prefixes, h)
        errs["unlearn"] = max(errs["unlearn"], relative_error(analytic, numeric))

        # 3. 代理目标：旧策略取一个扰动后的策略
        old = params.apply_gradient({pre: rng.normal(0.0, 0.3, vocab.size) for pre in prefixes}, 1.0)
        old_probs = [exact_seq_prob(old, traj.tokens) for traj in rollouts]
        advantages = rng.normal(0.0, 1.0, len(rollouts))
        group = list(zip(rollouts, advantages))
        _, analytic = surrogate_loss(params, old_probs, group, grpo_cfg)
        numeric = finite_difference(lambda p: surrogate_loss(p, old_probs, group, grpo_cfg)[0], params, prefixes, h)
        errs["surrogate"] = max(errs["surrogate"], relative_error(analytic, numeric))

        # 4. KL(π_θ || π_ref)
        _, analytic = kl_penalty(params, old, rollouts)
        numeric = finite_difference(lambda p: kl_penalty(p, old, rollouts)[0], params, prefixes, h)
        errs["kl"] = max(errs["kl"], relative_error(analytic, numeric))

    report = GradCheckReport(
        n_instances=n_instances,
        tol=tol,
        logprob_max_rel_err=errs["logprob"],
        unlearn_max_rel_err=errs["unlearn"],
        surrogate_max_rel_err=errs["surrogate"],
        kl_max_rel_err=errs["kl"],
        passed=all(e < tol for e in errs.values()),
    )
    logger.info(f"🧪 [GradCheck] n={n_instances} 最大相对误差 {errs} -> {'通过' if report.passed else '失败'}")
    return report
