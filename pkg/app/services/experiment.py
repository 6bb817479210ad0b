"""
训练主循环 (Dual Consensus / 多数票基线) + 评估 + 共识策略对比

每一步:
  A. 每道题 anchor 采 G 条 -> 共识率 ρ_t
  B. 全局滑动窗口写入本批 ρ 的均值 -> ρ̄_t (每步只写一次)
  C. 每道题: 遗忘一步得 explorer -> explorer 采 G 条 -> 选举 -> 奖励 -> 门控 -> GRPO 更新
学习路径只拿到 TaskView (题号 + 策略)；真答案只用于写指标
"""
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from app.core.errors import NumericalAbort
from app.core.logger import logger
from app.services import reports
from app.services.adaptive_sampler import ConsensusTracker, GateMode, SamplerConfig, consensus_rate, gate_decision
from app.services.consensus import (
    ConsensusOutcome,
    RewardScheme,
    assign_rewards,
    elect,
    histogram,
    majority_outcome,
    pooled_outcome,
)
from app.services.grpo import GrpoConfig, prepare_group, update_policy
from app.services.oracle import FAST_MIN_PROB, exact_answer_distribution, exact_rollouts
from app.services.policy import (
    Answer,
    PolicyParams,
    Trajectory,
    TrajectorySource,
    answer_key,
    sample_group,
    save_checkpoint,
)
from app.services.taskgen import SuiteConfig, TaskSpec, TaskView, build_task, generate_suite, save_suite
from app.services.unlearning import UnlearnConfig, make_explorer, sweep_unlearn_lr

# RNG 流编号：np.random.default_rng([seed, step, 题目下标, stage])
STAGE_ANCHOR = 0
STAGE_EXPLORER = 1


class Method(str, Enum):
    DCRL = "DCRL"
    MAJORITY_VOTE = "MajorityVote"
    POOLED_MAJORITY = "PooledMajority"


class TrainConfig(BaseModel):
    suite: SuiteConfig = Field(default_factory=SuiteConfig)
    G: int = Field(default=16, ge=1)
    # None -> epochs 轮，每轮 ceil(n / batch_size) 步
    steps: Optional[int] = Field(default=None, ge=0)
    epochs: int = Field(default=2, ge=1)
    batch_size: int = Field(default=8, ge=1)
    unlearn: UnlearnConfig = Field(default_factory=UnlearnConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    method: Method = Method.DCRL
    reward_scheme: RewardScheme = RewardScheme.CONSERVATIVE
    seed: int = 0
    output_dir: str = "out"
    workers: int = Field(default=1, ge=1)
    track_entropy: bool = True
    save_checkpoints: bool = True


class MetricsRecord(BaseModel):
    step: int
    epoch: int
    question_id: str
    rho_t: float
    mean_rho: float
    gate_open: bool
    pseudo_label: Optional[str] = None
    anchor_majority: Optional[str] = None
    label_correct: bool
    anchor_label_correct: bool
    fallback_used: bool
    n_train: int
    reward_mean: float
    n_reward_one: int
    n_reward_one_true: int
    anchor_entropy: Optional[float] = None
    explorer_entropy: Optional[float] = None


@dataclass
class QuestionStep:
    """一道题一步的学习结果 (不含任何真值)"""
    question_id: str
    rho_t: float
    gate_open: bool
    outcome: ConsensusOutcome
    train: List[Trajectory]
    rewards: List[float]
    policy: PolicyParams
    anchor_entropy: Optional[float] = None
    explorer_entropy: Optional[float] = None


@dataclass
class RunResult:
    policies: Dict[str, PolicyParams]
    records: List[MetricsRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    output_dir: Optional[str] = None


def _rng(seed: int, step: int, qidx: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, qidx, stage])


def build_schedule(cfg: TrainConfig, n_questions: int) -> List[Tuple[int, List[int]]]:
    """[(epoch, 本步的题目下标)]；每轮一次洗牌，同一批里不会重复出现同一道题"""
    if n_questions == 0:
        return []
    B = min(cfg.batch_size, n_questions)
    per_epoch = math.ceil(n_questions / B)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    schedule = []
    epoch = 0
    while len(schedule) < total:
        order = [int(i) for i in np.random.default_rng([cfg.seed, epoch]).permutation(n_questions)]
        for start in range(0, n_questions, B):
            if len(schedule) == total:
                break
            schedule.append((epoch, order[start:start + B]))
        epoch += 1
    return schedule


def _entropy(params: PolicyParams) -> float:
    return exact_answer_distribution(params, FAST_MIN_PROB).entropy()


def _learn_question(
    view: TaskView,
    anchor_rollouts: List[Trajectory],
    rho_t: float,
    mean_rho: float,
    cfg: TrainConfig,
    step: int,
    qidx: int,
    ref: Optional[PolicyParams] = None,
) -> QuestionStep:
    """训练循环里单道题的一步：explorer -> 选举 -> 奖励 -> 门控 -> 更新"""
    policy = view.policy
    h0 = histogram(anchor_rollouts)
    explorer_rollouts: List[Trajectory] = []
    explorer_entropy = None

    # 1. 选举 (多数票基线不跑遗忘，也不采 explorer)
    if cfg.method == Method.MAJORITY_VOTE:
        outcome = majority_outcome(h0)
        gate = gate_decision(GateMode.ANCHOR_ONLY, mean_rho, rho_t, cfg.sampler.threshold)
    else:
        explorer = make_explorer(policy, anchor_rollouts, cfg.unlearn)
        explorer_rollouts = sample_group(explorer, cfg.G, _rng(cfg.seed, step, qidx, STAGE_EXPLORER), TrajectorySource.EXPLORER)
        h1 = histogram(explorer_rollouts)
        outcome = elect(h0, h1) if cfg.method == Method.DCRL else pooled_outcome(h0, h1)
        gate = gate_decision(cfg.sampler.gate_mode, mean_rho, rho_t, cfg.sampler.threshold)
        if not explorer.is_finite():
            raise FloatingPointError("explorer 参数出现 NaN/Inf")
        if cfg.track_entropy:
            explorer_entropy = _entropy(explorer)

    # 2. 奖励 + 门控
    train = anchor_rollouts + explorer_rollouts if gate else list(anchor_rollouts)
    rewards = assign_rewards(train, outcome, cfg.reward_scheme)

    # 3. GRPO 更新
    group = prepare_group(train, rewards, policy, cfg.grpo)
    updated = update_policy(policy, [group], cfg.grpo, ref if cfg.grpo.kl_enabled else None)

    if outcome.fallback_used:
        logger.debug(f"⚠️ [Election] step={step} q={view.question_id} 调和分数全 0, 用了回退标签")
    return QuestionStep(
        question_id=view.question_id,
        rho_t=rho_t,
        gate_open=gate,
        outcome=outcome,
        train=train,
        rewards=rewards,
        policy=updated,
        anchor_entropy=_entropy(policy) if cfg.track_entropy else None,
        explorer_entropy=explorer_entropy,
    )


def _dump_abort(cfg: TrainConfig, step: int, question_id: str, policy: PolicyParams, detail: str) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"abort_step_{step}.json")
    payload = {
        "step": step,
        "question_id": question_id,
        "detail": detail,
        "config": cfg.model_dump(mode="json"),
        "policy": policy.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
    return path


def _record(
    step: int,
    epoch: int,
    result: QuestionStep,
    mean_rho: float,
    y_true: Answer,
) -> MetricsRecord:
    """这里是唯一读取真答案的地方"""
    outcome = result.outcome
    one = [traj for traj, r in zip(result.train, result.rewards) if r == 1.0]
    return MetricsRecord(
        step=step,
        epoch=epoch,
        question_id=result.question_id,
        rho_t=result.rho_t,
        mean_rho=mean_rho,
        gate_open=result.gate_open,
        pseudo_label=answer_key(outcome.pseudo_label) if outcome.pseudo_label is not None else None,
        anchor_majority=answer_key(outcome.anchor_majority) if outcome.anchor_majority is not None else None,
        label_correct=outcome.pseudo_label == y_true,
        anchor_label_correct=outcome.anchor_majority == y_true,
        fallback_used=outcome.fallback_used,
        n_train=len(result.train),
        reward_mean=float(np.mean(result.rewards)),
        n_reward_one=len(one),
        n_reward_one_true=sum(1 for traj in one if traj.answer == y_true),
        anchor_entropy=result.anchor_entropy,
        explorer_entropy=result.explorer_entropy,
    )


def run_training(
    cfg: TrainConfig,
    suite: Optional[Sequence[Tuple[TaskSpec, PolicyParams]]] = None,
    write: bool = True,
    progress: bool = False,
) -> RunResult:
    # 1. 准备题库；学习端只拿 TaskView
    if suite is None:
        suite = generate_suite(cfg.suite)
    truth = {spec.question_id: tuple(spec.true_answer) for spec, _ in suite}
    qids = [spec.question_id for spec, _ in suite]
    policies = {spec.question_id: params.copy() for spec, params in suite}
    refs = {qid: p.copy() for qid, p in policies.items()}
    tracker = ConsensusTracker(cfg.sampler.K, cfg.sampler.threshold)
    schedule = build_schedule(cfg, len(qids))

    writer = None
    if write:
        os.makedirs(cfg.output_dir, exist_ok=True)
        save_suite(suite, os.path.join(cfg.output_dir, "suite"))
        writer = reports.MetricsWriter(os.path.join(cfg.output_dir, reports.METRICS_FILE))
    logger.info(
        f"🚀 [Train] method={cfg.method.value} seed={cfg.seed} 题数={len(qids)} 步数={len(schedule)} G={cfg.G}"
    )

    records: List[MetricsRecord] = []
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    run_map = pool.map if pool is not None else map
    try:
        for step, (epoch, batch) in enumerate(tqdm(schedule, desc="训练", disable=not progress)):
            batch = sorted(batch, key=lambda i: qids[i])

            # A. anchor rollouts + 共识率
            def anchor_phase(i):
                rollouts = sample_group(policies[qids[i]], cfg.G, _rng(cfg.seed, step, i, STAGE_ANCHOR))
                return rollouts, consensus_rate(rollouts, histogram(rollouts).majority())

            phase_a = list(run_map(anchor_phase, batch))

            # B. 全局窗口每步只写一次
            mean_rho = tracker.update_and_mean(float(np.mean([rho for _, rho in phase_a])))

            # C. 逐题学习
            def learn_phase(args):
                i, (rollouts, rho) = args
                view = TaskView(question_id=qids[i], policy=policies[qids[i]])
                try:
                    return _learn_question(view, rollouts, rho, mean_rho, cfg, step, i, refs[qids[i]])
                except FloatingPointError as exc:
                    return exc

            results = list(run_map(learn_phase, zip(batch, phase_a)))

            # 2. 串行：NaN 检查、写回参数、写指标 (题号顺序)
            for i, result in zip(batch, results):
                qid = qids[i]
                if isinstance(result, FloatingPointError) or not result.policy.is_finite():
                    detail = str(result) if isinstance(result, FloatingPointError) else "更新后参数出现 NaN/Inf"
                    dump = _dump_abort(cfg, step, qid, policies[qid], detail)
                    logger.error(f"❌ [Train] step={step} q={qid} 数值异常, 现场已写入 {dump}")
                    raise NumericalAbort(f"step {step} 题目 {qid}: {detail}", step, qid, dump)
                policies[qid] = result.policy
                record = _record(step, epoch, result, mean_rho, truth[qid])
                records.append(record)
                if writer is not None:
                    writer.write(record)

            gate_count = sum(1 for r in results if r.gate_open)
            acc = float(np.mean([r.label_correct for r in records[-len(batch):]]))
            logger.info(f"📊 [Train] step={step} ρ̄={mean_rho:.3f} gate_open={gate_count}/{len(batch)} label_acc={acc:.3f}")
    finally:
        if pool is not None:
            pool.shutdown()
        if writer is not None:
            writer.close()

    summary = reports.summarize([r.model_dump() for r in records], cfg.method.value, cfg.seed)
    if write:
        reports.write_summary(summary, cfg.output_dir)
        if cfg.save_checkpoints:
            ckpt_dir = os.path.join(cfg.output_dir, "checkpoints")
            os.makedirs(ckpt_dir, exist_ok=True)
            for qid, params in policies.items():
                save_checkpoint(params, os.path.join(ckpt_dir, f"{qid}.json"))
    logger.info(
        f"✅ [Train] 完成: final_label_acc={summary['final_label_accuracy']:.3f} "
        f"reward_correctness={summary['reward_correctness']:.3f}"
    )
    return RunResult(policies=policies, records=records, summary=summary, output_dir=cfg.output_dir if write else None)


# =================================================================
# 评估
# =================================================================

class TaskEval(BaseModel):
    question_id: str
    spurious: bool
    exact_pass1: float
    empirical_pass1: float
    pass_at_16: float


class EvalReport(BaseModel):
    n_tasks: int
    mean_exact_pass1: float
    mean_empirical_pass1: float
    mean_pass_at_16: float
    tasks: List[TaskEval]


def evaluate(
    policies: Dict[str, PolicyParams],
    suite: Sequence[Tuple[TaskSpec, PolicyParams]],
    n_samples: int = 16,
    seed: int = 0,
) -> EvalReport:
    """精确 pass@1 (oracle) + n_samples 次采样的经验 pass@1 + 精确 pass@16"""
    rows = []
    for idx, (spec, _) in enumerate(suite):
        policy = policies[spec.question_id]
        y_true = tuple(spec.true_answer)
        p = exact_answer_distribution(policy, FAST_MIN_PROB).prob(y_true)
        samples = sample_group(policy, n_samples, np.random.default_rng([seed, idx]))
        rows.append(TaskEval(
            question_id=spec.question_id,
            spurious=spec.spurious_answer is not None,
            exact_pass1=p,
            empirical_pass1=sum(1 for t in samples if t.answer == y_true) / n_samples,
            pass_at_16=1.0 - (1.0 - p) ** 16,
        ))
    n = len(rows)
    mean = (lambda xs: float(np.mean(xs)) if xs else 0.0)
    return EvalReport(
        n_tasks=n,
        mean_exact_pass1=mean([r.exact_pass1 for r in rows]),
        mean_empirical_pass1=mean([r.empirical_pass1 for r in rows]),
        mean_pass_at_16=mean([r.pass_at_16 for r in rows]),
        tasks=rows,
    )


# =================================================================
# 共识策略对比 (Harmonic / AnchorMajority / PooledMajority)
# =================================================================

STRATEGY_METHODS = [
    ("Harmonic", Method.DCRL),
    ("AnchorMajority", Method.MAJORITY_VOTE),
    ("PooledMajority", Method.POOLED_MAJORITY),
]


def compare_consensus(cfg: TrainConfig, seeds: Sequence[int], progress: bool = False) -> List[dict]:
    """同一个题库、成对的训练种子，三种选举策略各跑一遍；只在内存里跑，不落盘"""
    suite = generate_suite(cfg.suite, progress=progress)
    rows = []
    for strategy, method in STRATEGY_METHODS:
        per_seed = []
        for seed in seeds:
            run_cfg = cfg.model_copy(update={"method": method, "seed": int(seed)})
            result = run_training(run_cfg, suite=suite, write=False)
            per_seed.append({
                "seed": int(seed),
                "final_label_accuracy": result.summary["final_label_accuracy"],
                "reward_correctness": result.summary["reward_correctness"],
            })
        rows.append({
            "strategy": strategy,
            "method": method.value,
            "mean_final_label_accuracy": float(np.mean([r["final_label_accuracy"] for r in per_seed])) if per_seed else 0.0,
            "mean_reward_correctness": float(np.mean([r["reward_correctness"] for r in per_seed])) if per_seed else 0.0,
            "per_seed": per_seed,
        })
        logger.info(f"📋 [Compare] {strategy}: label_acc={rows[-1]['mean_final_label_accuracy']:.3f}")
    return rows


# =================================================================
# 遗忘学习率敏感性
# =================================================================

class SweepConfig(BaseModel):
    etas: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0])
    G: int = Field(default=16, ge=1)
    # True: 用精确路径概率加权 (G→∞)；False: 用 G 条采样轨迹
    exact: bool = True
    seed: int = 0
    eps_u: float = Field(default=0.01, gt=0.0, lt=0.5)
    task: TaskSpec


def run_unlearn_sweep(cfg: SweepConfig) -> List[dict]:
    anchor = build_task(cfg.task)
    if cfg.exact:
        rollouts, weights = exact_rollouts(anchor)
    else:
        rollouts, weights = sample_group(anchor, cfg.G, np.random.default_rng(cfg.seed)), None
    return sweep_unlearn_lr(anchor, rollouts, cfg.etas, UnlearnConfig(eps_u=cfg.eps_u), weights)
