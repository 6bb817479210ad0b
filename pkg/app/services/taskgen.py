"""
合成题库生成：每道题一棵前缀树策略，埋入真答案 y_true 以及可控的伪众数 y_sp

直接作答 (reasoning_len = 0):  [SEP, 答案..., EOS]，答案分布直接写成 logits = log p
带推理 (reasoning_len > 0):     第一个推理 token 决定 "路线"，答案分布只取决于路线
    - 伪众数路线 1 条：y_sp 占 q_sp，其余落在噪声答案上 (尖锐，遗忘梯度大)
    - 真答案路线若干条：y_true 占 q_true (分散，单条路线梯度小)
    - 噪声路线：其它答案 + 剩余噪声质量
    q_sp 用二分数值校准，使一步遗忘后 y_sp 的保留比例接近 r_sp 目标
    y_true 不设目标：它的保留比例由路线结构决定 (通常 > 1)，校准后实测值写进 achieved_ratios
"""
import itertools
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from app.core.errors import InvalidInputError
from app.core.logger import logger
from app.services.oracle import (
    FAST_MIN_PROB,
    exact_answer_distribution,
    exact_explorer,
    robustness_ratio,
)
from app.services.policy import (
    Answer,
    PolicyParams,
    Prefix,
    Vocab,
    answer_key,
    load_checkpoint,
    parse_answer_key,
    save_checkpoint,
)
from app.services.unlearning import UnlearnConfig

# 被 "禁掉" 的 token 的 logit；e^-40 ≈ 4e-18，远低于任何精度要求
LOG_FLOOR = -40.0
DEFAULT_VOCAB = {"size": 6, "sep": 4, "eos": 5}
# 校准 / 定理检查用的遗忘步长 (均值归约下 0.5 只能轻微摊平分布)
CALIBRATION_ETA_U = 20.0


def _calibration_default() -> UnlearnConfig:
    return UnlearnConfig(eta_u=CALIBRATION_ETA_U)


class TaskSpec(BaseModel):
    question_id: str
    true_answer: List[int]
    spurious_answer: Optional[List[int]] = None
    # 答案键 ("0" / "1,2") -> anchor 上的目标质量；和 ≤ 1，余量落在噪声答案上
    anchor_masses: Dict[str, float]
    # 答案键 -> 目标保留比例 r = π_explorer / π_anchor (只有 y_sp 需要校准)
    ratio_targets: Dict[str, float] = Field(default_factory=dict)
    # 伪众数题的验收线：实测 r_true / r_sp 至少要到这个倍数
    ratio_min: Optional[float] = Field(default=None, ge=1.0)
    reasoning_len: int = Field(default=0, ge=0)
    seed: int = 0
    vocab: Dict[str, int] = Field(default_factory=lambda: dict(DEFAULT_VOCAB))
    true_sharpness: float = Field(default=0.85, gt=0.5, le=1.0)
    n_true_routes: int = Field(default=2, ge=1)
    calibration: UnlearnConfig = Field(default_factory=_calibration_default)
    # 校准后实测的保留比例 (生成题库时填写；y_true 的值可以大于 1)
    achieved_ratios: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        vocab = self.vocab_obj
        content = set(vocab.content_tokens)
        for key, mass in self.anchor_masses.items():
            answer = parse_answer_key(key)
            if not answer or any(t not in content for t in answer):
                raise ValueError(f"答案 {key} 必须是非空的内容 token 序列")
            if mass < 0.0:
                raise ValueError(f"答案 {key} 的质量为负: {mass}")
        if sum(self.anchor_masses.values()) > 1.0 + 1e-9:
            raise ValueError("target_anchor_dist 之和不能超过 1")
        true_key = answer_key(tuple(self.true_answer))
        if self.anchor_masses.get(true_key, 0.0) <= 0.0:
            raise ValueError("y_true 必须在 target_anchor_dist 中且质量为正")
        if self.spurious_answer is not None:
            sp_key = answer_key(tuple(self.spurious_answer))
            if sp_key == true_key:
                raise ValueError("y_sp 不能等于 y_true")
            if self.anchor_masses.get(sp_key, 0.0) <= self.anchor_masses[true_key]:
                raise ValueError("伪众数题要求 π_anchor(y_sp) > π_anchor(y_true)")
        for key, r in self.ratio_targets.items():
            if not 0.0 < r <= 1.0:
                raise ValueError(f"保留比例 {key}={r} 必须在 (0, 1] 内")
        return self

    @property
    def vocab_obj(self) -> Vocab:
        return Vocab.from_dict(self.vocab)

    @property
    def target_anchor_dist(self) -> Dict[Answer, float]:
        return {parse_answer_key(k): v for k, v in self.anchor_masses.items()}

    @property
    def robustness_ratios(self) -> Dict[Answer, float]:
        return {parse_answer_key(k): v for k, v in self.ratio_targets.items()}

    @property
    def noise_mass(self) -> float:
        return max(0.0, 1.0 - sum(self.anchor_masses.values()))

    @property
    def max_answer_len(self) -> int:
        return max(len(parse_answer_key(k)) for k in self.anchor_masses)

    @property
    def max_len(self) -> int:
        return self.reasoning_len + 1 + self.max_answer_len


@dataclass(frozen=True)
class TaskView:
    """学习端能看到的全部内容：题号 + 策略，没有任何真值"""
    question_id: str
    policy: PolicyParams


@dataclass
class Calibration:
    q_sp: float
    q_true: float
    target: Optional[float] = None
    achieved_sp: Optional[float] = None
    achieved_true: Optional[float] = None
    converged: bool = True
    # 实测 r_true / r_sp ≥ spec.ratio_min (没设 ratio_min 时恒为 True)
    ratio_ok: bool = True


# =================================================================
# 构造
# =================================================================

def _row(vocab: Vocab, masses: Dict[int, float]) -> np.ndarray:
    row = np.full(vocab.size, LOG_FLOOR)
    for tok, mass in masses.items():
        if mass > 0.0:
            row[tok] = max(float(np.log(mass)), LOG_FLOOR)
    return row


def _noise_answer(spec: TaskSpec) -> Optional[Answer]:
    """字典序最小、且不在目标分布里的答案；容量不够时返回 None"""
    taken = set(spec.target_anchor_dist)
    content = spec.vocab_obj.content_tokens
    for length in range(1, spec.max_answer_len + 1):
        for cand in itertools.product(content, repeat=length):
            if cand not in taken:
                return cand
    return None


def _plant_answers(params: PolicyParams, base: Prefix, dist: Dict[Answer, float]) -> None:
    """在 base 之后种一棵答案前缀树；条件概率 = 子树质量之比，答案本身是节点时允许 EOS"""
    vocab = params.vocab
    nodes = {()}
    for answer in dist:
        nodes.update(answer[:d] for d in range(len(answer) + 1))
    for node in sorted(nodes):
        prefix = base + node
        if len(prefix) >= params.max_len:
            continue
        masses: Dict[int, float] = {}
        for answer, p in dist.items():
            if len(answer) > len(node) and answer[:len(node)] == node:
                masses[answer[len(node)]] = masses.get(answer[len(node)], 0.0) + p
        if node and node in dist:
            masses[vocab.eos_token] = dist[node]
        params.set_row(prefix, _row(vocab, masses))


def _with_noise(dist: Dict[Answer, float], noise: Optional[Answer], noise_mass: float) -> Dict[Answer, float]:
    out = {a: p for a, p in dist.items() if p > 0.0}
    if noise_mass > 1e-15:
        if noise is None:
            raise InvalidInputError("词表容量不足，放不下承接剩余质量的噪声答案")
        out[noise] = out.get(noise, 0.0) + noise_mass
    return out


def _build_direct(spec: TaskSpec) -> PolicyParams:
    vocab = spec.vocab_obj
    params = PolicyParams(vocab, spec.max_len, spec.question_id)
    params.set_row((), _row(vocab, {vocab.sep_token: 1.0}))
    dist = _with_noise(spec.target_anchor_dist, _noise_answer(spec), spec.noise_mass)
    _plant_answers(params, (vocab.sep_token,), dist)
    return params


def _route_tokens(spec: TaskSpec) -> Tuple[Optional[int], List[int], int]:
    """返回 (伪众数路线 token, 真答案路线 tokens, 噪声路线 token)，由 spec.seed 决定排列"""
    content = spec.vocab_obj.content_tokens
    need = 2 if spec.spurious_answer is not None else 1
    k = min(spec.n_true_routes, len(content) - need)
    if k < 1:
        raise InvalidInputError(f"内容 token 只有 {len(content)} 个，不够分配推理路线")
    perm = [int(t) for t in np.random.default_rng(spec.seed).permutation(content)]
    if spec.spurious_answer is not None:
        return perm[0], perm[1:1 + k], perm[1 + k]
    return None, perm[:k], perm[k]


def _build_routes(spec: TaskSpec, q_sp: float, q_true: float) -> PolicyParams:
    vocab = spec.vocab_obj
    R = spec.reasoning_len
    params = PolicyParams(vocab, spec.max_len, spec.question_id)
    noise = _noise_answer(spec)
    targets = spec.target_anchor_dist
    y_true = tuple(spec.true_answer)
    y_sp = tuple(spec.spurious_answer) if spec.spurious_answer is not None else None
    sp_tok, true_toks, noise_tok = _route_tokens(spec)

    # 1. 各路线质量与路线内的答案分布
    routes: Dict[int, Tuple[float, Dict[Answer, float]]] = {}
    m_true = targets[y_true] / q_true
    for tok in true_toks:
        routes[tok] = (m_true / len(true_toks), _with_noise({y_true: q_true}, noise, 1.0 - q_true))
    leak = m_true - targets[y_true]
    m_sp = 0.0
    if y_sp is not None:
        m_sp = targets[y_sp] / q_sp
        routes[sp_tok] = (m_sp, _with_noise({y_sp: q_sp}, noise, 1.0 - q_sp))
        leak += m_sp - targets[y_sp]
    others = {a: p for a, p in targets.items() if a not in (y_true, y_sp)}
    rest = spec.noise_mass - leak
    if rest < -1e-9:
        raise InvalidInputError(f"噪声预算不足以承接路线泄漏: noise={spec.noise_mass:.4g}, leak={leak:.4g}")
    m_noise = max(0.0, 1.0 - m_true - m_sp)
    if m_noise > 1e-15:
        routes[noise_tok] = (m_noise, {
            a: p / m_noise for a, p in _with_noise(others, noise, max(rest, 0.0)).items()
        })

    # 2. 第一个推理 token 选路线；之后沿路线走满 R 个推理 token，再强制 SEP
    params.set_row((), _row(vocab, {tok: mass for tok, (mass, _) in routes.items()}))
    for tok, (_, dist) in routes.items():
        path = (tok,)
        while len(path) < R:
            params.set_row(path, _row(vocab, {tok: 1.0}))
            path = path + (tok,)
        params.set_row(path, _row(vocab, {vocab.sep_token: 1.0}))
        _plant_answers(params, path + (vocab.sep_token,), dist)
    return params


def _true_sharpness(spec: TaskSpec) -> float:
    """真答案路线的 q_true：至少保证它的泄漏只占噪声预算的一半 (无伪众数时可占满)"""
    n = spec.noise_mass
    if n <= 1e-12 or _noise_answer(spec) is None:
        return 1.0
    pi_t = spec.target_anchor_dist[tuple(spec.true_answer)]
    share = n / 2.0 if spec.spurious_answer is not None else n
    return min(1.0, max(spec.true_sharpness, pi_t / (pi_t + share)))


def _measure(spec: TaskSpec, q_sp: float, q_true: float, cfg: UnlearnConfig) -> Tuple[float, float]:
    anchor = _build_routes(spec, q_sp, q_true)
    explorer = exact_explorer(anchor, cfg)
    a_dist = exact_answer_distribution(anchor, FAST_MIN_PROB)
    e_dist = exact_answer_distribution(explorer, FAST_MIN_PROB)
    r_sp = robustness_ratio(a_dist, e_dist, tuple(spec.spurious_answer))
    r_true = robustness_ratio(a_dist, e_dist, tuple(spec.true_answer))
    return r_sp, r_true


def _ratio_ok(spec: TaskSpec, r_sp: Optional[float], r_true: Optional[float]) -> bool:
    if spec.ratio_min is None:
        return True
    return r_sp is not None and r_true is not None and r_true >= spec.ratio_min * r_sp


def calibrate(spec: TaskSpec, cfg: Optional[UnlearnConfig] = None, iterations: int = 12) -> Calibration:
    """
    在可行区间内找 q_sp，使一步 (精确模式) 遗忘后 y_sp 的保留比例接近目标 r_sp
    先粗网格找括住目标的区间，再二分；找不到就取最接近的格点
    y_true 的保留比例随 q_sp 一起实测，并检查 r_true / r_sp ≥ ratio_min
    """
    cfg = cfg or spec.calibration
    q_true = _true_sharpness(spec)
    if spec.spurious_answer is None or spec.reasoning_len == 0:
        return Calibration(q_sp=1.0, q_true=q_true)
    if q_true >= 1.0:
        return Calibration(q_sp=1.0, q_true=1.0)

    targets = spec.target_anchor_dist
    pi_sp = targets[tuple(spec.spurious_answer)]
    pi_t = targets[tuple(spec.true_answer)]
    budget = spec.noise_mass - pi_t * (1.0 / q_true - 1.0)
    q_lo = min(1.0, pi_sp / (pi_sp + budget))
    q_hi = max(q_lo, 1.0 - 1.5 * cfg.eps_u)

    key = answer_key(tuple(spec.spurious_answer))
    target = spec.ratio_targets.get(key)
    if target is None or q_hi - q_lo < 1e-9:
        r_sp, r_true = _measure(spec, q_lo, q_true, cfg)
        return Calibration(
            q_sp=q_lo, q_true=q_true, target=target, achieved_sp=r_sp, achieved_true=r_true,
            ratio_ok=_ratio_ok(spec, r_sp, r_true),
        )

    grid = np.linspace(q_lo, q_hi, 9)
    measured = [_measure(spec, float(q), q_true, cfg) for q in grid]
    errors = [r[0] - target for r in measured]
    best = int(np.argmin([abs(np.log(r[0] / target)) for r in measured]))
    q_best, (r_sp, r_true) = float(grid[best]), measured[best]

    for i in range(len(grid) - 1):
        if errors[i] * errors[i + 1] > 0:
            continue
        lo, hi, err_lo = float(grid[i]), float(grid[i + 1]), errors[i]
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            r_mid = _measure(spec, mid, q_true, cfg)
            if (r_mid[0] - target) * err_lo > 0:
                lo, err_lo = mid, r_mid[0] - target
            else:
                hi = mid
            if abs(np.log(r_mid[0] / target)) < abs(np.log(r_sp / target)):
                q_best, (r_sp, r_true) = mid, r_mid
        break

    # 最接近目标的 q_sp 压不出 ratio_min 倍的差距时，退到网格上 r_true / r_sp 最大的点
    ratio_ok = _ratio_ok(spec, r_sp, r_true)
    if not ratio_ok:
        widest = int(np.argmax([r[1] / r[0] for r in measured]))
        if _ratio_ok(spec, *measured[widest]):
            q_best, (r_sp, r_true), ratio_ok = float(grid[widest]), measured[widest], True

    converged = abs(r_sp / target - 1.0) <= 0.1 and ratio_ok
    if not converged:
        logger.warning(
            f"⚠️ [TaskGen] {spec.question_id} 校准未达标: r_sp 目标 {target:.4f}, 实测 {r_sp:.4f}, "
            f"r_true 实测 {r_true:.4f} (q_sp={q_best:.4f})"
        )
    return Calibration(
        q_sp=q_best, q_true=q_true, target=target, achieved_sp=r_sp, achieved_true=r_true,
        converged=converged, ratio_ok=ratio_ok,
    )


def build_task(spec: TaskSpec, unlearn: Optional[UnlearnConfig] = None) -> PolicyParams:
    """按 TaskSpec 构造 anchor 策略 (reasoning_len = 0 时答案分布与目标逐位吻合到 1e-9)"""
    if spec.reasoning_len == 0:
        return _build_direct(spec)
    calib = calibrate(spec, unlearn)
    return _build_routes(spec, calib.q_sp, calib.q_true)


# =================================================================
# 题库
# =================================================================

class SuiteConfig(BaseModel):
    n_questions: int = Field(default=100, ge=0)
    spurious_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    reasoning_len: int = Field(default=2, ge=0)
    answer_len: int = Field(default=1, ge=1)
    # 伪众数题：gap = π(y_sp)/π(y_true)，尾部质量 = 其它答案 + 噪声；众数质量由两者推出
    gap_range: Tuple[float, float] = (2.5, 4.0)
    tail_mass_range: Tuple[float, float] = (0.06, 0.12)
    sp_ratio_range: Tuple[float, float] = (0.02, 0.1)
    ratio_min: float = Field(default=4.0, ge=1.0)
    # 诚实题：y_true 就是众数
    mode_mass_range: Tuple[float, float] = (0.5, 0.8)
    true_sharpness: float = Field(default=0.85, gt=0.5, le=1.0)
    vocab: Dict[str, int] = Field(default_factory=lambda: dict(DEFAULT_VOCAB))
    seed: int = 0
    calibration: UnlearnConfig = Field(default_factory=_calibration_default)

    @model_validator(mode="after")
    def _check(self):
        for name in ("gap_range", "tail_mass_range", "sp_ratio_range", "mode_mass_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} 下界大于上界: {lo} > {hi}")
        if self.gap_range[0] <= 1.0:
            raise ValueError("gap 必须大于 1 (伪众数要压过真答案)")
        if not (0.0 < self.tail_mass_range[0] and self.tail_mass_range[1] < 1.0):
            raise ValueError("tail_mass_range 必须在 (0, 1) 内")
        Vocab.from_dict(self.vocab)
        return self

    @property
    def max_len(self) -> int:
        return self.reasoning_len + 1 + self.answer_len


def _candidate_answers(vocab: Vocab, answer_len: int) -> List[Answer]:
    return [tuple(a) for a in itertools.product(vocab.content_tokens, repeat=answer_len)]


def _pick_answers(vocab: Vocab, answer_len: int, count: int, rng: np.random.Generator) -> List[Answer]:
    cands = _candidate_answers(vocab, answer_len)
    # 至少留一个给噪声答案
    if len(cands) < count + 1:
        raise InvalidInputError(f"长度 {answer_len} 的答案只有 {len(cands)} 个，不够 {count} 个答案 + 噪声")
    order = rng.permutation(len(cands))
    return [cands[i] for i in order[:count]]


def make_spurious_spec(
    question_id: str,
    gap: float,
    sp_ratio: float,
    tail_mass: float,
    reasoning_len: int,
    ratio_min: float,
    rng: np.random.Generator,
    calibration: Optional[UnlearnConfig] = None,
    vocab: Optional[Dict[str, int]] = None,
    true_sharpness: float = 0.85,
    answer_len: int = 1,
) -> TaskSpec:
    vocab = vocab or dict(DEFAULT_VOCAB)
    v = Vocab.from_dict(vocab)
    y_sp, y_true, y_other = _pick_answers(v, answer_len, 3, rng)
    pi_sp = (1.0 - tail_mass) / (1.0 + 1.0 / gap)
    pi_true = pi_sp / gap
    other = tail_mass * float(rng.uniform(0.3, 0.5))
    return TaskSpec(
        question_id=question_id,
        true_answer=list(y_true),
        spurious_answer=list(y_sp),
        anchor_masses={answer_key(y_sp): pi_sp, answer_key(y_true): pi_true, answer_key(y_other): other},
        ratio_targets={answer_key(y_sp): sp_ratio},
        ratio_min=ratio_min,
        reasoning_len=reasoning_len,
        seed=int(rng.integers(2 ** 31)),
        vocab=vocab,
        true_sharpness=true_sharpness,
        calibration=calibration or _calibration_default(),
    )


def make_honest_spec(
    question_id: str,
    mode_mass: float,
    reasoning_len: int,
    rng: np.random.Generator,
    calibration: Optional[UnlearnConfig] = None,
    vocab: Optional[Dict[str, int]] = None,
    true_sharpness: float = 0.85,
    answer_len: int = 1,
) -> TaskSpec:
    vocab = vocab or dict(DEFAULT_VOCAB)
    v = Vocab.from_dict(vocab)
    y_true, y_other = _pick_answers(v, answer_len, 2, rng)
    tail = 1.0 - mode_mass
    other = tail * float(rng.uniform(0.3, 0.6))
    return TaskSpec(
        question_id=question_id,
        true_answer=list(y_true),
        anchor_masses={answer_key(y_true): mode_mass, answer_key(y_other): other},
        reasoning_len=reasoning_len,
        seed=int(rng.integers(2 ** 31)),
        vocab=vocab,
        true_sharpness=true_sharpness,
        calibration=calibration or _calibration_default(),
    )


def generate_suite(
    cfg: SuiteConfig,
    rng: Optional[np.random.Generator] = None,
    progress: bool = False,
) -> List[Tuple[TaskSpec, PolicyParams]]:
    """恰好 round(n·spurious_fraction) 道伪众数题；同一个种子生成完全相同的题库"""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n_sp = int(round(cfg.n_questions * cfg.spurious_fraction))
    spurious = set(int(i) for i in rng.permutation(cfg.n_questions)[:n_sp])

    suite = []
    for i in tqdm(range(cfg.n_questions), desc="生成题库", disable=not progress):
        qid = f"q{i:04d}"
        if i in spurious:
            spec = make_spurious_spec(
                question_id=qid,
                gap=float(rng.uniform(*cfg.gap_range)),
                sp_ratio=float(rng.uniform(*cfg.sp_ratio_range)),
                tail_mass=float(rng.uniform(*cfg.tail_mass_range)),
                reasoning_len=cfg.reasoning_len,
                ratio_min=cfg.ratio_min,
                rng=rng,
                calibration=cfg.calibration,
                vocab=cfg.vocab,
                true_sharpness=cfg.true_sharpness,
                answer_len=cfg.answer_len,
            )
        else:
            spec = make_honest_spec(
                question_id=qid,
                mode_mass=float(rng.uniform(*cfg.mode_mass_range)),
                reasoning_len=cfg.reasoning_len,
                rng=rng,
                calibration=cfg.calibration,
                vocab=cfg.vocab,
                true_sharpness=cfg.true_sharpness,
                answer_len=cfg.answer_len,
            )

        if spec.reasoning_len > 0:
            calib = calibrate(spec)
            params = _build_routes(spec, calib.q_sp, calib.q_true)
            achieved = {}
            if calib.achieved_sp is not None:
                achieved[answer_key(tuple(spec.spurious_answer))] = calib.achieved_sp
            if calib.achieved_true is not None:
                achieved[answer_key(tuple(spec.true_answer))] = calib.achieved_true
            spec = spec.model_copy(update={"achieved_ratios": achieved})
        else:
            params = _build_direct(spec)
        suite.append((spec, params))

    logger.info(f"🧩 [TaskGen] 生成 {cfg.n_questions} 道题, 其中伪众数题 {n_sp} 道")
    return suite


def save_suite(suite: Sequence[Tuple[TaskSpec, PolicyParams]], out_dir: str) -> str:
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    path = os.path.join(out_dir, "suite.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump([spec.model_dump(mode="json") for spec, _ in suite], f, ensure_ascii=False, indent=2)
    for spec, params in suite:
        save_checkpoint(params, os.path.join(ckpt_dir, f"{spec.question_id}.json"))
    return path


def load_suite(out_dir: str, checkpoint_dir: Optional[str] = None) -> List[Tuple[TaskSpec, PolicyParams]]:
    """读回题库；checkpoint_dir 可以指向训练后的 checkpoint 目录"""
    with open(os.path.join(out_dir, "suite.json"), "r", encoding="utf-8") as f:
        specs = [TaskSpec.model_validate(item) for item in json.load(f)]
    ckpt_dir = checkpoint_dir or os.path.join(out_dir, "checkpoints")
    return [(spec, load_checkpoint(os.path.join(ckpt_dir, f"{spec.question_id}.json"))) for spec in specs]
