"""
表格化自回归 softmax 策略 (代替 LLM)

整个生成模型就是一棵前缀树：每个前缀对应一行长度为 V 的 logits。
没访问过 / 没写过的前缀默认全 0 (均匀分布)；第一次被梯度写入时才真正建行。
所有概率和梯度都是精确的，不需要自动微分框架。
"""
import copy
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import EnumerationBoundError, InvalidInputError

Prefix = Tuple[int, ...]
Answer = Tuple[int, ...]
Gradient = Dict[Prefix, np.ndarray]

# 抽不出答案时的哨兵值 (同时也用作 "没有答案" NONE)
INVALID: Optional[Answer] = None

# 穷举上限：V^(max_len+1) 条路径
ENUMERATION_LIMIT = 10 ** 7


def softmax(z: np.ndarray) -> np.ndarray:
    """数值稳定的 softmax"""
    shifted = z - np.max(z)
    e = np.exp(shifted)
    return e / e.sum()


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z)
    return shifted - np.log(np.exp(shifted).sum())


@dataclass(frozen=True)
class Vocab:
    size: int
    sep_token: int
    eos_token: int

    def __post_init__(self):
        if self.size < 3:
            raise InvalidInputError(f"词表至少要 3 个 token, 当前 V={self.size}")
        if self.sep_token == self.eos_token:
            raise InvalidInputError("sep_token 和 eos_token 不能相同")
        for name, tok in (("sep_token", self.sep_token), ("eos_token", self.eos_token)):
            if not 0 <= tok < self.size:
                raise InvalidInputError(f"{name}={tok} 超出词表范围 [0, {self.size})")

    @property
    def content_tokens(self) -> List[int]:
        return [t for t in range(self.size) if t not in (self.sep_token, self.eos_token)]

    def to_dict(self) -> dict:
        return {"size": self.size, "sep": self.sep_token, "eos": self.eos_token}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocab":
        return cls(size=int(data["size"]), sep_token=int(data["sep"]), eos_token=int(data["eos"]))


class TrajectorySource(str, Enum):
    ANCHOR = "Anchor"
    EXPLORER = "Explorer"


@dataclass(frozen=True)
class Trajectory:
    tokens: Tuple[int, ...]
    step_probs: Tuple[float, ...]
    answer: Optional[Answer]
    source: TrajectorySource = TrajectorySource.ANCHOR

    @property
    def behavior_prob(self) -> float:
        """采样时行为策略下的整条序列概率"""
        return float(np.prod(self.step_probs))

    def __len__(self) -> int:
        return len(self.tokens)


class PolicyParams:
    """
    θ 本体：prefix -> logits 的字典
    采样阶段只读；更新 (unlearn / GRPO) 一律返回新对象
    """

    def __init__(
        self,
        vocab: Vocab,
        max_len: int,
        question_id: str,
        logits: Optional[Dict[Prefix, np.ndarray]] = None,
    ):
        if max_len < 1:
            raise InvalidInputError(f"max_len 必须为正数, 当前 {max_len}")
        self.vocab = vocab
        self.max_len = max_len
        self.question_id = question_id
        self.logits: Dict[Prefix, np.ndarray] = {}
        for prefix, row in (logits or {}).items():
            self.set_row(prefix, row)

    # ---------------- 读 ----------------
    def row(self, prefix: Sequence[int]) -> np.ndarray:
        """取 logits 行；没存过就是全 0 (不会建行)"""
        stored = self.logits.get(tuple(prefix))
        if stored is None:
            return np.zeros(self.vocab.size)
        return stored

    def probs(self, prefix: Sequence[int]) -> np.ndarray:
        """下一个 token 的分布；深度到 max_len 时强制输出 EOS"""
        if len(prefix) >= self.max_len:
            forced = np.zeros(self.vocab.size)
            forced[self.vocab.eos_token] = 1.0
            return forced
        return softmax(self.row(prefix))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(r)) for r in self.logits.values())

    # ---------------- 写 ----------------
    def set_row(self, prefix: Sequence[int], values: Iterable[float]) -> None:
        prefix = tuple(int(t) for t in prefix)
        if len(prefix) > self.max_len:
            raise InvalidInputError(f"前缀长度 {len(prefix)} 超过 max_len={self.max_len}")
        arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).copy()
        if arr.shape != (self.vocab.size,):
            raise InvalidInputError(f"logits 行长度必须为 {self.vocab.size}, 当前 {arr.shape}")
        self.logits[prefix] = arr

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.vocab, self.max_len, self.question_id, copy.deepcopy(self.logits))

    def apply_gradient(self, grad: Gradient, scale: float) -> "PolicyParams":
        """返回 θ + scale·grad 的新策略；梯度落在没存过的前缀上时懒建行"""
        updated = self.copy()
        if scale == 0.0:
            return updated
        for prefix, g in grad.items():
            if len(prefix) >= self.max_len:
                # 强制 EOS 的深度不受 logits 影响
                continue
            updated.logits[prefix] = updated.row(prefix) + scale * g
        return updated

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        if (self.vocab, self.max_len, self.question_id) != (other.vocab, other.max_len, other.question_id):
            return False
        if self.logits.keys() != other.logits.keys():
            return False
        return all(np.array_equal(self.logits[k], other.logits[k]) for k in self.logits)

    # ---------------- checkpoint ----------------
    def to_dict(self) -> dict:
        entries = [
            {"prefix": list(prefix), "logits": [float(x) for x in self.logits[prefix]]}
            for prefix in sorted(self.logits)
        ]
        return {
            "question_id": self.question_id,
            "max_len": self.max_len,
            "vocab": self.vocab.to_dict(),
            "entries": entries,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyParams":
        vocab = Vocab.from_dict(data["vocab"])
        params = cls(vocab, int(data["max_len"]), str(data["question_id"]))
        for entry in data["entries"]:
            params.set_row(entry["prefix"], entry["logits"])
        return params


def _format_row(row: np.ndarray) -> str:
    return "[" + ", ".join(f"{float(x):.17g}" for x in row) + "]"


def save_checkpoint(params: PolicyParams, path: str) -> None:
    # 浮点数统一写 17 位有效数字，保证读回来逐位一致
    entries = ",\n  ".join(
        f'{{"prefix": {json.dumps(list(prefix))}, "logits": {_format_row(params.logits[prefix])}}}'
        for prefix in sorted(params.logits)
    )
    body = (
        f'{{"question_id": {json.dumps(params.question_id)}, "max_len": {params.max_len}, '
        f'"vocab": {json.dumps(params.vocab.to_dict())}, "entries": [\n  {entries}\n]}}\n'
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(body)


def load_checkpoint(path: str) -> PolicyParams:
    with open(path, "r", encoding="utf-8") as f:
        return PolicyParams.from_dict(json.load(f))


# =================================================================
# 采样 / 概率 / 梯度
# =================================================================

def extract_answer(tokens: Sequence[int], vocab: Vocab) -> Optional[Answer]:
    """取最后一个 SEP 与结尾 EOS 之间的子序列；没有 SEP 或为空则 INVALID"""
    tokens = tuple(tokens)
    if not tokens or tokens[-1] != vocab.eos_token:
        return INVALID
    body = tokens[:-1]
    sep_positions = [i for i, t in enumerate(body) if t == vocab.sep_token]
    if not sep_positions:
        return INVALID
    answer = body[sep_positions[-1] + 1:]
    return answer if answer else INVALID


def answer_key(answer: Optional[Answer]) -> str:
    """答案写进 JSON / CSV 时的键：'0,2'；INVALID 写成 'INVALID'"""
    if answer is None:
        return "INVALID"
    return ",".join(str(t) for t in answer)


def parse_answer_key(key: str) -> Optional[Answer]:
    if key == "INVALID":
        return None
    return tuple(int(t) for t in key.split(","))


def sample_trajectory(
    params: PolicyParams,
    rng: np.random.Generator,
    source: TrajectorySource = TrajectorySource.ANCHOR,
) -> Trajectory:
    tokens: List[int] = []
    step_probs: List[float] = []
    eos = params.vocab.eos_token
    while True:
        p = params.probs(tokens)
        # 用同一个 softmax 行采样并记录概率
        k = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
        k = min(k, params.vocab.size - 1)
        while p[k] == 0.0:
            k -= 1
        tokens.append(k)
        step_probs.append(float(p[k]))
        if k == eos:
            break
    return Trajectory(
        tokens=tuple(tokens),
        step_probs=tuple(step_probs),
        answer=extract_answer(tokens, params.vocab),
        source=source,
    )


def sample_group(
    params: PolicyParams,
    G: int,
    rng: np.random.Generator,
    source: TrajectorySource = TrajectorySource.ANCHOR,
) -> List[Trajectory]:
    if G < 1:
        raise InvalidInputError(f"group size 必须为正数, 当前 G={G}")
    return [sample_trajectory(params, rng, source) for _ in range(G)]


def _check_sequence(params: PolicyParams, tokens: Sequence[int]) -> Tuple[int, ...]:
    tokens = tuple(int(t) for t in tokens)
    if not tokens or tokens[-1] != params.vocab.eos_token:
        raise InvalidInputError(f"序列必须以 EOS({params.vocab.eos_token}) 结尾: {tokens}")
    if len(tokens) > params.max_len + 1:
        raise InvalidInputError(f"序列长度 {len(tokens)} 超过 max_len+1={params.max_len + 1}")
    if params.vocab.eos_token in tokens[:-1]:
        raise InvalidInputError(f"EOS 只能出现在结尾: {tokens}")
    if any(not 0 <= t < params.vocab.size for t in tokens):
        raise InvalidInputError(f"token 超出词表范围: {tokens}")
    return tokens


def exact_seq_log_prob(params: PolicyParams, tokens: Sequence[int]) -> float:
    tokens = _check_sequence(params, tokens)
    total = 0.0
    for t, tok in enumerate(tokens):
        p = params.probs(tokens[:t])[tok]
        if p <= 0.0:
            return -math.inf
        total += math.log(p)
    return total


def exact_seq_prob(params: PolicyParams, tokens: Sequence[int]) -> float:
    """序列概率 = 各位置 softmax 概率之积"""
    return math.exp(exact_seq_log_prob(params, tokens))


def logprob_grad(params: PolicyParams, tokens: Sequence[int]) -> Gradient:
    """
    ∂ log π(tokens) / ∂ logits
    每个访问过的前缀: onehot(k) - softmax(logits[prefix])；其余位置为 0 (不出现在字典里)
    """
    tokens = _check_sequence(params, tokens)
    grad: Gradient = {}
    for t, tok in enumerate(tokens):
        prefix = tokens[:t]
        if len(prefix) >= params.max_len:
            continue
        row = -softmax(params.row(prefix))
        row[tok] += 1.0
        if prefix in grad:
            grad[prefix] = grad[prefix] + row
        else:
            grad[prefix] = row
    return grad


def check_enumeration_bound(params: PolicyParams) -> None:
    n_paths = params.vocab.size ** (params.max_len + 1)
    if n_paths > ENUMERATION_LIMIT:
        raise EnumerationBoundError(
            f"V^(max_len+1) = {params.vocab.size}^{params.max_len + 1} = {n_paths} 超过穷举上限 {ENUMERATION_LIMIT}"
        )


def entropy_of_answer_distribution(params: PolicyParams) -> float:
    """精确答案分布的香农熵 (nats)；INVALID 作为独立结果计入，不是先丢掉再归一化"""
    from app.services.oracle import exact_answer_distribution

    return exact_answer_distribution(params).entropy()


# =================================================================
# 梯度小工具 (dict 形式的稀疏梯度)
# =================================================================

def grad_add(acc: Gradient, other: Gradient, scale: float = 1.0) -> Gradient:
    """acc += scale·other，原地累加并返回 acc"""
    for prefix, g in other.items():
        if prefix in acc:
            acc[prefix] = acc[prefix] + scale * g
        else:
            acc[prefix] = scale * g
    return acc


def grad_scale(grad: Gradient, scale: float) -> Gradient:
    return {prefix: scale * g for prefix, g in grad.items()}


def grad_norm(grad: Gradient) -> float:
    return float(math.sqrt(sum(float(np.dot(g, g)) for g in grad.values())))
