import numpy as np
import pytest
from sqlmodel import Session

from app.core.database import init_db, make_engine
from app.core.logger import remove_file_sinks
from app.services.policy import PolicyParams, Trajectory, TrajectorySource, Vocab, extract_answer
from app.services.taskgen import TaskSpec, build_task

# 默认词表：内容 token 0-3，SEP=4，EOS=5
SEP, EOS = 4, 5


@pytest.fixture
def vocab():
    return Vocab(size=6, sep_token=SEP, eos_token=EOS)


def make_traj(params: PolicyParams, tokens, source=TrajectorySource.ANCHOR) -> Trajectory:
    """按给定 token 序列造一条轨迹，step_probs 取自 params 本身"""
    tokens = tuple(tokens)
    steps = tuple(float(params.probs(tokens[:t])[tok]) for t, tok in enumerate(tokens))
    return Trajectory(tokens=tokens, step_probs=steps, answer=extract_answer(tokens, params.vocab), source=source)


def answer_traj(answer) -> Trajectory:
    """只关心答案的轨迹 (选举 / 门控用)"""
    if answer is None:
        return Trajectory(tokens=(EOS,), step_probs=(1.0,), answer=None)
    answer = tuple(answer)
    return Trajectory(tokens=(SEP,) + answer + (EOS,), step_probs=(1.0,) * (len(answer) + 2), answer=answer)


def direct_spec(masses, true_answer, spurious_answer=None, question_id="t0") -> TaskSpec:
    return TaskSpec(
        question_id=question_id,
        true_answer=list(true_answer),
        spurious_answer=list(spurious_answer) if spurious_answer is not None else None,
        anchor_masses=masses,
        reasoning_len=0,
    )


@pytest.fixture
def planted_spec():
    """答案分布 (0.7, 0.2, 0.1)，伪众数 0，真答案 1"""
    return direct_spec({"0": 0.7, "1": 0.2, "2": 0.1}, true_answer=[1], spurious_answer=[0])


@pytest.fixture
def planted_policy(planted_spec):
    return build_task(planted_spec)


def random_policy(rng: np.random.Generator, vocab: Vocab, max_len: int = 3, scale: float = 1.5) -> PolicyParams:
    params = PolicyParams(vocab, max_len, "rand")
    frontier = [()]
    while frontier:
        prefix = frontier.pop()
        params.set_row(prefix, rng.normal(0.0, scale, vocab.size))
        if len(prefix) + 1 < max_len:
            frontier.extend(prefix + (t,) for t in range(vocab.size) if t != vocab.eos_token)
    return params


@pytest.fixture
def memory_engine():
    engine = make_engine("sqlite://")
    init_db(engine)
    return engine


@pytest.fixture
def db_session(memory_engine):
    with Session(memory_engine) as session:
        yield session


@pytest.fixture(autouse=True)
def _drop_file_sinks():
    yield
    remove_file_sinks()
