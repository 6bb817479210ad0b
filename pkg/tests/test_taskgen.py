import dataclasses

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import InvalidInputError
from app.services.oracle import FAST_MIN_PROB, closed_form_scores, exact_answer_distribution, exact_explorer
from app.services.policy import answer_key, entropy_of_answer_distribution
from app.services.taskgen import (
    SuiteConfig,
    TaskSpec,
    TaskView,
    build_task,
    calibrate,
    generate_suite,
    load_suite,
    make_honest_spec,
    make_spurious_spec,
    save_suite,
)
from conftest import direct_spec


def test_direct_task_matches_target_exactly(planted_policy):
    dist = exact_answer_distribution(planted_policy)
    for answer, p in {(0,): 0.7, (1,): 0.2, (2,): 0.1}.items():
        assert dist.prob(answer) == pytest.approx(p, abs=1e-9)
    assert dist.total() == pytest.approx(1.0, abs=1e-9)


def test_direct_task_puts_remaining_mass_on_noise_answer():
    spec = direct_spec({"1": 0.6, "2": 0.3}, true_answer=[1])
    dist = exact_answer_distribution(build_task(spec))
    assert dist.prob((1,)) == pytest.approx(0.6, abs=1e-9)
    # 字典序最小的空闲答案 (0,) 承接剩余质量
    assert dist.prob((0,)) == pytest.approx(0.1, abs=1e-9)


def test_single_answer_target_is_deterministic():
    params = build_task(direct_spec({"3": 1.0}, true_answer=[3]))
    assert entropy_of_answer_distribution(params) == pytest.approx(0.0, abs=1e-9)


def test_multi_token_answers():
    spec = TaskSpec(
        question_id="mt",
        true_answer=[0, 1],
        spurious_answer=[1],
        anchor_masses={"1": 0.5, "0,1": 0.3, "0": 0.1},
        reasoning_len=0,
    )
    dist = exact_answer_distribution(build_task(spec))
    assert dist.prob((1,)) == pytest.approx(0.5, abs=1e-9)
    assert dist.prob((0, 1)) == pytest.approx(0.3, abs=1e-9)
    assert dist.prob((0,)) == pytest.approx(0.1, abs=1e-9)


def test_spec_validation():
    with pytest.raises(ValidationError):
        # 伪众数必须压过真答案
        direct_spec({"0": 0.2, "1": 0.3}, true_answer=[1], spurious_answer=[0])
    with pytest.raises(ValidationError):
        direct_spec({"0": 0.7, "1": 0.6}, true_answer=[1])
    with pytest.raises(ValidationError):
        direct_spec({"0": 0.7}, true_answer=[1])
    with pytest.raises(ValidationError):
        # SEP 不是内容 token
        direct_spec({"4": 0.5, "1": 0.2}, true_answer=[1])


def test_vocab_capacity_is_enforced():
    spec = TaskSpec(
        question_id="cap",
        true_answer=[0],
        anchor_masses={"0": 0.5, "1": 0.3},
        reasoning_len=0,
        vocab={"size": 4, "sep": 2, "eos": 3},
    )
    with pytest.raises(InvalidInputError):
        build_task(spec)


def test_task_view_carries_no_truth(planted_policy):
    assert {f.name for f in dataclasses.fields(TaskView)} == {"question_id", "policy"}


def test_honest_routed_task_keeps_marginal_and_mode():
    spec = make_honest_spec("h0", mode_mass=0.65, reasoning_len=2, rng=np.random.default_rng(0))
    dist = exact_answer_distribution(build_task(spec), FAST_MIN_PROB)
    for answer, p in spec.target_anchor_dist.items():
        assert dist.prob(answer) == pytest.approx(p, abs=1e-6)
    assert dist.mode() == tuple(spec.true_answer)


@pytest.mark.slow
def test_spurious_routed_task_keeps_marginal_and_calibrates():
    spec = make_spurious_spec(
        "s0", gap=3.0, sp_ratio=0.05, tail_mass=0.1, reasoning_len=2, ratio_min=4.0, rng=np.random.default_rng(1)
    )
    params = build_task(spec)
    dist = exact_answer_distribution(params, FAST_MIN_PROB)
    for answer, p in spec.target_anchor_dist.items():
        assert dist.prob(answer) == pytest.approx(p, abs=1e-6)
    assert dist.mode() == tuple(spec.spurious_answer)

    calib = calibrate(spec)
    assert calib.q_true < 1.0
    assert 0.0 < calib.achieved_sp < 1.0
    # 尖锐的伪众数路线比分散的真答案路线更容易被遗忘
    assert calib.achieved_sp < calib.achieved_true
    assert calib.ratio_ok
    assert calib.achieved_true >= 4.0 * calib.achieved_sp


def test_make_spurious_spec_masses():
    spec = make_spurious_spec(
        "s1", gap=4.0, sp_ratio=0.02, tail_mass=0.08, reasoning_len=0, ratio_min=4.0, rng=np.random.default_rng(2)
    )
    dist = spec.target_anchor_dist
    y_sp, y_true = tuple(spec.spurious_answer), tuple(spec.true_answer)
    assert dist[y_sp] / dist[y_true] == pytest.approx(4.0)
    assert dist[y_sp] + dist[y_true] == pytest.approx(0.92)
    assert spec.ratio_targets == {",".join(map(str, y_sp)): 0.02}
    assert spec.ratio_min == 4.0
    assert spec.noise_mass > 0.0


@pytest.mark.slow
def test_generated_spurious_tasks_keep_true_answer_robust():
    cfg = SuiteConfig(n_questions=20, spurious_fraction=1.0, reasoning_len=2, seed=4)
    suite = generate_suite(cfg)
    for spec, params in suite:
        y_sp, y_true = tuple(spec.spurious_answer), tuple(spec.true_answer)
        r_sp = spec.achieved_ratios[answer_key(y_sp)]
        r_true = spec.achieved_ratios[answer_key(y_true)]
        assert r_true >= cfg.ratio_min * r_sp, spec.question_id

        # 调和分数：真答案压过伪众数
        anchor = exact_answer_distribution(params, FAST_MIN_PROB)
        explorer = exact_answer_distribution(exact_explorer(params, spec.calibration), FAST_MIN_PROB)
        scores = closed_form_scores(anchor, explorer)
        assert scores[y_true] > scores[y_sp], spec.question_id
        assert explorer.prob(y_sp) == pytest.approx(r_sp * anchor.prob(y_sp), rel=1e-6)


def test_suite_has_exact_spurious_count():
    suite = generate_suite(SuiteConfig(n_questions=100, spurious_fraction=0.3, reasoning_len=0, seed=5))
    assert len(suite) == 100
    assert sum(1 for spec, _ in suite if spec.spurious_answer is not None) == 30


def test_same_seed_gives_identical_suites():
    cfg = SuiteConfig(n_questions=12, reasoning_len=0, seed=9)
    a, b = generate_suite(cfg), generate_suite(cfg)
    assert [s.model_dump() for s, _ in a] == [s.model_dump() for s, _ in b]
    assert all(pa == pb for (_, pa), (_, pb) in zip(a, b))


def test_honest_suite_mode_is_true_answer():
    suite = generate_suite(SuiteConfig(n_questions=6, spurious_fraction=0.0, reasoning_len=2, seed=3))
    for spec, params in suite:
        dist = exact_answer_distribution(params, FAST_MIN_PROB)
        assert dist.mode() == tuple(spec.true_answer)


def test_suite_config_validation():
    with pytest.raises(ValidationError):
        SuiteConfig(gap_range=(0.5, 2.0))
    with pytest.raises(ValidationError):
        SuiteConfig(tail_mass_range=(0.2, 0.1))
    with pytest.raises(ValidationError):
        SuiteConfig(spurious_fraction=1.5)


def test_suite_round_trip(tmp_path):
    suite = generate_suite(SuiteConfig(n_questions=4, reasoning_len=0, seed=1))
    save_suite(suite, str(tmp_path))
    loaded = load_suite(str(tmp_path))
    assert [s for s, _ in loaded] == [s for s, _ in suite]
    assert all(pa == pb for (_, pa), (_, pb) in zip(loaded, suite))
