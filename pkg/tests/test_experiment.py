import json
import os

import numpy as np
import pytest

from app.core.errors import NumericalAbort
from app.services import experiment
from app.services.experiment import (
    Method,
    SweepConfig,
    TrainConfig,
    build_schedule,
    compare_consensus,
    evaluate,
    run_training,
    run_unlearn_sweep,
)
from app.services.oracle import exact_answer_distribution
from app.services.reports import METRICS_FILE, SUMMARY_FILE, read_jsonl
from app.services.taskgen import SuiteConfig, build_task, generate_suite
from app.services.unlearning import UnlearnConfig
from conftest import direct_spec


def _cfg(tmp_path, **overrides) -> TrainConfig:
    base = {
        "suite": SuiteConfig(n_questions=4, spurious_fraction=0.5, reasoning_len=0, seed=1),
        "G": 8,
        "steps": 3,
        "batch_size": 4,
        "unlearn": UnlearnConfig(eta_u=20.0),
        "track_entropy": False,
        "output_dir": str(tmp_path / "run"),
    }
    base.update(overrides)
    return TrainConfig(**base)


def test_default_schedule_covers_every_question_once_per_epoch():
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    schedule = build_schedule(cfg, 10)
    assert len(schedule) == 2 * 3
    for epoch in (0, 1):
        seen = [i for e, batch in schedule if e == epoch for i in batch]
        assert sorted(seen) == list(range(10))
    assert all(len(set(batch)) == len(batch) for _, batch in schedule)
    assert build_schedule(cfg, 10) == schedule


def test_explicit_steps_keep_cycling_epochs():
    schedule = build_schedule(TrainConfig(steps=7, batch_size=3), 5)
    assert len(schedule) == 7
    assert [e for e, _ in schedule] == [0, 0, 1, 1, 2, 2, 3]
    assert build_schedule(TrainConfig(steps=0), 5) == []


def test_batch_larger_than_suite_is_clamped():
    schedule = build_schedule(TrainConfig(steps=2, batch_size=50), 6)
    assert [len(batch) for _, batch in schedule] == [6, 6]


def test_zero_steps_leaves_policies_unchanged(tmp_path):
    cfg = _cfg(tmp_path, steps=0)
    suite = generate_suite(cfg.suite)
    result = run_training(cfg, suite=suite, write=False)
    assert result.records == []
    for spec, params in suite:
        assert result.policies[spec.question_id] == params


def test_record_count_and_fields(tmp_path):
    cfg = _cfg(tmp_path)
    result = run_training(cfg)
    assert len(result.records) == 3 * 4
    records = read_jsonl(os.path.join(cfg.output_dir, METRICS_FILE))
    assert len(records) == 12
    assert [r["step"] for r in records] == sorted(r["step"] for r in records)
    for rec in records:
        assert 0.0 <= rec["rho_t"] <= 1.0
        assert rec["n_train"] in (cfg.G, 2 * cfg.G)
    with open(os.path.join(cfg.output_dir, SUMMARY_FILE), encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["n_records"] == 12
    assert summary["method"] == "DCRL"
    assert len(os.listdir(os.path.join(cfg.output_dir, "checkpoints"))) == 4


def test_mean_rho_is_shared_within_a_step(tmp_path):
    result = run_training(_cfg(tmp_path), write=False)
    for step in range(3):
        rows = [r for r in result.records if r.step == step]
        assert len({r.mean_rho for r in rows}) == 1
    # 第 0 步窗口里只有一个值：本批 ρ 的均值
    first = [r for r in result.records if r.step == 0]
    assert first[0].mean_rho == pytest.approx(np.mean([r.rho_t for r in first]))


def test_same_seed_gives_byte_identical_metrics(tmp_path):
    a = _cfg(tmp_path, output_dir=str(tmp_path / "a"))
    b = _cfg(tmp_path, output_dir=str(tmp_path / "b"))
    run_training(a)
    run_training(b)
    with open(os.path.join(a.output_dir, METRICS_FILE), "rb") as fa, open(os.path.join(b.output_dir, METRICS_FILE), "rb") as fb:
        assert fa.read() == fb.read()


def test_worker_pool_does_not_change_results(tmp_path):
    serial = run_training(_cfg(tmp_path), write=False)
    pooled = run_training(_cfg(tmp_path, workers=3), write=False)
    assert [r.model_dump() for r in serial.records] == [r.model_dump() for r in pooled.records]


def test_majority_vote_never_runs_explorer(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise AssertionError("多数票基线不应该调用遗忘")

    monkeypatch.setattr(experiment, "make_explorer", boom)
    result = run_training(_cfg(tmp_path, method=Method.MAJORITY_VOTE, steps=4), write=False)
    assert result.records
    for rec in result.records:
        assert rec.pseudo_label == rec.anchor_majority
        assert not rec.gate_open
        assert rec.n_train == 8
        assert rec.explorer_entropy is None


def test_entropy_tracking(tmp_path):
    result = run_training(_cfg(tmp_path, track_entropy=True, steps=1), write=False)
    for rec in result.records:
        assert rec.anchor_entropy is not None and rec.anchor_entropy >= 0.0
        assert rec.explorer_entropy is not None


def test_nan_update_aborts_with_dump(tmp_path, monkeypatch):
    def poisoned(policy, groups, cfg, ref=None):
        return policy.apply_gradient({(): np.full(policy.vocab.size, np.nan)}, 1.0)

    monkeypatch.setattr(experiment, "update_policy", poisoned)
    cfg = _cfg(tmp_path)
    with pytest.raises(NumericalAbort) as info:
        run_training(cfg, write=False)
    assert info.value.step == 0
    dump = os.path.join(cfg.output_dir, "abort_step_0.json")
    assert info.value.dump_path == dump
    with open(dump, encoding="utf-8") as f:
        payload = json.load(f)
    assert payload["question_id"] == info.value.question_id


def test_evaluate_uniform_and_saturated_policies():
    uniform_spec = direct_spec({"0": 0.25, "1": 0.25, "2": 0.25, "3": 0.25}, true_answer=[2], question_id="u")
    sharp_spec = direct_spec({"1": 1.0}, true_answer=[1], question_id="s")
    suite = [(uniform_spec, build_task(uniform_spec)), (sharp_spec, build_task(sharp_spec))]
    report = evaluate({spec.question_id: params for spec, params in suite}, suite, n_samples=16)
    by_id = {t.question_id: t for t in report.tasks}
    assert by_id["u"].exact_pass1 == pytest.approx(0.25, abs=1e-9)
    assert by_id["s"].exact_pass1 == pytest.approx(1.0, abs=1e-9)
    assert by_id["s"].empirical_pass1 == 1.0
    assert by_id["u"].pass_at_16 == pytest.approx(1 - 0.75 ** 16, abs=1e-9)
    assert report.n_tasks == 2


def test_training_moves_probability_toward_pseudo_label(tmp_path):
    cfg = _cfg(tmp_path, method=Method.MAJORITY_VOTE, steps=6)
    specs = [
        direct_spec({"1": 0.8, "0": 0.1}, true_answer=[1], question_id="a"),
        direct_spec({"2": 0.8, "3": 0.1}, true_answer=[2], question_id="b"),
    ]
    suite = [(spec, build_task(spec)) for spec in specs]
    result = run_training(cfg, suite=suite, write=False)
    for spec, params in suite:
        y = tuple(spec.true_answer)
        before = exact_answer_distribution(params).prob(y)
        after = exact_answer_distribution(result.policies[spec.question_id]).prob(y)
        assert after > before


def test_unlearn_sweep_rows():
    spec = direct_spec({"0": 0.7, "1": 0.2, "2": 0.1}, true_answer=[1], spurious_answer=[0])
    rows = run_unlearn_sweep(SweepConfig(etas=[0.0, 0.5, 5.0], task=spec))
    assert [r["eta_u"] for r in rows] == [0.0, 0.5, 5.0]
    assert rows[0]["explorer_entropy"] == pytest.approx(rows[0]["anchor_entropy"])
    assert rows[1]["explorer_entropy"] > rows[0]["explorer_entropy"]


@pytest.mark.slow
def test_dual_consensus_beats_majority_vote_over_paired_seeds():
    cfg = TrainConfig(
        suite=SuiteConfig(n_questions=100, spurious_fraction=0.3, reasoning_len=2, seed=0),
        G=16,
        epochs=2,
        unlearn=UnlearnConfig(eta_u=20.0),
        track_entropy=False,
    )
    rows = {row["strategy"]: row for row in compare_consensus(cfg, seeds=list(range(20)))}
    dual, majority = rows["Harmonic"], rows["AnchorMajority"]

    # 成对种子：同一个题库、同一个训练种子
    pairs = list(zip(dual["per_seed"], majority["per_seed"]))
    assert all(d["seed"] == m["seed"] for d, m in pairs)
    wins = sum(1 for d, m in pairs if d["final_label_accuracy"] > m["final_label_accuracy"])
    assert wins >= 18
    assert dual["mean_reward_correctness"] > majority["mean_reward_correctness"]

    # 调和选举不输给任何一种多数票
    assert dual["mean_final_label_accuracy"] >= majority["mean_final_label_accuracy"]
    assert dual["mean_final_label_accuracy"] >= rows["PooledMajority"]["mean_final_label_accuracy"]


def test_training_never_reads_the_true_answer(tmp_path):
    masses = [({"1": 0.6, "2": 0.3}, [1], [2]), ({"0": 0.5, "3": 0.4}, [0], [3])]
    suite_a, suite_b = [], []
    for k, (m, true_a, true_b) in enumerate(masses):
        for suite, y in ((suite_a, true_a), (suite_b, true_b)):
            spec = direct_spec(m, true_answer=y, question_id=f"q{k}")
            suite.append((spec, build_task(spec)))

    cfg = _cfg(tmp_path, steps=4, track_entropy=True)
    a = run_training(cfg, suite=suite_a, write=False)
    b = run_training(cfg, suite=suite_b, write=False)

    # 只换 y_true：参数轨迹、选举与奖励都不变，变的只有打分字段
    assert a.policies == b.policies
    scored = {"label_correct", "anchor_label_correct", "n_reward_one_true"}
    assert [r.model_dump(exclude=scored) for r in a.records] == [r.model_dump(exclude=scored) for r in b.records]
    assert [r.label_correct for r in a.records] != [r.label_correct for r in b.records]
