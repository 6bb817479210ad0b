import json
import os

import pytest

from app import cli
from app.core.config import OUTPUT_DIR_ENV, deep_merge, key_line, load_section, load_train_config
from app.core.errors import ConfigError, NumericalAbort
from app.services.experiment import SweepConfig
from app.services.oracle import GradCheckReport
from app.services.reports import METRICS_FILE, SUMMARY_FILE

SMALL_TRAIN = {
    "suite": {"n_questions": 4, "spurious_fraction": 0.5, "reasoning_len": 0, "seed": 2},
    "G": 4,
    "steps": 2,
    "batch_size": 4,
    "track_entropy": False,
}


def _write(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return str(path)


@pytest.fixture(autouse=True)
def _no_env_out(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def test_defaults_come_from_settings():
    cfg = load_train_config()
    assert cfg.G == 16
    assert cfg.suite.n_questions == 100
    assert cfg.unlearn.eta_u == 20.0
    assert cfg.output_dir == "out"


def test_precedence_of_overrides(tmp_path, monkeypatch):
    assert load_train_config(seed=11).seed == 11
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert load_train_config().output_dir == str(tmp_path / "env")
    # --out 压过环境变量
    assert load_train_config(out=str(tmp_path / "cli")).output_dir == str(tmp_path / "cli")


def test_plain_user_config_is_the_train_section(tmp_path):
    path = _write(tmp_path / "c.json", json.dumps({"G": 4, "suite": {"n_questions": 7}}))
    cfg = load_train_config(path)
    assert cfg.G == 4
    assert cfg.suite.n_questions == 7
    # 没写到的嵌套字段仍然取 settings.json
    assert cfg.suite.reasoning_len == 2


def test_sectioned_user_config(tmp_path):
    path = _write(tmp_path / "c.json", json.dumps({"sweep": {"etas": [0.0, 1.0]}, "train": {"G": 2}}))
    assert load_section("sweep", SweepConfig, path).etas == [0.0, 1.0]
    assert load_train_config(path).G == 2


def test_malformed_json_reports_line_and_column(tmp_path):
    path = _write(tmp_path / "bad.json", '{\n  "G": 4,\n  "steps": ,\n}\n')
    with pytest.raises(ConfigError) as info:
        load_train_config(path)
    assert f"{path}:3:" in str(info.value)


def test_validation_error_points_at_the_offending_line(tmp_path):
    path = _write(tmp_path / "bad.json", '{\n  "G": 4,\n  "batch_size": 0\n}\n')
    with pytest.raises(ConfigError) as info:
        load_train_config(path)
    assert f"{path}:3" in str(info.value)
    assert "batch_size" in str(info.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_train_config(str(tmp_path / "nope.json"))


def test_key_line_follows_nested_path():
    text = '{\n  "train": {\n    "G": 1,\n    "sampler": {\n      "K": 0\n    }\n  }\n}'
    assert key_line(text, ("train", "sampler", "K")) == 5
    assert key_line(text, ("missing",)) is None


def test_deep_merge_does_not_touch_inputs():
    base = {"a": {"b": 1, "c": 2}, "d": [1]}
    merged = deep_merge(base, {"a": {"b": 5}, "d": [2, 3]})
    assert merged == {"a": {"b": 5, "c": 2}, "d": [2, 3]}
    assert base == {"a": {"b": 1, "c": 2}, "d": [1]}


# =================================================================
# 命令行
# =================================================================

def test_train_command_writes_metrics(tmp_path, capsys):
    config = _write(tmp_path / "c.json", json.dumps(SMALL_TRAIN))
    out = tmp_path / "run"
    code = cli.main(["train", "--config", config, "--out", str(out), "--quiet", "--no-register"])
    assert code == cli.EXIT_OK
    with open(out / METRICS_FILE, encoding="utf-8") as f:
        assert len(f.readlines()) == 2 * 4
    assert os.path.exists(out / SUMMARY_FILE)
    assert json.loads(capsys.readouterr().out)["n_records"] == 8


@pytest.mark.slow
def test_train_command_is_reproducible(tmp_path):
    config = _write(tmp_path / "c.json", json.dumps({
        "suite": {"n_questions": 10, "reasoning_len": 0},
        "G": 8, "steps": 50, "batch_size": 10, "track_entropy": False,
    }))
    for name in ("a", "b"):
        args = ["train", "--config", config, "--seed", "3", "--out", str(tmp_path / name), "--quiet", "--no-register"]
        assert cli.main(args) == cli.EXIT_OK
    with open(tmp_path / "a" / METRICS_FILE, "rb") as fa, open(tmp_path / "b" / METRICS_FILE, "rb") as fb:
        a = fa.read()
        assert a == fb.read()
    assert len(a.splitlines()) == 500


def test_bad_config_exits_with_1(tmp_path):
    config = _write(tmp_path / "bad.json", '{"G": 0}')
    assert cli.main(["train", "--config", config, "--out", str(tmp_path / "x"), "--quiet", "--no-register"]) == 1


def test_failed_grad_check_exits_with_2(monkeypatch):
    failed = GradCheckReport(
        n_instances=1, tol=1e-5, logprob_max_rel_err=1.0, unlearn_max_rel_err=0.0,
        surrogate_max_rel_err=0.0, kl_max_rel_err=0.0, passed=False,
    )
    monkeypatch.setattr("app.services.oracle.grad_check", lambda n_instances, seed: failed)
    assert cli.main(["grad-check", "--n", "1"]) == cli.EXIT_NUMERICAL


def test_numerical_abort_exits_with_2(tmp_path, monkeypatch):
    def abort(cfg, progress=True):
        raise NumericalAbort("出现 NaN", step=0, question_id="q0", dump_path=None)

    monkeypatch.setattr("app.services.experiment.run_training", abort)
    config = _write(tmp_path / "c.json", json.dumps(SMALL_TRAIN))
    assert cli.main(["train", "--config", config, "--out", str(tmp_path / "x"), "--quiet", "--no-register"]) == 2


def test_sweep_command(tmp_path, capsys):
    config = _write(tmp_path / "c.json", json.dumps({"sweep": {"etas": [0.0, 0.5], "G": 4, "task": {"reasoning_len": 0}}}))
    assert cli.main(["sweep-unlearn-lr", "--config", config, "--out", str(tmp_path)]) == cli.EXIT_OK
    with open(tmp_path / "sweep_unlearn_lr.jsonl", encoding="utf-8") as f:
        assert len(f.readlines()) == 2
    assert "eta_u=0" in capsys.readouterr().out


def test_eval_without_checkpoints_exits_with_1(tmp_path):
    assert cli.main(["eval", "--out", str(tmp_path)]) == 1
