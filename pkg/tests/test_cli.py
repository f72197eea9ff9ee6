from pathlib import Path

import orjson
import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from cli import app

runner = CliRunner()
PRESETS = Path(__file__).resolve().parent.parent / "presets"


def invoke(*args: str):
    return runner.invoke(app, [str(a) for a in args])


def read(path):
    return orjson.loads(path.read_bytes())


@pytest.fixture
def trained(tmp_path):
    """Double-integrator run directory holding the hand-built policy"""
    out = tmp_path / "di"
    result = invoke("train", "--config", "double_integrator", "--out", out)
    assert result.exit_code == 0, result.output
    return out


def write_config(path, payload) -> str:
    path.write_text(yaml.safe_dump(payload))
    return str(path)


def preset(name: str) -> dict:
    return yaml.safe_load((PRESETS / f"{name}.yaml").read_text())


class TestVertices:
    def test_pendulum_preset(self, tmp_path):
        result = invoke("vertices", "--config", "pendulum", "--out", tmp_path)
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(tmp_path / "vertices.csv")
        assert list(frame.columns) == ["s1", "s2", "s3", "s4"]
        assert len(frame) == 12
        manifest = read(tmp_path / "manifest.json")
        assert "vertices.csv" in manifest["commands"]["vertices"]["artifacts"]

    def test_tight_third_order_buffer(self, tmp_path):
        config = write_config(
            tmp_path / "r3.yaml",
            {
                "name": "r3",
                "environment": {"id": "double_integrator"},
                "buffer": {"y_min": 0.0, "y_max": 1.0, "ydot_max": 1.0, "lower_bounds": [0.0, 0.0, -1.0]},
            },
        )
        result = invoke("vertices", "--config", config, "--out", tmp_path / "out")
        assert result.exit_code == 0, result.output
        assert len(pd.read_csv(tmp_path / "out" / "vertices.csv")) == 5

    def test_output_is_reproducible(self, tmp_path):
        invoke("vertices", "--config", "shuttle", "--out", tmp_path / "a")
        invoke("vertices", "--config", "shuttle", "--out", tmp_path / "b")
        assert (tmp_path / "a" / "vertices.csv").read_bytes() == (tmp_path / "b" / "vertices.csv").read_bytes()


class TestConfigErrors:
    def test_malformed_yaml(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("name: broken\nenvironment: [\n")
        assert invoke("vertices", "--config", bad).exit_code == 2

    def test_unknown_preset(self):
        assert invoke("vertices", "--config", "no_such_preset").exit_code == 2

    def test_unknown_key(self, tmp_path):
        config = write_config(
            tmp_path / "extra.yaml",
            {
                "name": "extra",
                "environment": {"id": "double_integrator"},
                "buffer": {"y_min": 0.0, "y_max": 1.0, "ydot_max": 1.0, "lower_bounds": [0.0, 0.0]},
                "colour": "blue",
            },
        )
        assert invoke("vertices", "--config", config).exit_code == 2

    def test_degenerate_buffer(self, tmp_path):
        config = write_config(
            tmp_path / "flat.yaml",
            {
                "name": "flat",
                "environment": {"id": "double_integrator"},
                "buffer": {"y_min": 1.0, "y_max": 1.0, "ydot_max": 1.0, "lower_bounds": [1.0, 0.0]},
            },
        )
        assert invoke("vertices", "--config", config, "--out", tmp_path / "out").exit_code == 2

    def test_negative_eps(self, trained):
        assert invoke("verify", "--config", "double_integrator", "--out", trained, "--eps", "-1").exit_code == 2


class TestPipeline:
    def test_train_writes_checkpoint_and_log(self, trained):
        checkpoint = read(trained / "policy.json")
        assert checkpoint["env"] == "double_integrator"
        assert checkpoint["kind"] == "fixed_affine"
        log = pd.read_csv(trained / "training_log.csv")
        assert len(log) == 1

    def test_verify_with_explicit_eps(self, trained):
        result = invoke("verify", "--config", "double_integrator", "--out", trained, "--eps", "0")
        assert result.exit_code == 0, result.output
        certificate = read(trained / "certificate.json")
        assert certificate["verdict"] == "pass"
        assert certificate["eps"] == 0.0
        assert len(certificate["vertices"]) == 3

    def test_verify_uses_estimated_eps(self, trained):
        assert invoke("estimate-eps", "--config", "double_integrator", "--out", trained).exit_code == 0
        measure = read(trained / "approx_measure.json")
        assert invoke("verify", "--config", "double_integrator", "--out", trained).exit_code == 0
        certificate = read(trained / "certificate.json")
        assert certificate["eps"] == measure["eps"]
        assert certificate["verdict"] == "pass"

    def test_failed_certificate_still_exits_cleanly(self, trained):
        result = invoke("verify", "--config", "double_integrator", "--out", trained, "--eps", "0.7")
        assert result.exit_code == 0
        assert read(trained / "certificate.json")["verdict"] == "fail"

    def test_simulate(self, trained):
        result = invoke("simulate", "--config", "double_integrator", "--out", trained, "--rollouts", "5")
        assert result.exit_code == 0, result.output
        report = read(trained / "simulation_report.json")
        assert report["rollouts"] == 5 and report["violations"] == 0
        assert len(list((trained / "trajectories").glob("rollout_*.csv"))) == 5
        portrait = pd.read_csv(trained / "phase_portrait.csv")
        assert set(portrait["rollout"]) == set(range(5))

    def test_simulate_without_rollouts(self, trained):
        result = invoke("simulate", "--config", "double_integrator", "--out", trained, "--rollouts", "0")
        assert result.exit_code == 0, result.output
        violations = pd.read_csv(trained / "violations.csv")
        assert violations.empty
        assert list(violations.columns) == ["rollout", "step", "t", "component", "value", "bound", "excess", "kind"]
        report = read(trained / "simulation_report.json")
        assert report["rollouts"] == 0 and report["reports"] == []

    def test_checkpoint_from_another_environment(self, trained, tmp_path):
        result = invoke(
            "verify", "--config", "pendulum", "--checkpoint", trained / "policy.json", "--out", tmp_path / "p", "--eps", "0"
        )
        assert result.exit_code == 3

    def test_missing_checkpoint(self, tmp_path):
        assert invoke("simulate", "--config", "double_integrator", "--out", tmp_path).exit_code == 3

    def test_reruns_are_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            out = tmp_path / name
            assert invoke("train", "--config", "double_integrator", "--out", out).exit_code == 0
            assert invoke("verify", "--config", "double_integrator", "--out", out, "--eps", "0.1").exit_code == 0
        for artifact in ("policy.json", "training_log.csv", "certificate.json", "manifest.json"):
            assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()

    def test_verify_reuses_measure_of_the_same_policy(self, trained):
        assert invoke("estimate-eps", "--config", "double_integrator", "--out", trained).exit_code == 0
        measure = read(trained / "approx_measure.json")
        measure["eps"] = 0.7
        (trained / "approx_measure.json").write_bytes(orjson.dumps(measure))
        assert invoke("verify", "--config", "double_integrator", "--out", trained).exit_code == 0
        certificate = read(trained / "certificate.json")
        assert certificate["eps"] == 0.7
        assert certificate["verdict"] == "fail"

    def test_verify_ignores_measure_of_another_policy(self, trained, tmp_path):
        assert invoke("estimate-eps", "--config", "double_integrator", "--out", trained).exit_code == 0
        stale = read(trained / "approx_measure.json")
        stale["eps"] = 0.7
        (trained / "approx_measure.json").write_bytes(orjson.dumps(stale))

        payload = preset("double_integrator")
        payload["train"]["affine_e"] = [-1.5]
        config = write_config(tmp_path / "steeper.yaml", payload)
        assert invoke("train", "--config", config, "--out", trained).exit_code == 0
        result = invoke("verify", "--config", config, "--out", trained)
        assert result.exit_code == 0, result.output

        certificate = read(trained / "certificate.json")
        notes = certificate["notes"]
        assert notes["policy_hash"] != stale["policy_hash"]
        assert notes["approx_measure"]["policy_hash"] == notes["policy_hash"]
        assert certificate["eps"] != 0.7
        assert certificate["verdict"] == "pass"

    def test_train_kind_override(self, tmp_path):
        payload = preset("double_integrator")
        payload["train"].update(
            iterations=1, episodes=1, steps_per_episode=10, hidden_sizes=[4, 4], critic_hidden_sizes=[4], minibatch_size=8
        )
        config = write_config(tmp_path / "learned.yaml", payload)
        out = tmp_path / "out"
        result = invoke("train", "--config", config, "--out", out, "--kind", "baseline")
        assert result.exit_code == 0, result.output
        checkpoint = read(out / "policy.json")
        assert checkpoint["kind"] == "baseline"
        assert checkpoint["policy"]["enforced"] is False
