import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from smartensemble import cli, training
from smartensemble.config import config_from_dict, derive_seed, validate_config
from smartensemble.data import load_idx, select_classes, specialty_accuracy, write_idx
from smartensemble.ensemble import collect_predictions
from smartensemble.errors import ConfigError, TrainingAbort

from conftest import small_synthetic

BUNDLED_MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist-10k"


@pytest.fixture
def synthetic_run(tmp_path, write_config):
    raw = small_synthetic(selector={"epochs": 2})
    raw["output_dir"] = str(tmp_path / "run")
    return write_config(raw), tmp_path / "run"


@pytest.fixture(scope="module")
def tiny_digits(tmp_path_factory):
    """Digits 0-2 from the bundled MNIST subset, cut down to a few hundred images."""
    folder = tmp_path_factory.mktemp("digits")
    for split, prefix, size in (("train", "train", 600), ("test", "t10k", 300)):
        ds = load_idx(BUNDLED_MNIST / f"{prefix}-images-idx3-ubyte.gz", BUNDLED_MNIST / f"{prefix}-labels-idx1-ubyte.gz")
        ds = select_classes(ds, [0, 1, 2])
        idx = np.random.default_rng(0).permutation(len(ds))[:size]
        images = np.rint(ds.features[idx] * 255).astype(np.uint8).reshape(-1, 28, 28)
        write_idx(folder / f"{split}-images", folder / f"{split}-labels", images, ds.labels[idx].astype(np.uint8))
    raw = {
        "dataset": {
            "source": "idx",
            "train_images": "train-images",
            "train_labels": "train-labels",
            "test_images": "test-images",
            "test_labels": "test-labels",
            "classes": [0, 1, 2],
        },
        "agent": {"hidden_sizes": [16], "epochs": 1, "train_size": 100},
        "selector": {"hidden_sizes": [16], "epochs": 2},
        "output_dir": "run",
    }
    path = folder / "config.json"
    path.write_text(json.dumps(raw))
    return path


def run(*argv):
    return cli.run([str(a) for a in argv])


class TestUsage:
    def test_unknown_flag(self, capsys, synthetic_run):
        config, _ = synthetic_run
        assert run("report", "--config", config, "--bogus") == 1
        assert "usage:" in capsys.readouterr().err

    def test_missing_subcommand(self, capsys):
        assert run() == 1
        assert "usage:" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run("report", "--config", tmp_path / "nope.json") == 1
        assert "nope.json" in capsys.readouterr().err

    def test_bad_k_override(self, synthetic_run, capsys):
        config, _ = synthetic_run
        assert run("evaluate", "--config", config, "--k", 0, "--method", "ua") == 1
        assert "1 <= k <= n" in capsys.readouterr().err

    def test_console_script_module(self, synthetic_run):
        config, _ = synthetic_run
        proc = subprocess.run(
            [sys.executable, "-m", "smartensemble.cli", "report", "--config", str(config), "--nope"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1 and "usage:" in proc.stderr


class TestValidateConfig:
    def test_minimal_preset_is_defaulted(self, write_config):
        config = validate_config(write_config({"dataset": {"source": "synthetic"}}))
        assert (config.c, config.d, config.n) == (5, 16, 15)
        assert (config.epsilon, config.m, config.grad_scaling, config.normalize) == (1.0, 100, "berthet", "before")
        assert config.selector.batch_size == 64 and config.agent.batch_size == 64
        assert config.k_values == list(range(1, 16)) and 1 <= config.k <= 15
        assert config.to_dict()["knapsack"]["m"] == 100

    def test_echo_round_trips(self, write_config):
        config = validate_config(write_config(small_synthetic()))
        assert config_from_dict(config.to_dict()) == config

    def test_k_zero(self, write_config):
        with pytest.raises(ConfigError, match=r"1 <= k <= n") as info:
            validate_config(write_config({"dataset": {"source": "synthetic"}, "knapsack": {"k": 0}}))
        assert info.value.pointer == "/knapsack/k"

    def test_ensemble_size(self, write_config):
        ok = validate_config(write_config({"dataset": {"source": "synthetic"}, "c": 5, "n": 15}))
        assert ok.n == 15
        with pytest.raises(ConfigError, match=r"n = c \+ C\(c,2\)") as info:
            validate_config(write_config({"dataset": {"source": "synthetic"}, "c": 5, "n": 14}))
        assert info.value.pointer == "/n"

    def test_singles_mode(self, write_config):
        config = validate_config(write_config({"dataset": {"source": "synthetic"}, "specialization": "singles"}))
        assert config.n == 5

    def test_missing_field_is_named(self, write_config):
        with pytest.raises(ConfigError, match="dataset") as info:
            validate_config(write_config({"seed": 1}))
        assert info.value.pointer == "/dataset"
        with pytest.raises(ConfigError, match="test_labels"):
            validate_config(
                write_config({"dataset": {"source": "idx", "train_images": "a", "train_labels": "b", "test_images": "c"}})
            )

    def test_schema_error_has_pointer(self, write_config):
        with pytest.raises(ConfigError) as info:
            validate_config(write_config({"dataset": {"source": "synthetic"}, "knapsack": {"epsilon": -1}}))
        assert info.value.pointer == "/knapsack/epsilon"

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"dataset": {"source": "synthetic",}}')
        with pytest.raises(ConfigError, match="line 1") as info:
            validate_config(path)
        assert info.value.pointer == "/"

    def test_malformed_json_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{")
        assert run("report", "--config", path) == 1
        assert "malformed JSON" in capsys.readouterr().err

    def test_rho_presets(self, write_config):
        config = validate_config(write_config({"dataset": {"source": "synthetic"}, "rho": "fer2013"}))
        assert config.rho == 0.444
        with pytest.raises(ConfigError):
            validate_config(write_config({"dataset": {"source": "synthetic"}, "rho": 1.5}))

    def test_relative_idx_paths(self, tiny_digits):
        config = validate_config(tiny_digits)
        assert Path(config.dataset.train_images) == tiny_digits.parent / "train-images"

    def test_named_substreams_differ(self):
        names = ["agents", "selector", "noise", "rs-baseline"]
        assert len({derive_seed(0, name) for name in names}) == 4
        assert derive_seed(0, "noise", 3) == derive_seed(0, "noise", 3) != derive_seed(1, "noise", 3)


class TestCommands:
    def test_config_echo_written_first(self, synthetic_run):
        config, out = synthetic_run
        assert run("gen-synthetic", "--config", config) == 0
        echo = json.loads((out / "config.json").read_text())
        assert echo["n"] == 15 and echo["knapsack"]["epsilon"] == 1.0
        assert len(list((out / "agents").glob("agent_*.json"))) == 15
        assert (out / "data" / "test.npz").exists()

    def test_rs_at_full_size_equals_ua(self, synthetic_run, capsys):
        config, out = synthetic_run
        assert run("gen-synthetic", "--config", config) == 0
        assert run("evaluate", "--config", config, "--method", "ua") == 0
        assert run("evaluate", "--config", config, "--method", "rs", "--k", 15) == 0
        evals = json.loads((out / "report.json").read_text())["evaluations"]
        assert evals["ua"] == evals["rs@k=15"]

    def test_selector_then_evaluate_reproduces(self, synthetic_run):
        config, out = synthetic_run
        assert run("train-selector", "--config", config, "--k", 3) == 0
        assert (out / "selector_k3.json").exists()
        report = json.loads((out / "report.json").read_text())
        assert run("evaluate", "--config", config, "--k", 3, "--method", "e2e-mel") == 0
        again = json.loads((out / "report.json").read_text())["evaluations"]["e2e-mel@k=3"]
        assert again == report["selectors"]["3"]["test_accuracy"]

    def test_evaluate_without_selector(self, synthetic_run, capsys):
        config, _ = synthetic_run
        assert run("gen-synthetic", "--config", config) == 0
        assert run("evaluate", "--config", config, "--k", 4) == 1
        assert "train-selector" in capsys.readouterr().err

    def test_sweep_rows(self, tmp_path, write_config, capsys):
        raw = small_synthetic(selector={"epochs": 1}, k_values=[1, 2, 5, 15])
        raw["output_dir"] = str(tmp_path / "sweep")
        config = write_config(raw)
        assert run("sweep-k", "--config", config) == 0
        lines = (tmp_path / "sweep" / "sweep.csv").read_text().splitlines()
        assert lines[0] == "k,e2e_mel,ua,mv,rs,seed,wallclock_s"
        rows = [line.split(",") for line in lines[1:]]
        assert [r[0] for r in rows] == ["1", "2", "5", "15"]
        assert rows[-1][2] == rows[-1][4]  # ua == rs at k = n
        assert capsys.readouterr().out.startswith("k,e2e_mel")
        assert run("report", "--config", config) == 0
        assert "best k" in capsys.readouterr().out

    def test_training_abort_exit_code(self, synthetic_run, monkeypatch, capsys):
        config, _ = synthetic_run

        def boom(*args, **kwargs):
            raise TrainingAbort("non-finite loss at step 0")

        monkeypatch.setattr(training, "train_selector", boom)
        assert run("sweep-k", "--config", config, "--k", 2) == 2
        assert "aborted" in capsys.readouterr().err

    def test_seed_and_out_overrides(self, synthetic_run, tmp_path):
        config, _ = synthetic_run
        assert run("gen-synthetic", "--config", config, "--seed", 9, "--out", tmp_path / "other") == 0
        assert json.loads((tmp_path / "other" / "config.json").read_text())["seed"] == 9

    def test_train_agents_report_matches_checkpoints(self, tiny_digits, capsys):
        assert run("train-agents", "--config", tiny_digits) == 0
        capsys.readouterr()
        assert run("report", "--config", tiny_digits) == 0
        table = capsys.readouterr().out.splitlines()
        assert table[0].split() == ["agent", "specialty", "specialized", "complementary", "overall"]

        out = tiny_digits.parent / "run"
        config = validate_config(tiny_digits)
        (_, _, test), _ = training.load_master_splits(config)
        agents = cli.load_agents(out)
        assert len(agents) == 6
        P = collect_predictions(agents, test.features)
        for j, (agent, line) in enumerate(zip(agents, table[1:])):
            fresh = specialty_accuracy(np.argmax(P[:, :, j], axis=1), test.labels, agent.specialty, config.c)
            assert fresh == {k: agent.train_stats[k] for k in fresh}
            assert float(line.split()[-1]) == pytest.approx(fresh["overall"], abs=0.005)
        assert table[-1].startswith("mean")
