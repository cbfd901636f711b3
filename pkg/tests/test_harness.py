import csv
import json
import os

import numpy as np
import pytest

from sharpdiag.diffcore import Dataset, MlpModel, ParamVector, load_checkpoint, mlp_layout, scores
from sharpdiag.harness import cli, runner
from sharpdiag.harness.config import ExperimentConfig, load_config, save_config
from sharpdiag.metrics import ScoreSet, compute_eer
from sharpdiag.sharpness import SharpnessConfig
from sharpdiag.synthbench import ShiftSpec, TaskSpec


def tiny_config(**kw):
    base = ExperimentConfig(
        task=TaskSpec(n_train=128, n_eval=128),
        shifts=(ShiftSpec("attack", 2), ShiftSpec("channel", 3)),
        hidden_dims=(8,),
        epochs=2,
        seeds=(0, 1),
        sharpness=SharpnessConfig(ascent_steps=3, restarts=1),
    )
    return base.with_(**kw)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(optimizer="sam", rho=0.01)
        save_config(cfg, tmp_path / "c.json")
        back = load_config(tmp_path / "c.json")
        assert back == cfg
        assert back.hash() == cfg.hash()

    def test_hash_ignores_bookkeeping(self):
        cfg = tiny_config()
        assert cfg.with_(output_dir="elsewhere", name="x", seeds=(5,)).hash() == cfg.hash()
        # rho is meaningless for Adam
        assert cfg.with_(rho=0.001).hash() == cfg.hash()

    @pytest.mark.parametrize("change", [
        dict(epochs=3), dict(hidden_dims=(9,)), dict(activation="tanh"), dict(optimizer="sam"),
        dict(task=TaskSpec(n_train=128, n_eval=128, base_seed=1)), dict(batch_size=16),
        dict(sharpness=SharpnessConfig(rho=0.01)), dict(class_weights=(0.5, 0.5)),
    ])
    def test_hash_tracks_meaningful_fields(self, change):
        assert tiny_config(**change).hash() != tiny_config().hash()

    def test_sam_rho_in_hash(self):
        assert tiny_config(optimizer="sam").hash() != tiny_config(optimizer="sam", rho=0.01).hash()

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_config(seeds=())
        with pytest.raises(ValueError):
            tiny_config(optimizer="sgd")
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"epochz": 3})
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"schema_version": 2})


class TestTraining:
    def test_deterministic(self):
        cfg = tiny_config(optimizer="sam")
        a = runner.train_model(cfg, 3)
        b = runner.train_model(cfg, 3)
        np.testing.assert_array_equal(a.params.values, b.params.values)

    def test_forced_zero_sam_equals_adam(self):
        cfg = tiny_config(epochs=3)
        adam = runner.train_model(cfg, 0)
        sam = runner.train_model(cfg.with_(optimizer="sam"), 0, force_zero_perturbation=True)
        np.testing.assert_array_equal(sam.params.values, adam.params.values)

    def test_untrained_eer_near_chance(self):
        cfg = ExperimentConfig(epochs=0)
        matched = runner.build_test_sets(cfg)["matched"]
        eers = [runner.detection_eer(runner.train_model(cfg, s), matched) for s in range(10)]
        assert abs(np.mean(eers) - 0.5) <= 0.1

    def test_numerical_failure_reports_step(self):
        cfg = tiny_config()
        cfg = cfg.with_(adam=type(cfg.adam)(lr_max=1e300, lr_min=1e300))
        with pytest.raises(ArithmeticError, match="step"):
            runner.train_model(cfg, 0)


class TestRuns:
    def test_result_json_byte_identical(self, tmp_path):
        cfg = tiny_config(optimizer="sam")
        runner.train_run(cfg, 1, tmp_path / "a")
        runner.train_run(cfg, 1, tmp_path / "b")
        rid = runner.run_id(cfg, 1)
        for name in ("result.json", "model.ckpt", "steps.csv", "config.json"):
            assert (tmp_path / "a" / rid / name).read_bytes() == (tmp_path / "b" / rid / name).read_bytes()
        payload = json.loads((tmp_path / "a" / rid / "result.json").read_text())
        assert "wall_time" not in payload
        assert set(payload["eer"]) == {"matched", "attack2", "channel3"}
        assert json.loads((tmp_path / "a" / rid / "timing.json").read_text())["wall_time_s"] > 0

    def test_no_temp_files_left(self, tmp_path):
        runner.train_run(tiny_config(), 0, tmp_path)
        leftovers = [f for _, _, files in os.walk(tmp_path) for f in files if f.startswith(".tmp-")]
        assert leftovers == []

    def test_step_log(self, tmp_path):
        cfg = tiny_config(optimizer="sam")
        _, res = runner.train_run(cfg, 0, tmp_path, with_sharpness=False)
        rows = list(csv.DictReader((tmp_path / res.log_path).read_text().splitlines()))
        assert len(rows) == cfg.total_steps
        assert float(rows[0]["eps_norm"]) == pytest.approx(0.05, rel=1e-12)
        assert float(rows[0]["lr"]) == cfg.adam.lr_max
        assert res.sharpness == {}


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = tiny_config()
    levels = {"attack": (1, 2), "speaker": (2,)}
    table, curves = runner.benchmark(cfg, out, curve_levels=levels)
    return cfg, out, table, curves


class TestBenchmark:
    def test_aggregates_recompute(self, bench):
        cfg, out, table, _ = bench
        results = runner.load_results(out)
        assert len(results) == 4
        for (system, optimizer, test_set), cell in table.cells.items():
            vals = [r.eer[test_set] for r in results if r.optimizer == optimizer and r.system == system]
            assert abs(cell["mean"] - np.mean(vals)) <= 1e-12
            assert abs(cell["std"] - np.std(vals, ddof=1)) <= 1e-12
        rows = runner.read_results_csv(out / "results.csv")
        for (system, optimizer, test_set), cell in table.cells.items():
            vals = [float(r["eer"]) for r in rows if r["optimizer"] == optimizer and r["test_set"] == test_set]
            assert abs(cell["mean"] - np.mean(vals)) <= 1e-12

    def test_bold_flags_lower_mean(self, bench):
        _, _, table, _ = bench
        for (system, optimizer, test_set), cell in table.cells.items():
            other = table.cells[(system, "sam" if optimizer == "adam" else "adam", test_set)]
            assert table.bold(system, optimizer, test_set) == (cell["mean"] <= other["mean"])

    def test_files(self, bench):
        _, out, table, curves = bench
        t1 = list(csv.DictReader((out / "table1.csv").read_text().splitlines()))
        assert [r["optimizer"] for r in t1] == ["adam", "sam"]
        assert "+-" in t1[0]["matched"]
        mc = list(csv.DictReader((out / "mismatch_curves.csv").read_text().splitlines()))
        assert {(r["axis"], r["level"]) for r in mc} == {("attack", "1"), ("attack", "2"), ("speaker", "2")}
        assert {"sharpness_mean", "sharpness_std", "axis", "level"} <= set(mc[0])
        assert len(curves) == 6

    def test_correlate(self, bench, tmp_path):
        _, out, _, _ = bench
        reports = runner.correlate(out, ["matched", "channel3"], tmp_path)
        assert [r.n for r in reports] == [4, 4]
        scatter = list(csv.DictReader((tmp_path / "scatter.csv").read_text().splitlines()))
        assert {r["optimizer"] for r in scatter} == {"adam", "sam"}
        assert (tmp_path / "table2.csv").read_text().startswith("metric,matched,channel3")


class TestCli:
    def run(self, capsys, *argv):
        code = cli.main([str(a) for a in argv])
        return code, capsys.readouterr()

    def test_usage_errors(self, capsys):
        assert self.run(capsys, "frobnicate")[0] == 1
        assert self.run(capsys, "train", "--seed", "x")[0] == 1
        assert self.run(capsys)[0] == 1
        assert self.run(capsys, "--help")[0] == 0

    def test_missing_file(self, capsys, tmp_path):
        code, io = self.run(capsys, "eer", "--scores", tmp_path / "nope.csv")
        assert code == 1 and "error" in io.err

    def test_numerical_failure(self, capsys, tmp_path):
        cfg = tiny_config()
        cfg = cfg.with_(adam=type(cfg.adam)(lr_max=1e300, lr_min=1e300))
        save_config(cfg, tmp_path / "c.json")
        code, io = self.run(capsys, "train", "--config", tmp_path / "c.json", "--out", tmp_path / "runs")
        assert code == 2 and "step" in io.err

    def test_pipeline(self, capsys, tmp_path):
        cfg = tiny_config()
        save_config(cfg, tmp_path / "c.json")
        assert self.run(capsys, "gen-data", "--config", tmp_path / "c.json", "--out", tmp_path / "data")[0] == 0
        code, io = self.run(capsys, "train", "--config", tmp_path / "c.json", "--out", tmp_path / "runs",
                            "--optimizer", "sam")
        assert code == 0
        result = json.loads(io.out)
        ckpt = tmp_path / "runs" / result["checkpoint_path"]

        code, io = self.run(capsys, "evaluate", "--checkpoint", ckpt, "--data", tmp_path / "data" / "matched.csv",
                            "--scores-dir", tmp_path / "scores")
        assert code == 0
        evaluated = json.loads(io.out)["eer"]["matched"]
        assert evaluated == result["eer"]["matched"]

        # scores piped through the standalone EER command
        code, io = self.run(capsys, "eer", "--scores", tmp_path / "scores" / "matched.csv")
        assert json.loads(io.out)["eer"] == evaluated

        code, io = self.run(capsys, "sharpness", "--checkpoint", ckpt, "--data", tmp_path / "data" / "attack2.csv",
                            "--ascent-steps", "3", "--restarts", "1", "--out", tmp_path / "s.json")
        assert code == 0
        assert json.loads(io.out)["mean"] == pytest.approx(result["sharpness"]["attack2"], rel=1e-12)

        code, io = self.run(capsys, "landscape", "--checkpoint", ckpt, "--data", tmp_path / "data" / "matched.csv",
                            "--resolution", "5", "--out-prefix", tmp_path / "grid")
        assert code == 0
        assert len((tmp_path / "grid.csv").read_text().splitlines()) == 26

    def test_rho_sweep_and_correlate(self, capsys, tmp_path):
        save_config(tiny_config(epochs=3), tmp_path / "c.json")
        code, io = self.run(capsys, "rho-sweep", "--config", tmp_path / "c.json", "--rhos", "0.05,0.01",
                            "--out", tmp_path / "sweep")
        assert code == 0 and len(json.loads(io.out)["runs"]) == 6
        code, io = self.run(capsys, "correlate", "--results", tmp_path / "sweep", "--test-set", "attack2",
                            "--out", tmp_path / "corr")
        assert code == 0
        assert json.loads(io.out)[0]["n"] == 6
        code, io = self.run(capsys, "correlate", "--results", tmp_path / "sweep", "--test-set", "nope")
        assert code == 1


class TestEvaluation:
    def test_oracle_model_zero_eer(self):
        # logits (x0, -x0): score 2*x0 separates sign-labelled data
        model = MlpModel((1, 2), "relu", ParamVector(np.array([1.0, -1.0, 0.0, 0.0]), mlp_layout((1, 2))))
        ds = Dataset(np.array([[2.0], [1.0], [-1.0], [-3.0]]), np.array([0, 0, 1, 1]))
        assert runner.detection_eer(model, ds) == 0.0

    def test_label_flip(self):
        model = MlpModel.init((20, 8, 2), "relu", 0)
        ds = runner.build_test_sets(tiny_config())["attack2"]
        flipped = Dataset(ds.features, 1 - ds.labels)
        assert runner.detection_eer(model, flipped) == pytest.approx(1 - runner.detection_eer(model, ds), abs=1e-12)

    def test_matches_manual_metric(self):
        model = MlpModel.init((20, 8, 2), "tanh", 2)
        ds = runner.build_test_sets(tiny_config())["matched"]
        manual = compute_eer(ScoreSet(scores(model, ds)[ds.labels == 0], scores(model, ds)[ds.labels == 1]))
        assert runner.detection_eer(model, ds) == manual.eer
