import json

import jsonschema
import numpy as np
import pytest

from cmnet.cli import main
from cmnet.cmn import CMNModel, FitConfig, fit, predict
from cmnet.experiment import (
    ExperimentConfig,
    ExperimentError,
    aggregate,
    derive_seed,
    pinwheel_protocol,
    raw_metrics,
    run_experiment,
    splitmix64,
    validate_results,
)
from cmnet.io import PosteriorFormatError, load_posterior, read_posterior_file, save_posterior


def small_config(tmp_path, **kw):
    base = dict(
        dataset={"kind": "pinwheel", "points_per_cluster": 30, "seed": 1},
        train_sizes=(20, 40),
        test_size=50,
        K=3,
        restarts=2,
        max_sweeps=5,
        num_samples=16,
        output=str(tmp_path / "res.json"),
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestPosteriorFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((30, 2)), rng.integers(0, 3, 30)
        model = CMNModel.default(2, 3, K=4)
        post, trace = fit(model, x, y, FitConfig(max_sweeps=5))
        path = tmp_path / "p.bin"
        save_posterior(path, model, post, seed=3, metadata={"a": 1}, extra_arrays={"trace": trace.elbo_per_sweep})
        model2, post2, manifest, extra = load_posterior(path)
        assert model2 == model and manifest["seed"] == 3 and manifest["metadata"] == {"a": 1}
        np.testing.assert_array_equal(extra["trace"], trace.elbo_per_sweep)
        np.testing.assert_array_equal(post2.experts.posteriors.M, post.experts.posteriors.M)
        np.testing.assert_array_equal(predict(post2, x, 8), predict(post, x, 8))

    def test_single_expert(self, tmp_path):
        model = CMNModel.default(1, 2, K=1)
        post, _ = fit(model, np.zeros((4, 1)), np.array([0, 1, 0, 1]), FitConfig(max_sweeps=2))
        save_posterior(tmp_path / "p.bin", model, post)
        _, post2, _, _ = load_posterior(tmp_path / "p.bin")
        assert post2.gating.mean.shape == (0, 2)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope" * 10)
        with pytest.raises(PosteriorFormatError):
            read_posterior_file(tmp_path / "x.bin")


class TestSeeds:
    def test_splitmix_reference_values(self):
        # first outputs of a splitmix64 generator seeded with 0
        assert derive_seed(0, 0) == 0xE220A8397B1DCDAF
        assert derive_seed(0, 1) == 0x6E789E6AA1B965F4
        assert splitmix64(0) == 0

    def test_distinct(self):
        seeds = {derive_seed(7, r) for r in range(1000)}
        assert len(seeds) == 1000


class TestExperiment:
    def test_record_shape_and_schema(self, tmp_path):
        cfg = small_config(tmp_path)
        rec = run_experiment(cfg)
        assert not rec["partial"]
        assert len(rec["runs"]) == 4
        assert [a["n_runs"] for a in rec["aggregates"]] == [2, 2]
        on_disk = json.loads((tmp_path / "res.json").read_text())
        validate_results(on_disk)
        lines = (tmp_path / "res.csv").read_text().strip().splitlines()
        assert len(lines) == 3

    def test_aggregates_recompute(self, tmp_path):
        rec = run_experiment(small_config(tmp_path))
        for agg in rec["aggregates"]:
            rows = [r for r in rec["runs"] if r["train_size"] == agg["train_size"]]
            vals = np.array([r["accuracy"] for r in rows])
            assert abs(agg["accuracy_mean"] - vals.mean()) <= 1e-12
            assert abs(agg["accuracy_std"] - vals.std(ddof=1)) <= 1e-12

    def test_deterministic(self, tmp_path):
        a = run_experiment(small_config(tmp_path, output=None))
        b = run_experiment(small_config(tmp_path, output=None))
        assert json.dumps(raw_metrics(a)) == json.dumps(raw_metrics(b))

    def test_smoke_timing(self, tmp_path):
        import time

        cfg = pinwheel_protocol(train_sizes=(50,), restarts=1, max_sweeps=1, output=None)
        start = time.monotonic()
        run_experiment(cfg)
        assert time.monotonic() - start < 5.0

    def test_partial_on_failure(self, tmp_path):
        cfg = small_config(tmp_path, train_sizes=(20, 10_000))
        with pytest.raises(ExperimentError):
            run_experiment(cfg)
        rec = json.loads((tmp_path / "res.json").read_text())
        assert rec["partial"] is True and rec["error"]
        validate_results(rec)

    def test_schema_rejects_garbage(self):
        with pytest.raises(jsonschema.ValidationError):
            validate_results({"schema_version": 1})

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(dataset={"kind": "pinwheel"}, train_sizes=(10,), test_size=5, restarts=0)
        with pytest.raises(ValueError):
            ExperimentConfig(dataset={"kind": "pinwheel"}, train_sizes=(10,))
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"dataset": {"kind": "csv"}, "train_sizes": [1], "test_size": 1, "bogus": 1})

    def test_parallel_matches_serial(self, tmp_path, monkeypatch):
        serial = run_experiment(small_config(tmp_path, output=None))
        monkeypatch.setenv("CMNET_THREADS", "2")
        parallel = run_experiment(small_config(tmp_path, output=None))
        assert raw_metrics(serial) == raw_metrics(parallel)

    def test_aggregate_single_run_std_zero(self):
        row = {m: 1.0 for m in ("accuracy", "lpd", "ece", "waic", "steps_to_converge", "wall_seconds", "final_elbo")}
        (agg,) = aggregate([{"train_size": 5, **row}])
        assert agg["accuracy_std"] == 0.0


class TestCli:
    def test_generate_fit_eval_trace(self, tmp_path, capsys):
        pw, test, post = tmp_path / "pw.csv", tmp_path / "test.csv", tmp_path / "post.bin"
        assert main(["generate", "--clusters", "5", "--radial", "0.7", "--tangential", "0.3", "--rate", "0.2",
                     "--n", "2100", "--seed", "1", "--out", str(pw)]) == 0
        assert len(pw.read_text().strip().splitlines()) == 2101
        assert main(["generate", "--n", "200", "--out", str(pw), "--test-out", str(test), "--test-size", "50"]) == 0
        capsys.readouterr()
        assert main(["fit", "--data", str(pw), "--k", "3", "--sweeps", "5", "--seed", "7", "--out", str(post)]) == 0
        assert "final elbo" in capsys.readouterr().out
        assert main(["eval", "--posterior", str(post), "--data", str(test)]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert set(metrics) == {"n", "accuracy", "lpd", "ece", "waic"} and metrics["n"] == 50
        assert main(["trace", "--posterior", str(post)]) == 0
        rows = capsys.readouterr().out.strip().splitlines()
        assert rows[0] == "sweep,elbo,wall_seconds" and len(rows) == 6

    def test_bench(self, tmp_path):
        out = tmp_path / "b.json"
        assert main(["bench", "--sizes", "50", "--restarts", "1", "--sweeps", "2", "--out", str(out)]) == 0
        validate_results(json.loads(out.read_text()))

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["fit", "--nope"])
        assert info.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_data_is_error(self, tmp_path, capsys):
        assert main(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "p.bin")]) == 1
        assert "no such file" in capsys.readouterr().err
