import json

import numpy as np
import pytest

from calibreg import report as reporting
from calibreg.cli import main
from calibreg.data import write_synthetic_csv
from calibreg.distributions import GaussianMixture
from calibreg.metrics import EvaluationReport, evaluate
from calibreg.pipeline import Method, RunConfig, SeedContext, _test_predictions, load_split, run_and_emit, run_pipeline
from calibreg.stats import ComparisonMatrix

TINY = dict(hidden_layers=1, units=8, dropout_rate=0.0, n_components=2, max_epochs=3, batch_size=128, null_sims=1000)


def tiny(**kwargs):
    return RunConfig(**{"dataset": "synthetic:sinusoidal:600", "seeds": (0,), **TINY, **kwargs})


class TestRunConfig:
    def test_cqr_needs_quantile_model(self):
        with pytest.raises(ValueError):
            RunConfig("d.csv", methods=("cqr",))

    def test_grid_needs_zero(self):
        with pytest.raises(ValueError):
            RunConfig("d.csv", lambda_grid=(0.1, 1.0))

    def test_posthoc_source(self):
        with pytest.raises(ValueError):
            RunConfig("d.csv", posthoc_source="test")

    def test_dict_round_trip(self):
        cfg = tiny(methods=("none", "dcp"))
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_single_method_key(self):
        assert RunConfig.from_dict({"dataset": "d.csv", "method": "rec-kde"}).methods == (Method.REC_KDE,)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"dataset": "d.csv", "colour": 1})

    def test_name(self):
        assert tiny().name == "sinusoidal"
        assert RunConfig("/a/b/housing.csv").name == "housing"


class TestPipeline:
    def test_none_reproduces_base_model(self):
        cfg = tiny()
        ctx = SeedContext(cfg, 0, load_split(cfg, 0))
        preds, lam = _test_predictions(ctx, Method.NONE)
        direct = ctx.base_model().predict(ctx.split.x["test"])
        assert lam is None and np.array_equal(preds.means, direct.means) and np.array_equal(preds.stds, direct.stds)

    def test_rec_dcp_equals_dcp(self):
        cfg = tiny()
        ctx = SeedContext(cfg, 0, load_split(cfg, 0))
        levels = (np.arange(1, 100) / 100)[None, :]
        a, _ = _test_predictions(ctx, Method.REC_DCP)
        b, _ = _test_predictions(ctx, Method.DCP)
        assert np.array_equal(a.quantile(levels), b.quantile(levels))

    def test_reports_and_selected_lambda(self):
        reports, failures = run_pipeline(tiny(methods=("none", "rec-lin", "pce-kde"), lambda_grid=(0.0, 0.2)))
        assert not failures
        assert [r.method for r in reports] == ["none", "rec-lin", "pce-kde"]
        assert reports[2].selected_lambda in (0.0, 0.2) and reports[0].selected_lambda is None
        assert all(0 <= r.p_value <= 1 and r.dataset == "sinusoidal" and r.model == "mix-nll" for r in reports)

    def test_sqr_with_cqr(self):
        reports, failures = run_pipeline(tiny(model="sqr-crps", n_quantiles=16, methods=("none", "cqr")))
        assert not failures and all(r.nll is None for r in reports)

    def test_posthoc_on_train(self):
        cfg = tiny(posthoc_source="train", methods=("rec-emp",))
        ctx = SeedContext(cfg, 0, load_split(cfg, 0))
        assert ctx.fit_split == "train"
        assert len(ctx.training_data()[1]) == len(ctx.split.y["train"]) + len(ctx.split.y["cal"])
        reports, failures = run_pipeline(cfg)
        assert not failures and len(reports) == 1

    def test_failures_recorded(self):
        reports, failures = run_pipeline(tiny(dataset="/nonexistent/file.csv", methods=("none", "dcp")))
        assert reports == [] and len(failures) == 2 and failures[0]["stage"] == "prepare"

    def test_byte_identical_json(self, tmp_path):
        texts = []
        for name in ("a", "b"):
            cfg = tiny(methods=("none", "rec-kde"), out=str(tmp_path / name))
            run_and_emit(cfg, ("json",))
            texts.append((tmp_path / name / "report.json").read_bytes())
        assert texts[0].replace(b"/a", b"/b") == texts[1]


def sample_reports():
    rng = np.random.default_rng(0)
    out = []
    for seed in (0, 1):
        for method in ("none", "rec-emp"):
            r = evaluate(GaussianMixture.normal(np.zeros(30), np.ones(30)), rng.normal(size=30), band_seed=seed)
            r.dataset, r.model, r.method, r.seed = "toy", "mix-nll", method, seed
            r.p_value = 0.5
            out.append(r)
    return out


class TestReport:
    def test_jsonable_non_finite(self):
        assert reporting.jsonable({"a": np.inf, "b": -np.inf, "c": np.nan, "d": np.float32(1.5)}) == {"a": "inf", "b": "-inf", "c": "nan", "d": 1.5}

    def test_csv_row_count_and_round_trip(self, tmp_path):
        reports = sample_reports()
        path = reporting.write_csv(tmp_path / "r.csv", reports)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(reporting.CSV_HEADER)
        assert len(lines) == 1 + len(reports) * len(EvaluationReport.METRICS)
        m = ComparisonMatrix.from_csv(path, "pce")
        assert m.methods == ["none", "rec-emp"]
        assert m.values[0, 0] == pytest.approx(np.mean([reports[0].pce, reports[2].pce]))

    def test_json_round_trip(self, tmp_path):
        reports = sample_reports()
        reports[0].nll = np.inf
        path = reporting.write_json(tmp_path / "r.json", reports, [{"seed": 3}], {"k": 1})
        back, doc = reporting.read_json(path)
        assert doc["failures"] == [{"seed": 3}] and doc["config"] == {"k": 1}
        assert back[0].nll == np.inf and back[1].pce == reports[1].pce
        assert reporting.dumps(reporting.report_document(back, [{"seed": 3}], {"k": 1})) == path.read_text()

    def test_svg_structure(self, tmp_path):
        paths = reporting.emit_report(sample_reports(), "svg", tmp_path)
        assert len(paths) == 4
        text = paths[0].read_text()
        assert text.count('class="band"') == 1 and text.count('class="empirical"') == 1
        points = text.split('class="empirical" points="')[1].split('"')[0].split()
        assert len(points) == 100

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            reporting.emit_report(sample_reports(), "pdf", tmp_path)


class TestCli:
    @pytest.fixture()
    def csv_path(self, tmp_path):
        path = tmp_path / "sin.csv"
        write_synthetic_csv(path, "sinusoidal", 400, seed=0)
        return path

    def test_stepwise_workflow(self, tmp_path, csv_path, capsys):
        out = str(tmp_path / "w")
        assert main(["prepare", "--dataset", str(csv_path), "--out", out]) == 0
        assert main(["train", "--out", out, "--max-epochs", "2"]) == 0
        assert main(["recalibrate", "--out", out, "--method", "rec-kde"]) == 0
        assert main(["conformalize", "--out", out, "--method", "dcp"]) == 0
        capsys.readouterr()
        assert main(["evaluate", "--out", out, "--method", "rec-kde", "--null-sims", "1000", "--format", "json", "--format", "csv"]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert set(metrics) == {"pce", "crps", "nll", "std", "p_value"}
        assert main(["evaluate", "--out", out, "--method", "dcp", "--null-sims", "1000"]) == 0
        for name in ("split.npz", "model.pt", "training_log.csv", "calibration_map.json", "conformal.json", "report.json", "report.csv"):
            assert (tmp_path / "w" / name).exists(), name

    def test_train_rejects_posthoc_method(self, tmp_path, csv_path):
        out = str(tmp_path / "w")
        main(["prepare", "--dataset", str(csv_path), "--out", out])
        with pytest.raises(SystemExit):
            main(["train", "--out", out, "--method", "dcp"])

    def test_null_test(self, tmp_path, capsys):
        assert main(["null-test", "--n", "50", "--sims", "1000"]) == 0
        q = json.loads(capsys.readouterr().out)["quantiles"]
        assert q["0.5"] <= q["0.95"] <= q["0.999"]
        pits = tmp_path / "z.txt"
        np.savetxt(pits, np.full(40, 0.5))
        main(["null-test", "--pits", str(pits), "--sims", "1000"])
        assert json.loads(capsys.readouterr().out)["p_value"] < 0.01

    def test_run_compare_report(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(
            'dataset = "synthetic:linear:500"\nmethods = ["none", "rec-emp", "rec-lin"]\nseeds = [0, 1]\n'
            "hidden_layers = 1\nunits = 8\nmax_epochs = 2\nnull_sims = 1000\n"
        )
        out = str(tmp_path / "run")
        assert main(["run", "--config", str(cfg), "--out", out, "--format", "json", "--format", "csv"]) == 0
        capsys.readouterr()
        assert main(["compare", "--input", str(tmp_path / "run" / "report.csv"), "--metric", "crps", "--out", out]) == 0
        ranking = json.loads(capsys.readouterr().out)
        assert set(ranking["ranks"]) == {"none", "rec-emp", "rec-lin"}
        assert (tmp_path / "run" / "ranking_crps.json").exists()
        assert main(["report", "--input", str(tmp_path / "run" / "report.json"), "--out", str(tmp_path / "svg"), "--format", "svg"]) == 0
        assert len(list((tmp_path / "svg").glob("*.svg"))) == 6

    def test_missing_dataset(self):
        with pytest.raises(SystemExit):
            main(["run"])
