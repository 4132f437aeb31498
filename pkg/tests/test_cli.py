"""End-to-end tests for the command-line interface."""

import json

import numpy as np
import pytest

from gphawkes.cli import main

SIM_YAML = """\
model:
  a_s: 1.0
  sigma_s: 0.5
  a_g: 0.8
  sigma_g: 0.1
  alpha: 10.0
  alpha0: 2.5
  beta0: 0.05
method: vi
vi:
  inducing_count: 15
  grid_count: 80
  max_rounds: 10
  learn_hypers: false
seed: 1
window: 1.0
simulate:
  lam: 40.0
"""

GIBBS_YAML = SIM_YAML.replace(
    "method: vi", "method: gibbs").replace(
    """vi:
  inducing_count: 15
  grid_count: 80
  max_rounds: 10
  learn_hypers: false""",
    """gibbs:
  iterations: 10
  burn_in: 0
  grid_count: 30
  learn_hypers: false""")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def sim_dir(workdir):
    cfg = workdir / "sim.yaml"
    cfg.write_text(SIM_YAML)
    out = workdir / "sim"
    assert main(["simulate", "--config", str(cfg),
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def vi_dir(workdir, sim_dir):
    out = workdir / "vi"
    assert main(["fit", "--config", str(workdir / "sim.yaml"),
                 "--events", str(sim_dir / "events.csv"),
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def gibbs_dir(workdir, sim_dir):
    cfg = workdir / "gibbs.yaml"
    cfg.write_text(GIBBS_YAML)
    out = workdir / "gibbs"
    assert main(["fit", "--config", str(cfg),
                 "--events", str(sim_dir / "events.csv"),
                 "--out", str(out)]) == 0
    return out


class TestSimulate:
    def test_artifacts(self, sim_dir):
        for name in ("events.csv", "config.yaml", "truth_intensity.csv",
                     "intensity.png", "truth/s.csv", "truth/g.csv",
                     "truth/meta.json"):
            assert (sim_dir / name).exists(), name
        rows = np.loadtxt(sim_dir / "truth_intensity.csv", delimiter=",",
                          skiprows=1)
        assert rows.shape == (1000, 3)
        assert np.all(rows[:, 2] > 0)

    def test_deterministic(self, workdir, sim_dir):
        out2 = workdir / "sim2"
        assert main(["simulate", "--config", str(workdir / "sim.yaml"),
                     "--out", str(out2)]) == 0
        assert (out2 / "events.csv").read_bytes() == \
            (sim_dir / "events.csv").read_bytes()

    def test_zero_window_rejected(self, workdir, tmp_path):
        code = main(["simulate", "--config", str(workdir / "sim.yaml"),
                     "--out", str(tmp_path / "x"),
                     "--set", "window=0"])
        assert code == 1

    def test_output_root_env(self, workdir, tmp_path, monkeypatch):
        monkeypatch.setenv("GPHAWKES_OUTPUT_ROOT", str(tmp_path))
        assert main(["simulate", "--config", str(workdir / "sim.yaml"),
                     "--out", "under-root"]) == 0
        assert (tmp_path / "under-root" / "events.csv").exists()


class TestFit:
    def test_vi_artifacts(self, vi_dir):
        for name in ("manifest", "summary", "elbo_trace.csv", "elbo.png",
                     "predictive_intensity.csv", "phi_band.png",
                     "intensity.png", "config.yaml"):
            assert (vi_dir / name).exists(), name
        trace = np.loadtxt(vi_dir / "elbo_trace.csv", delimiter=",",
                           skiprows=1)
        assert trace.size >= 1

    def test_gibbs_sample_count_matches_iterations(self, gibbs_dir):
        lam = np.loadtxt(gibbs_dir / "samples" / "lam.csv", delimiter=",",
                         skiprows=1)
        assert lam.shape == (10,)
        assert (gibbs_dir / "chain.png").exists()

    def test_config_override_applies(self, workdir, sim_dir, tmp_path):
        out = tmp_path / "fit"
        assert main(["fit", "--config", str(workdir / "sim.yaml"),
                     "--events", str(sim_dir / "events.csv"),
                     "--out", str(out),
                     "--set", "vi.grid_count=60"]) == 0
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["config"]["grid_count"] == 60

    def test_unknown_override_rejected(self, workdir, sim_dir, tmp_path):
        code = main(["fit", "--config", str(workdir / "sim.yaml"),
                     "--events", str(sim_dir / "events.csv"),
                     "--out", str(tmp_path / "fit"),
                     "--set", "vi.bogus=1"])
        assert code == 1

    def test_multivariate_bundles_per_dimension(self, workdir, tmp_path):
        events = tmp_path / "mv.csv"
        rng = np.random.default_rng(0)
        times = np.sort(rng.uniform(0, 1, 16))
        labels = rng.integers(0, 2, 16)
        lines = ["# T=1", "time,type"]
        lines += [f"{t:.6f},{l}" for t, l in zip(times, labels)]
        events.write_text("\n".join(lines) + "\n")
        cfg = tmp_path / "mv.yaml"
        cfg.write_text(SIM_YAML.replace("inducing_count: 15",
                                        "inducing_count: 8")
                       .replace("grid_count: 80", "grid_count: 50")
                       .replace("max_rounds: 10", "max_rounds: 4"))
        out = tmp_path / "mvfit"
        assert main(["fit", "--config", str(cfg),
                     "--events", str(events), "--out", str(out)]) == 0
        for r in (0, 1):
            assert (out / f"dim{r}" / "manifest").exists()
            assert (out / f"dim{r}" / "predictive_intensity.csv").exists()


class TestGof:
    def test_univariate_report(self, sim_dir, vi_dir, capsys):
        assert main(["gof", "--fit", str(vi_dir),
                     "--events", str(sim_dir / "events.csv"),
                     "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert 0.0 <= payload["p_value"] <= 1.0
        gof_dir = vi_dir / "gof"
        assert (gof_dir / "qq.csv").exists()
        assert (gof_dir / "qq.png").exists()

    def test_deterministic_p_value(self, sim_dir, vi_dir, tmp_path, capsys):
        args = ["gof", "--fit", str(vi_dir),
                "--events", str(sim_dir / "events.csv"), "--json"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        p1 = json.loads(capsys.readouterr().out)["p_value"]
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        p2 = json.loads(capsys.readouterr().out)["p_value"]
        assert p1 == p2

    def test_unreadable_fit_is_io_error(self, sim_dir, tmp_path):
        code = main(["gof", "--fit", str(tmp_path / "nothing"),
                     "--events", str(sim_dir / "events.csv")])
        assert code == 3


class TestEvaluate:
    def test_metrics_written(self, sim_dir, vi_dir, capsys):
        assert main(["evaluate", "--fit", str(vi_dir),
                     "--events", str(sim_dir / "events.csv"),
                     "--t-start", "0.5", "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert np.isfinite(payload["test_log_lik"])
        assert payload["n_events"] >= 1
        assert (vi_dir / "eval" / "metrics.json").exists()

    def test_empty_test_set_rejected(self, sim_dir, vi_dir):
        code = main(["evaluate", "--fit", str(vi_dir),
                     "--events", str(sim_dir / "events.csv"),
                     "--t-start", "1.0"])
        assert code == 1

    def test_identical_inputs_identical_metric(self, sim_dir, vi_dir,
                                               tmp_path, capsys):
        args = ["evaluate", "--fit", str(vi_dir),
                "--events", str(sim_dir / "events.csv"),
                "--t-start", "0.5", "--json"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        m1 = json.loads(capsys.readouterr().out)
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        m2 = json.loads(capsys.readouterr().out)
        assert m1 == m2


class TestCompare:
    def test_side_by_side(self, sim_dir, vi_dir, gibbs_dir, tmp_path,
                          capsys):
        out = tmp_path / "cmp"
        assert main(["compare", "--fits", str(vi_dir), str(gibbs_dir),
                     "--truth", str(sim_dir),
                     "--test-events", str(sim_dir / "events.csv"),
                     "--t-start", "0.5",
                     "--out", str(out)]) == 0
        header = (out / "compare.csv").read_text().splitlines()[0]
        assert header == "t,truth,vi,gibbs"
        table = (out / "compare_summary.csv").read_text().splitlines()
        assert table[0] == "method,nrmse,test_log_lik_per_event"
        assert len(table) == 3
        vals = np.loadtxt(out / "compare.csv", delimiter=",", skiprows=1)
        assert vals.shape[1] == 4 and np.all(np.isfinite(vals))
        assert (out / "overlay.png").exists()

    def test_single_fit_degenerate(self, vi_dir, tmp_path):
        out = tmp_path / "cmp1"
        assert main(["compare", "--fits", str(vi_dir),
                     "--out", str(out)]) == 0
        header = (out / "compare.csv").read_text().splitlines()[0]
        assert header == "t,vi"
