import json
import xml.etree.ElementTree as ET
from importlib.resources import files

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings, strategies as st

from tdcrlearn.cli import main
from tdcrlearn.config import DEFAULTS, ConfigError, ExperimentConfig
from tdcrlearn.plant import PlantParams
from tdcrlearn.reports import fmt, read_csv, svg_lineplot, write_csv, write_svg
from tdcrlearn.suites import METRIC_COLUMNS, RunResult, mean_metric, robustness_suite, summarize

SMOKE = str(files("tdcrlearn") / "configs" / "smoke.yaml")
DEFAULT = str(files("tdcrlearn") / "configs" / "default.yaml")


# -- config ---------------------------------------------------------------------------------

def test_defaults_and_shipped_configs_validate():
    base = ExperimentConfig.load()
    assert base.values == DEFAULTS
    assert ExperimentConfig.load(DEFAULT).digest() == base.digest()
    smoke = ExperimentConfig.load(SMOKE)
    assert smoke["dyn.hidden"] == 8 and smoke["eval.shapes"] == ["circle", "line"]


def test_unknown_key_and_bad_types_are_rejected_by_name(tmp_path):
    with pytest.raises(ConfigError, match="dyn.hiddn"):
        ExperimentConfig.load(overrides=["dyn.hiddn=3"])
    bad = tmp_path / "bad.yaml"
    bad.write_text("pol:\n  lamda: 0.9\n")
    with pytest.raises(ConfigError, match="pol.lamda"):
        ExperimentConfig.load(bad)
    with pytest.raises(ConfigError, match="dyn.hidden"):
        ExperimentConfig.load(overrides=["dyn.hidden=abc"])
    with pytest.raises(ConfigError, match="pol"):
        ExperimentConfig.load(overrides=["pol.lambda=1.5"])
    with pytest.raises(ConfigError, match="dyn.checkpoint_path"):
        ExperimentConfig.load(overrides=[f"dyn.checkpoint_path={tmp_path / 'none.tdck'}"])
    with pytest.raises(ConfigError):
        ExperimentConfig.load(overrides=["noequals"])


def test_overrides_seed_and_run_dir():
    cfg = ExperimentConfig.load(overrides=["pol.nr=40", "eval.speeds=[1.0, 2.5]"], seed=3)
    assert cfg["pol.nr"] == 40 and cfg.pol_train().nr == 40 and cfg["eval.speeds"] == [1.0, 2.5]
    assert cfg["seed"] == 3 and cfg.run_dir("out").name == f"{cfg.digest()}-seed3"
    assert ExperimentConfig.load(seed=1).digest() == ExperimentConfig.load(seed=2).digest()
    assert cfg.digest() != ExperimentConfig.load().digest()
    assert isinstance(cfg["plant.u_max"], float)


# -- reports -----------------------------------------------------------------------------------

def test_fmt_cells():
    assert fmt(True) == "true" and fmt(np.int64(3)) == "3"
    assert fmt(float("nan")) == "" and fmt(0.1) == "0.1" and fmt("x") == "x"


def test_csv_reemission_is_byte_identical(tmp_path):
    rows = [{"a": 1, "b": 0.123456789012345, "c": float("nan")}, {"a": 2, "b": -1e-9, "c": "s"}]
    p1 = write_csv(tmp_path / "x.csv", ("a", "b", "c"), rows)
    p2 = write_csv(tmp_path / "y.csv", ("a", "b", "c"), rows)
    assert p1.read_bytes() == p2.read_bytes()
    back = read_csv(p1)
    assert back[0] == {"a": "1", "b": "0.123456789", "c": ""}
    p3 = write_csv(tmp_path / "z.csv", ("a", "b", "c"), back)
    assert p3.read_bytes() == p1.read_bytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.booleans())
def test_svg_is_well_formed_and_covers_extrema(ys, equal):
    y = np.array(ys)
    x = np.arange(len(y), dtype=float)
    text, (x0, x1, y0, y1) = svg_lineplot({"a & b": (x, y), "c": (x, -y)}, "t <1>", "x", "y",
                                          equal_aspect=equal)
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2
    both = np.concatenate([y, -y])
    assert x0 <= x.min() and x1 >= x.max() and y0 <= both.min() and y1 >= both.max()


def test_write_svg_file(tmp_path):
    p = write_svg(tmp_path / "plots" / "p.svg", {"s": ([0, 1], [2, float("nan")])}, "t", "x", "y")
    ET.parse(p)


# -- suites --------------------------------------------------------------------------------------

def test_aborted_runs_carry_flag_and_no_metrics():
    from tdcrlearn.data.harness import Episode
    ep = Episode(t=np.zeros(0), u=np.zeros((0, 9)), o=np.zeros((0, 24)), r=np.zeros((0, 6)))
    r = summarize("hybrid", "circle", 1.0, 0.1, 0, ep, False, "why", 2.0)
    assert not r.completed and np.isnan(r.pos_err_mm) and np.isnan(r.osc_index) and r.reason == "why"
    assert set(r.row()) == set(METRIC_COLUMNS)


def test_robustness_grid_enumeration():
    res = robustness_suite(PlantParams(), ["feedback", "hybrid"], ["circle", "line"], [1.0, 2.5], [0.0, 0.1],
                           [0], max_steps=60)
    assert len(res) == 2 * 2 * 2 * 2
    keys = {(r.controller, r.shape, r.speed, r.payload) for r in res}
    assert len(keys) == 16
    assert all(r.steps == 60 and r.completed for r in res)
    assert np.isfinite(mean_metric(res, "pos_err_mm", controller="hybrid"))
    assert np.isnan(mean_metric(res, "pos_err_mm", controller="policy"))


# -- CLI --------------------------------------------------------------------------------------------

def invoke(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


def test_cli_unknown_key_exits_nonzero_naming_key(tmp_path):
    res = CliRunner().invoke(main, ["generate-data", "--set", "data.sesions=2", "--out", str(tmp_path)])
    assert res.exit_code != 0 and "data.sesions" in res.output


def test_cli_missing_stage_inputs_fail_cleanly(tmp_path):
    res = CliRunner().invoke(main, ["train-dynamics", "--config", SMOKE, "--out", str(tmp_path)])
    assert res.exit_code != 0 and "generate-data" in res.output


def test_cli_gradcheck_passes(tmp_path):
    res = invoke("gradcheck", "--out", str(tmp_path))
    assert res.exit_code == 0
    assert "policy_projection_dynamics" in res.output and "max relative error" in res.output


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    logs = {}
    for stage in ("generate-data", "train-dynamics", "eval-dynamics", "train-policy", "eval-policy", "ablate"):
        res = invoke(stage, "--config", SMOKE, "--out", str(out), "--seed", "0")
        assert res.exit_code == 0, res.output
        logs[stage] = res.output
    (run_dir,) = list(out.iterdir())
    return out, run_dir, logs


def test_smoke_pipeline_artifacts(smoke_run):
    _, run_dir, logs = smoke_run
    for name in ("config.json", "data/manifest.json", "checkpoints/dynamics.tdck", "checkpoints/policy.tdck",
                 "metrics.csv", "curves.csv", "long_horizon.csv", "ablation.csv", "ablation_curves.csv",
                 "dyn_loss.csv", "policy_loss.csv"):
        assert (run_dir / name).exists(), name
    for svg in (run_dir / "plots").glob("*.svg"):
        ET.parse(svg)
    rows = read_csv(run_dir / "metrics.csv")
    assert len(rows) == 4 * 2 * 2 * 2  # controllers x shapes x speeds x payloads
    assert {r["controller"] for r in rows} == {"policy", "feedback", "feedforward", "hybrid"}
    for r in rows:
        assert r["completed"] in ("true", "false")
        assert (r["pos_err_mm"] == "") == (r["completed"] == "false")
    assert json.loads((run_dir / "config.json").read_text())["seed"] == 0
    assert json.loads(logs["train-policy"])["heldout_after"] >= 0


def test_smoke_stages_are_idempotent(smoke_run):
    out, run_dir, _ = smoke_run
    before = (run_dir / "checkpoints" / "dynamics.tdck").read_bytes()
    res = invoke("train-dynamics", "--config", SMOKE, "--out", str(out), "--seed", "0")
    assert "exists" in res.output
    assert (run_dir / "checkpoints" / "dynamics.tdck").read_bytes() == before
