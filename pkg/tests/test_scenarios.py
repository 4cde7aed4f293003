import json

import numpy as np
import pytest

from attn_margin.config import DatasetSource, ExperimentConfig, ScenarioName, SourceKind
from attn_margin.datasets import builtin_dataset
from attn_margin.errors import InvalidInputError, UnknownScenarioError
from attn_margin.losses import LossKind
from attn_margin.persistence import CENSUS_HEADER, ArtifactStore
from attn_margin.scenarios import (
    DESCRIPTIONS,
    SCENARIOS,
    census,
    initializations,
    key_span_projector,
    loss_bias_probe,
    run_scenario,
    scenario_name,
)


def _config(name, tmp_path, **fields):
    return ExperimentConfig(scenario=name, output_dir=tmp_path, **fields)


def test_registry_covers_every_scenario():
    assert set(SCENARIOS) == set(ScenarioName)
    assert set(DESCRIPTIONS) == set(ScenarioName)


def test_scenario_name():
    assert scenario_name("cone_failure") is ScenarioName.CONE_FAILURE
    with pytest.raises(UnknownScenarioError):
        scenario_name("fig9")


def test_key_span_projector_drops_score_coordinate(fig1_global):
    projector = key_span_projector(fig1_global.dataset)
    np.testing.assert_allclose(projector, np.diag([1.0, 1.0, 0.0]), atol=1e-12)
    starts = initializations(fig1_global.dataset, 4, seed=0)
    np.testing.assert_array_equal(starts[0], np.zeros(3))
    for start in starts[1:]:
        assert np.linalg.norm(start) == pytest.approx(1.0)
        assert start[2] == pytest.approx(0.0, abs=1e-12)


def test_lemma2_equivalence_writes_summary(tmp_path):
    report = run_scenario(_config("lemma2_equivalence", tmp_path))
    assert report.passed
    assert report.artifacts == ["w_mapping.csv", "summary.json"]
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert summary["scenario"] == "lemma2_equivalence"
    assert summary["passed"] is True
    assert summary["checks"][0]["name"] == "max_deviation"


def test_fig1_global(tmp_path):
    report = run_scenario(_config("fig1_global", tmp_path))
    assert report.passed
    assert (tmp_path / "trajectory_init0.csv").exists()
    assert (tmp_path / "regularization_path.csv").exists()
    assert report.details["instance"] == "fig1_global"


def test_random_source_runs_through_convergence_scenario(tmp_path):
    source = DatasetSource(kind=SourceKind.RANDOM, n=2, T=3, d=4, seed=1)
    config = _config("fig1_global", tmp_path, dataset=source, radii=[1.0, 2.0])
    report = run_scenario(config)
    assert report.details["instance"].startswith("random(")
    assert len([name for name in report.artifacts if name.startswith("trajectory_init")]) == 8


def test_file_source_needs_head(tmp_path):
    instance = builtin_dataset("fig1_global")
    path = tmp_path / "plain.json"
    path.write_text(json.dumps(instance.dataset.to_json_dict()), encoding="utf-8")
    config = _config("fig1_global", tmp_path, dataset=DatasetSource(kind=SourceKind.FILE, path=path))
    with pytest.raises(InvalidInputError):
        run_scenario(config)


def test_cone_failure(tmp_path):
    report = run_scenario(_config("cone_failure", tmp_path))
    assert report.passed
    assert {"cone_path_midpoint.csv", "cone_path_lmm.csv"} <= set(report.artifacts)


def test_saturation_dynamics(tmp_path):
    report = run_scenario(_config("saturation_dynamics", tmp_path))
    checks = {check.name: check for check in report.checks}
    assert checks["normalized_saturates_first"].passed
    assert checks["normalized_norm_growth_steady"].passed


@pytest.mark.parametrize("kind", [LossKind.CORRELATION, LossKind.LOGISTIC])
def test_loss_bias_symmetric_at_equal_scores(kind):
    probe = loss_bias_probe(1.0, kind)
    g1, g2 = probe.grad_norms
    assert g1 == pytest.approx(g2, rel=0.05)
    assert np.linalg.norm(probe.probe_point) >= 5.0 - 1e-9


def test_loss_bias_orders_inputs():
    corr = loss_bias_probe(3.0, LossKind.CORRELATION)
    logistic = loss_bias_probe(3.0, LossKind.LOGISTIC)
    assert corr.grad_norms[1] > corr.grad_norms[0]
    assert logistic.grad_norms[0] > logistic.grad_norms[1]


def test_fig3_loss_bias(tmp_path):
    report = run_scenario(_config("fig3_loss_bias", tmp_path))
    assert report.passed
    rows = (tmp_path / "loss_bias.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "kind,C,grad_norm_1,grad_norm_2"
    assert len(rows) == 1 + 2 * 4


def test_census_is_deterministic_and_complete():
    first = census([2, 4], trials=3, seed=5)
    second = census([2, 4], trials=3, seed=5)
    assert [t.model_dump() for t in first.trials] == [t.model_dump() for t in second.trials]
    assert [row.d for row in first.rows] == [2, 4]
    for row in first.rows:
        assert row.trials == 3
        assert row.lmm_matched >= row.gmm_matched
        assert row.residual == pytest.approx(1.0 - row.non_saturated - row.lmm_matched)
    with pytest.raises(InvalidInputError):
        census([2], trials=0, seed=0)


@pytest.mark.slow
def test_census_process_pool_matches_serial():
    serial = census([4], trials=4, seed=2)
    pooled = census([4], trials=4, seed=2, jobs=2)
    assert [t.model_dump() for t in serial.trials] == [t.model_dump() for t in pooled.trials]


@pytest.mark.slow
@pytest.mark.parametrize(
    "name",
    ["fig1_local", "fig1_multi", "fig2_joint_support", "fig2_joint_nonsupport", "fig2_probabilities"],
)
def test_slow_scenarios_pass(name, tmp_path):
    report = run_scenario(_config(name, tmp_path))
    assert report.passed, [check for check in report.checks if check.gated and not check.passed]


@pytest.mark.slow
def test_fig4_census_small(tmp_path):
    report = run_scenario(_config("fig4_census", tmp_path, dims=[2, 64], trials=40))
    assert (tmp_path / "census_summary.csv").exists()
    assert (tmp_path / "score_gap_histogram.csv").exists()
    rows = report.details["rows"]
    assert [row["d"] for row in rows] == [2, 64]

    assert rows[0]["non_saturated"] > rows[-1]["non_saturated"]
    checks = {check.name: check for check in report.checks}
    assert checks["non_saturated_decreases"].passed
    assert checks["mean_matched_correlation"].value >= 0.98
    assert checks["negative_gap_fraction"].value <= 0.05
    assert report.passed, [check for check in report.checks if check.gated and not check.passed]

    lines = (tmp_path / "census.csv").read_text().splitlines()
    trials = [dict(zip(lines[0].split(","), line.split(","))) for line in lines[1:]]
    assert len(trials) == 2 * 40
    for trial in trials:
        if trial["gmm_match"] == "1":
            assert trial["lmm_match"] == "1"


def test_census_streams_rows_per_dimension(tmp_path):
    store = ArtifactStore(tmp_path)
    report = census([2, 3], trials=2, seed=1, store=store)
    lines = (tmp_path / "census.csv").read_text().splitlines()
    assert lines[0] == ",".join(CENSUS_HEADER)
    assert lines.count(lines[0]) == 1
    assert len(lines) == 1 + 2 * 2
    assert [line.split(",")[0] for line in lines[1:]] == ["2", "2", "3", "3"]
    assert len(report.trials) == 4


def test_fig4_census_replaces_stale_rows(tmp_path):
    (tmp_path / "census.csv").write_text("stale\n")
    run_scenario(_config("fig4_census", tmp_path, dims=[2], trials=2))
    lines = (tmp_path / "census.csv").read_text().splitlines()
    assert lines[0] == ",".join(CENSUS_HEADER)
    assert len(lines) == 1 + 2


def test_run_scenario_accepts_explicit_store(tmp_path):
    store = ArtifactStore(tmp_path / "elsewhere")
    run_scenario(_config("lemma2_equivalence", tmp_path / "unused"), store=store)
    assert (tmp_path / "elsewhere" / "summary.json").exists()


def test_unknown_target_selection(tmp_path):
    with pytest.raises(InvalidInputError):
        run_scenario(_config("fig1_global", tmp_path, targets=["lmm"]))


@pytest.mark.slow
def test_fig1_local_reports_cone_diagnostics(tmp_path):
    report = run_scenario(_config("fig1_local", tmp_path))
    checks = {check.name: check for check in report.checks}
    assert not checks["local_gradient_positive"].gated
    assert not checks["keys_full_rank"].gated
    assert report.details["gradient_bounds"]["samples"] == 50
    assert report.details["general_position"]["ranks"] == [2]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "gradient_bounds" in summary["details"]


@pytest.mark.slow
def test_fig2_joint_support_reports_target_margin(tmp_path):
    report = run_scenario(_config("fig2_joint_support", tmp_path))
    margins = report.details["label_margins"]
    assert margins["label_margin"] == pytest.approx(1.0, rel=1e-6)
    assert margins["target_margin"] > 0.9
    assert not {check.name: check for check in report.checks}["target_label_margin"].gated
