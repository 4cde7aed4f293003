"""
Scenario registry
=================

Each scenario builds its instance, runs the optimizers, writes CSV/JSON
artifacts through :class:`ArtifactStore` and returns a :class:`ScenarioReport`
whose gated checks decide the exit status of ``attn-margin run``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, OptimizerMethod, ScenarioName, SourceKind
from .datasets import (
    BuiltinInstance,
    builtin_dataset,
    generate_random_dataset,
    load_dataset,
    loss_bias_instance,
)
from .errors import InvalidInputError, UnknownScenarioError
from .geometry import (
    cone_parameters,
    general_position_report,
    label_margin_probe,
    local_gradient_bounds,
    local_optimality_check,
    local_step_size,
    optimal_tokens,
    sample_cone,
    saturation_metrics,
    score_gap,
    selected_tokens,
    svm_neighbors,
)
from .linalg import correlation, unit
from .losses import LossKind
from .model import per_input_grad_p, smoothness_bound, token_scores
from .optimizers import (
    cone_restricted_path,
    gd,
    gd_on_W,
    joint_normalized_gd,
    joint_reg_path,
    normalized_gd,
    regularization_path,
)
from .persistence import CENSUS_HEADER, ArtifactStore
from .schemas import (
    AttentionParams,
    CensusReport,
    CensusRow,
    CensusTrial,
    ConeSpec,
    LossBiasReport,
    ScenarioCheck,
    ScenarioReport,
    TokenDataset,
    Trajectory,
)
from .svm import att_svm, label_svm, relaxed_att_svm

LOGGER = logging.getLogger(__name__)

SATURATION_LEVEL = 1.0 - 1e-5
FAST_SATURATION_LEVEL = 1.0 - 1e-3
MATCH_CORRELATION = 0.99
GAP_BIN = 0.02
CENSUS_N = 6
CENSUS_T = 10
CENSUS_STEPS = 1000
CENSUS_ETA = 1.0
INITS = 8
LOCAL_BOUND_SAMPLES = 50
BIAS_ETA = 0.1
BIAS_STEPS = 200
BIAS_PROBE_NORM = 5.0

DESCRIPTIONS: Dict[ScenarioName, str] = {
    ScenarioName.FIG1_GLOBAL: "GD from several starts converges to the globally optimal max-margin direction",
    ScenarioName.FIG1_LOCAL: "starts inside the cone of a locally optimal selection converge to it; others to the global one",
    ScenarioName.FIG1_MULTI: "two inputs converge jointly to their shared max-margin direction",
    ScenarioName.FIG2_JOINT_SUPPORT: "joint (v, p) path aligns with the label SVM and ATT-SVM when all inputs are support vectors",
    ScenarioName.FIG2_JOINT_NONSUPPORT: "joint path follows the relaxed ATT-SVM when one input is not a support vector",
    ScenarioName.FIG2_PROBABILITIES: "joint normalized GD: optimal-token and label probabilities over time",
    ScenarioName.FIG3_LOSS_BIAS: "per-input gradient magnitudes under the correlation and logistic losses",
    ScenarioName.FIG4_CENSUS: "random-trial census of saturation and max-margin matching across dimensions",
    ScenarioName.SATURATION_DYNAMICS: "normalized GD saturates faster and keeps growing the attention norm",
    ScenarioName.LEMMA2_EQUIVALENCE: "GD on W tracks GD on p through W = u p^T / ||u||^2",
    ScenarioName.CONE_FAILURE: "cone-restricted path around a non-optimal direction stalls or drifts",
}


def _check(name: str, value: Optional[float], threshold: Optional[float], passed: bool, gated: bool = True) -> ScenarioCheck:
    return ScenarioCheck(
        name=name,
        value=None if value is None or not math.isfinite(value) else float(value),
        threshold=threshold,
        passed=bool(passed),
        gated=gated,
    )


def _instance(config: ExperimentConfig, default: str) -> BuiltinInstance:
    source = config.dataset
    if source.kind is SourceKind.BUILTIN:
        return builtin_dataset(source.name or default)
    if source.kind is SourceKind.FILE:
        dataset, v = load_dataset(source.path)
        if v is None:
            raise InvalidInputError(f"{source.path} has no head vector 'v'")
        name = str(source.path)
    else:
        dataset, v = generate_random_dataset(source.n, source.T, source.d, source.seed)
        name = f"random(n={source.n}, T={source.T}, d={source.d}, seed={source.seed})"
    best = optimal_tokens(token_scores(dataset, v))
    if not best.unique:
        raise InvalidInputError(f"{name} has tied optimal tokens; no unique global selection")
    return BuiltinInstance(name=name, description="configured dataset", dataset=dataset, v=v, selections={"gmm": best})


def key_span_projector(dataset: TokenDataset) -> np.ndarray:
    """Orthogonal projector onto the span of all keys; p outside it never changes the loss."""
    stacked = np.vstack(dataset.keys)
    _, sv, vt = np.linalg.svd(stacked, full_matrices=False)
    rank = int(np.sum(sv > 1e-12 * max(1.0, float(sv.max(initial=0.0)))))
    basis = vt[:rank]
    return basis.T @ basis


def initializations(dataset: TokenDataset, count: int, seed: int, scale: float = 1.0) -> List[np.ndarray]:
    """Origin plus ``count - 1`` random starts in the key span, drawn with ``default_rng([seed, k])``."""
    projector = key_span_projector(dataset)
    starts = [np.zeros(dataset.d)]
    for k in range(1, count):
        rng = np.random.default_rng([seed, k])
        starts.append(scale * unit(projector @ rng.normal(size=dataset.d)))
    return starts


def _run_optimizer(config: ExperimentConfig, instance: BuiltinInstance, p0: np.ndarray, target, default_eta: float) -> Trajectory:
    spec = config.optimizer
    if spec.method is OptimizerMethod.GD:
        return gd(instance.dataset, instance.v, config.loss, p0, eta=spec.eta, max_steps=spec.steps,
                  grad_tol=spec.grad_tol, target=target)
    return normalized_gd(instance.dataset, instance.v, config.loss, p0, spec.eta or default_eta,
                         max_steps=spec.steps, target=target)


def _convergence_scenario(config: ExperimentConfig, store: ArtifactStore, default: str) -> ScenarioReport:
    instance = _instance(config, default)
    if not config.targets:
        raise InvalidInputError("at least one target selection is needed")
    targets = {name: instance.target(name) for name in config.targets}
    target = targets[config.targets[0]]
    report = ScenarioReport(scenario=config.scenario.value)
    finals = []
    others: Dict[str, List[float]] = {name: [] for name in config.targets[1:]}
    for k, p0 in enumerate(initializations(instance.dataset, INITS, config.seed)):
        run = _run_optimizer(config, instance, p0, target, default_eta=0.1)
        store.write_trajectory(f"trajectory_init{k}.csv", run)
        report.artifacts.append(f"trajectory_init{k}.csv")
        finals.append(run.steps[-1].correlation)
        for name in others:
            others[name].append(correlation(run.final_iterate, targets[name]))
    worst = min(finals)
    report.checks.append(_check("min_final_correlation", worst, MATCH_CORRELATION, worst >= MATCH_CORRELATION))

    path = regularization_path(instance.dataset, instance.v, config.loss, config.radii, target, seed=config.seed)
    store.write_path("regularization_path.csv", path)
    report.artifacts.append("regularization_path.csv")
    report.checks.append(
        _check("path_final_correlation", path[-1].correlation, 0.98, path[-1].correlation >= 0.98, gated=False)
    )
    report.details.update(
        {"instance": instance.name, "figure_approximate": instance.figure_approximate, "target": target,
         "final_correlations": finals, "other_targets": others}
    )
    return report


def _fig1_global(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    return _convergence_scenario(config, store, "fig1_global")


def _fig1_multi(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    return _convergence_scenario(config, store, "fig1_multi")


def _fig1_local(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    instance = builtin_dataset("fig1_local")
    dataset, v = instance.dataset, instance.v
    lmm_selection = instance.selections["lmm"]
    lmm_svm = att_svm(dataset, lmm_selection)
    lmm, gmm = lmm_svm.solution, instance.target("gmm")
    params = cone_parameters(dataset, lmm_svm, lmm_selection, token_scores(dataset, v))
    limit = smoothness_bound(dataset, v, config.loss)
    local_eta, mu_binds = local_step_size(limit, params)
    eta = config.optimizer.eta or 0.1

    projector = key_span_projector(dataset)
    rng = np.random.default_rng(config.seed)
    cone = ConeSpec(q=lmm, mu=params.mu)
    radius = 5.0 * float(np.linalg.norm(lmm))
    inside = [projector @ p for p in sample_cone(cone, radius, INITS // 2, rng)]
    outside = [unit(gmm)] + [
        np.array([math.cos(angle), math.sin(angle), 0.0]) for angle in (0.5 * math.pi, 0.75 * math.pi, math.pi)
    ]

    report = ScenarioReport(scenario=config.scenario.value)
    inside_corr, outside_corr = [], []
    for label, starts, target, sink in (("inside", inside, lmm, inside_corr), ("outside", outside, gmm, outside_corr)):
        for k, p0 in enumerate(starts):
            run = normalized_gd(dataset, v, config.loss, p0, eta, max_steps=config.optimizer.steps, target=target)
            name = f"trajectory_{label}{k}.csv"
            store.write_trajectory(name, run)
            report.artifacts.append(name)
            sink.append(run.steps[-1].correlation)

    report.checks.append(
        _check("inside_min_lmm_correlation", min(inside_corr), MATCH_CORRELATION, min(inside_corr) >= MATCH_CORRELATION)
    )
    report.checks.append(
        _check("outside_max_gmm_correlation", max(outside_corr), MATCH_CORRELATION, max(outside_corr) >= MATCH_CORRELATION)
    )
    # informational: -<grad, p^mm> against the softmax tails over the cone the inside starts use
    bounds = local_gradient_bounds(
        dataset, v, config.loss, lmm_svm, lmm_selection, ConeSpec(q=lmm, mu=params.mu, r0=radius),
        samples=LOCAL_BOUND_SAMPLES, seed=config.seed,
    )
    position = general_position_report(dataset, lmm_selection)
    report.checks.append(_check("local_gradient_positive", bounds.lower, None, bounds.all_positive, gated=False))
    report.checks.append(_check("keys_full_rank", position.overall_rank, None, position.full_rank, gated=False))
    report.details.update(
        {"lmm": lmm, "gmm": gmm, "cone": params.model_dump(), "local_step": local_eta, "mu_binds": mu_binds,
         "gradient_bounds": bounds.model_dump(), "general_position": position.model_dump(),
         "figure_approximate": instance.figure_approximate}
    )
    return report


def _joint_targets(instance: BuiltinInstance) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    dataset = instance.dataset
    selection = instance.selections["gmm"]
    features = [x[alpha] for x, alpha in zip(dataset.tokens, selection.indices)]
    label = label_svm(features, dataset.labels)
    return label.solution, att_svm(dataset, selection).solution, label.support_indices


def _fig2_joint(config: ExperimentConfig, store: ArtifactStore, support_case: bool) -> ScenarioReport:
    instance = builtin_dataset("fig2_support" if support_case else "fig2_nonsupport")
    v_mm, p_mm, support = _joint_targets(instance)
    report = ScenarioReport(scenario=config.scenario.value)

    if support_case:
        points = joint_reg_path(instance.dataset, config.joint_schedule, v_target=v_mm, p_target=p_mm)
        last = points[-1]
        report.checks.append(_check("v_correlation", last.v_correlation, 0.98, last.v_correlation >= 0.98))
        report.checks.append(_check("p_correlation", last.p_correlation, 0.98, last.p_correlation >= 0.98))
        report.details.update({"v_mm": v_mm, "p_mm": p_mm})
    else:
        relaxed = relaxed_att_svm(instance.dataset, instance.selections["gmm"], support).solution
        points = joint_reg_path(instance.dataset, config.joint_schedule, v_target=v_mm, p_target=relaxed)
        last = points[-1]
        to_mm = correlation(last.p, p_mm)
        report.checks.append(_check("p_relax_correlation", last.p_correlation, 0.98, last.p_correlation >= 0.98))
        report.checks.append(
            _check("p_relax_minus_p_mm", last.p_correlation - to_mm, 0.0, last.p_correlation > to_mm)
        )
        report.details.update({"v_mm": v_mm, "p_mm": p_mm, "p_relax": relaxed, "label_support": support,
                               "p_mm_correlation": to_mm})
    margins = label_margin_probe(instance.dataset, v_mm, instance.selections["gmm"], last.p)
    report.checks.append(_check("target_label_margin", margins.target_margin, None, True, gated=False))
    report.details["label_margins"] = margins.model_dump()
    store.write_joint_path("joint_path.csv", points)
    report.artifacts.append("joint_path.csv")
    report.details["figure_approximate"] = instance.figure_approximate
    return report


def _fig2_joint_support(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    return _fig2_joint(config, store, support_case=True)


def _fig2_joint_nonsupport(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    return _fig2_joint(config, store, support_case=False)


def _fig2_probabilities(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    instance = builtin_dataset("fig2_support")
    d = instance.dataset.d
    run = joint_normalized_gd(
        instance.dataset,
        config.loss,
        np.zeros(d),
        np.zeros(d),
        config.optimizer.eta or 0.1,
        max_steps=config.optimizer.steps,
        selection=instance.selections["gmm"],
    )
    store.write_joint_trajectory("joint_trajectory.csv", run)
    final = run.steps[-1]
    report = ScenarioReport(scenario=config.scenario.value, artifacts=["joint_trajectory.csv"])
    report.checks.append(_check("final_selected_prob", final.selected_prob, None, True, gated=False))
    report.checks.append(_check("final_label_prob", final.label_prob, None, True, gated=False))
    report.details["stop_reason"] = run.stop_reason.value
    return report


def loss_bias_probe(
    c: float,
    kind: LossKind,
    eta: float = BIAS_ETA,
    steps: int = BIAS_STEPS,
) -> LossBiasReport:
    """Per-input gradient norms on the two-input instance with optimal scores 1 and ``c``.

    After a short normalized run the norms are read on the max-margin ray at
    the trained norm (at least ``BIAS_PROBE_NORM``), where both inputs attend
    equally and only the loss weighting separates them.
    """
    instance = loss_bias_instance(c)
    dataset, v = instance.dataset, instance.v
    run = normalized_gd(dataset, v, kind, np.zeros(dataset.d), eta, max_steps=steps)
    trained = float(np.linalg.norm(run.final_iterate))
    probe = max(trained, BIAS_PROBE_NORM) * unit(instance.target("gmm"))
    rows = per_input_grad_p(dataset, AttentionParams(p=probe, v=v), kind)
    norms = np.linalg.norm(rows, axis=1)
    LOGGER.debug("loss bias C=%g %s: grad norms %.4g / %.4g", c, kind.value, norms[0], norms[1])
    return LossBiasReport(
        score=c, kind=kind.value, grad_norms=(float(norms[0]), float(norms[1])), probe_point=probe, trained_norm=trained
    )


def _fig3_loss_bias(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    report = ScenarioReport(scenario=config.scenario.value)
    rows = []
    for kind in (LossKind.CORRELATION, LossKind.LOGISTIC):
        for c in config.bias_scores:
            probe = loss_bias_probe(c, kind)
            g1, g2 = probe.grad_norms
            rows.append([kind.value, c, g1, g2])
            if c == 1.0:
                spread = abs(g1 - g2) / max(g1, g2, 1e-300)
                report.checks.append(_check(f"{kind.value}_C1_symmetry", spread, 0.05, spread <= 0.05))
            elif c > 1.0:
                ratio = g2 / g1 if g1 > 0.0 else math.inf
                passed = g2 > g1 if kind is LossKind.CORRELATION else g1 > g2
                report.checks.append(_check(f"{kind.value}_C{c:g}_ratio", ratio, 1.0, passed))
    store.write_rows("loss_bias.csv", ["kind", "C", "grad_norm_1", "grad_norm_2"], rows)
    report.artifacts.append("loss_bias.csv")
    return report


def _census_trial(job: Tuple[int, int, int, int, int]) -> CensusTrial:
    master_seed, d, trial, n, T = job
    seed = np.random.SeedSequence([master_seed, d, trial])
    dataset, v = generate_random_dataset(n, T, d, seed)
    run = normalized_gd(dataset, v, LossKind.LOGISTIC, np.zeros(d), CENSUS_ETA, max_steps=CENSUS_STEPS)
    p = run.final_iterate
    saturated = saturation_metrics(dataset, p).avg_max_prob >= SATURATION_LEVEL
    if not saturated:
        return CensusTrial(d=d, trial=trial, saturated=False, lmm_match=False, gmm_match=False)

    selection = selected_tokens(dataset, p)
    svm = att_svm(dataset, selection)
    if not svm.is_optimal:
        return CensusTrial(d=d, trial=trial, saturated=True, lmm_match=False, gmm_match=False)
    scores = token_scores(dataset, v)
    neighbors = svm_neighbors(dataset, svm, selection)
    locally_optimal = local_optimality_check(scores, neighbors, selection).overall
    corr = correlation(p, svm.solution)
    lmm_match = locally_optimal and corr >= MATCH_CORRELATION
    best = optimal_tokens(scores)
    is_global = all(alpha in ties for alpha, ties in zip(selection.indices, best.tie_sets or ()))
    gap = score_gap(dataset, v, selection, neighbors)
    return CensusTrial(
        d=d,
        trial=trial,
        saturated=True,
        lmm_match=lmm_match,
        gmm_match=lmm_match and is_global,
        correlation=corr,
        score_gap=gap if math.isfinite(gap) else None,
    )


def _census_row(d: int, trials: Sequence[CensusTrial]) -> CensusRow:
    count = len(trials)
    saturated = [t for t in trials if t.saturated]
    correlations = [t.correlation for t in saturated if t.correlation is not None]
    gaps = [t.score_gap for t in saturated if t.score_gap is not None]
    histogram: Dict[float, int] = {}
    for gap in gaps:
        edge = round(math.floor(gap / GAP_BIN) * GAP_BIN, 10)
        histogram[edge] = histogram.get(edge, 0) + 1
    return CensusRow(
        d=d,
        trials=count,
        non_saturated=(count - len(saturated)) / count,
        lmm_matched=sum(t.lmm_match for t in trials) / count,
        gmm_matched=sum(t.gmm_match for t in trials) / count,
        mean_correlation=float(np.mean(correlations)) if correlations else None,
        negative_gap=sum(g < 0.0 for g in gaps) / len(saturated) if saturated else 0.0,
        gap_histogram=dict(sorted(histogram.items())),
    )


def _census_csv_row(trial: CensusTrial) -> List[Any]:
    return [trial.d, trial.trial, trial.saturated, trial.lmm_match, trial.gmm_match, trial.correlation,
            trial.score_gap]


def census(
    dims: Sequence[int],
    trials: int,
    seed: int,
    jobs: int = 1,
    n: int = CENSUS_N,
    T: int = CENSUS_T,
    store: Optional[ArtifactStore] = None,
) -> CensusReport:
    """Random trials per dimension; each trial's seed depends only on (seed, d, trial).

    With a ``store``, the trials of each dimension are appended to ``census.csv``
    as soon as that dimension finishes, so an interrupted census keeps its rows.
    """
    if trials < 1:
        raise InvalidInputError("census needs at least one trial")
    report = CensusReport()
    for d in dims:
        work = [(seed, int(d), trial, n, T) for trial in range(trials)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_census_trial, work, chunksize=max(1, trials // (4 * jobs))))
        else:
            results = [_census_trial(job) for job in work]
        row = _census_row(int(d), results)
        LOGGER.info(
            "census d=%d: non-saturated %.3f, LMM %.3f, GMM %.3f", row.d, row.non_saturated, row.lmm_matched,
            row.gmm_matched,
        )
        report.rows.append(row)
        report.trials.extend(results)
        if store is not None:
            store.append_rows("census.csv", CENSUS_HEADER, (_census_csv_row(t) for t in results))
    return report


def _fig4_census(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    n, T = CENSUS_N, CENSUS_T
    if config.dataset.kind is SourceKind.RANDOM:
        n, T = config.dataset.n, config.dataset.T
    store.path_for("census.csv").unlink(missing_ok=True)
    result = census(config.dims, config.trials, config.seed, jobs=config.jobs, n=n, T=T, store=store)
    store.write_rows(
        "census_summary.csv",
        ["d", "trials", "non_saturated", "lmm_matched", "gmm_matched", "residual", "mean_corr", "negative_gap"],
        (
            [r.d, r.trials, r.non_saturated, r.lmm_matched, r.gmm_matched, r.residual, r.mean_correlation,
             r.negative_gap]
            for r in result.rows
        ),
    )
    store.write_rows(
        "score_gap_histogram.csv",
        ["d", "bin_start", "count"],
        ([r.d, edge, count] for r in result.rows for edge, count in r.gap_histogram.items()),
    )

    report = ScenarioReport(
        scenario=config.scenario.value, artifacts=["census.csv", "census_summary.csv", "score_gap_histogram.csv"]
    )
    first, last = result.rows[0], result.rows[-1]
    if len(result.rows) > 1:
        report.checks.append(
            _check(
                "non_saturated_decreases",
                first.non_saturated - last.non_saturated,
                0.0,
                first.non_saturated > last.non_saturated,
            )
        )
    saturated = [t for t in result.trials if t.saturated and t.correlation is not None]
    mean_corr = float(np.mean([t.correlation for t in saturated])) if saturated else float("nan")
    report.checks.append(_check("mean_matched_correlation", mean_corr, 0.98, bool(saturated) and mean_corr >= 0.98))
    gaps = [t.score_gap for t in result.trials if t.saturated and t.score_gap is not None]
    negative = sum(g < 0.0 for g in gaps) / max(1, sum(t.saturated for t in result.trials))
    report.checks.append(_check("negative_gap_fraction", negative, 0.05, negative <= 0.05))
    report.details["rows"] = [r.model_dump() for r in result.rows]
    return report


def _quartile_ratio(norms: Sequence[float]) -> float:
    """Norm increment over the last quarter of a run divided by the first quarter's."""
    q = (len(norms) - 1) // 4
    if q == 0:
        return float("nan")
    early = norms[q] - norms[0]
    late = norms[-1] - norms[-1 - q]
    return late / early if early > 0.0 else float("inf")


def _first_step_at(run: Trajectory, level: float) -> int:
    for record in run.steps:
        if record.max_prob >= level:
            return record.step
    return run.executed_steps + 1


def _saturation_dynamics(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    instance = _instance(config, "fig1_multi")
    dataset, v = instance.dataset, instance.v
    steps = config.optimizer.steps
    p0 = np.zeros(dataset.d)
    fast = normalized_gd(dataset, v, config.loss, p0, 0.1, max_steps=steps)
    slow = gd(dataset, v, config.loss, p0, eta=1.0, max_steps=steps, grad_tol=0.0)
    store.write_trajectory("normalized_gd.csv", fast)
    store.write_trajectory("vanilla_gd.csv", slow)

    fast_hit, slow_hit = _first_step_at(fast, FAST_SATURATION_LEVEL), _first_step_at(slow, FAST_SATURATION_LEVEL)
    fast_ratio = _quartile_ratio([r.iterate_norm for r in fast.steps])
    slow_ratio = _quartile_ratio([r.iterate_norm for r in slow.steps])
    report = ScenarioReport(scenario=config.scenario.value, artifacts=["normalized_gd.csv", "vanilla_gd.csv"])
    report.checks.append(_check("normalized_saturates_first", fast_hit - slow_hit, 0.0, fast_hit < slow_hit))
    report.checks.append(_check("vanilla_norm_growth_decays", slow_ratio, 0.5, slow_ratio < 0.5))
    report.checks.append(_check("normalized_norm_growth_steady", fast_ratio, 0.9, fast_ratio >= 0.9))
    report.details.update({"normalized_hit": fast_hit, "vanilla_hit": slow_hit, "vanilla_flags": slow.flags})
    return report


def _lemma2_equivalence(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    rows = []
    for k in range(20):
        dataset, v = generate_random_dataset(3, 4, 4, [config.seed, k])
        rng = np.random.default_rng([config.seed, k, 1])
        u = rng.normal(size=dataset.d)
        p0 = 0.1 * rng.normal(size=dataset.d)
        mapping = gd_on_W(dataset, v, config.loss, u, p0, eta=config.optimizer.eta or 0.1, max_steps=100)
        rows.append([k, mapping.max_deviation])
    store.write_rows("w_mapping.csv", ["instance", "max_deviation"], rows)
    worst = max(row[1] for row in rows)
    report = ScenarioReport(scenario=config.scenario.value, artifacts=["w_mapping.csv"])
    report.checks.append(_check("max_deviation", worst, 1e-8, worst <= 1e-8))
    return report


def _cone_failure(config: ExperimentConfig, store: ArtifactStore) -> ScenarioReport:
    instance = builtin_dataset("fig1_local")
    dataset, v = instance.dataset, instance.v
    lmm, gmm = instance.target("lmm"), instance.target("gmm")
    radii = [2.0, 4.0, 8.0, 16.0]

    midpoint = unit(unit(lmm) + unit(gmm))
    failing = cone_restricted_path(dataset, v, config.loss, ConeSpec(q=midpoint, mu=0.1, r0=1.0), radii, starts=1)
    control = cone_restricted_path(dataset, v, config.loss, ConeSpec(q=lmm, mu=0.1, r0=1.0), radii, starts=1)
    store.write_path("cone_path_midpoint.csv", failing.points)
    store.write_path("cone_path_lmm.csv", control.points)

    report = ScenarioReport(scenario=config.scenario.value, artifacts=["cone_path_midpoint.csv", "cone_path_lmm.csv"])
    report.checks.append(
        _check("midpoint_stalls_or_deviates", failing.deviation, 0.01, failing.norm_stalled or failing.deviation >= 0.01)
    )
    final = control.points[-1].correlation
    report.checks.append(_check("lmm_cone_correlation", final, MATCH_CORRELATION, final >= MATCH_CORRELATION))
    report.details.update({"midpoint_stalled": failing.norm_stalled, "midpoint": midpoint})
    return report


SCENARIOS: Dict[ScenarioName, Callable[[ExperimentConfig, ArtifactStore], ScenarioReport]] = {
    ScenarioName.FIG1_GLOBAL: _fig1_global,
    ScenarioName.FIG1_LOCAL: _fig1_local,
    ScenarioName.FIG1_MULTI: _fig1_multi,
    ScenarioName.FIG2_JOINT_SUPPORT: _fig2_joint_support,
    ScenarioName.FIG2_JOINT_NONSUPPORT: _fig2_joint_nonsupport,
    ScenarioName.FIG2_PROBABILITIES: _fig2_probabilities,
    ScenarioName.FIG3_LOSS_BIAS: _fig3_loss_bias,
    ScenarioName.FIG4_CENSUS: _fig4_census,
    ScenarioName.SATURATION_DYNAMICS: _saturation_dynamics,
    ScenarioName.LEMMA2_EQUIVALENCE: _lemma2_equivalence,
    ScenarioName.CONE_FAILURE: _cone_failure,
}


def scenario_name(raw: str) -> ScenarioName:
    try:
        return ScenarioName(raw)
    except ValueError as exc:
        known = ", ".join(name.value for name in ScenarioName)
        raise UnknownScenarioError(f"unknown scenario {raw!r}; known: {known}") from exc


def run_scenario(config: ExperimentConfig, store: Optional[ArtifactStore] = None) -> ScenarioReport:
    """Run one registered scenario and write its artifacts plus ``summary.json``."""
    store = store or ArtifactStore(config.output_dir)
    LOGGER.info("running scenario %s into %s", config.scenario.value, store.output_dir)
    report = SCENARIOS[config.scenario](config, store)
    report.artifacts.append("summary.json")
    store.write_json(
        "summary.json",
        {
            "scenario": report.scenario,
            "passed": report.passed,
            "seed": config.seed,
            "checks": [check.model_dump() for check in report.checks],
            "artifacts": report.artifacts,
            "details": report.details,
        },
    )
    LOGGER.info("scenario %s finished: %s", report.scenario, "pass" if report.passed else "FAIL")
    return report
