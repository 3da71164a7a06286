"""Command-line pipeline: simulate, fit, transform, learn, ci, experiment.

Stages are separate commands so the expensive model fit is cached as an
artifact and reused across policy-class comparisons. Exit codes: 0
success, 2 validation, 3 numerical, 4 I/O.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import serialize
from .belief_transform import UtilitySpec, build_mdp_dataset, estimate_propensity, scenario_matching_groups
from .ct_hmm import FitConfig, fisher_information, fit_mle, pack_params
from .errors import LatentDtrError, ValidationError
from .inference import (
    LatentSensitivityCache,
    make_discounted_evaluator,
    make_value_functions,
    policy_param_covariance,
    projection_ci,
)
from .regime import BasisSpec
from .simulation import (
    ExperimentConfig,
    PolicyClassSpec,
    ScenarioSpec,
    behavior_probs,
    moment_init,
    run_experiment,
    simulate_dataset,
)
from .v_learning import ReferenceDistribution, SearchConfig, assemble, optimize_policy


def _fail(exc: LatentDtrError):
    click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LatentDtrError as exc:
            _fail(exc)

    return wrapper


def apply_config(ctx, param, value):
    """--config: flat JSON of defaults; unknown keys are errors."""
    if value is None:
        return None
    try:
        cfg = json.loads(Path(value).read_text())
    except OSError as exc:
        _fail(ValidationError(f"cannot read config {value}: {exc}"))
    except json.JSONDecodeError as exc:
        _fail(ValidationError(f"config {value} is not valid JSON: {exc}"))
    known = {p.name for p in ctx.command.params}
    unknown = set(cfg) - known
    if unknown:
        _fail(ValidationError(f"unknown config keys: {sorted(unknown)}"))
    # default_map lets explicit flags win while config fills the rest
    ctx.default_map = {**(ctx.default_map or {}), **cfg}
    return value


def common_options(fn):
    fn = click.option("--config", callback=apply_config, expose_value=False,
                      is_eager=True, help="JSON file of flag defaults.")(fn)
    fn = click.option("--seed", type=int, default=0, show_default=True)(fn)
    fn = click.option("--threads", type=int, default=1, show_default=True,
                      help="Reserved; 1 guarantees bit-stable output.")(fn)
    return fn


def _provenance(seed: int, started: float, **extra) -> dict:
    cfg = {"seed": seed, **extra}
    return {
        "config_hash": serialize.config_hash(cfg),
        "seed": seed,
        "wall_time_s": round(time.time() - started, 3),
        **extra,
    }


def _basis_from_flags(basis: str, policy_inputs: str = "both") -> BasisSpec:
    return BasisSpec(
        kind=basis,
        use_belief=policy_inputs in ("both", "belief"),
        use_x=policy_inputs in ("both", "x"),
    )


def _utility_from_flag(utility: str, p: int) -> UtilitySpec:
    if utility == "neg_abs":
        return UtilitySpec("neg_abs", {"constant": 2.0, "indices": (0, 2)})
    if utility == "belief_match":
        return UtilitySpec("belief_match", {"groups": scenario_matching_groups()})
    raise ValidationError(f"unknown utility {utility!r}")


@click.group()
def main():
    """Belief-state treatment-regime estimation pipeline."""


@main.command()
@common_options
@click.option("--scenario", type=click.Choice(["1", "2"]), default="1", show_default=True)
@click.option("--n", type=int, required=True, help="Number of subjects.")
@click.option("--gamma", type=float, default=0.9, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
@handle_errors
def simulate(seed, threads, scenario, n, gamma, out):
    """Simulate a scenario dataset plus a hidden-truth sidecar."""
    started = time.time()
    if n <= 0:
        raise ValidationError("n must be positive")
    spec = ScenarioSpec(scenario=int(scenario), gamma=gamma)
    rng = np.random.default_rng(seed)
    trajs, subjects = simulate_dataset(spec, n, rng)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    serialize.write_trajectories(outdir / "trajectories.jsonl", trajs)
    serialize.save_json(
        outdir / "truth.json",
        "simulation_truth",
        {
            "scenario": int(scenario),
            "subjects": [
                {
                    "subject_id": s.trajectory.subject_id,
                    "e1": s.e1,
                    "e3": s.e3,
                    "latent": s.latent.tolist(),
                    "beliefs": s.beliefs.tolist(),
                }
                for s in subjects
            ],
        },
        provenance=_provenance(seed, started, scenario=scenario, n=n, gamma=gamma),
    )
    click.echo(f"wrote {n} subjects to {outdir}")


@main.command()
@common_options
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--k", "n_states", type=int, default=5, show_default=True)
@click.option("--n-actions", type=int, default=3, show_default=True)
@click.option("--ar-intercept/--no-ar-intercept", default=False, show_default=True)
@click.option("--restarts", type=int, default=5, show_default=True)
@click.option("--max-iter", type=int, default=500, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Model artifact path.")
@handle_errors
def fit(seed, threads, data, n_states, n_actions, ar_intercept, restarts, max_iter, out):
    """Fit the continuous-time latent model by maximum likelihood."""
    started = time.time()
    dataset = serialize.read_trajectories(data)
    rng = np.random.default_rng(seed)
    init = moment_init(dataset, n_states, n_actions, ar_intercept, rng)
    fitted, report = fit_mle(
        dataset, init, FitConfig(restarts=restarts, max_iter=max_iter, seed=seed)
    )
    serialize.save_model(
        out, fitted,
        provenance={
            **_provenance(seed, started, data=str(data), k=n_states),
            "loglik": report.loglik,
            "converged": report.converged,
            "iterations": report.iterations,
        },
    )
    click.echo(f"loglik {report.loglik:.3f} converged={report.converged} -> {out}")


@main.command()
@common_options
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--model", type=click.Path(exists=True), required=True)
@click.option("--utility", type=click.Choice(["neg_abs", "belief_match"]), required=True)
@click.option("--propensity", type=click.Choice(["estimate", "known-simulation"]),
              default="estimate", show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Tuple artifact path.")
@handle_errors
def transform(seed, threads, data, model, utility, propensity, out):
    """Build belief-state MDP tuples from trajectories and a fitted model."""
    started = time.time()
    dataset = serialize.read_trajectories(data)
    params = serialize.load_model(model)
    uspec = _utility_from_flag(utility, params.p)
    if propensity == "known-simulation":
        tuples = build_mdp_dataset(dataset, params, uspec, behavior_probs=behavior_probs)
    else:
        tuples = build_mdp_dataset(dataset, params, uspec)
        estimate_propensity(tuples, BasisSpec(kind="linear"))
    serialize.write_tuples(out, tuples)
    click.echo(f"wrote {len(tuples)} tuples -> {out}")


@main.command()
@common_options
@click.option("--tuples", "tuples_path", type=click.Path(exists=True), required=True)
@click.option("--criterion", type=click.Choice(["discounted", "average"]),
              default="discounted", show_default=True)
@click.option("--gamma", type=float, default=0.9, show_default=True)
@click.option("--basis", type=click.Choice(["linear", "quadratic"]), default="linear",
              show_default=True)
@click.option("--policy", "policy_kind", type=click.Choice(["stochastic", "deterministic"]),
              default="deterministic", show_default=True)
@click.option("--policy-inputs", type=click.Choice(["both", "belief", "x"]),
              default="both", show_default=True)
@click.option("--floor", type=float, default=0.05, show_default=True)
@click.option("--restarts", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Policy artifact path.")
@handle_errors
def learn(seed, threads, tuples_path, criterion, gamma, basis, policy_kind,
          policy_inputs, floor, restarts, out):
    """Search the regime class for the estimated optimal policy."""
    started = time.time()
    tuples = serialize.read_tuples(tuples_path)
    pbasis = _basis_from_flags(basis, policy_inputs)
    policy, value, report = optimize_policy(
        tuples, criterion, pbasis, kind=policy_kind, floor=floor, gamma=gamma,
        config=SearchConfig(restarts=restarts, seed=seed),
    )
    serialize.save_policy(
        out, policy,
        provenance={
            **_provenance(seed, started, criterion=criterion, gamma=gamma, basis=basis),
            "value": value,
            "search_evaluations": report.evaluations,
        },
    )
    click.echo(f"value {value:.4f} ({criterion}) -> {out}")


@main.command()
@common_options
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--model", type=click.Path(exists=True), required=True)
@click.option("--tuples", "tuples_path", type=click.Path(exists=True), required=True)
@click.option("--policy", "policy_path", type=click.Path(exists=True), required=True)
@click.option("--gamma", type=float, default=0.9, show_default=True)
@click.option("--eta", type=float, default=0.025, show_default=True)
@click.option("--utility", type=click.Choice(["neg_abs", "belief_match"]), required=True)
@click.option("--known-propensity/--estimated-propensity", default=False, show_default=True)
@click.option("--n-points", type=int, default=512, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="CI report path.")
@handle_errors
def ci(seed, threads, data, model, tuples_path, policy_path, gamma, eta, utility,
       known_propensity, n_points, out):
    """Projection confidence interval for the optimal discounted value."""
    started = time.time()
    dataset = serialize.read_trajectories(data)
    params = serialize.load_model(model)
    tuples = serialize.read_tuples(tuples_path)
    policy = serialize.load_policy(policy_path)
    uspec = _utility_from_flag(utility, params.p)
    value_spec = BasisSpec(kind="linear")
    pbasis = policy.basis
    data_arrays = assemble(tuples, value_spec, pbasis)
    R = ReferenceDistribution.empirical_initial(tuples)

    info, _ = fisher_information(dataset, params)
    fisher_mean = info / data_arrays.n_subjects
    if known_propensity:
        cache = LatentSensitivityCache(
            dataset, tuples, params, uspec, value_spec, pbasis,
            behavior_probs=behavior_probs,
        )
    else:
        pmodel, _ = estimate_propensity(tuples, BasisSpec(kind="linear"))
        cache = LatentSensitivityCache(
            dataset, tuples, params, uspec, value_spec, pbasis, propensity=pmodel
        )

    free = policy.xi[:-1].ravel()
    value_fn, point_fn = make_value_functions(
        data_arrays, R, gamma, policy.kind, policy.floor, pbasis,
        l2=1e-2 if policy.kind == "stochastic" else 0.0,
    )
    cov, _ = policy_param_covariance(value_fn, point_fn, R.weights, free, repair=True)
    evaluator = make_discounted_evaluator(
        data_arrays, R, gamma, policy.kind, policy.floor, pbasis,
        cache=cache, fisher_mean=fisher_mean,
    )
    report = projection_ci(
        free, cov, evaluator, eta, data_arrays.n_subjects, n_points=n_points, seed=seed
    )
    serialize.save_json(
        out, "projection_ci",
        {
            "level": report.level,
            "lower": report.lower,
            "upper": report.upper,
            "plug_in": report.plug_in,
            "chi2_radius": report.radius,
            "n_points": report.n_points,
            "n_skipped": report.n_skipped,
            "eta": eta,
        },
        provenance=_provenance(seed, started, gamma=gamma, eta=eta),
    )
    click.echo(f"[{report.lower:.4f}, {report.upper:.4f}] level {report.level} -> {out}")


@main.command()
@common_options
@click.option("--scenario", type=click.Choice(["1", "2"]), default="2", show_default=True)
@click.option("--n", type=int, default=100, show_default=True)
@click.option("--replications", type=int, default=100, show_default=True)
@click.option("--criterion", "criteria", type=click.Choice(["discounted", "average"]),
              multiple=True, default=("discounted", "average"), show_default=True)
@click.option("--policy", "policy_kind", type=click.Choice(["stochastic", "deterministic"]),
              default="deterministic", show_default=True)
@click.option("--gamma", type=float, default=0.9, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
@handle_errors
def experiment(seed, threads, scenario, n, replications, criteria, policy_kind, gamma, out):
    """Replicated simulation experiment; emits a text table and JSON twin."""
    started = time.time()
    config = ExperimentConfig(
        scenario=int(scenario),
        n=n,
        replications=replications,
        criteria=tuple(criteria),
        classes=(
            PolicyClassSpec("pomdp_linear", policy_kind),
            PolicyClassSpec("mdp_linear", policy_kind),
        ),
        seed=seed,
        gamma=gamma,
    )
    result = run_experiment(config)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "table.txt").write_text(result.to_text() + "\n")
    serialize.save_json(
        outdir / "results.json",
        "experiment_result",
        {"rows": result.rows, "failures": result.failures},
        provenance=_provenance(seed, started, scenario=scenario, n=n,
                               replications=replications, gamma=gamma),
    )
    click.echo(result.to_text())


if __name__ == "__main__":
    main()
