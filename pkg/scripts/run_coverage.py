#!/usr/bin/env python3
"""Coverage study for projection confidence intervals (scenario 1).

Phase one approximates the true optimal value of the stochastic
linear-belief class with a large-sample pipeline and a large rollout
budget. Phase two repeats the full estimation pipeline at the study
sample size and records whether each replication's projection interval
covers that truth. Writes a JSON artifact the acceptance tests read.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from latentdtr.belief_transform import build_mdp_dataset
from latentdtr.ct_hmm import fisher_information
from latentdtr.inference import (
    LatentSensitivityCache,
    make_discounted_evaluator,
    make_value_functions,
    policy_param_covariance,
    projection_ci,
)
from latentdtr.regime import BasisSpec
from latentdtr.simulation import (
    ScenarioSpec,
    _structured_starts,
    behavior_probs,
    fit_scenario_model,
    simulate_dataset,
    true_value_mc,
)
from latentdtr.v_learning import (
    ReferenceDistribution,
    SearchConfig,
    assemble,
    optimize_policy,
)

PBASIS = BasisSpec(kind="linear")
VALUE_SPEC = BasisSpec(kind="linear")
KIND = "stochastic"
FLOOR = 0.05
GAMMA = 0.9
ETA = 0.025


def learn_policy(trajs, spec, rng, seed):
    model, _ = fit_scenario_model(trajs, spec, rng)
    tuples = build_mdp_dataset(trajs, model, spec.utility_spec(), behavior_probs=behavior_probs)
    policy, value, _ = optimize_policy(
        tuples,
        "discounted",
        PBASIS,
        kind=KIND,
        floor=FLOOR,
        gamma=GAMMA,
        value_spec=VALUE_SPEC,
        config=SearchConfig(seed=seed, starts=_structured_starts(PBASIS)),
    )
    return model, tuples, policy, value


def one_interval(trajs, spec, model, tuples, policy, seed):
    data = assemble(tuples, VALUE_SPEC, PBASIS)
    R = ReferenceDistribution.empirical_initial(tuples)
    info, _ = fisher_information(trajs, model)
    cache = LatentSensitivityCache(
        trajs, tuples, model, spec.utility_spec(), VALUE_SPEC, PBASIS,
        behavior_probs=behavior_probs,
    )
    free = policy.xi[:-1].ravel()
    value_fn, point_fn = make_value_functions(
        data, R, GAMMA, KIND, FLOOR, PBASIS, l2=1e-2
    )
    cov, _ = policy_param_covariance(value_fn, point_fn, R.weights, free, repair=True)
    evaluator = make_discounted_evaluator(
        data, R, GAMMA, KIND, FLOOR, PBASIS,
        cache=cache, fisher_mean=info / data.n_subjects,
    )
    return projection_ci(free, cov, evaluator, ETA, data.n_subjects, n_points=256, seed=seed)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--replications", type=int, default=100)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--truth-n", type=int, default=1000)
    ap.add_argument("--truth-rollouts", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()

    spec = ScenarioSpec(scenario=1)
    started = time.time()

    # phase one: truth from a large-sample pipeline
    rng = np.random.default_rng([args.seed, 7_000_003])
    trajs, _ = simulate_dataset(spec, args.truth_n, rng)
    _, _, big_policy, big_plug_in = learn_policy(trajs, spec, rng, seed=args.seed)
    truth, truth_se = true_value_mc(
        big_policy, spec, "discounted", args.truth_rollouts,
        np.random.default_rng([args.seed, 7_000_019]), policy_basis=PBASIS,
    )
    print(f"truth {truth:.4f} (se {truth_se:.4f}, plug-in {big_plug_in:.4f}) "
          f"[{time.time() - started:.0f}s]", flush=True)

    # phase two: replicated intervals at the study sample size
    reps = []
    for rep in range(args.replications):
        t0 = time.time()
        rng = np.random.default_rng([args.seed, rep])
        trajs, _ = simulate_dataset(spec, args.n, rng)
        try:
            model, tuples, policy, plug_in = learn_policy(trajs, spec, rng, seed=rep)
            report = one_interval(trajs, spec, model, tuples, policy, seed=rep)
            reps.append(
                {
                    "rep": rep,
                    "lower": report.lower,
                    "upper": report.upper,
                    "plug_in": report.plug_in,
                    "covered": bool(report.lower <= truth <= report.upper),
                    "wall_s": round(time.time() - t0, 1),
                }
            )
            print(f"rep {rep}: [{report.lower:.3f}, {report.upper:.3f}] "
                  f"covered={reps[-1]['covered']} ({reps[-1]['wall_s']}s)", flush=True)
        except Exception as exc:  # noqa: BLE001 - record and continue
            reps.append({"rep": rep, "error": repr(exc)})
            print(f"rep {rep}: failed: {exc!r}", flush=True)

    ok = [r for r in reps if "covered" in r]
    coverage = float(np.mean([r["covered"] for r in ok])) if ok else float("nan")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(
        json.dumps(
            {
                "truth": truth,
                "truth_se": truth_se,
                "level": 0.95,
                "coverage": coverage,
                "n": args.n,
                "replications": args.replications,
                "completed": len(ok),
                "seed": args.seed,
                "wall_time_s": time.time() - started,
                "reps": reps,
            },
            indent=1,
        )
    )
    print(f"coverage {coverage:.3f} over {len(ok)} reps -> {args.out}")


if __name__ == "__main__":
    main()
