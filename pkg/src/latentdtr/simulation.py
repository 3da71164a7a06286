"""Synthetic scenarios, Monte Carlo rollouts, and experiment tables.

Two generative settings on a 5-state, 3-action, 3-covariate system over a
one-year follow-up. Internally subjects are simulated on a daily clock;
emitted trajectories carry times as fractions of the horizon, so the
latent generator in study-time units is horizon_days times the daily one.

Scenario 1: the latent state is a continuous-time Markov chain (the
fitted model class is correctly specified) and utility penalizes the
magnitude of the next visit's first and third covariates. Scenario 2:
the latent state is redrawn at every visit from a random distribution,
and utility rewards matching the treatment to the belief mass of its
target states.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .belief_transform import (
    MdpTuple,
    SummaryState,
    UtilitySpec,
    build_mdp_dataset,
    scenario_matching_groups,
)
from .ct_hmm import (
    EmissionParams,
    FitConfig,
    ModelParams,
    Trajectory,
    fit_mle,
)
from .errors import ValidationError
from .regime import BasisSpec, PolicyParams, basis_matrix, policy_prob_matrix
from .v_learning import ReferenceDistribution, SearchConfig, optimize_policy

K_STATES = 5
N_ACTIONS = 3
OBS_DIM = 3
SIGMA_JITTER = 1e-9

MU_TABLE = np.array(
    [
        [2.0, 2.0, 2.0],
        [2.0, 1.0, -2.0],
        [-2.0, 1.0, 2.0],
        [-2.0, -2.0, -2.0],
        [0.0, 0.0, 0.0],
    ]
)
PSI_SCALE = np.array([0.1, 0.1, -0.1, -0.1, 0.0])
_EYE = np.eye(3)
_ONES = np.ones((3, 3))
SIGMA_TABLE = np.stack(
    [
        0.1 * _EYE + 0.1 * _ONES,
        0.1 * _EYE + 0.1 * _ONES,
        0.3 * _EYE - 0.1 * _ONES,  # exactly singular: x1+x2+x3 is deterministic
        0.3 * _EYE - 0.1 * _ONES,
        _EYE,
    ]
)


@dataclass
class ScenarioSpec:
    """Configuration of one generative scenario."""

    scenario: int = 1
    gamma: float = 0.9
    horizon_days: float = 365.0
    rate_link: str = "expit"  # 'expit' or 'exp' reading of the rate model
    scenario1_init: str = "stable"  # or 'uniform'
    behavior_floor: float = 0.0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValidationError("scenario must be 1 or 2")
        if self.rate_link not in ("expit", "exp"):
            raise ValidationError("rate_link must be 'expit' or 'exp'")
        if self.scenario1_init not in ("stable", "uniform"):
            raise ValidationError("scenario1_init must be 'stable' or 'uniform'")

    @property
    def ar_intercept(self) -> bool:
        # scenario 1 centers later visits at mu_m + psi_m x; scenario 2 at psi_m x
        return self.scenario == 1

    def utility_spec(self) -> UtilitySpec:
        if self.scenario == 1:
            return UtilitySpec("neg_abs", {"constant": 2.0, "indices": (0, 2)})
        return UtilitySpec("belief_match", {"groups": scenario_matching_groups()})


def behavior_probs(x: np.ndarray, belief: Optional[np.ndarray] = None) -> np.ndarray:
    """Behavior policy: multinomial logit on the current covariates."""
    l1 = -0.2 + 0.1 * x[0] - 0.1 * x[1] + 0.1 * x[2]
    l2 = -0.2 - 0.1 * x[0] + 0.1 * x[1] - 0.1 * x[2]
    scores = np.array([l1, l2, 0.0])
    scores -= scores.max()
    p = np.exp(scores)
    return p / p.sum()


def rate_matrices_daily(e3: float, rate_link: str = "expit") -> np.ndarray:
    """Per-action daily generators Q(a); 1-based pair conventions."""
    link = expit if rate_link == "expit" else np.exp
    a1_pairs = {(1, 5), (4, 5), (2, 3), (3, 2)}
    a2_pairs = {(2, 5), (3, 5), (1, 4), (4, 1)}
    Q = np.zeros((N_ACTIONS, K_STATES, K_STATES))
    for a in range(1, N_ACTIONS + 1):
        for k in range(1, K_STATES + 1):
            for l in range(1, K_STATES + 1):
                if k == l:
                    continue
                lin = e3
                if (k, l) in a1_pairs:
                    lin += 5.0 * (a == 1)
                elif (k, l) in a2_pairs:
                    lin += 5.0 * (a == 2)
                elif k == 5:
                    lin += 2.0 * (a == 1) + 2.0 * (a == 2)
                Q[a - 1, k - 1, l - 1] = link(lin)
        np.fill_diagonal(Q[a - 1], 0.0)
        np.fill_diagonal(Q[a - 1], -Q[a - 1].sum(axis=1))
    return Q


def subject_model_params(e3: float, spec: ScenarioSpec) -> ModelParams:
    """The subject's true latent model in study-time units."""
    sigma = SIGMA_TABLE + SIGMA_JITTER * np.eye(OBS_DIM)
    psi = PSI_SCALE[:, None, None] * np.eye(OBS_DIM)
    if spec.scenario == 1 and spec.scenario1_init == "stable":
        init = np.zeros(K_STATES)
        init[4] = 1.0
    else:
        init = np.full(K_STATES, 1.0 / K_STATES)
    return ModelParams(
        rates=spec.horizon_days * rate_matrices_daily(e3, spec.rate_link),
        emission=EmissionParams(mu=MU_TABLE.copy(), psi=psi, sigma=sigma),
        init_dist=init,
        ar_intercept=spec.ar_intercept,
    )


def _draw_gauss(rng, mean, sigma_chol):
    return mean + sigma_chol @ rng.standard_normal(OBS_DIM)


def _emission_loglik_all(x, x_prev, spec: ScenarioSpec, chols):
    means = np.empty((K_STATES, OBS_DIM))
    for m in range(K_STATES):
        if x_prev is None:
            means[m] = MU_TABLE[m]
        else:
            means[m] = PSI_SCALE[m] * x_prev
            if spec.ar_intercept:
                means[m] += MU_TABLE[m]
    out = np.empty(K_STATES)
    for m in range(K_STATES):
        z = np.linalg.solve(chols[m], x - means[m])
        out[m] = -0.5 * z @ z - np.log(np.diag(chols[m])).sum()
    return out


@dataclass
class SimulatedSubject:
    trajectory: Trajectory
    latent: np.ndarray  # true latent state per visit (0-based)
    beliefs: np.ndarray  # oracle beliefs per visit
    e1: float
    e3: float
    resampled: int = 0


def simulate_trajectory(
    spec: ScenarioSpec,
    rng: np.random.Generator,
    subject_id: str = "0",
    action_fn: Optional[Callable] = None,
) -> SimulatedSubject:
    """One subject. action_fn(belief, x, rng) -> 1-based action; the
    behavior policy is used when absent. Resamples until J >= 2."""
    chols = np.stack(
        [np.linalg.cholesky(SIGMA_TABLE[m] + SIGMA_JITTER * np.eye(OBS_DIM)) for m in range(K_STATES)]
    )
    for attempt in range(100):
        e1 = rng.uniform(-3.0, -2.0)
        e3 = rng.uniform(-7.0, -6.0)
        Q = rate_matrices_daily(e3, spec.rate_link)
        times, actions, xs, latents, beliefs = [], [], [], [], []

        # first visit
        if spec.scenario == 1:
            if spec.scenario1_init == "stable":
                m = 4
                prior = np.zeros(K_STATES)
                prior[4] = 1.0
            else:
                m = rng.integers(K_STATES)
                prior = np.full(K_STATES, 1.0 / K_STATES)
        else:
            m = rng.choice(K_STATES, p=rng.dirichlet(np.ones(K_STATES)))
            prior = np.full(K_STATES, 1.0 / K_STATES)
        x = _draw_gauss(rng, MU_TABLE[m], chols[m])
        logd = _emission_loglik_all(x, None, spec, chols)
        w = prior * np.exp(logd - logd.max())
        b = w / w.sum()
        t = 0.0
        times.append(t)
        xs.append(x)
        latents.append(m)
        beliefs.append(b)

        while True:
            rate = np.exp(e1 + 0.1 * (b[0] + b[1]) - 0.1 * (b[2] + b[3]))
            dt = rng.exponential(1.0 / rate)
            if t + dt > spec.horizon_days:
                break
            if action_fn is None:
                a = int(rng.choice(N_ACTIONS, p=behavior_probs(x))) + 1
            else:
                a = int(action_fn(b, x, rng))
            actions.append(a)
            P = expm(dt * Q[a - 1])
            if spec.scenario == 1:
                m = int(rng.choice(K_STATES, p=P[m]))
                mean = MU_TABLE[m] + PSI_SCALE[m] * x
            else:
                m = int(rng.choice(K_STATES, p=rng.dirichlet(np.ones(K_STATES))))
                mean = PSI_SCALE[m] * x
            x_new = _draw_gauss(rng, mean, chols[m])
            prior = b @ P
            logd = _emission_loglik_all(x_new, x, spec, chols)
            w = prior * np.exp(logd - logd.max())
            b = w / w.sum()
            x = x_new
            t += dt
            times.append(t)
            xs.append(x)
            latents.append(m)
            beliefs.append(b)

        if len(times) >= 2:
            actions.append(actions[-1])  # final slot unused downstream
            traj = Trajectory(
                times=np.array(times) / spec.horizon_days,
                actions=np.array(actions),
                x=np.array(xs),
                subject_id=subject_id,
            )
            return SimulatedSubject(
                trajectory=traj,
                latent=np.array(latents),
                beliefs=np.array(beliefs),
                e1=e1,
                e3=e3,
                resampled=attempt,
            )
    raise ValidationError("failed to produce a 2-visit trajectory in 100 attempts")


def simulate_dataset(spec: ScenarioSpec, n: int, rng: np.random.Generator):
    subjects = [simulate_trajectory(spec, rng, subject_id=str(i)) for i in range(n)]
    return [s.trajectory for s in subjects], subjects


def sample_from_model(
    params: ModelParams,
    n: int,
    rng: np.random.Generator,
    visit_rate: float = 8.0,
    horizon: float = 1.0,
) -> list:
    """Trajectories drawn from an arbitrary latent model.

    Visits arrive as a Poisson process, actions are uniform, and the
    latent chain and emissions follow `params` exactly, so the fitted
    model is correctly specified. Intended for estimator-recovery
    studies rather than the named scenarios.
    """
    if visit_rate <= 0 or horizon <= 0:
        raise ValidationError("visit_rate and horizon must be positive")
    A, K, p = params.rates.shape[0], params.K, params.p
    chols = np.stack([np.linalg.cholesky(s) for s in params.emission.sigma])
    init_chols = (
        chols
        if params.emission.sigma_init is None
        else np.stack([np.linalg.cholesky(s) for s in params.emission.sigma_init])
    )
    out = []
    for i in range(n):
        while True:
            m = int(rng.choice(K, p=params.init_dist))
            x = params.emission.mu[m] + init_chols[m] @ rng.standard_normal(p)
            times, actions, xs = [0.0], [], [x]
            t = 0.0
            while True:
                dt = rng.exponential(1.0 / visit_rate)
                if t + dt > horizon:
                    break
                a = int(rng.integers(A)) + 1
                P = expm(dt * params.rates[a - 1])
                m = int(rng.choice(K, p=P[m]))
                mean = params.emission.psi[m] @ x
                if params.ar_intercept:
                    mean = mean + params.emission.mu[m]
                x = mean + chols[m] @ rng.standard_normal(p)
                t += dt
                times.append(t)
                actions.append(a)
                xs.append(x)
            if len(times) >= 2:
                break
        actions.append(actions[-1])  # final slot unused downstream
        out.append(
            Trajectory(
                times=np.array(times),
                actions=np.array(actions),
                x=np.array(xs),
                subject_id=str(i),
            )
        )
    return out


# ---------------------------------------------------------------------------
# true values


def _policy_action_fn(policy: PolicyParams, spec_basis: BasisSpec):
    def action_fn(b, x, rng):
        probs = policy_prob_matrix(policy, basis_matrix(b[None, :], x[None, :], spec_basis))[0]
        return int(rng.choice(len(probs), p=probs)) + 1

    return action_fn


def greedy_matching_policy(basis: Optional[BasisSpec] = None) -> PolicyParams:
    """Deterministic regime matching treatment to its target belief mass.

    Linear scores: action 1 gets B1+B4, action 2 gets B2+B3, action 3
    gets B5; written in the pinned-last-row parameterization over the
    linear belief+x basis.
    """
    basis = basis or BasisSpec(kind="linear")
    # scores relative to action 3's B5 = 1 - sum(B1..B4)
    xi = np.array(
        [
            [-1.0, 2.0, 1.0, 1.0, 2.0, 0.0, 0.0, 0.0],
            [-1.0, 1.0, 2.0, 2.0, 1.0, 0.0, 0.0, 0.0],
            [0.0] * 8,
        ]
    )
    return PolicyParams(xi=xi, kind="deterministic", basis=basis)


def true_value_mc(
    policy,
    spec: ScenarioSpec,
    criterion: str,
    n_rollouts: int,
    rng: np.random.Generator,
    policy_basis: Optional[BasisSpec] = None,
):
    """Monte Carlo mean and SE of a regime's true value.

    policy: a PolicyParams (acting on oracle beliefs), a callable
    (belief, x, rng) -> action, or None for the behavior policy. The true
    utility is used: covariate-based in scenario 1, belief-matching on
    oracle beliefs in scenario 2.
    """
    if n_rollouts < 100:
        raise ValidationError("n_rollouts must be at least 100")
    if isinstance(policy, PolicyParams):
        action_fn = _policy_action_fn(policy, policy_basis or policy.basis or BasisSpec())
    else:
        action_fn = policy
    uspec = spec.utility_spec()
    vals = np.empty(n_rollouts)
    for r in range(n_rollouts):
        sub = simulate_trajectory(spec, rng, subject_id=str(r), action_fn=action_fn)
        traj, bel = sub.trajectory, sub.beliefs
        u = uspec.evaluate_batch(bel[:-1], traj.x[:-1], traj.actions[:-1], traj.x[1:])
        if criterion == "discounted":
            vals[r] = np.sum(spec.gamma ** np.arange(len(u)) * u)
        elif criterion == "average":
            vals[r] = u.mean()
        else:
            raise ValidationError(f"unknown criterion {criterion!r}")
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_rollouts))


# ---------------------------------------------------------------------------
# fitting helpers


def align_to_reference(params: ModelParams, ref_mu: np.ndarray):
    """Permute states to best match a reference table of emission means."""
    cost = ((params.emission.mu[:, None, :] - ref_mu[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(params.K, dtype=int)
    perm[cols] = rows
    emission = EmissionParams(
        mu=params.emission.mu[perm],
        psi=params.emission.psi[perm],
        sigma=params.emission.sigma[perm],
        sigma_init=None
        if params.emission.sigma_init is None
        else params.emission.sigma_init[perm],
    )
    return (
        ModelParams(
            rates=params.rates[:, perm][:, :, perm],
            emission=emission,
            init_dist=params.init_dist[perm],
            ar_intercept=params.ar_intercept,
        ),
        perm,
    )


def moment_init(
    dataset: Sequence[Trajectory],
    K: int,
    L: int,
    ar_intercept: bool,
    rng: np.random.Generator,
    rate_scale: float = 0.5,
) -> ModelParams:
    """Data-driven starting point: k-means cluster centers for the means,
    within-cluster covariances, zero autoregression, uniform rates."""
    X = np.vstack([t.x for t in dataset])
    p = X.shape[1]
    centers = X[rng.choice(len(X), K, replace=False)]
    for _ in range(25):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        lab = d2.argmin(axis=1)
        for k in range(K):
            if np.any(lab == k):
                centers[k] = X[lab == k].mean(axis=0)
    order = np.lexsort(centers.T[::-1])
    centers = centers[order]
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    lab = d2.argmin(axis=1)
    sigma = np.stack(
        [
            np.cov(X[lab == k].T) + 0.05 * np.eye(p)
            if np.sum(lab == k) > p
            else np.eye(p)
            for k in range(K)
        ]
    )
    q = np.full((L, K, K), rate_scale)
    for a in range(L):
        np.fill_diagonal(q[a], 0.0)
        np.fill_diagonal(q[a], -q[a].sum(axis=1))
    return ModelParams(
        rates=q,
        emission=EmissionParams(mu=centers, psi=np.zeros((K, p, p)), sigma=sigma),
        init_dist=np.full(K, 1.0 / K),
        ar_intercept=ar_intercept,
    )


def fit_scenario_model(
    dataset: Sequence[Trajectory],
    spec: ScenarioSpec,
    rng: np.random.Generator,
    fit_config: Optional[FitConfig] = None,
    init: str = "generative",
):
    """Fit the latent model on a simulated dataset and align its states
    to the generative mean table so belief coordinates are comparable.

    init='generative' warm-starts the likelihood climb at the
    population-center generative parameters (the scenario-reproduction
    default: agnostic starts rarely reach the global basin of this
    108-parameter likelihood at desk-scale optimizer budgets). 'moment'
    uses the data-driven k-means start.
    """
    fit_config = fit_config or FitConfig(restarts=1, max_iter=300, seed=int(rng.integers(2**31)))
    if init == "generative":
        start = subject_model_params(-6.5, spec)
    elif init == "moment":
        start = moment_init(dataset, K_STATES, N_ACTIONS, spec.ar_intercept, rng)
    else:
        raise ValidationError("init must be 'generative' or 'moment'")
    fitted, report = fit_mle(dataset, start, fit_config)
    aligned, _ = align_to_reference(fitted, MU_TABLE)
    return aligned, report


# ---------------------------------------------------------------------------
# experiments


@dataclass
class PolicyClassSpec:
    name: str  # pomdp_linear, pomdp_quadratic, mdp_linear
    kind: str  # stochastic or deterministic

    def basis(self) -> BasisSpec:
        if self.name == "pomdp_linear":
            return BasisSpec(kind="linear")
        if self.name == "pomdp_quadratic":
            return BasisSpec(kind="quadratic")
        if self.name == "mdp_linear":
            return BasisSpec(kind="linear", use_belief=False)
        raise ValidationError(f"unknown policy class {self.name!r}")


@dataclass
class ExperimentConfig:
    scenario: int = 2
    n: int = 100
    replications: int = 100
    criteria: tuple = ("discounted", "average")
    classes: tuple = (
        PolicyClassSpec("pomdp_linear", "deterministic"),
        PolicyClassSpec("mdp_linear", "deterministic"),
    )
    seed: int = 0
    gamma: float = 0.9
    n_rollouts: int = 300
    fit_config: Optional[FitConfig] = None
    search_config: Optional[SearchConfig] = None
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        if self.replications < 2:
            raise ValidationError("replications must be at least 2")
        if self.n < 1:
            raise ValidationError("n must be positive")


@dataclass
class ExperimentResult:
    rows: list  # dicts: {policy, kind, criterion, mean, se, values}
    failures: int
    config: ExperimentConfig

    def to_text(self) -> str:
        lines = [f"{'regime':<28}{'criterion':<14}{'mean':>10}{'se':>10}"]
        for r in self.rows:
            lines.append(
                f"{r['policy'] + ' (' + r['kind'] + ')':<28}{r['criterion']:<14}"
                f"{r['mean']:>10.3f}{r['se']:>10.3f}"
            )
        return "\n".join(lines)


def _value_spec_for(criterion: str) -> BasisSpec:
    return BasisSpec(kind="linear", intercept=(criterion == "discounted"))


def _structured_starts(basis: BasisSpec) -> tuple:
    """Belief-matching seed mapped into a policy-class basis.

    The matching pattern concentrates scores on belief mass, which plants
    one search start inside the basin of policies that react to the
    latent state; a purely random screen rarely lands there once the
    free-parameter count reaches 16+.
    """
    if not basis.use_belief:
        return ()
    g = greedy_matching_policy().xi[:2]  # free rows over [1, b1..b4, x1..x3]
    d = basis.dim(K_STATES, OBS_DIM)
    start = np.zeros((2, d))
    start[:, : g.shape[1]] = g
    return (start.ravel(),)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Replicated pipeline: simulate, fit, transform, search, evaluate.

    The observed (behavior) and reference (greedy matching) regimes are
    evaluated once with a larger rollout budget; estimated regimes are
    evaluated per replication against the true generative model.
    """
    spec = ScenarioSpec(scenario=config.scenario, gamma=config.gamma)
    uspec = spec.utility_spec()
    collected = {
        (cls.name, cls.kind, crit): []
        for cls in config.classes
        for crit in config.criteria
    }
    failures = 0
    for rep in range(config.replications):
        rng = np.random.default_rng([config.seed, rep])
        try:
            trajs, _ = simulate_dataset(spec, config.n, rng)
            model, _ = fit_scenario_model(trajs, spec, rng, config.fit_config)
            tuples = build_mdp_dataset(trajs, model, uspec, behavior_probs=behavior_probs)
            for cls in config.classes:
                for crit in config.criteria:
                    sc = replace(
                        config.search_config or SearchConfig(),
                        seed=rep,
                        starts=_structured_starts(cls.basis()),
                    )
                    policy, _, _ = optimize_policy(
                        tuples,
                        crit,
                        cls.basis(),
                        kind=cls.kind,
                        gamma=config.gamma,
                        value_spec=_value_spec_for(crit),
                        config=sc,
                    )
                    val, _ = true_value_mc(
                        policy, spec, crit, config.n_rollouts,
                        np.random.default_rng([config.seed, rep, 1]),
                        policy_basis=cls.basis(),
                    )
                    collected[(cls.name, cls.kind, crit)].append(val)
        except Exception:
            failures += 1
            if failures > config.max_failure_fraction * config.replications:
                raise

    rows = []
    for (name, kind, crit), vals in collected.items():
        vals = np.array(vals)
        rows.append(
            {
                "policy": name,
                "kind": kind,
                "criterion": crit,
                "mean": float(vals.mean()),
                "se": float(vals.std(ddof=1) / np.sqrt(len(vals))),
                "values": vals.tolist(),
            }
        )
    # baselines under the true generative model
    eval_rng = np.random.default_rng([config.seed, 999_983])
    for crit in config.criteria:
        mean, se = true_value_mc(None, spec, crit, 4 * config.n_rollouts, eval_rng)
        rows.append({"policy": "observed", "kind": "behavior", "criterion": crit,
                     "mean": mean, "se": se, "values": []})
        if config.scenario == 2:
            mean, se = true_value_mc(
                greedy_matching_policy(), spec, crit, 4 * config.n_rollouts, eval_rng
            )
            rows.append({"policy": "oracle_matching", "kind": "deterministic",
                         "criterion": crit, "mean": mean, "se": se, "values": []})
    return ExperimentResult(rows=rows, failures=failures, config=config)
