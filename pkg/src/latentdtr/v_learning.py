"""V-learning: importance-weighted Bellman-residual estimating equations.

Linear value models make the estimating equations linear in the unknowns,
so the sample root is an exact linear solve. The discounted criterion
estimates alpha with nu_dis(s) = phi(s)' alpha; the average criterion
jointly estimates (V_ave, beta) with differential value phi(s)' beta.
Policy search maximizes the plug-in value over a parametric regime class
by derivative-free search.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import IllPosedError, NumericalError, ValidationError
from .regime import BasisSpec, PolicyParams, basis_matrix, policy_prob_matrix

COND_LIMIT = 1e12


@dataclass
class DiscountedFit:
    alpha: np.ndarray
    gamma: float
    cond: float


@dataclass
class AverageFit:
    v_ave: float
    beta: np.ndarray
    cond: float


@dataclass
class ReferenceDistribution:
    """Weighted sample of summary states used to aggregate values."""

    beliefs: np.ndarray  # (m, K)
    x: np.ndarray  # (m, p)
    weights: np.ndarray  # (m,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValidationError("reference weights must be nonnegative and sum to 1")

    @classmethod
    def empirical_initial(cls, tuples):
        """Each subject's first summary state, uniformly weighted."""
        seen = {}
        for t in tuples:
            if t.subject_id not in seen or t.j < seen[t.subject_id].j:
                seen[t.subject_id] = t
        firsts = list(seen.values())
        m = len(firsts)
        return cls(
            beliefs=np.array([t.s.belief for t in firsts]),
            x=np.array([t.s.x for t in firsts]),
            weights=np.full(m, 1.0 / m),
        )

    def mean_features(self, spec: BasisSpec) -> np.ndarray:
        return self.weights @ basis_matrix(self.beliefs, self.x, spec)


@dataclass
class VLearningData:
    """Arrays assembled once from the tuple list for repeated solves."""

    phi_s: np.ndarray  # (N, d) value features at S^j
    phi_next: np.ndarray  # (N, d) value features at S^{j+1}
    pol_s: np.ndarray  # (N, d_pol) policy features at S^j
    u: np.ndarray  # (N,)
    actions: np.ndarray  # (N,) 1-based
    behavior_prob: np.ndarray  # (N,)
    n_subjects: int
    value_spec: BasisSpec = None
    policy_spec: BasisSpec = None


def assemble(tuples, value_spec: BasisSpec, policy_spec: Optional[BasisSpec] = None) -> VLearningData:
    if len(tuples) == 0:
        raise ValidationError("no MDP tuples supplied")
    policy_spec = policy_spec or value_spec
    beliefs = np.array([t.s.belief for t in tuples])
    xs = np.array([t.s.x for t in tuples])
    beliefs_next = np.array([t.s_next.belief for t in tuples])
    xs_next = np.array([t.s_next.x for t in tuples])
    bp = np.array([t.behavior_prob for t in tuples])
    if np.any(~np.isfinite(bp)) or np.any(bp <= 0):
        raise ValidationError("tuples carry missing or nonpositive behavior probabilities")
    return VLearningData(
        phi_s=basis_matrix(beliefs, xs, value_spec),
        phi_next=basis_matrix(beliefs_next, xs_next, value_spec),
        pol_s=basis_matrix(beliefs, xs, policy_spec),
        u=np.array([t.u for t in tuples]),
        actions=np.array([t.a for t in tuples]),
        behavior_prob=bp,
        n_subjects=len({t.subject_id for t in tuples}),
        value_spec=value_spec,
        policy_spec=policy_spec,
    )


def importance_weights(data: VLearningData, policy: PolicyParams, cap: float = 20.0) -> np.ndarray:
    probs = policy_prob_matrix(policy, data.pol_s)
    pi_a = probs[np.arange(len(data.actions)), data.actions - 1]
    return np.minimum(pi_a / data.behavior_prob, cap)


def _solve(A: np.ndarray, b: np.ndarray):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllPosedError(
            f"estimating-equation system condition number {cond:.2e}; "
            "consider a smaller basis"
        )
    sol = np.linalg.solve(A, b)
    resid = np.linalg.norm(A @ sol - b)
    scale = max(np.linalg.norm(b), 1e-30)
    if resid / scale > 1e-8:
        raise NumericalError("linear solve residual exceeds 1e-8 relative")
    return sol, cond


def solve_discounted_weights(data: VLearningData, w: np.ndarray, gamma: float) -> DiscountedFit:
    n = data.n_subjects
    wphi = w[:, None] * data.phi_s
    C1 = wphi.T @ (data.phi_s - gamma * data.phi_next) / n
    c0 = wphi.T @ data.u / n
    alpha, cond = _solve(C1, c0)
    return DiscountedFit(alpha=alpha, gamma=gamma, cond=cond)


def solve_discounted(
    tuples,
    policy: PolicyParams,
    spec: BasisSpec,
    gamma: float,
    weight_cap: float = 20.0,
) -> DiscountedFit:
    """Exact root of the sample discounted estimating equation."""
    if not (0 <= gamma < 1):
        raise ValidationError("gamma must lie in [0, 1)")
    data = assemble(tuples, spec, policy.basis or spec)
    w = importance_weights(data, policy, weight_cap)
    return solve_discounted_weights(data, w, gamma)


def value_discounted(fit: DiscountedFit, R: ReferenceDistribution, spec: BasisSpec) -> float:
    return float(R.mean_features(spec) @ fit.alpha)


def solve_average_weights(data: VLearningData, w: np.ndarray) -> AverageFit:
    if data.value_spec.intercept:
        raise ValidationError(
            "the average criterion's differential-value basis must exclude "
            "the intercept (constants are annihilated by phi(s')-phi(s))"
        )
    n = data.n_subjects
    psi1 = np.hstack([np.ones((data.phi_s.shape[0], 1)), data.phi_s])
    rhs_cols = np.hstack([np.ones((data.phi_s.shape[0], 1)), data.phi_s - data.phi_next])
    A = (w[:, None] * psi1).T @ rhs_cols / n
    b = (w[:, None] * psi1).T @ data.u / n
    zeta, cond = _solve(A, b)
    return AverageFit(v_ave=float(zeta[0]), beta=zeta[1:], cond=cond)


def solve_average(
    tuples,
    policy: PolicyParams,
    spec: BasisSpec,
    weight_cap: float = 20.0,
) -> AverageFit:
    """Exact root of the sample average-utility estimating equation."""
    data = assemble(tuples, spec, policy.basis or spec)
    w = importance_weights(data, policy, weight_cap)
    return solve_average_weights(data, w)


# ---------------------------------------------------------------------------
# policy search


@dataclass
class SearchConfig:
    restarts: int = 10
    nm_maxiter: int = 600
    bound: float = 2.0
    screen: int = 400
    polish: bool = True
    polish_steps: tuple = (0.5, 0.1, 0.02)
    l2: float = 1e-2
    seed: int = 0
    weight_cap: float = 20.0
    starts: tuple = ()


@dataclass
class SearchReport:
    evaluations: int
    restarts: int
    best_restart: int
    failures: int


def _policy_from_free(free: np.ndarray, L: int, d: int, kind: str, floor: float, basis):
    xi = np.vstack([free.reshape(L - 1, d), np.zeros((1, d))])
    return PolicyParams(xi=xi, kind=kind, floor=floor, basis=basis)


def optimize_policy(
    tuples,
    criterion: str,
    policy_basis: BasisSpec,
    kind: str = "deterministic",
    floor: float = 0.05,
    gamma: float = 0.9,
    value_spec: Optional[BasisSpec] = None,
    R: Optional[ReferenceDistribution] = None,
    config: Optional[SearchConfig] = None,
):
    """Search the regime class for the maximizer of the plug-in value.

    A cheap random screen over [-bound, bound] on the free coefficients
    (the last action's row stays pinned) seeds Nelder-Mead restarts from
    the top scorers, followed by a coordinate polish around the incumbent.
    Stochastic policies carry an L2 penalty on the coefficients.
    Returns (PolicyParams, value, SearchReport).
    """
    if criterion not in ("discounted", "average"):
        raise ValidationError(f"unknown criterion {criterion!r}")
    config = config or SearchConfig()
    if value_spec is None:
        value_spec = (
            BasisSpec(kind="linear", intercept=True)
            if criterion == "discounted"
            else BasisSpec(kind="linear", intercept=False)
        )
    data = assemble(tuples, value_spec, policy_basis)
    if R is None:
        R = ReferenceDistribution.empirical_initial(tuples)
    mphi = R.mean_features(value_spec)
    L = int(data.actions.max())
    d = policy_basis.dim(
        np.asarray(tuples[0].s.belief).shape[0], np.asarray(tuples[0].s.x).shape[0]
    )
    if data.pol_s.shape[1] != d:
        raise ValidationError("policy basis dimension mismatch")

    evals = [0]
    failures = [0]

    def objective(free):
        evals[0] += 1
        pol = _policy_from_free(free, L, d, kind, floor, policy_basis)
        w = importance_weights(data, pol, config.weight_cap)
        try:
            if criterion == "discounted":
                fit = solve_discounted_weights(data, w, gamma)
                val = float(mphi @ fit.alpha)
            else:
                fit = solve_average_weights(data, w)
                val = fit.v_ave
        except NumericalError:
            failures[0] += 1
            return np.inf
        if not np.isfinite(val):
            failures[0] += 1
            return np.inf
        penalty = config.l2 * np.sum(free**2) if kind == "stochastic" else 0.0
        return -(val - penalty)

    rng = np.random.default_rng(config.seed)
    nfree = (L - 1) * d
    # Pre-screen: cheap random scan of the box plus any caller-supplied
    # starting points; the best scorers seed the simplex restarts.
    pool = [np.zeros(nfree)]
    for s in config.starts:
        s = np.asarray(s, dtype=float).ravel()
        if s.shape != (nfree,):
            raise ValidationError("search start has wrong dimension")
        pool.append(s)
    pool.extend(
        rng.uniform(-config.bound, config.bound, nfree)
        for _ in range(max(config.screen, config.restarts))
    )
    scores = np.array([objective(c) for c in pool])
    order = np.argsort(scores, kind="stable")[: config.restarts]

    best_free, best_val, best_r = None, np.inf, -1
    for r, idx in enumerate(order):
        start = pool[idx]
        res = minimize(
            objective, start, method="Nelder-Mead",
            options={"maxiter": config.nm_maxiter, "xatol": 1e-3, "fatol": 1e-6},
        )
        cand_val, cand = res.fun, res.x
        better = cand_val < best_val - 1e-12 or (
            abs(cand_val - best_val) <= 1e-12
            and best_free is not None
            and tuple(cand) < tuple(best_free)
        )
        if better or best_free is None:
            best_free, best_val, best_r = cand, cand_val, r

    if not np.isfinite(best_val):
        raise NumericalError("policy search objective non-finite at every restart")

    if config.polish:
        for step in config.polish_steps:
            improved = True
            while improved:
                improved = False
                for i in range(nfree):
                    for delta in (step, -step):
                        cand = best_free.copy()
                        cand[i] += delta
                        v = objective(cand)
                        if v < best_val - 1e-10:
                            best_free, best_val = cand, v
                            improved = True

    policy = _policy_from_free(best_free, L, d, kind, floor, policy_basis)
    # report the unpenalized plug-in value of the selected regime
    w = importance_weights(data, policy, config.weight_cap)
    if criterion == "discounted":
        value = float(mphi @ solve_discounted_weights(data, w, gamma).alpha)
    else:
        value = solve_average_weights(data, w).v_ave
    report = SearchReport(
        evaluations=evals[0], restarts=config.restarts, best_restart=best_r,
        failures=failures[0],
    )
    return policy, value, report
