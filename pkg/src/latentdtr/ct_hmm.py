"""Continuous-time latent Markov model with Gaussian autoregressive emissions.

The latent state M(t) evolves as a continuous-time Markov chain whose
generator depends on the action in force since the previous visit.
Observations at visit times follow per-state Gaussian densities: the first
visit is centered at mu_m, later visits at psi_m @ x_prev (plus mu_m when
the model is configured with an autoregressive intercept).

All estimation happens on an unconstrained transformed parameterization:
log off-diagonal rates, Cholesky factors with log-diagonals for the
covariances, and softmax logits (last pinned) for the initial distribution.
`pack_params` / `unpack_params` define that coordinate system; the Fisher
information and downstream Jacobians all live in it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize

from .errors import DegenerateObservationError, NumericalError, ValidationError

RATE_ROWSUM_TOL = 1e-8


# ---------------------------------------------------------------------------
# domain types


@dataclass
class EmissionParams:
    """Per-state Gaussian emission parameters.

    mu: (K, p) initial-visit means; psi: (K, p, p) autoregression matrices;
    sigma: (K, p, p) SPD covariances shared between the initial and AR
    densities unless sigma_init is provided (untied covariances).
    """

    mu: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    sigma_init: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma_init is not None:
            self.sigma_init = np.asarray(self.sigma_init, dtype=float)
        K, p = self.mu.shape
        if self.psi.shape != (K, p, p):
            raise ValidationError(f"psi shape {self.psi.shape}, expected {(K, p, p)}")
        if self.sigma.shape != (K, p, p):
            raise ValidationError(f"sigma shape {self.sigma.shape}, expected {(K, p, p)}")
        if self.sigma_init is not None and self.sigma_init.shape != (K, p, p):
            raise ValidationError("sigma_init shape mismatch")


@dataclass
class ModelParams:
    """Full latent-model parameter set.

    rates: (L, K, K) generator per action; emission: EmissionParams;
    init_dist: (K,) simplex vector; ar_intercept: include mu_m in the AR
    mean (model-structure switch, off by default).
    """

    rates: np.ndarray
    emission: EmissionParams
    init_dist: np.ndarray
    ar_intercept: bool = False

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        self.init_dist = np.asarray(self.init_dist, dtype=float)
        if self.rates.ndim != 3 or self.rates.shape[1] != self.rates.shape[2]:
            raise ValidationError(f"rates must be (L, K, K), got {self.rates.shape}")
        K = self.rates.shape[1]
        if self.emission.mu.shape[0] != K:
            raise ValidationError("emission state count does not match rates")
        if self.init_dist.shape != (K,):
            raise ValidationError("init_dist length must equal state count")
        if np.any(self.init_dist < -1e-10) or abs(self.init_dist.sum() - 1.0) > 1e-10:
            raise ValidationError("init_dist must lie on the simplex (tol 1e-10)")
        for a in range(self.L):
            validate_rate_matrix(self.rates[a])

    @property
    def K(self) -> int:
        return self.rates.shape[1]

    @property
    def L(self) -> int:
        return self.rates.shape[0]

    @property
    def p(self) -> int:
        return self.emission.mu.shape[1]

    @property
    def tied_covariances(self) -> bool:
        return self.emission.sigma_init is None


@dataclass
class Trajectory:
    """One subject's visit record: times, actions, observations.

    Times are strictly increasing with the first visit at 0, expressed as
    fractions of the study horizon. Actions are 1-based in {1..L}.
    """

    times: np.ndarray
    actions: np.ndarray
    x: np.ndarray
    subject_id: str = "0"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.actions = np.asarray(self.actions, dtype=int)
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise ValidationError("observations must be a (J, p) array")
        J = self.times.shape[0]
        if J < 2:
            raise ValidationError("trajectory must have at least 2 visits")
        if self.actions.shape != (J,) or self.x.shape[0] != J:
            raise ValidationError("times, actions, observations must share length")
        if abs(self.times[0]) > 1e-12:
            raise ValidationError("first visit time must be 0")
        if np.any(np.diff(self.times) <= 0):
            bad = int(np.argmax(np.diff(self.times) <= 0)) + 1
            raise ValidationError(f"times not strictly increasing at visit {bad}")
        if np.any(self.actions < 1):
            raise ValidationError("actions must be 1-based positive integers")

    @property
    def J(self) -> int:
        return self.times.shape[0]


@dataclass
class FitConfig:
    """Optimizer settings for fit_mle."""

    max_iter: int = 500
    restarts: int = 5
    jitter: float = 0.1
    gtol: float = 1e-6
    seed: int = 0
    # lower bound on covariance Cholesky diagonals; keeps the likelihood
    # bounded when a state's covariance is (near-)singular in truth
    min_chol_diag: float = 1e-3


@dataclass
class FitReport:
    iterations: int
    grad_norm: float
    converged: bool
    loglik: float
    restart_logliks: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# core operations


def validate_rate_matrix(q: np.ndarray) -> None:
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValidationError("rate matrix must be square")
    off = q.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off < 0):
        raise ValidationError("rate matrix has negative off-diagonal entries")
    rowsum = np.abs(q.sum(axis=1))
    if np.any(rowsum > RATE_ROWSUM_TOL):
        raise ValidationError(
            f"rate matrix rows must sum to 0 (max |sum| {rowsum.max():.2e})"
        )


def transition_matrix(q: np.ndarray, dt: float) -> np.ndarray:
    """Transition probabilities over elapsed time dt: expm(dt * q).

    Uses scipy's scaling-and-squaring Pade implementation. Output is
    clipped to [0, 1] and renormalized only within the 1e-9 row-sum
    tolerance; larger violations raise.
    """
    if dt < 0:
        raise ValidationError("dt must be nonnegative")
    validate_rate_matrix(q)
    P = expm(dt * np.asarray(q, dtype=float))
    rowsum = P.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > 1e-9) or np.any(P < -1e-9):
        raise NumericalError("matrix exponential produced an invalid stochastic matrix")
    return np.clip(P, 0.0, 1.0) / np.clip(P, 0.0, 1.0).sum(axis=1, keepdims=True)


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, sigma: np.ndarray) -> float:
    p = x.shape[0]
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("emission covariance is not SPD") from exc
    z = np.linalg.solve(chol, x - mean)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (p * np.log(2.0 * np.pi) + logdet + z @ z))


def emission_logdensity(
    emission: EmissionParams,
    m: int,
    x: np.ndarray,
    x_prev: Optional[np.ndarray] = None,
    ar_intercept: bool = False,
) -> float:
    """Log-density of one observation under state m.

    Initial visits (x_prev None) use N(mu_m, sigma_init or sigma); later
    visits use N(psi_m x_prev [+ mu_m], sigma).
    """
    x = np.asarray(x, dtype=float)
    if x_prev is None:
        sigma = emission.sigma_init if emission.sigma_init is not None else emission.sigma
        return _gauss_logpdf(x, emission.mu[m], sigma[m] if sigma.ndim == 3 else sigma)
    mean = emission.psi[m] @ np.asarray(x_prev, dtype=float)
    if ar_intercept:
        mean = mean + emission.mu[m]
    return _gauss_logpdf(x, mean, emission.sigma[m])


def _emission_logdens_all(params: ModelParams, x, x_prev) -> np.ndarray:
    return np.array(
        [
            emission_logdensity(params.emission, m, x, x_prev, params.ar_intercept)
            for m in range(params.K)
        ]
    )


def forward_filter(traj: Trajectory, params: ModelParams):
    """Scaled forward recursion.

    Returns (beliefs, loglik) where beliefs[j] is the filtered distribution
    of M(T^j) given observations and actions through visit j.
    """
    if np.any(traj.actions > params.L):
        raise ValidationError("trajectory action exceeds model action count")
    if traj.x.shape[1] != params.p:
        raise ValidationError("observation dimension does not match model")
    K, J = params.K, traj.J
    beliefs = np.empty((J, K))
    loglik = 0.0
    logd = _emission_logdens_all(params, traj.x[0], None)
    c = logd.max()
    w = params.init_dist * np.exp(logd - c)
    s = w.sum()
    if s <= 0 or not np.isfinite(s):
        raise DegenerateObservationError(0, traj.subject_id)
    beliefs[0] = w / s
    loglik += np.log(s) + c
    for j in range(1, J):
        dt = traj.times[j] - traj.times[j - 1]
        P = transition_matrix(params.rates[traj.actions[j - 1] - 1], dt)
        prior = beliefs[j - 1] @ P
        logd = _emission_logdens_all(params, traj.x[j], traj.x[j - 1])
        c = logd.max()
        w = prior * np.exp(logd - c)
        s = w.sum()
        if s <= 0 or not np.isfinite(s):
            raise DegenerateObservationError(j, traj.subject_id)
        beliefs[j] = w / s
        loglik += np.log(s) + c
    return beliefs, float(loglik)


def log_likelihood(dataset: Sequence[Trajectory], params: ModelParams) -> float:
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    total = 0.0
    for i, traj in enumerate(dataset):
        try:
            _, ll = forward_filter(traj, params)
        except NumericalError as exc:
            raise NumericalError(f"subject index {i}: {exc}") from exc
        total += ll
    return total


# ---------------------------------------------------------------------------
# transformed parameterization


def n_free_params(template: ModelParams) -> int:
    K, L, p = template.K, template.L, template.p
    n = L * K * (K - 1) + K * p + K * p * p + K * p * (p + 1) // 2 + (K - 1)
    if not template.tied_covariances:
        n += K * p * (p + 1) // 2
    return n


def _chol_to_vec(sigma: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(sigma)
    idx = np.tril_indices(sigma.shape[0])
    vec = chol[idx].copy()
    diag_pos = np.cumsum(np.arange(1, sigma.shape[0] + 1)) - 1
    vec[diag_pos] = np.log(vec[diag_pos])
    return vec


def _vec_to_sigma(vec: np.ndarray, p: int) -> np.ndarray:
    chol = np.zeros((p, p))
    idx = np.tril_indices(p)
    vals = vec.copy()
    diag_pos = np.cumsum(np.arange(1, p + 1)) - 1
    vals[diag_pos] = np.exp(vals[diag_pos])
    chol[idx] = vals
    return chol @ chol.T


def chol_diag_indices(template: ModelParams) -> np.ndarray:
    """Positions of the log Cholesky diagonals in the packed vector."""
    K, L, p = template.K, template.L, template.p
    base = L * K * (K - 1) + K * p + K * p * p
    nchol = p * (p + 1) // 2
    diag_pos = np.cumsum(np.arange(1, p + 1)) - 1
    blocks = 2 * K if not template.tied_covariances else K
    return np.concatenate([base + m * nchol + diag_pos for m in range(blocks)])


def pack_params(params: ModelParams) -> np.ndarray:
    """Map constrained parameters to the unconstrained vector."""
    K, L, p = params.K, params.L, params.p
    parts = []
    offdiag = ~np.eye(K, dtype=bool)
    for a in range(L):
        parts.append(np.log(np.maximum(params.rates[a][offdiag], 1e-300)))
    parts.append(params.emission.mu.ravel())
    parts.append(params.emission.psi.ravel())
    for m in range(K):
        parts.append(_chol_to_vec(params.emission.sigma[m]))
    if not params.tied_covariances:
        for m in range(K):
            parts.append(_chol_to_vec(params.emission.sigma_init[m]))
    logits = np.log(np.maximum(params.init_dist, 1e-300))
    parts.append(logits[:-1] - logits[-1])
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack_params(vec: np.ndarray, template: ModelParams) -> ModelParams:
    """Inverse of pack_params, using template for shapes and switches."""
    K, L, p = template.K, template.L, template.p
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (n_free_params(template),):
        raise ValidationError("parameter vector has wrong length")
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos : pos + n]
        pos += n
        return out

    offdiag = ~np.eye(K, dtype=bool)
    rates = np.zeros((L, K, K))
    for a in range(L):
        q = np.zeros((K, K))
        q[offdiag] = np.exp(take(K * (K - 1)))
        np.fill_diagonal(q, -q.sum(axis=1))
        rates[a] = q
    mu = take(K * p).reshape(K, p)
    psi = take(K * p * p).reshape(K, p, p)
    nchol = p * (p + 1) // 2
    sigma = np.stack([_vec_to_sigma(take(nchol), p) for _ in range(K)])
    sigma_init = None
    if not template.tied_covariances:
        sigma_init = np.stack([_vec_to_sigma(take(nchol), p) for _ in range(K)])
    logits = np.concatenate([take(K - 1), [0.0]])
    init = np.exp(logits - logits.max())
    init = init / init.sum()
    return ModelParams(
        rates=rates,
        emission=EmissionParams(mu=mu, psi=psi, sigma=sigma, sigma_init=sigma_init),
        init_dist=init,
        ar_intercept=template.ar_intercept,
    )


# ---------------------------------------------------------------------------
# maximum likelihood


def fit_mle(
    dataset: Sequence[Trajectory],
    init: ModelParams,
    config: Optional[FitConfig] = None,
):
    """Maximize the forward-recursion log-likelihood.

    Quasi-Newton (L-BFGS) on the unconstrained parameterization with
    autodiff gradients, multi-start with jittered initials. Returns
    (ModelParams, FitReport); the achieved log-likelihood never falls
    below the log-likelihood at init.
    """
    from . import _jaxcore

    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    config = config or FitConfig()
    ll0 = log_likelihood(dataset, init)
    if not np.isfinite(ll0):
        raise NumericalError("log-likelihood at init is not finite")

    batch = _jaxcore.pad_dataset(dataset, init.p)
    objective = _jaxcore.make_objective(batch, init)
    theta0 = pack_params(init)
    rng = np.random.default_rng(config.seed)

    bounds = [(None, None)] * theta0.shape[0]
    if config.min_chol_diag > 0:
        lb = float(np.log(config.min_chol_diag))
        for i in chol_diag_indices(init):
            bounds[i] = (lb, None)
        theta0 = theta0.copy()
        theta0[chol_diag_indices(init)] = np.maximum(theta0[chol_diag_indices(init)], lb)

    best = None
    restart_lls = []
    for r in range(max(config.restarts, 1)):
        start = theta0 if r == 0 else theta0 + config.jitter * rng.standard_normal(theta0.shape)
        if config.min_chol_diag > 0:
            start = start.copy()
            start[chol_diag_indices(init)] = np.maximum(start[chol_diag_indices(init)], lb)
        res = minimize(
            objective,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": config.max_iter, "gtol": config.gtol},
        )
        restart_lls.append(-float(res.fun) * batch.n_obs_total)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res

    if best is None:
        raise NumericalError("all optimizer restarts produced non-finite objectives")

    theta_hat, report_ll = best.x, -float(best.fun) * batch.n_obs_total
    # never return something worse than the caller's starting point
    if report_ll < ll0:
        theta_hat, report_ll = theta0, ll0
    fitted = unpack_params(theta_hat, init)
    report = FitReport(
        iterations=int(best.nit),
        grad_norm=float(np.max(np.abs(best.jac))),
        converged=bool(best.success),
        loglik=report_ll,
        restart_logliks=restart_lls,
    )
    return fitted, report


def fisher_information(
    dataset: Sequence[Trajectory],
    params: ModelParams,
    step: float = 1e-4,
):
    """Observed information of the total log-likelihood, transformed coords.

    Central finite differences of the autodiff gradient; symmetrized. When
    the symmetrized matrix is not PSD its eigenvalues are clipped at 1e-8
    and the repair is flagged in the report.
    """
    from . import _jaxcore

    batch = _jaxcore.pad_dataset(dataset, params.p)
    grad = _jaxcore.make_gradient(batch, params)
    theta = pack_params(params)
    P = theta.shape[0]
    info = np.empty((P, P))
    for i in range(P):
        h = step * max(1.0, abs(theta[i]))
        up = theta.copy()
        up[i] += h
        dn = theta.copy()
        dn[i] -= h
        info[:, i] = -(grad(up) - grad(dn)) / (2.0 * h)
    info = 0.5 * (info + info.T)
    eigvals, eigvecs = np.linalg.eigh(info)
    repaired = bool(eigvals.min() < 1e-8)
    if repaired:
        info = (eigvecs * np.maximum(eigvals, 1e-8)) @ eigvecs.T
        info = 0.5 * (info + info.T)
    return info, {"repaired": repaired, "min_eigenvalue": float(eigvals.min()), "step": step}


# ---------------------------------------------------------------------------
# label alignment


def align_labels(params: ModelParams):
    """Permute states into lexicographic order of the emission means.

    Returns (params, permutation) where permutation[k_new] = k_old. Ties
    fall back on the original index, which keeps the map deterministic.
    """
    order = np.lexsort(params.emission.mu.T[::-1])
    perm = np.asarray(order, dtype=int)
    rates = params.rates[:, perm][:, :, perm]
    emission = EmissionParams(
        mu=params.emission.mu[perm],
        psi=params.emission.psi[perm],
        sigma=params.emission.sigma[perm],
        sigma_init=None if params.emission.sigma_init is None else params.emission.sigma_init[perm],
    )
    out = ModelParams(
        rates=rates,
        emission=emission,
        init_dist=params.init_dist[perm],
        ar_intercept=params.ar_intercept,
    )
    return out, perm
