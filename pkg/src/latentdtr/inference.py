"""Sandwich variances and projection confidence intervals.

The estimated value of a regime inherits sampling error from two sources:
the estimating-equation solve (bread/meat terms) and the fitted latent
model whose beliefs enter the features, weights, and utilities. The
second source is propagated through numerical Jacobians of the per-tuple
estimating contribution with respect to the transformed latent
parameters (the W-operator terms), combined with the observed Fisher
information.

All latent-parameter derivatives live in the transformed coordinate
system defined by ct_hmm.pack_params, matching fisher_information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.stats import qmc

from . import _jaxcore
from .belief_transform import PropensityModel, UtilitySpec
from .ct_hmm import ModelParams, pack_params
from .errors import NumericalError, ValidationError
from .regime import BasisSpec, PolicyParams, basis_matrix, policy_prob_matrix
from .v_learning import (
    ReferenceDistribution,
    VLearningData,
    importance_weights,
    solve_average_weights,
    solve_discounted_weights,
)


@dataclass
class SandwichComponents:
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    fisher: np.ndarray
    middle: np.ndarray
    sigma2: float


@dataclass
class ProjectionCi:
    level: float
    radius: float
    lower: float
    upper: float
    plug_in: float
    n_points: int
    n_skipped: int


class FlatMaximumError(NumericalError):
    """Value surface is not locally concave at the reported maximizer."""


# ---------------------------------------------------------------------------
# belief sensitivities / W-operator


class LatentSensitivityCache:
    """Per-tuple quantities at +/- perturbations of each latent parameter.

    For every transformed parameter coordinate, the forward filter is
    rerun at theta +/- h and the belief at each tuple's current state is
    extracted; value features, policy features, utilities, and behavior
    probabilities are precomputed so repeated W-operator assemblies (one
    per candidate policy inside a projection CI) reduce to matrix
    multiplies.
    """

    def __init__(
        self,
        dataset,
        tuples,
        params: ModelParams,
        uspec: UtilitySpec,
        value_spec: BasisSpec,
        policy_spec: BasisSpec,
        propensity: Optional[PropensityModel] = None,
        behavior_probs: Optional[Callable] = None,
        step: float = 1e-5,
    ):
        if (propensity is None) == (behavior_probs is None):
            raise ValidationError("supply exactly one of propensity, behavior_probs")
        self.step = step
        theta = pack_params(params)
        self.n_params = theta.shape[0]
        batch = _jaxcore.pad_dataset(dataset, params.p)
        belief_fn = _jaxcore.make_belief_fn(batch, params)

        # map each tuple to its (subject, visit) slot in the padded batch
        subj_index = {tr.subject_id: i for i, tr in enumerate(dataset)}
        rows = np.array([subj_index[t.subject_id] for t in tuples])
        visits = np.array([t.j - 1 for t in tuples])
        self.n_subjects = len(dataset)

        xs = np.array([t.s.x for t in tuples])
        x_next = np.array([t.s_next.x for t in tuples])
        actions = np.array([t.a for t in tuples])
        self.actions = actions
        N = len(tuples)

        self.h = step * np.maximum(1.0, np.abs(theta))

        def extract(theta_v):
            bel = belief_fn(theta_v)[rows, visits]
            vf = basis_matrix(bel, xs, value_spec)
            pf = basis_matrix(bel, xs, policy_spec)
            u = uspec.evaluate_batch(bel, xs, actions, x_next)
            if behavior_probs is not None:
                probs = np.array(
                    [behavior_probs(xs[i], bel[i]) for i in range(N)]
                )
            else:
                probs = propensity.predict(basis_matrix(bel, xs, propensity.basis))
            bp = probs[np.arange(N), actions - 1]
            if np.any(~np.isfinite(vf)) or np.any(~np.isfinite(u)):
                raise NumericalError("non-finite perturbed estimating contribution")
            return vf, pf, u, bp

        self.base = extract(theta)
        plus, minus = [], []
        for i in range(self.n_params):
            up = theta.copy()
            up[i] += self.h[i]
            dn = theta.copy()
            dn[i] -= self.h[i]
            plus.append(extract(up))
            minus.append(extract(dn))
        self.val_plus = np.stack([p[0] for p in plus])
        self.pol_plus = np.stack([p[1] for p in plus])
        self.u_plus = np.stack([p[2] for p in plus])
        self.bp_plus = np.stack([p[3] for p in plus])
        self.val_minus = np.stack([m[0] for m in minus])
        self.pol_minus = np.stack([m[1] for m in minus])
        self.u_minus = np.stack([m[2] for m in minus])
        self.bp_minus = np.stack([m[3] for m in minus])

    def _g(self, val_feat, pol_feat, u, bp, policy, criterion, cap):
        # val_feat (P, N, d), pol_feat (P, N, dp), u/bp (P, N)
        P, N, dp = pol_feat.shape
        probs = policy_prob_matrix(policy, pol_feat.reshape(P * N, dp)).reshape(P, N, -1)
        pi_a = np.take_along_axis(probs, (self.actions - 1)[None, :, None], axis=2)[:, :, 0]
        w = np.minimum(pi_a / bp, cap)
        feat = val_feat
        if criterion == "average":
            feat = np.concatenate([np.ones(val_feat.shape[:2] + (1,)), val_feat], axis=2)
        return np.einsum("pn,pnd->pd", w * u, feat) / self.n_subjects

    def c3(self, policy: PolicyParams, criterion: str, weight_cap: float = 20.0) -> np.ndarray:
        """Central-difference Jacobian of P_n sum_j G^j w.r.t. the latent
        parameters; columns indexed by transformed parameter coordinates."""
        gp = self._g(self.val_plus, self.pol_plus, self.u_plus, self.bp_plus,
                     policy, criterion, weight_cap)
        gm = self._g(self.val_minus, self.pol_minus, self.u_minus, self.bp_minus,
                     policy, criterion, weight_cap)
        jac = (gp - gm).T / (2.0 * self.h)[None, :]
        if np.any(~np.isfinite(jac)):
            bad = np.argwhere(~np.isfinite(jac))[0]
            raise NumericalError(
                f"non-finite W-operator entry at output {bad[0]}, parameter {bad[1]}"
            )
        return jac


def w_operator(cache: LatentSensitivityCache, policy: PolicyParams,
               criterion: str = "discounted", weight_cap: float = 20.0) -> np.ndarray:
    """C3-hat (or D3-hat): summed W-operator matrix for the given regime."""
    return cache.c3(policy, criterion, weight_cap)


# ---------------------------------------------------------------------------
# sandwich assembly


def _check_psd(mat: np.ndarray, tol: float = 1e-8, what: str = "middle matrix"):
    sym_err = np.max(np.abs(mat - mat.T))
    scale = max(np.max(np.abs(mat)), 1.0)
    if sym_err > tol * scale:
        raise NumericalError(f"{what} asymmetric beyond tolerance")
    eigs = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if eigs.min() < -tol * scale:
        raise NumericalError(f"{what} not PSD (min eigenvalue {eigs.min():.3e})")


def _middle(c2: np.ndarray, c3: Optional[np.ndarray], fisher_mean: Optional[np.ndarray]):
    middle = 0.5 * (c2 + c2.T)
    if c3 is not None and c3.size and fisher_mean is not None:
        # pseudo-inverse: directions with (numerically) zero information are
        # pinned or unidentified and must not inject spurious variance
        inv_info = np.linalg.pinv(fisher_mean, rcond=1e-8, hermitian=True)
        extra = c3 @ inv_info @ c3.T
        middle = middle + 0.5 * (extra + extra.T)
    _check_psd(middle)
    return middle


def variance_discounted(
    data: VLearningData,
    fit,
    policy: PolicyParams,
    R: ReferenceDistribution,
    c3: Optional[np.ndarray] = None,
    fisher_mean: Optional[np.ndarray] = None,
    weight_cap: float = 20.0,
):
    """Sandwich variance of the discounted plug-in value.

    fisher_mean is the observed information divided by the subject count,
    matching the per-subject averaging of the C matrices.
    Returns (sigma2, SandwichComponents); sqrt(sigma2/n) is the SE.
    """
    n = data.n_subjects
    w = importance_weights(data, policy, weight_cap)
    resid = data.u + fit.gamma * (data.phi_next @ fit.alpha) - data.phi_s @ fit.alpha
    wphi = w[:, None] * data.phi_s
    c1 = wphi.T @ (data.phi_s - fit.gamma * data.phi_next) / n
    c2 = (w**2 * resid**2 * data.phi_s.T).astype(float) @ data.phi_s / n
    middle = _middle(c2, c3, fisher_mean)
    m = R.mean_features(data.value_spec)
    v = np.linalg.solve(c1, m)
    sigma2 = float(v @ middle @ v)
    if sigma2 < -1e-10:
        raise NumericalError("negative sandwich variance; component assembly bug")
    sigma2 = max(sigma2, 0.0)
    return sigma2, SandwichComponents(c1, c2, c3, fisher_mean, middle, sigma2)


def variance_average(
    data: VLearningData,
    fit,
    policy: PolicyParams,
    d3: Optional[np.ndarray] = None,
    fisher_mean: Optional[np.ndarray] = None,
    weight_cap: float = 20.0,
):
    """Sandwich variance of the average-utility value: the (1,1) element
    of D1^-1 [D2 + D3 I^-1 D3'] D1^-T. Returns (omega, components)."""
    n = data.n_subjects
    w = importance_weights(data, policy, weight_cap)
    N = data.phi_s.shape[0]
    psi1 = np.hstack([np.ones((N, 1)), data.phi_s])
    diff = np.hstack([np.ones((N, 1)), data.phi_s - data.phi_next])
    zeta = np.concatenate([[fit.v_ave], fit.beta])
    resid = data.u - diff @ zeta
    d1 = (w[:, None] * psi1).T @ diff / n
    d2 = (w**2 * resid**2 * psi1.T) @ psi1 / n
    middle = _middle(d2, d3, fisher_mean)
    inv1 = np.linalg.solve(d1, np.eye(d1.shape[0]))
    full = inv1 @ middle @ inv1.T
    omega = float(full[0, 0])
    if omega < -1e-10:
        raise NumericalError("negative sandwich variance; component assembly bug")
    return max(omega, 0.0), SandwichComponents(d1, d2, d3, fisher_mean, middle, omega)


# ---------------------------------------------------------------------------
# per-xi evaluators shared by the covariance and projection machinery


def policy_from_free(free: np.ndarray, L: int, d: int, kind: str, floor: float,
                     basis: BasisSpec) -> PolicyParams:
    xi = np.vstack([np.asarray(free, dtype=float).reshape(L - 1, d), np.zeros((1, d))])
    return PolicyParams(xi=xi, kind=kind, floor=floor, basis=basis)


def make_discounted_evaluator(
    data: VLearningData,
    R: ReferenceDistribution,
    gamma: float,
    kind: str,
    floor: float,
    policy_basis: BasisSpec,
    cache: Optional[LatentSensitivityCache] = None,
    fisher_mean: Optional[np.ndarray] = None,
    weight_cap: float = 20.0,
):
    """free coefficients -> (plug-in value, sandwich variance)."""
    mphi = R.mean_features(data.value_spec)
    L = int(data.actions.max())
    d = data.pol_s.shape[1]

    def evaluator(free):
        pol = policy_from_free(free, L, d, kind, floor, policy_basis)
        w = importance_weights(data, pol, weight_cap)
        fit = solve_discounted_weights(data, w, gamma)
        val = float(mphi @ fit.alpha)
        c3 = cache.c3(pol, "discounted", weight_cap) if cache is not None else None
        s2, _ = variance_discounted(data, fit, pol, R, c3, fisher_mean, weight_cap)
        return val, s2

    return evaluator


def make_value_functions(
    data: VLearningData,
    R: ReferenceDistribution,
    gamma: float,
    kind: str,
    floor: float,
    policy_basis: BasisSpec,
    l2: float = 0.0,
    weight_cap: float = 20.0,
):
    """Scalar and per-reference-point value maps over free coefficients.

    Both subtract the search's L2 penalty so they describe the surface
    the optimizer actually maximized. Used by policy_param_covariance.
    """
    ref_feat = basis_matrix(R.beliefs, R.x, data.value_spec)
    L = int(data.actions.max())
    d = data.pol_s.shape[1]

    def point_values(free):
        pol = policy_from_free(free, L, d, kind, floor, policy_basis)
        w = importance_weights(data, pol, weight_cap)
        fit = solve_discounted_weights(data, w, gamma)
        return ref_feat @ fit.alpha - l2 * np.sum(np.asarray(free) ** 2)

    def value(free):
        return float(R.weights @ point_values(free))

    return value, point_values


# ---------------------------------------------------------------------------
# covariance of the estimated optimal policy parameters


def policy_param_covariance(
    value_of_free: Callable[[np.ndarray], float],
    point_values_of_free: Callable[[np.ndarray], np.ndarray],
    ref_weights: np.ndarray,
    free_hat: np.ndarray,
    step: float = 5e-2,
    repair: bool = False,
):
    """Sandwich covariance of the free policy coefficients.

    value_of_free: the scalar objective the search maximized (including
    any penalty). point_values_of_free: per-reference-point values whose
    ref_weights-weighted mean is that objective. Sigma1 is the negated
    numerical Hessian of the objective; Sigma2 the weighted outer-product
    of per-point gradients.
    """
    q = free_hat.shape[0]
    h = step * np.maximum(1.0, np.abs(free_hat))

    # per-point gradients by central differences
    grads = np.empty((q, len(ref_weights)))
    for i in range(q):
        up = free_hat.copy()
        up[i] += h[i]
        dn = free_hat.copy()
        dn[i] -= h[i]
        grads[i] = (point_values_of_free(up) - point_values_of_free(dn)) / (2 * h[i])
    sigma2 = (grads * ref_weights) @ grads.T

    # Hessian of the scalar objective
    f0 = value_of_free(free_hat)
    hess = np.empty((q, q))
    fp = np.empty(q)
    fm = np.empty(q)
    for i in range(q):
        up = free_hat.copy()
        up[i] += h[i]
        dn = free_hat.copy()
        dn[i] -= h[i]
        fp[i] = value_of_free(up)
        fm[i] = value_of_free(dn)
        hess[i, i] = (fp[i] - 2 * f0 + fm[i]) / h[i] ** 2
    for i in range(q):
        for j in range(i + 1, q):
            pp = free_hat.copy()
            pp[[i, j]] += [h[i], h[j]]
            pm = free_hat.copy()
            pm[i] += h[i]
            pm[j] -= h[j]
            mp = free_hat.copy()
            mp[i] -= h[i]
            mp[j] += h[j]
            mm = free_hat.copy()
            mm[[i, j]] -= [h[i], h[j]]
            hess[i, j] = hess[j, i] = (
                value_of_free(pp) - value_of_free(pm) - value_of_free(mp) + value_of_free(mm)
            ) / (4 * h[i] * h[j])
    sigma1 = -0.5 * (hess + hess.T)
    eigs, vecs = np.linalg.eigh(sigma1)
    if eigs.min() < 1e-8:
        if not repair:
            raise FlatMaximumError(
                "value surface not locally concave at the maximizer; widen the "
                "search or rerun with repair=True for an inflated ellipsoid"
            )
        eigs = np.maximum(eigs, 1e-6)
        sigma1 = (vecs * eigs) @ vecs.T
    inv1 = np.linalg.solve(sigma1, np.eye(q))
    cov = inv1 @ sigma2 @ inv1.T
    return 0.5 * (cov + cov.T), {"sigma1": sigma1, "sigma2": sigma2, "step": step}


# ---------------------------------------------------------------------------
# projection confidence interval


def projection_ci(
    free_hat: np.ndarray,
    cov: np.ndarray,
    evaluator: Callable[[np.ndarray], tuple],
    eta: float,
    n: int,
    n_points: int = 512,
    seed: int = 0,
    max_axes: int = 5,
) -> ProjectionCi:
    """Union-of-Wald-intervals projection interval, level 1 - 2*eta.

    evaluator maps a free coefficient vector to (value, sigma2) with
    sigma2 the sandwich variance whose sqrt(sigma2/n) is the SE. The
    (1-eta) parameter ellipsoid is sampled with quasi-random boundary and
    interior points (plus the plug-in point); when dim > 20 the sampling
    concentrates on the leading principal axes of the covariance.
    """
    if not (0 < eta < 0.5):
        raise ValidationError("eta must lie in (0, 0.5)")
    q = free_hat.shape[0]
    radius = stats.chi2.ppf(1 - eta, df=q)
    z = stats.norm.ppf(1 - eta / 2)

    eigs, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    eigs = np.maximum(eigs, 0.0)
    if q > max_axes and q > 20:
        keep = np.argsort(eigs)[-max_axes:]
        axes = vecs[:, keep] * np.sqrt(eigs[keep])
        dim = max_axes
    else:
        axes = vecs * np.sqrt(eigs)
        dim = q

    sampler = qmc.Sobol(d=dim + 1, scramble=True, seed=seed)
    raw = sampler.random(max(n_points, 2))
    directions = stats.norm.ppf(np.clip(raw[:, :dim], 1e-12, 1 - 1e-12))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    unit = directions / norms
    # half the points on the boundary, half filling the interior
    r = np.sqrt(radius) * np.where(
        np.arange(len(unit)) % 2 == 0, 1.0, raw[:, dim] ** (1.0 / dim)
    )
    offsets = (unit * r[:, None]) @ axes.T / np.sqrt(n)
    points = np.vstack([free_hat, free_hat + offsets])

    lower, upper = np.inf, -np.inf
    plug_in = None
    skipped = 0
    for idx, pt in enumerate(points):
        try:
            val, s2 = evaluator(pt)
        except NumericalError:
            skipped += 1
            continue
        half = z * np.sqrt(max(s2, 0.0) / n)
        if idx == 0:
            plug_in = val
        lower = min(lower, val - half)
        upper = max(upper, val + half)
    if plug_in is None or skipped > 0.2 * len(points):
        raise NumericalError(f"projection CI evaluator failed at {skipped} points")
    return ProjectionCi(
        level=1 - 2 * eta,
        radius=float(radius),
        lower=float(lower),
        upper=float(upper),
        plug_in=float(plug_in),
        n_points=len(points),
        n_skipped=skipped,
    )
