"""Trajectories plus a fitted latent model -> belief-state MDP tuples.

Each subject with J visits yields J-1 tuples (S^j, A^j, U^j, S^{j+1})
where S^j pairs the filtered belief with the current observation. The
behavior probability of the observed action is attached to every tuple,
either from a known behavior policy or from a fitted multinomial
logistic propensity model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .ct_hmm import ModelParams, Trajectory, forward_filter
from .errors import NumericalError, ValidationError
from .regime import BasisSpec, basis_matrix, floor_simplex


@dataclass
class SummaryState:
    """Belief vector plus current observation."""

    belief: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.belief = np.asarray(self.belief, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if abs(self.belief.sum() - 1.0) > 1e-10 or np.any(self.belief < -1e-10):
            raise ValidationError("belief must lie on the simplex (tol 1e-10)")


@dataclass
class MdpTuple:
    subject_id: str
    j: int
    s: SummaryState
    a: int
    u: float
    s_next: SummaryState
    behavior_prob: float = np.nan


@dataclass
class UtilitySpec:
    """Named utility functional evaluated at (S^j, A^j, X^{j+1}).

    Built-ins:
      neg_abs: constant minus summed absolute values of selected
        next-observation coordinates.
      belief_match: each action a is credited with the belief mass of its
        matched state group, sum over actions of group-mass * (2*1{a}-1).
      custom_linear: intercept + coefficients on belief, x, and action
        indicators.
    """

    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ("neg_abs", "belief_match", "custom_linear"):
            raise ValidationError(f"unknown utility spec {self.name!r}")

    def evaluate_batch(
        self,
        beliefs: np.ndarray,
        x: np.ndarray,
        actions: np.ndarray,
        x_next: np.ndarray,
    ) -> np.ndarray:
        beliefs = np.atleast_2d(beliefs)
        x = np.atleast_2d(x)
        x_next = np.atleast_2d(x_next)
        actions = np.atleast_1d(actions)
        if self.name == "neg_abs":
            const = self.params.get("constant", 2.0)
            idx = list(self.params.get("indices", (0, 2)))
            u = const - np.abs(x_next[:, idx]).sum(axis=1)
        elif self.name == "belief_match":
            groups = self.params.get("groups")
            if groups is None:
                raise ValidationError("belief_match requires a 'groups' parameter")
            u = np.zeros(beliefs.shape[0])
            for a, grp in enumerate(groups, start=1):
                mass = beliefs[:, list(grp)].sum(axis=1)
                u += mass * (2.0 * (actions == a) - 1.0)
        else:
            c = self.params
            u = np.full(beliefs.shape[0], float(c.get("intercept", 0.0)))
            if "belief" in c:
                u += beliefs @ np.asarray(c["belief"], dtype=float)
            if "x" in c:
                u += x @ np.asarray(c["x"], dtype=float)
            if "action" in c:
                u += np.asarray(c["action"], dtype=float)[actions - 1]
        if not np.all(np.isfinite(u)):
            bad = int(np.argmax(~np.isfinite(u)))
            raise NumericalError(f"utility non-finite at tuple row {bad}")
        return u

    def evaluate(self, belief, x, a, x_next) -> float:
        return float(
            self.evaluate_batch(
                np.asarray(belief)[None, :],
                np.asarray(x)[None, :],
                np.array([a]),
                np.asarray(x_next)[None, :],
            )[0]
        )


def scenario_matching_groups(K: int = 5) -> tuple:
    """Default state groups for the 5-state, 3-action matching utility."""
    if K != 5:
        raise ValidationError("matching groups are defined for K=5")
    return ((0, 3), (1, 2), (4,))


def build_mdp_dataset(
    dataset: Sequence[Trajectory],
    params: ModelParams,
    uspec: UtilitySpec,
    behavior_probs: Optional[Callable] = None,
) -> list:
    """Transform each trajectory into its J-1 belief-state MDP tuples.

    behavior_probs, when given, is a known behavior policy
    (x, belief) -> length-L probability vector; the observed action's
    probability is attached to each tuple. Otherwise behavior_prob is
    left NaN for estimate_propensity to fill in.
    """
    tuples = []
    for traj in dataset:
        beliefs, _ = forward_filter(traj, params)
        u = uspec.evaluate_batch(
            beliefs[:-1], traj.x[:-1], traj.actions[:-1], traj.x[1:]
        )
        for j in range(traj.J - 1):
            bp = np.nan
            if behavior_probs is not None:
                bp = float(behavior_probs(traj.x[j], beliefs[j])[traj.actions[j] - 1])
            tuples.append(
                MdpTuple(
                    subject_id=traj.subject_id,
                    j=j + 1,
                    s=SummaryState(beliefs[j], traj.x[j]),
                    a=int(traj.actions[j]),
                    u=float(u[j]),
                    s_next=SummaryState(beliefs[j + 1], traj.x[j + 1]),
                    behavior_prob=bp,
                )
            )
    return tuples


@dataclass
class PropensityModel:
    """Fitted multinomial logistic behavior model.

    coef: (L-1, d) logits relative to the last action; floor applied to
    predicted probabilities and the result renormalized.
    """

    coef: np.ndarray
    basis: BasisSpec
    floor: float = 0.01
    ridge: float = 1e-4
    refits: int = 0

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        scores = np.hstack([features @ self.coef.T, np.zeros((features.shape[0], 1))])
        scores -= scores.max(axis=1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=1, keepdims=True)
        return floor_simplex(probs, self.floor)


def _multinomial_negll(coef_flat, features, y, L, ridge):
    n, d = features.shape
    coef = coef_flat.reshape(L - 1, d)
    scores = np.hstack([features @ coef.T, np.zeros((n, 1))])
    m = scores.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
    ll = scores[np.arange(n), y] - lse
    penalty = 0.5 * ridge * np.sum(coef**2)
    # gradient
    probs = np.exp(scores - lse[:, None])
    resid = probs[:, : L - 1].copy()
    resid[np.arange(n), np.clip(y, 0, L - 2)] -= (y < L - 1).astype(float)
    grad = resid.T @ features / n + ridge * coef
    return -ll.mean() + penalty, grad.ravel()


def estimate_propensity(
    tuples: Sequence[MdpTuple],
    basis: BasisSpec,
    ridge: float = 1e-4,
    floor: float = 0.01,
):
    """Fit the behavior model and attach probabilities to the tuples.

    Ridge-penalized multinomial logistic regression of A^j on basis
    features of S^j. If any pre-floor fitted probability collapses below
    1e-6 with a diverging coefficient norm (complete separation), the
    penalty is increased tenfold and the model refit, up to 3 times.
    Returns (model, per-tuple probabilities of the observed actions).
    """
    actions = np.array([t.a for t in tuples])
    L = int(actions.max())
    if len(np.unique(actions)) < L:
        raise ValidationError("all actions 1..L must appear in the data")
    beliefs = np.array([t.s.belief for t in tuples])
    xs = np.array([t.s.x for t in tuples])
    features = basis_matrix(beliefs, xs, basis)
    y = actions - 1
    n, d = features.shape

    lam = ridge
    refits = 0
    while True:
        res = minimize(
            _multinomial_negll,
            np.zeros((L - 1) * d),
            args=(features, y, L, lam),
            jac=True,
            method="L-BFGS-B",
        )
        coef = res.x.reshape(L - 1, d)
        scores = np.hstack([features @ coef.T, np.zeros((n, 1))])
        scores -= scores.max(axis=1, keepdims=True)
        raw = np.exp(scores)
        raw /= raw.sum(axis=1, keepdims=True)
        separated = raw.min() < 1e-6 and np.linalg.norm(coef) > 1e3
        if not separated or refits >= 3:
            break
        lam *= 10.0
        refits += 1

    model = PropensityModel(coef=coef, basis=basis, floor=floor, ridge=lam, refits=refits)
    probs = model.predict(features)
    observed = probs[np.arange(n), y]
    for t, pr in zip(tuples, observed):
        t.behavior_prob = float(pr)
    return model, observed
