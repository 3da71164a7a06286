"""Policy classes over basis features of the summary state.

A summary state is a (belief, x) pair. Policies score actions linearly in
basis features; the stochastic kind passes scores through a softmax and
floors the probabilities, the deterministic kind takes an argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class BasisSpec:
    """Feature map configuration.

    kind: 'linear' or 'quadratic'. Linear features are
    [1, belief_1..belief_{K-1}, x_1..x_p]; the last belief coordinate is
    dropped because the simplex constraint makes it collinear with the
    rest. Quadratic adds squares and pairwise products of the
    non-intercept terms.
    """

    kind: str = "linear"
    use_belief: bool = True
    use_x: bool = True
    intercept: bool = True

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise ValidationError(f"unknown basis kind {self.kind!r}")
        if not (self.use_belief or self.use_x):
            raise ValidationError("basis must use at least one of belief, x")

    def base_dim(self, K: int, p: int) -> int:
        return (K - 1 if self.use_belief else 0) + (p if self.use_x else 0)

    def dim(self, K: int, p: int) -> int:
        d0 = self.base_dim(K, p)
        d = d0 + (1 if self.intercept else 0)
        if self.kind == "quadratic":
            d += d0 * (d0 + 1) // 2
        return d


def basis_matrix(beliefs: np.ndarray, x: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """Feature matrix for a batch of summary states.

    beliefs: (n, K), x: (n, p) -> (n, d).
    """
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cols = []
    if spec.use_belief:
        cols.append(beliefs[:, :-1])
    if spec.use_x:
        cols.append(x)
    z = np.hstack(cols)
    parts = []
    if spec.intercept:
        parts.append(np.ones((z.shape[0], 1)))
    parts.append(z)
    if spec.kind == "quadratic":
        i, j = np.triu_indices(z.shape[1])
        parts.append(z[:, i] * z[:, j])
    return np.hstack(parts)


def basis_features(s, spec: BasisSpec) -> np.ndarray:
    """Feature vector for a single summary state."""
    return basis_matrix(s.belief[None, :], s.x[None, :], spec)[0]


@dataclass
class PolicyParams:
    """Coefficients of a linear-score regime.

    xi: (L, d) with the last row pinned to zero for identifiability.
    kind: 'stochastic' (floored softmax) or 'deterministic' (argmax,
    smallest index wins ties). floor only applies to the stochastic kind.
    """

    xi: np.ndarray
    kind: str = "stochastic"
    floor: float = 0.05
    basis: Optional[BasisSpec] = None

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi.ndim != 2:
            raise ValidationError("xi must be an (L, d) matrix")
        if self.kind not in ("stochastic", "deterministic"):
            raise ValidationError(f"unknown policy kind {self.kind!r}")
        L = self.xi.shape[0]
        if not (0 <= self.floor < 1.0 / L):
            raise ValidationError("floor must lie in [0, 1/L)")
        if np.any(self.xi[-1] != 0.0):
            raise ValidationError("last action's coefficient row must be pinned to zero")

    @property
    def L(self) -> int:
        return self.xi.shape[0]

    @property
    def d(self) -> int:
        return self.xi.shape[1]


def floor_simplex(probs: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries below `floor` to it and rescale the rest.

    Water-filling: floored entries keep exactly `floor`, the remaining
    mass is split proportionally among the others. Exact at the
    probability level, iterated until stable.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    if floor <= 0:
        return probs
    out = probs.copy()
    L = out.shape[1]
    low = np.zeros(out.shape, dtype=bool)
    for _ in range(L):
        new_low = low | (out < floor - 1e-15)
        if np.array_equal(new_low, low) and _ > 0:
            break
        low = new_low
        free_mass = 1.0 - floor * low.sum(axis=1)
        denom = np.where(low, 0.0, probs).sum(axis=1)
        denom = np.where(denom <= 0, 1.0, denom)
        out = np.where(low, floor, probs * (free_mass / denom)[:, None])
    return out


def policy_prob_matrix(policy: PolicyParams, features: np.ndarray) -> np.ndarray:
    """Action probabilities for a batch of feature rows: (n, d) -> (n, L)."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    scores = features @ policy.xi.T
    if policy.kind == "deterministic":
        best = np.argmax(scores, axis=1)  # argmax takes the first maximum
        out = np.zeros(scores.shape)
        out[np.arange(scores.shape[0]), best] = 1.0
        return out
    scores = scores - scores.max(axis=1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=1, keepdims=True)
    return floor_simplex(probs, policy.floor)


def policy_probs(policy: PolicyParams, spec: BasisSpec, s) -> np.ndarray:
    """Action probabilities at a single summary state."""
    return policy_prob_matrix(policy, basis_features(s, spec)[None, :])[0]
