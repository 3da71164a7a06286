"""JAX backend for likelihood evaluation.

The public numpy implementations in ct_hmm are the reference; this module
provides a padded, batched, differentiable twin used by the optimizer,
the information matrix, and belief sensitivities. Parameter layout must
match ct_hmm.pack_params exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax import lax
from jax.scipy.linalg import solve_triangular


@dataclass
class PaddedBatch:
    times: np.ndarray  # (n, Jmax)
    actions: np.ndarray  # (n, Jmax) 0-based
    x: np.ndarray  # (n, Jmax, p)
    mask: np.ndarray  # (n, Jmax) bool, True where a real visit exists
    n_obs_total: int


@dataclass
class _Meta:
    K: int
    L: int
    p: int
    ar_intercept: bool
    tied: bool


def pad_dataset(dataset: Sequence, p: int) -> PaddedBatch:
    n = len(dataset)
    jmax = max(t.J for t in dataset)
    times = np.zeros((n, jmax))
    actions = np.zeros((n, jmax), dtype=int)
    x = np.zeros((n, jmax, p))
    mask = np.zeros((n, jmax), dtype=bool)
    for i, t in enumerate(dataset):
        J = t.J
        times[i, :J] = t.times
        # pad with increasing dummy times so dt stays positive
        times[i, J:] = t.times[-1] + np.arange(1, jmax - J + 1)
        actions[i, :J] = t.actions - 1
        x[i, :J] = t.x
        mask[i, :J] = True
    return PaddedBatch(times, actions, x, mask, int(mask.sum()))


def _meta(template) -> _Meta:
    return _Meta(template.K, template.L, template.p, template.ar_intercept, template.tied_covariances)


def _unpack(theta, meta: _Meta):
    K, L, p = meta.K, meta.L, meta.p
    pos = 0

    def take(n):
        nonlocal pos
        out = theta[pos : pos + n]
        pos += n
        return out

    off_rows, off_cols = np.where(~np.eye(K, dtype=bool))
    Q = []
    for _ in range(L):
        q = jnp.zeros((K, K)).at[off_rows, off_cols].set(jnp.exp(take(K * (K - 1))))
        Q.append(q - jnp.diag(q.sum(axis=1)))
    Q = jnp.stack(Q)
    mu = take(K * p).reshape(K, p)
    psi = take(K * p * p).reshape(K, p, p)
    tril = np.tril_indices(p)
    diag_pos = np.cumsum(np.arange(1, p + 1)) - 1

    def chol_block():
        mats = []
        for _ in range(K):
            vec = take(p * (p + 1) // 2)
            vec = vec.at[diag_pos].set(jnp.exp(vec[diag_pos]))
            mats.append(jnp.zeros((p, p)).at[tril].set(vec))
        return jnp.stack(mats)

    chol = chol_block()
    chol_init = chol if meta.tied else chol_block()
    logits = jnp.concatenate([take(K - 1), jnp.zeros(1)])
    log_init = logits - jax.scipy.special.logsumexp(logits)
    return Q, mu, psi, chol, chol_init, log_init


def _expm_ss(A, order: int = 6, squarings: int = 10):
    """Batched matrix exponential: fixed scaling-and-squaring Taylor core.

    Generators here have modest norms once scaled by 2^-squarings, so a
    fixed schedule keeps the computation branch-free and batchable;
    accuracy is verified against the scipy Pade route in the tests.
    """
    A = A / (2.0**squarings)
    eye = jnp.broadcast_to(jnp.eye(A.shape[-1]), A.shape)
    out = eye + A
    term = A
    for k in range(2, order + 1):
        term = term @ A / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


def _logdens(x, means, chols, p):
    # means (K, p), chols (K, p, p) -> (K,) log-densities
    def one(mean, chol):
        z = solve_triangular(chol, x - mean, lower=True)
        return -0.5 * (p * jnp.log(2.0 * jnp.pi) + z @ z) - jnp.log(jnp.diag(chol)).sum()

    return jax.vmap(one)(means, chols)


def _logdens_means(x, means, chols, p):
    # per-state means supplied directly (AR case)
    def one(mean, chol):
        z = solve_triangular(chol, x - mean, lower=True)
        return -0.5 * (p * jnp.log(2.0 * jnp.pi) + z @ z) - jnp.log(jnp.diag(chol)).sum()

    return jax.vmap(one)(means, chols)


def _filter_one(P_all, logd0, logd_ar, log_init, mask):
    # P_all (J-1, K, K); logd0 (K,); logd_ar (J-1, K); mask (J,)
    logw = log_init + logd0
    c = jnp.max(logw)
    w = jnp.exp(logw - c)
    s = jnp.sum(w)
    b0 = w / s
    ll0 = jnp.log(s) + c

    def step(carry, inp):
        b, ll = carry
        P, logd, m = inp
        prior = b @ P
        cc = jnp.max(logd)
        w = prior * jnp.exp(logd - cc)
        s = jnp.sum(w) + 1e-300
        bn = w / s
        llj = jnp.log(s) + cc
        b = jnp.where(m, bn, b)
        ll = ll + jnp.where(m, llj, 0.0)
        return (b, ll), b

    (_, ll), bs = lax.scan(step, (b0, ll0), (P_all, logd_ar, mask[1:]))
    beliefs = jnp.concatenate([b0[None], bs], axis=0)
    return ll, beliefs


def _batched(theta, batch_arrays, meta: _Meta):
    Q, mu, psi, chol, chol_init, log_init = _unpack(theta, meta)
    times, actions, x, mask = batch_arrays
    n, jmax, p = x.shape
    K = meta.K

    # transition matrices for every (subject, interval) in one batch
    dt = jnp.diff(times, axis=1)  # (n, J-1)
    Q_steps = Q[actions[:, :-1]]  # (n, J-1, K, K)
    P_all = _expm_ss(dt[:, :, None, None] * Q_steps)

    # emission log-densities for every (subject, visit, state) in one batch
    xf = x.reshape(n * jmax, p)
    logd0 = jax.vmap(lambda xi: _logdens(xi, mu, chol_init, p))(x[:, 0])  # (n, K)
    means = jnp.einsum("kij,nj->nki", psi, x[:, :-1].reshape(n * (jmax - 1), p))
    if meta.ar_intercept:
        means = means + mu
    xc = x[:, 1:].reshape(n * (jmax - 1), p)
    logd_ar = jax.vmap(lambda xi, mi: _logdens_means(xi, mi, chol, p))(xc, means)
    logd_ar = logd_ar.reshape(n, jmax - 1, K)

    f = lambda Ps, l0, lar, m: _filter_one(Ps, l0, lar, log_init, m)
    return jax.vmap(f)(P_all, logd0, logd_ar, mask)


def _arrays(batch: PaddedBatch):
    return (
        jnp.asarray(batch.times),
        jnp.asarray(batch.actions),
        jnp.asarray(batch.x),
        jnp.asarray(batch.mask),
    )


def make_objective(batch: PaddedBatch, template):
    """Negative mean (per visit) log-likelihood with gradient, jitted."""
    meta = _meta(template)
    arrays = _arrays(batch)
    scale = float(batch.n_obs_total)

    @jax.jit
    def neg_mean_ll(theta):
        lls, _ = _batched(theta, arrays, meta)
        return -jnp.sum(lls) / scale

    vg = jax.jit(jax.value_and_grad(neg_mean_ll))

    def objective(theta_np):
        val, grad = vg(jnp.asarray(theta_np))
        return float(val), np.asarray(grad)

    return objective


def make_gradient(batch: PaddedBatch, template):
    """Gradient of the total log-likelihood, jitted."""
    meta = _meta(template)
    arrays = _arrays(batch)

    @jax.jit
    def total_ll(theta):
        lls, _ = _batched(theta, arrays, meta)
        return jnp.sum(lls)

    g = jax.jit(jax.grad(total_ll))
    return lambda theta_np: np.asarray(g(jnp.asarray(theta_np)))


def make_belief_fn(batch: PaddedBatch, template):
    """theta -> beliefs (n, Jmax, K); padded rows carry stale values."""
    meta = _meta(template)
    arrays = _arrays(batch)

    @jax.jit
    def beliefs(theta):
        _, bs = _batched(theta, arrays, meta)
        return bs

    return lambda theta_np: np.asarray(beliefs(jnp.asarray(theta_np)))
