"""Bayesian Gaussian mixture with conjugate variational updates.

Dirichlet prior on the mixing proportions and Gaussian-Wishart priors on the
cluster parameters; the M-step, responsibilities, and evidence lower bound
follow the standard conjugate variational EM equations.  The expected log
joint is linear in the one-hot allocation rows, which is what lets a trained
sampler play the E-step role: gradients flow straight to relaxed allocations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .. import diffcore as dc

__all__ = [
    "GmmState",
    "gmm_init",
    "gmm_m_step",
    "gmm_responsibilities",
    "gmm_log_joint_table",
    "gmm_log_joint",
    "gmm_elbo",
    "simulated_clusters",
]


@dataclass
class GmmState:
    """Data plus the variational posterior over mixture parameters."""

    y: np.ndarray        # (n_points, n_features)
    alpha: np.ndarray    # (K,) Dirichlet counts
    beta: np.ndarray     # (K,)
    m: np.ndarray        # (K, F) posterior means
    w: np.ndarray        # (K, F, F) Wishart scale matrices
    nu: np.ndarray       # (K,) Wishart degrees of freedom
    alpha0: float
    beta0: float
    m0: np.ndarray
    w0: np.ndarray
    nu0: float

    def __post_init__(self):
        f = self.y.shape[1]
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ValueError("alpha and beta must stay positive")
        if np.any(self.nu < f):
            raise ValueError("Wishart degrees of freedom must be >= n_features")
        for wk in self.w:
            np.linalg.cholesky((wk + wk.T) / 2)

    @property
    def n_clusters(self) -> int:
        return self.alpha.size

    @property
    def n_points(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.y.shape[1]


def gmm_init(y: np.ndarray, k: int, rng) -> GmmState:
    """Prior-centered state whose means sit on k distinct sampled points.

    Seeding the means on data breaks the label symmetry; a flat
    random-responsibility start tends to collapse components.
    """
    y = np.asarray(y, dtype=np.float64)
    n, f = y.shape
    alpha0 = 1.0 / k
    m0 = y.mean(axis=0)
    picks = [int(rng.integers(n))]
    while len(picks) < k:
        d2 = np.min([((y - y[p]) ** 2).sum(axis=1) for p in picks], axis=0)
        picks.append(int(rng.choice(n, p=d2 / d2.sum())))
    return GmmState(y=y, alpha=np.full(k, alpha0), beta=np.ones(k),
                    m=y[picks].copy(), w=np.tile(np.eye(f), (k, 1, 1)),
                    nu=np.full(k, float(f)), alpha0=alpha0, beta0=1.0,
                    m0=m0, w0=np.eye(f), nu0=float(f))


def _cluster_stats(state: GmmState, resp: np.ndarray):
    nk = resp.sum(axis=0)
    sums = resp.T @ state.y
    xbar = sums / np.maximum(nk, 1e-300)[:, None]
    scatter = np.empty((state.n_clusters,
                        state.n_features, state.n_features))
    for k in range(state.n_clusters):
        diff = state.y - xbar[k]
        scatter[k] = (resp[:, k:k + 1] * diff).T @ diff
    return nk, xbar, scatter


def gmm_m_step(state: GmmState, resp: np.ndarray) -> GmmState:
    """Conjugate posterior update from soft assignment rows."""
    resp = np.asarray(resp, dtype=np.float64)
    if resp.shape != (state.n_points, state.n_clusters):
        raise ValueError("responsibilities must be (n_points, K)")
    if np.any(resp < 0) or np.any(np.abs(resp.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("each responsibility row must lie on the simplex")
    nk, xbar, scatter = _cluster_stats(state, resp)
    alpha = state.alpha0 + nk
    beta = state.beta0 + nk
    nu = state.nu0 + nk
    m = (state.beta0 * state.m0 + resp.T @ state.y) / beta[:, None]
    w0inv = np.linalg.inv(state.w0)
    w = np.empty_like(state.w)
    for k in range(state.n_clusters):
        diff = (xbar[k] - state.m0)[:, None]
        winv = w0inv + scatter[k] + \
            (state.beta0 * nk[k] / (state.beta0 + nk[k])) * (diff @ diff.T)
        winv = (winv + winv.T) / 2
        if not np.all(np.isfinite(winv)):
            raise ValueError("cluster scatter overflowed; data scale too large")
        if np.linalg.cond(winv) > 1e12:
            warnings.warn("near-singular cluster scatter; applying 1e-6 ridge")
            winv = winv + 1e-6 * np.eye(state.n_features)
        w[k] = np.linalg.inv(winv)
        w[k] = (w[k] + w[k].T) / 2
    return GmmState(y=state.y, alpha=alpha, beta=beta, m=m, w=w, nu=nu,
                    alpha0=state.alpha0, beta0=state.beta0, m0=state.m0,
                    w0=state.w0, nu0=state.nu0)


def _expected_log_det(state: GmmState) -> np.ndarray:
    f = state.n_features
    idx = np.arange(1, f + 1)
    out = np.empty(state.n_clusters)
    for k in range(state.n_clusters):
        sign, logdet = np.linalg.slogdet(state.w[k])
        out[k] = digamma((state.nu[k] + 1 - idx) / 2).sum() + f * np.log(2) + logdet
    return out


def _expected_log_pi(state: GmmState) -> np.ndarray:
    return digamma(state.alpha) - digamma(state.alpha.sum())


def gmm_log_joint_table(state: GmmState) -> np.ndarray:
    """(n_points, K) expected log joint contribution of assigning d to k."""
    f = state.n_features
    eln_pi = _expected_log_pi(state)
    eln_det = _expected_log_det(state)
    quad = np.empty((state.n_points, state.n_clusters))
    for k in range(state.n_clusters):
        diff = state.y - state.m[k]
        quad[:, k] = f / state.beta[k] + \
            state.nu[k] * np.einsum("ni,ij,nj->n", diff, state.w[k], diff)
    return eln_pi + 0.5 * eln_det - 0.5 * f * np.log(2 * np.pi) - 0.5 * quad


def gmm_responsibilities(state: GmmState) -> np.ndarray:
    """Closed-form E-step: row-softmax of the expected log joint table."""
    table = gmm_log_joint_table(state)
    table = table - table.max(axis=1, keepdims=True)
    r = np.exp(table)
    return r / r.sum(axis=1, keepdims=True)


def gmm_log_joint(state: GmmState, x) -> dc.Node:
    """Traced expected log joint of a full allocation (n_points, K) one-hot
    (or relaxed) matrix; linear in every row."""
    node = x if isinstance(x, dc.Node) else dc.const(np.asarray(x, dtype=np.float64))
    if node.value.shape[-2:] != (state.n_points, state.n_clusters):
        raise ValueError("allocation must have one row per data point")
    return dc.masked_lookup(node, gmm_log_joint_table(state), n_reduce=2)


def _log_wishart_b(w: np.ndarray, nu: float) -> float:
    f = w.shape[0]
    sign, logdet = np.linalg.slogdet(w)
    idx = np.arange(1, f + 1)
    return (-0.5 * nu * logdet - 0.5 * nu * f * np.log(2)
            - 0.25 * f * (f - 1) * np.log(np.pi)
            - gammaln((nu + 1 - idx) / 2).sum())


def _log_dirichlet_c(alpha: np.ndarray) -> float:
    return gammaln(alpha.sum()) - gammaln(alpha).sum()


def gmm_elbo(state: GmmState, resp: np.ndarray) -> float:
    """Evidence lower bound of the full conjugate model at (state, resp)."""
    resp = np.asarray(resp, dtype=np.float64)
    n, f, kk = state.n_points, state.n_features, state.n_clusters
    nk, xbar, scatter = _cluster_stats(state, resp)
    eln_pi = _expected_log_pi(state)
    eln_det = _expected_log_det(state)
    w0inv = np.linalg.inv(state.w0)

    lik = 0.0
    for k in range(kk):
        dxm = xbar[k] - state.m[k]
        lik += 0.5 * (nk[k] * (eln_det[k] - f / state.beta[k] - f * np.log(2 * np.pi))
                      - state.nu[k] * np.trace(scatter[k] @ state.w[k])
                      - nk[k] * state.nu[k] * dxm @ state.w[k] @ dxm)
    assign_prior = float((resp * eln_pi).sum())
    pi_prior = _log_dirichlet_c(np.full(kk, state.alpha0)) + \
        (state.alpha0 - 1.0) * eln_pi.sum()
    param_prior = kk * _log_wishart_b(state.w0, state.nu0) + \
        0.5 * (state.nu0 - f - 1) * eln_det.sum()
    for k in range(kk):
        dm = state.m[k] - state.m0
        param_prior += 0.5 * (f * np.log(state.beta0 / (2 * np.pi)) + eln_det[k]
                              - f * state.beta0 / state.beta[k]
                              - state.beta0 * state.nu[k] * dm @ state.w[k] @ dm)
        param_prior -= 0.5 * state.nu[k] * np.trace(w0inv @ state.w[k])

    with np.errstate(divide="ignore", invalid="ignore"):
        ent_terms = np.where(resp > 0, resp * np.log(resp), 0.0)
    assign_q = float(ent_terms.sum())
    pi_q = float(((state.alpha - 1.0) * eln_pi).sum() + _log_dirichlet_c(state.alpha))
    param_q = 0.0
    for k in range(kk):
        wishart_entropy = (-_log_wishart_b(state.w[k], state.nu[k])
                           - 0.5 * (state.nu[k] - f - 1) * eln_det[k]
                           + 0.5 * state.nu[k] * f)
        param_q += (0.5 * eln_det[k] + 0.5 * f * np.log(state.beta[k] / (2 * np.pi))
                    - 0.5 * f - wishart_entropy)

    return float(lik + assign_prior + pi_prior + param_prior
                 - assign_q - pi_q - param_q)


def simulated_clusters(rng):
    """Three well-separated planar clusters, 100 points each, unit variance."""
    centers = np.array([[0.0, 2.0], [1.7, -1.0], [-1.7, -1.0]])
    points, labels = [], []
    for i, c in enumerate(centers):
        points.append(c + rng.normal(size=(100, 2)))
        labels.extend([i] * 100)
    return np.vstack(points), np.array(labels)
