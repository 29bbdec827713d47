"""Closed-form optimal Mahalanobis metric from the action Hessian.

Given the Hessian H of the target Q-function w.r.t. the action at the target
action, the unit-determinant SPD metric minimizing the squared trace term
tr(A^{-1} H)^2 is built from the eigenstructure of H: positive and negative
eigenvalue groups are scaled by their counts (d_plus * lambda for positive,
d_minus * |lambda| for negative) and the result is renormalized to
determinant one. When H mixes signs the optimal trace is exactly zero; the
metric then stretches the kernel along low-curvature directions so that the
relaxation of the target policy hurts least.

Eigenvalues judged degenerate (|lambda| below ``eps`` relative to the largest
magnitude) are excluded from both groups and their directions receive the
geometric mean of the retained magnitudes before renormalization; an
all-degenerate Hessian falls back to the identity metric with a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ensure_symmetric, jacobi_eigh_batch

__all__ = [
    "StateMetric",
    "optimal_metric",
    "optimal_metric_batch",
    "trace_term",
    "bias_norm_with_metric",
    "upper_bound_u",
]

DEGENERACY_EPS = 1e-6
_ABS_FLOOR = 1e-300


@dataclass(frozen=True)
class StateMetric:
    """Unit-determinant SPD metric A, factor L with L L^T = A, and provenance."""

    a_matrix: np.ndarray
    l_factor: np.ndarray
    alpha: float
    hessian_eigenvalues: np.ndarray
    d_plus: int
    d_minus: int
    degenerate: bool


def optimal_metric(hess, eps: float = DEGENERACY_EPS) -> StateMetric:
    """Metric minimizing the squared trace term for a single Hessian."""
    h = ensure_symmetric(hess)
    a, l, _, lam, dp, dm, alpha, degen = _metric_core(h[None], eps)
    return StateMetric(
        a_matrix=a[0],
        l_factor=l[0],
        alpha=float(alpha[0]),
        hessian_eigenvalues=lam[0],
        d_plus=int(dp[0]),
        d_minus=int(dm[0]),
        degenerate=bool(degen[0]),
    )


def optimal_metric_batch(hessians: np.ndarray, eps: float = DEGENERACY_EPS):
    """Vectorized metric construction for a stack (B, d, d) of Hessians.

    Returns (A (B, d, d), L (B, d, d), trace_terms (B,), degenerate (B,)).
    The trace term tr(A^{-1} H) is computed in the shared eigenbasis.
    """
    a, l, a_eigs, lam, _, _, _, degen = _metric_core(
        np.asarray(hessians, dtype=np.float64), eps
    )
    traces = (lam / a_eigs).sum(axis=1)
    return a, l, traces, degen


def _metric_core(hessians: np.ndarray, eps: float):
    lam, vecs = jacobi_eigh_batch(hessians)
    dp, dm, degen = _sign_split(lam, eps)
    pre = _a_eigenvalues(lam, dp, dm, degen, eps)
    alpha = _safe_det_norm(pre)
    a_eigs = pre * alpha[:, None]
    a = np.einsum("bij,bj,bkj->bik", vecs, a_eigs, vecs)
    l = np.einsum("bij,bj,bkj->bik", vecs, np.sqrt(a_eigs), vecs)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    l = 0.5 * (l + np.swapaxes(l, 1, 2))
    return a, l, a_eigs, lam, dp, dm, alpha, degen


def _sign_split(lam: np.ndarray, eps: float):
    mags = np.abs(lam)
    top = mags.max(axis=1, keepdims=True)
    retained = mags > np.maximum(eps * top, _ABS_FLOOR)
    dp = np.count_nonzero(retained & (lam > 0.0), axis=1)
    dm = np.count_nonzero(retained & (lam < 0.0), axis=1)
    degen = (dp + dm) == 0
    return dp, dm, degen


def _a_eigenvalues(lam: np.ndarray, dp, dm, degen, eps: float):
    """Pre-normalization metric eigenvalues in the Hessian eigenbasis."""
    mags = np.abs(lam)
    top = mags.max(axis=1, keepdims=True)
    retained = mags > np.maximum(eps * top, _ABS_FLOOR)
    pos = retained & (lam > 0.0)
    neg = retained & (lam < 0.0)
    out = np.where(pos, dp[:, None] * lam, 0.0) + np.where(neg, dm[:, None] * (-lam), 0.0)
    # Excluded directions: geometric mean of the retained eigenvalue magnitudes.
    cnt = retained.sum(axis=1)
    safe_cnt = np.maximum(cnt, 1)
    logmean = np.where(retained, np.log(np.maximum(mags, _ABS_FLOOR)), 0.0).sum(axis=1) / safe_cnt
    gm = np.exp(logmean)
    out = np.where(retained, out, gm[:, None])
    out = np.where(degen[:, None], 1.0, out)
    return out


def _safe_det_norm(a_eigs: np.ndarray):
    d = a_eigs.shape[1]
    logdet = np.log(a_eigs).sum(axis=1)
    return np.exp(-logdet / d)


def trace_term(a_matrix, hess) -> float:
    """tr(A^{-1} H) via a linear solve, no explicit inverse."""
    a_matrix = np.asarray(a_matrix, dtype=np.float64)
    h = np.asarray(hess, dtype=np.float64)
    return float(np.trace(np.linalg.solve(a_matrix, h)))


def bias_norm_with_metric(net, target, target_policy, states, actions, next_states,
                          gamma: float, metrics: np.ndarray | None = None,
                          eps: float = DEGENERACY_EPS) -> float:
    """Squared norm of the metric-aware bias constant vector on a batch.

    Computes || (gamma/2) * mean_i tr(A_i^{-1} H_i) * dtheta Q(s_i, a_i) ||^2
    with H_i the target-network action Hessian at the target action for the
    i-th next state. ``metrics`` may supply precomputed A matrices; identity
    is used when None, which reduces the trace to the plain Laplacian.
    """
    states = np.asarray(states, dtype=np.float64)
    k = states.shape[0]
    pi_next = target_policy.act_batch(next_states)
    hess = target.action_hessians(next_states, pi_next)
    if metrics is None:
        traces = np.einsum("bii->b", hess)
    else:
        traces = np.trace(np.linalg.solve(metrics, hess), axis1=1, axis2=2)
    weights = (gamma / (2.0 * k)) * traces
    vec = net.grads_weighted(states, actions, weights)
    return float(vec @ vec)


def upper_bound_u(net, target, target_policy, states, actions, next_states,
                  gamma: float, metrics: np.ndarray | None = None) -> float:
    """Batch estimate of the trace-squared bias upper bound.

    (gamma^2 / 4) * mean_i tr(A_i^{-1} H_i)^2 * ||dtheta Q(s_i, a_i)||^2.
    Minimized per sample by the closed-form metric, so swapping in
    ``optimal_metric_batch`` output can never increase it.
    """
    pi_next = target_policy.act_batch(next_states)
    hess = target.action_hessians(next_states, pi_next)
    if metrics is None:
        traces = np.einsum("bii->b", hess)
    else:
        traces = np.trace(np.linalg.solve(metrics, hess), axis1=1, axis2=2)
    sqnorms = net.grad_sqnorms(states, actions)
    return float((gamma ** 2 / 4.0) * np.mean(np.square(traces) * sqnorms))
