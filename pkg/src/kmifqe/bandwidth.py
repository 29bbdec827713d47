"""Plug-in bandwidth selection for the relaxed importance ratio.

The leading-order mean squared error of the resampled TD update vector is
LOMSE(h) = h^4 ||b||^2 + v / (n h^d), with b the bias constant vector
(gamma/2 times the mean Laplacian-weighted parameter gradient) and v the
variance constant (kernel constant times the mean squared TD error weighted
by gradient norm over the behavior density at the target action). Setting
the derivative to zero gives the closed-form optimum
h* = (v d / (4 n ||b||^2))^{1/(d+4)}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import kernel_constant

__all__ = [
    "BandwidthEstimate",
    "bias_constant",
    "bias_constant_from_nets",
    "bias_norm_sq_split",
    "variance_constant",
    "variance_constant_from_nets",
    "lomse",
    "lomse_derivative",
    "optimal_bandwidth",
]

DEFAULT_H_BOUNDS = (1e-3, 1e2)


@dataclass(frozen=True)
class BandwidthEstimate:
    b_norm_sq: float
    v: float
    d: int
    n: int
    h_star: float
    lomse_at_h_star: float
    fallback: bool = False
    clamped: bool = False


def bias_constant(net, states, actions, laplacians, gamma: float):
    """Bias constant vector from precomputed target-network Laplacians.

    (gamma / 2k) * sum_i lap_i * dtheta Q(s_i, a_i); returns (vector, ||.||^2).
    """
    laplacians = np.asarray(laplacians, dtype=np.float64)
    if laplacians.ndim != 1 or laplacians.shape[0] == 0:
        raise ValueError("expected a nonempty 1-d array of Laplacians")
    if not np.all(np.isfinite(laplacians)):
        raise ValueError("non-finite Laplacian entries")
    k = laplacians.shape[0]
    weights = (gamma / (2.0 * k)) * laplacians
    vec = net.grads_weighted(states, actions, weights)
    return vec, float(vec @ vec)


def bias_constant_from_nets(net, target, target_policy, states, actions, next_states,
                            gamma: float):
    """Bias constant with Laplacians evaluated on the frozen target network."""
    pi_next = target_policy.act_batch(next_states)
    lap = target.action_laplacians(next_states, pi_next)
    return bias_constant(net, states, actions, lap, gamma)


def bias_norm_sq_split(net, states, actions, laplacians, gamma: float, rng) -> float:
    """Unbiased ||b||^2 from the dot product of two independent half-batch estimates.

    Avoids squaring a single-batch estimate (whose expectation adds a variance
    term); E[b_1 . b_2] = ||E b||^2 because the halves are disjoint.
    """
    k = np.asarray(laplacians).shape[0]
    if k < 2:
        raise ValueError("need at least two samples to split")
    perm = rng.permutation(k)
    half = k // 2
    i1, i2 = perm[:half], perm[half : 2 * half]
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    laplacians = np.asarray(laplacians, dtype=np.float64)
    v1, _ = bias_constant(net, states[i1], actions[i1], laplacians[i1], gamma)
    v2, _ = bias_constant(net, states[i2], actions[i2], laplacians[i2], gamma)
    return float(v1 @ v2)


def variance_constant(td_errors, grad_sqnorms, target_densities, d: int,
                      density_floor: float = 1e-5) -> float:
    """Variance constant from precomputed per-sample terms.

    C(K) * mean_i td_i^2 * ||g_i||^2 / mu_i with mu_i floored; td_i is the TD
    error against the target-policy action, r + gamma Qbar(s', pi(s')) - Q(s, a).
    """
    td = np.asarray(td_errors, dtype=np.float64)
    g2 = np.asarray(grad_sqnorms, dtype=np.float64)
    mu = np.maximum(np.asarray(target_densities, dtype=np.float64), density_floor)
    return float(kernel_constant(d) * np.mean(td * td * g2 / mu))


def variance_constant_from_nets(net, target, target_policy, behavior, rewards,
                                states, actions, next_states, terminals, gamma: float,
                                density_floor: float = 1e-5) -> float:
    """Variance constant evaluated directly from networks and behavior density."""
    pi_next = target_policy.act_batch(next_states)
    qbar = target.q_values(next_states, pi_next)
    cont = 1.0 - np.asarray(terminals, dtype=np.float64)
    q, _, g2 = net.value_grad_stats(states, actions, np.zeros(len(rewards)))
    td = np.asarray(rewards, dtype=np.float64) + gamma * cont * qbar - q
    dens = np.exp(behavior.logdensity_batch(next_states, pi_next))
    d = np.asarray(pi_next).shape[1]
    return variance_constant(td, g2, dens, d, density_floor)


def lomse(h: float, n: int, d: int, b_norm_sq: float, v: float) -> float:
    """Leading-order MSE h^4 ||b||^2 + v / (n h^d)."""
    return float(h ** 4 * b_norm_sq + v / (n * h ** d))


def lomse_derivative(h: float, n: int, d: int, b_norm_sq: float, v: float) -> float:
    """d LOMSE / dh = 4 h^3 ||b||^2 - v d / (n h^{d+1}); zero at the optimum."""
    return float(4.0 * h ** 3 * b_norm_sq - v * d / (n * h ** (d + 1)))


def optimal_bandwidth(b_norm_sq: float, v: float, n: int, d: int,
                      fallback_h: float = 1.0,
                      bounds: tuple[float, float] = DEFAULT_H_BOUNDS) -> BandwidthEstimate:
    """Closed-form LOMSE minimizer, with fallback when either constant vanishes.

    A nonpositive ``b_norm_sq`` or ``v`` leaves the minimizer undefined (the
    LOMSE is then monotone); the previous/default bandwidth is kept and
    flagged. The result is clamped into ``bounds`` to keep kernel evaluations
    finite, with the clamp flagged as well.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    fallback = not (b_norm_sq > 0.0 and v > 0.0 and np.isfinite(b_norm_sq) and np.isfinite(v))
    if fallback:
        h = float(fallback_h)
    else:
        h = float((v * d / (4.0 * n * b_norm_sq)) ** (1.0 / (d + 4)))
    lo, hi = bounds
    clamped = h < lo or h > hi
    h = float(min(max(h, lo), hi))
    return BandwidthEstimate(
        b_norm_sq=float(b_norm_sq),
        v=float(v),
        d=int(d),
        n=int(n),
        h_star=h,
        lomse_at_h_star=lomse(h, n, d, b_norm_sq, v) if not fallback else float("nan"),
        fallback=fallback,
        clamped=clamped,
    )
