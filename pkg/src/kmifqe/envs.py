"""Synthetic benchmark MDPs with known structure.

Two families:

* A discounted linear-quadratic-Gaussian (LQG) system whose true value and
  Q-functions are computable quadratics, used as an exact oracle. Optional
  dummy action coordinates get zero dynamics columns and a tiny quadratic
  cost (1e-3), so curvature along them is small but sign-definite.
* A torque-limited pendulum swing-up task (the classic cos/sin/thetadot
  formulation) with optional dummy action dimensions that never enter the
  dynamics or the reward. Scripted energy-shaping controllers stand in for
  learned policies: a well-tuned one as the deterministic evaluation target
  and a detuned variant as the base of the stochastic behavior policy.

Internal pendulum state is (theta, thetadot) with theta = 0 upright;
observations are (cos theta, sin theta, thetadot). LQG observations equal
states. Rewards are negative quadratic costs in both families. The pendulum
reward is the standard quadratic penalty on angle, speed, and torque; this
implementation fixes it explicitly since only the benchmark's general shape
is standardized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr

__all__ = [
    "LqgSpec",
    "PendulumSpec",
    "LinearPolicy",
    "PendulumSwingupPolicy",
    "BehaviorPolicy",
    "make_lqg",
    "make_lqg_behavior",
    "make_pendulum",
    "make_pendulum_target",
    "make_pendulum_behavior",
    "reset_batch",
    "observe",
    "env_step",
    "env_step_batch",
    "behavior_sample",
    "behavior_logdensity",
    "lqg_true_value",
    "lqg_true_v",
    "lqg_true_q",
    "lqg_q_action_hessian",
    "lqg_value_of_initial_dist",
    "mc_policy_value",
]


def _spectral_radius(m: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(m)).max())


@dataclass(frozen=True)
class LqgSpec:
    """Discounted LQG system s' = F s + G a + eps, r = -(s'Qs + a'Ra)."""

    f_mat: np.ndarray
    g_mat: np.ndarray
    q_cost: np.ndarray
    r_cost: np.ndarray
    noise_cov: np.ndarray
    gamma: float
    k_policy: np.ndarray
    horizon: int = 100
    init_std: float = 1.0
    dummy_dims: int = 0
    a_max: float = 2.0

    def __post_init__(self):
        q = self.f_mat.shape[0]
        d = self.g_mat.shape[1]
        if self.f_mat.shape != (q, q) or self.g_mat.shape != (q, d):
            raise ValueError("inconsistent F/G shapes")
        if self.q_cost.shape != (q, q) or self.r_cost.shape != (d, d):
            raise ValueError("inconsistent cost shapes")
        if self.k_policy.shape != (d, q):
            raise ValueError("inconsistent policy gain shape")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"discount must be in [0, 1), got {self.gamma}")
        if np.any(np.diag(self.r_cost) < 0.0):
            raise ValueError("R cost diagonal must be nonnegative")
        rad = _spectral_radius(self.f_mat + self.g_mat @ self.k_policy) * math.sqrt(self.gamma)
        if rad >= 1.0:
            raise ValueError(
                f"discounted closed loop is unstable: sqrt(gamma) * rho(F + G K) = {rad:.4f}"
            )

    @property
    def state_dim(self) -> int:
        return self.f_mat.shape[0]

    @property
    def action_dim(self) -> int:
        return self.g_mat.shape[1]

    @property
    def real_action_dim(self) -> int:
        return self.action_dim - self.dummy_dims


@dataclass(frozen=True)
class PendulumSpec:
    """Torque-limited pendulum swing-up with optional dummy action dims."""

    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    episode_len: int = 200
    gamma: float = 0.95
    dummy_dims: int = 0

    def __post_init__(self):
        for name in ("gravity", "mass", "length", "dt", "max_torque"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"discount must be in [0, 1), got {self.gamma}")

    @property
    def state_dim(self) -> int:
        return 3  # (cos, sin, thetadot) observation

    @property
    def action_dim(self) -> int:
        return 1 + self.dummy_dims

    @property
    def real_action_dim(self) -> int:
        return 1

    @property
    def a_max(self) -> float:
        return self.max_torque

    @property
    def horizon(self) -> int:
        return self.episode_len

    @property
    def gravity_torque(self) -> float:
        return 3.0 * self.gravity / (2.0 * self.length)

    @property
    def torque_gain(self) -> float:
        return 3.0 / (self.mass * self.length ** 2)


@dataclass(frozen=True)
class LinearPolicy:
    """Deterministic linear state feedback a = K s."""

    gain: np.ndarray

    def act_batch(self, states: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(states, dtype=np.float64)) @ self.gain.T

    def act(self, state) -> np.ndarray:
        return self.act_batch(np.atleast_2d(state))[0]

    def sample_batch(self, states, rng) -> np.ndarray:
        return self.act_batch(states)


@dataclass(frozen=True)
class PendulumSwingupPolicy:
    """Energy-shaping swing-up with a PD catch near the top.

    Pumps energy toward the upright level while far from the top (with a
    torque kick out of the hanging rest point), then hands over to a PD
    balance law once cos(theta) crosses ``switch_cos``. Output is clipped to
    the torque limit; dummy action coordinates are zero.
    """

    k_energy: float
    k_p: float
    k_d: float
    switch_cos: float
    a_max: float
    gravity_torque: float
    dummy_dims: int = 0

    def act_batch(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        c, s, td = obs[:, 0], obs[:, 1], obs[:, 2]
        energy = 0.5 * td * td + self.gravity_torque * c
        u_energy = self.k_energy * (self.gravity_torque - energy) * td
        stuck = (np.abs(td) < 0.2) & (c < 0.0)
        u_energy = np.where(stuck, self.a_max, u_energy)
        u_balance = -(self.k_p * s + self.k_d * td)
        u = np.where(c > self.switch_cos, u_balance, u_energy)
        out = np.zeros((obs.shape[0], 1 + self.dummy_dims))
        out[:, 0] = np.clip(u, -self.a_max, self.a_max)
        return out

    def act(self, obs) -> np.ndarray:
        return self.act_batch(np.atleast_2d(obs))[0]

    def sample_batch(self, obs, rng) -> np.ndarray:
        return self.act_batch(obs)


@dataclass(frozen=True)
class BehaviorPolicy:
    """Stochastic behavior policy around a deterministic base controller.

    kind "lqg": independent Gaussians N(base_i(s), std_i^2) on the real
    action dims (unbounded support), uniform on dummy dims over
    [-a_max, a_max].

    kind "pendulum": the first dim is a mixture of ``1 - uniform_weight``
    box-truncated Gaussian around the base controller and ``uniform_weight``
    uniform over the box; dummy dims are uniform over the box. Truncation
    keeps sampled actions inside the box while the density stays exact and
    strictly positive there.
    """

    kind: str
    base: LinearPolicy | PendulumSwingupPolicy
    gauss_std: np.ndarray
    uniform_weight: float
    a_max: float
    real_dims: int
    dummy_dims: int

    def __post_init__(self):
        if self.kind not in ("lqg", "pendulum"):
            raise ValueError(f"unknown behavior kind {self.kind!r}")
        if self.kind == "pendulum" and self.real_dims != 1:
            raise ValueError("pendulum behavior supports a single real action dim")
        if not (0.0 <= self.uniform_weight < 1.0):
            raise ValueError("uniform weight must be in [0, 1)")
        if np.any(np.asarray(self.gauss_std) <= 0.0):
            raise ValueError("Gaussian stds must be positive (full-support behavior)")

    @property
    def action_dim(self) -> int:
        return self.real_dims + self.dummy_dims

    # ---- sampling ----------------------------------------------------------

    def sample_batch(self, states, rng) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        b = states.shape[0]
        mu = self.base.act_batch(states)[:, : self.real_dims]
        out = np.empty((b, self.action_dim))
        if self.kind == "lqg":
            out[:, : self.real_dims] = rng.normal(mu, self.gauss_std[None, :])
        else:
            pick_uniform = rng.random(b) < self.uniform_weight
            gauss = _sample_truncated_normal(
                rng, mu[:, 0], float(self.gauss_std[0]), -self.a_max, self.a_max
            )
            unif = rng.uniform(-self.a_max, self.a_max, size=b)
            out[:, 0] = np.where(pick_uniform, unif, gauss)
        if self.dummy_dims:
            out[:, self.real_dims :] = rng.uniform(
                -self.a_max, self.a_max, size=(b, self.dummy_dims)
            )
        return out

    def sample(self, state, rng) -> np.ndarray:
        return self.sample_batch(np.atleast_2d(state), rng)[0]

    # ---- densities ---------------------------------------------------------

    def logdensity_per_dim_batch(self, states, actions) -> np.ndarray:
        """Per-dimension log density factors, shape (B, action_dim)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if actions.shape[1] != self.action_dim:
            raise ValueError(f"action dim {actions.shape[1]} != {self.action_dim}")
        mu = self.base.act_batch(states)[:, : self.real_dims]
        out = np.empty_like(actions)
        real = actions[:, : self.real_dims]
        if self.kind == "lqg":
            std = np.asarray(self.gauss_std)[None, :]
            out[:, : self.real_dims] = (
                -0.5 * np.square((real - mu) / std) - np.log(std) - 0.5 * math.log(2 * math.pi)
            )
        else:
            a1 = real[:, 0]
            if np.any(np.abs(a1) > self.a_max + 1e-12):
                raise ValueError("action outside the behavior support box")
            log_trunc = _log_truncated_normal_pdf(
                a1, mu[:, 0], float(self.gauss_std[0]), -self.a_max, self.a_max
            )
            log_unif = -math.log(2.0 * self.a_max)
            out[:, 0] = np.logaddexp(
                math.log1p(-self.uniform_weight) + log_trunc,
                math.log(self.uniform_weight) + log_unif,
            )
        if self.dummy_dims:
            dummies = actions[:, self.real_dims :]
            if np.any(np.abs(dummies) > self.a_max + 1e-12):
                raise ValueError("dummy action outside the behavior support box")
            out[:, self.real_dims :] = -math.log(2.0 * self.a_max)
        return out

    def logdensity_batch(self, states, actions) -> np.ndarray:
        return self.logdensity_per_dim_batch(states, actions).sum(axis=1)

    def logdensity(self, state, action) -> float:
        return float(self.logdensity_batch(np.atleast_2d(state), np.atleast_2d(action))[0])

    def density_batch(self, states, actions) -> np.ndarray:
        return np.exp(self.logdensity_batch(states, actions))

    @property
    def factorizes(self) -> bool:
        return True


def behavior_sample(policy: BehaviorPolicy, state, rng) -> np.ndarray:
    return policy.sample(state, rng)


def behavior_logdensity(policy: BehaviorPolicy, state, action) -> float:
    return policy.logdensity(state, action)


def _sample_truncated_normal(rng, mu, sigma, lo, hi):
    out = rng.normal(mu, sigma)
    bad = (out < lo) | (out > hi)
    while np.any(bad):
        out = np.where(bad, rng.normal(mu, sigma), out)
        bad = (out < lo) | (out > hi)
    return out


def _log_truncated_normal_pdf(x, mu, sigma, lo, hi):
    z = (x - mu) / sigma
    log_phi = -0.5 * z * z - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    mass = ndtr((hi - mu) / sigma) - ndtr((lo - mu) / sigma)
    return log_phi - np.log(mass)


# ---- construction ----------------------------------------------------------


def make_lqg(state_dim: int, real_action_dim: int, dummy_dims: int = 0, *,
             gamma: float = 0.9, noise_std: float = 0.1, init_std: float = 1.0,
             horizon: int = 100, a_max: float = 2.0, seed: int = 0,
             r_real: float = 0.1, r_dummy: float = 1e-3) -> LqgSpec:
    """Random stable LQG with the discounted-LQR gain as the target policy.

    Dummy action coordinates get zero dynamics columns and cost ``r_dummy``
    on the diagonal, so their Q curvature is tiny but sign-definite.
    """
    rng = np.random.default_rng(seed)
    f_raw = rng.normal(size=(state_dim, state_dim))
    f_mat = 0.85 * f_raw / _spectral_radius(f_raw)
    g_real = rng.normal(size=(state_dim, real_action_dim)) * 0.5
    g_mat = np.concatenate([g_real, np.zeros((state_dim, dummy_dims))], axis=1)
    q_cost = np.eye(state_dim)
    r_diag = np.concatenate([np.full(real_action_dim, r_real), np.full(dummy_dims, r_dummy)])
    r_cost = np.diag(r_diag)
    k_real = _discounted_lqr_gain(f_mat, g_real, q_cost, np.eye(real_action_dim) * r_real, gamma)
    k_policy = np.concatenate([k_real, np.zeros((dummy_dims, state_dim))], axis=0)
    return LqgSpec(
        f_mat=f_mat,
        g_mat=g_mat,
        q_cost=q_cost,
        r_cost=r_cost,
        noise_cov=np.eye(state_dim) * noise_std ** 2,
        gamma=gamma,
        k_policy=k_policy,
        horizon=horizon,
        init_std=init_std,
        dummy_dims=dummy_dims,
        a_max=a_max,
    )


def _discounted_lqr_gain(f, g, q, r, gamma, tol=1e-12, max_iters=200_000):
    """Value-iterate the discounted Riccati recursion for the optimal gain."""
    p = q.copy()
    for _ in range(max_iters):
        gpf = g.T @ p @ f
        gain_lhs = r + gamma * g.T @ p @ g
        p_next = q + gamma * f.T @ p @ f - gamma ** 2 * gpf.T @ np.linalg.solve(gain_lhs, gpf)
        if np.abs(p_next - p).max() < tol:
            p = p_next
            break
        p = p_next
    gpf = g.T @ p @ f
    return -gamma * np.linalg.solve(r + gamma * g.T @ p @ g, gpf)


def make_lqg_behavior(spec: LqgSpec, gain_scale: float = 0.8,
                      noise_std: float = 0.4) -> BehaviorPolicy:
    """Detuned-gain Gaussian behavior policy for an LQG spec."""
    real = spec.real_action_dim
    k_scaled = np.concatenate(
        [gain_scale * spec.k_policy[:real], np.zeros((spec.dummy_dims, spec.state_dim))], axis=0
    )
    rad = _spectral_radius(spec.f_mat + spec.g_mat @ k_scaled)
    if rad >= 1.0:
        raise ValueError(f"behavior closed loop unstable: rho = {rad:.4f}")
    return BehaviorPolicy(
        kind="lqg",
        base=LinearPolicy(gain=k_scaled),
        gauss_std=np.full(real, noise_std),
        uniform_weight=0.0,
        a_max=spec.a_max,
        real_dims=real,
        dummy_dims=spec.dummy_dims,
    )


def make_pendulum(dummy_dims: int = 0, gamma: float = 0.95, **kwargs) -> PendulumSpec:
    return PendulumSpec(dummy_dims=dummy_dims, gamma=gamma, **kwargs)


def make_pendulum_target(spec: PendulumSpec) -> PendulumSwingupPolicy:
    """Well-tuned swing-up-and-balance controller used as the target policy."""
    return PendulumSwingupPolicy(
        k_energy=1.2,
        k_p=12.0,
        k_d=3.0,
        switch_cos=math.cos(0.26),
        a_max=spec.max_torque,
        gravity_torque=spec.gravity_torque,
        dummy_dims=spec.dummy_dims,
    )


def make_pendulum_behavior(spec: PendulumSpec, noise_frac: float = 0.5,
                           uniform_weight: float = 0.2) -> BehaviorPolicy:
    """Detuned controller plus Gaussian/uniform mixture noise on the torque."""
    base = PendulumSwingupPolicy(
        k_energy=0.6,
        k_p=8.0,
        k_d=1.5,
        switch_cos=math.cos(0.26),
        a_max=spec.max_torque,
        gravity_torque=spec.gravity_torque,
        dummy_dims=spec.dummy_dims,
    )
    return BehaviorPolicy(
        kind="pendulum",
        base=base,
        gauss_std=np.array([noise_frac * spec.max_torque]),
        uniform_weight=uniform_weight,
        a_max=spec.max_torque,
        real_dims=1,
        dummy_dims=spec.dummy_dims,
    )


# ---- dynamics --------------------------------------------------------------


def reset_batch(spec, n: int, rng) -> np.ndarray:
    """Initial internal states: N(0, init_std^2 I) for LQG, uniform angle/speed
    for the pendulum."""
    if isinstance(spec, LqgSpec):
        return rng.normal(0.0, spec.init_std, size=(n, spec.state_dim))
    theta = rng.uniform(-math.pi, math.pi, size=n)
    thetadot = rng.uniform(-1.0, 1.0, size=n)
    return np.stack([theta, thetadot], axis=1)


def observe(spec, states: np.ndarray) -> np.ndarray:
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if isinstance(spec, LqgSpec):
        return states
    theta, thetadot = states[:, 0], states[:, 1]
    return np.stack([np.cos(theta), np.sin(theta), thetadot], axis=1)


def _angle_normalize(theta):
    return np.mod(theta + math.pi, 2.0 * math.pi) - math.pi


def env_step_batch(spec, states, actions, rng):
    """Vectorized transition; returns (next internal states, rewards, terminals).

    LQG actions enter linearly and are not clamped; pendulum torque is
    clamped to the limit for both the dynamics and the control cost, and
    only the first action coordinate is used.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if not np.all(np.isfinite(states)):
        raise ValueError("non-finite state")
    b = states.shape[0]
    if isinstance(spec, LqgSpec):
        rewards = -(
            np.einsum("bi,ij,bj->b", states, spec.q_cost, states)
            + np.einsum("bi,ij,bj->b", actions, spec.r_cost, actions)
        )
        nxt = states @ spec.f_mat.T + actions @ spec.g_mat.T
        if np.any(np.diag(spec.noise_cov) > 0.0):
            nxt = nxt + rng.normal(size=(b, spec.state_dim)) @ np.linalg.cholesky(
                spec.noise_cov
            ).T
        return nxt, rewards, np.zeros(b, dtype=bool)
    theta, thetadot = states[:, 0], states[:, 1]
    u = np.clip(actions[:, 0], -spec.max_torque, spec.max_torque)
    costs = _angle_normalize(theta) ** 2 + 0.1 * thetadot ** 2 + 0.001 * u ** 2
    newthdot = thetadot + (spec.gravity_torque * np.sin(theta) + spec.torque_gain * u) * spec.dt
    newthdot = np.clip(newthdot, -spec.max_speed, spec.max_speed)
    newtheta = theta + newthdot * spec.dt
    return np.stack([newtheta, newthdot], axis=1), -costs, np.zeros(b, dtype=bool)


def env_step(spec, state, action, rng):
    nxt, rewards, terms = env_step_batch(spec, np.atleast_2d(state), np.atleast_2d(action), rng)
    return nxt[0], float(rewards[0]), bool(terms[0])


# ---- exact LQG value -------------------------------------------------------


def lqg_true_value(spec: LqgSpec, tol: float = 1e-12, max_iters: int = 500_000):
    """Quadratic value V(s) = s'Ps + c of the linear target policy.

    P is the fixed point of P = -(Q + K'RK) + gamma (F+GK)' P (F+GK) and
    c = gamma tr(P Sigma) / (1 - gamma); iterated to ``tol``.
    """
    closed = spec.f_mat + spec.g_mat @ spec.k_policy
    rad = _spectral_radius(closed) * math.sqrt(spec.gamma)
    if rad >= 1.0:
        raise ValueError(f"discounted closed loop unstable: radius {rad:.4f}")
    cost = -(spec.q_cost + spec.k_policy.T @ spec.r_cost @ spec.k_policy)
    p = np.zeros_like(spec.q_cost)
    for _ in range(max_iters):
        p_next = cost + spec.gamma * closed.T @ p @ closed
        if np.abs(p_next - p).max() < tol:
            p = p_next
            break
        p = p_next
    else:
        raise RuntimeError("value fixed-point iteration did not converge")
    p = 0.5 * (p + p.T)
    c = spec.gamma * float(np.trace(p @ spec.noise_cov)) / (1.0 - spec.gamma)
    return p, c


def lqg_true_v(spec: LqgSpec, state) -> float:
    p, c = lqg_true_value(spec)
    s = np.asarray(state, dtype=np.float64)
    return float(s @ p @ s + c)


def lqg_true_q(spec: LqgSpec, state, action, pc=None) -> float:
    """Q(s, a) = r(s, a) + gamma E[V(s')] in closed form."""
    if pc is None:
        pc = lqg_true_value(spec)
    p, c = pc
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    r = -(s @ spec.q_cost @ s + a @ spec.r_cost @ a)
    nxt = spec.f_mat @ s + spec.g_mat @ a
    ev = nxt @ p @ nxt + float(np.trace(p @ spec.noise_cov)) + c
    return float(r + spec.gamma * ev)


def lqg_q_action_hessian(spec: LqgSpec, pc=None) -> np.ndarray:
    """Action Hessian of the true Q, constant in (s, a): 2(-R + gamma G'PG)."""
    if pc is None:
        pc = lqg_true_value(spec)
    p, _ = pc
    return 2.0 * (-spec.r_cost + spec.gamma * spec.g_mat.T @ p @ spec.g_mat)


def lqg_value_of_initial_dist(spec: LqgSpec) -> float:
    """Normalized target value (1-gamma) E_{s0}[V(s0)] under s0 ~ N(0, init_std^2 I)."""
    p, c = lqg_true_value(spec)
    return float((1.0 - spec.gamma) * (spec.init_std ** 2 * np.trace(p) + c))


# ---- Monte Carlo -----------------------------------------------------------


def mc_policy_value(spec, policy, episodes: int, rng, horizon: int | None = None):
    """Normalized value (1-gamma) E[sum gamma^t r_t] by batched rollouts.

    Returns (value, standard_error). Episodes are truncated at the spec
    horizon (or ``horizon``), bounding the omitted tail by gamma^T r_max.
    """
    t_max = spec.horizon if horizon is None else horizon
    states = reset_batch(spec, episodes, rng)
    returns = np.zeros(episodes)
    disc = 1.0
    for _ in range(t_max):
        obs = observe(spec, states)
        actions = policy.sample_batch(obs, rng)
        states, rewards, _ = env_step_batch(spec, states, actions, rng)
        returns += disc * rewards
        disc *= spec.gamma
    value = (1.0 - spec.gamma) * returns
    se = float(value.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return float(value.mean()), se
