"""Feed-forward Q-function with exact derivatives and Adam ascent updates.

The network is a plain fully-connected stack with a linear output, stored as
a single flat float64 parameter vector (layer-major, each layer W row-major
then bias). Everything is hand-rolled numpy so that

* parameter gradients come from reverse-mode backprop,
* action gradients/Hessians come from forward propagation of input Jacobians
  and second-order terms through the layers,
* training is bit-deterministic under a fixed seed.

Smooth activations only: piecewise-linear units have zero second derivative
almost everywhere, which would make every action Hessian vanish and starve
the metric learning downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "QNetwork",
    "TargetSnapshot",
    "Mlp",
    "NonFiniteUpdateError",
    "save_checkpoint",
    "load_checkpoint",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteUpdateError(ValueError):
    """An update vector or input contained NaN/inf; training must abort."""


class _Tanh:
    name = "tanh"

    @staticmethod
    def f(u):
        return np.tanh(u)

    @staticmethod
    def d1(u, z):
        return 1.0 - z * z

    @staticmethod
    def d2(u, z):
        return -2.0 * z * (1.0 - z * z)


class _Softplus:
    name = "softplus"

    @staticmethod
    def f(u):
        return np.logaddexp(0.0, u)

    @staticmethod
    def d1(u, z):
        return expit(u)

    @staticmethod
    def d2(u, z):
        sig = expit(u)
        return sig * (1.0 - sig)


ACTIVATIONS = {"tanh": _Tanh, "softplus": _Softplus}


def param_count(layer_sizes) -> int:
    return sum((i + 1) * o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


def init_params(layer_sizes, seed: int) -> np.ndarray:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer, seeded."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


class Mlp:
    """Batched fully-connected network over a flat parameter vector."""

    def __init__(self, layer_sizes, activation="tanh", *, seed=None, theta=None):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(self.layer_sizes) < 2 or any(s <= 0 for s in self.layer_sizes):
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.act = ACTIVATIONS[activation]
        n = param_count(self.layer_sizes)
        if theta is None:
            theta = init_params(self.layer_sizes, 0 if seed is None else seed)
        else:
            theta = np.asarray(theta, dtype=np.float64).copy()
            if theta.shape != (n,):
                raise ValueError(f"parameter vector has length {theta.shape}, expected ({n},)")
        self.theta = theta
        self._layout = []
        off = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._layout.append((off, fan_out, fan_in))
            off += fan_out * fan_in + fan_out
        self.n_params = n

    @property
    def n_layers(self) -> int:
        return len(self._layout)

    def layer(self, l: int):
        off, fan_out, fan_in = self._layout[l]
        w = self.theta[off : off + fan_out * fan_in].reshape(fan_out, fan_in)
        b = self.theta[off + fan_out * fan_in : off + fan_out * fan_in + fan_out]
        return w, b

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activation, theta=self.theta)

    # ---- forward ----------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = np.asarray(x, dtype=np.float64)
        last = self.n_layers - 1
        for l in range(self.n_layers):
            w, b = self.layer(l)
            z = z @ w.T + b
            if l != last:
                z = self.act.f(z)
        return z

    def _forward_cached(self, x):
        inputs = [np.asarray(x, dtype=np.float64)]
        pre = []
        last = self.n_layers - 1
        for l in range(self.n_layers):
            w, b = self.layer(l)
            u = inputs[l] @ w.T + b
            pre.append(u)
            inputs.append(self.act.f(u) if l != last else u)
        return inputs, pre

    # ---- reverse mode ------------------------------------------------------

    def backprop(self, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        """Accumulated parameter gradient of sum_b <dy_b, y_b>."""
        inputs, pre = self._forward_cached(x)
        return self._backprop_core(inputs, pre, np.asarray(dy, dtype=np.float64))[0]

    def _backprop_core(self, inputs, pre, dy):
        grad = np.zeros(self.n_params)
        delta = dy
        deltas = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            deltas[l] = delta
            off, fan_out, fan_in = self._layout[l]
            gw = delta.T @ inputs[l]
            grad[off : off + fan_out * fan_in] = gw.ravel()
            grad[off + fan_out * fan_in : off + fan_out * fan_in + fan_out] = delta.sum(axis=0)
            if l > 0:
                w, _ = self.layer(l)
                delta = (delta @ w) * self.act.d1(pre[l - 1], inputs[l])
        return grad, deltas

    def scalar_stats(self, x: np.ndarray, weights: np.ndarray):
        """For scalar-output nets: values, weighted gradient sum, per-sample norms.

        Returns (y (B,), sum_b weights_b * dtheta y_b (P,), ||dtheta y_b||^2 (B,)).
        One backward pass carries the unweighted per-sample deltas; the
        accumulated gradient folds the weights in at each layer, and the
        squared norms use the rank-one structure of per-sample layer gradients
        (dW_l = delta_l z_{l-1}^T), so nothing of size B x P is built.
        """
        if self.layer_sizes[-1] != 1:
            raise ValueError("scalar_stats requires a scalar output network")
        x = np.asarray(x, dtype=np.float64)
        inputs, pre = self._forward_cached(x)
        y = inputs[-1][:, 0]
        wts = np.asarray(weights, dtype=np.float64)[:, None]
        grad = np.zeros(self.n_params)
        sqnorms = np.zeros(x.shape[0])
        delta = np.ones((x.shape[0], 1))
        for l in range(self.n_layers - 1, -1, -1):
            zin = inputs[l]
            wdelta = wts * delta
            off, fan_out, fan_in = self._layout[l]
            grad[off : off + fan_out * fan_in] = (wdelta.T @ zin).ravel()
            grad[off + fan_out * fan_in : off + fan_out * fan_in + fan_out] = wdelta.sum(axis=0)
            sqnorms += np.square(delta).sum(axis=1) * (1.0 + np.square(zin).sum(axis=1))
            if l > 0:
                w, _ = self.layer(l)
                delta = (delta @ w) * self.act.d1(pre[l - 1], inputs[l])
        return y, grad, sqnorms

    def input_grad(self, x: np.ndarray) -> np.ndarray:
        """d y / d x for scalar-output nets, shape (B, in)."""
        if self.layer_sizes[-1] != 1:
            raise ValueError("input_grad requires a scalar output network")
        inputs, pre = self._forward_cached(x)
        delta = np.ones((np.asarray(x).shape[0], 1))
        for l in range(self.n_layers - 1, 0, -1):
            w, _ = self.layer(l)
            delta = (delta @ w) * self.act.d1(pre[l - 1], inputs[l])
        w0, _ = self.layer(0)
        return delta @ w0

    # ---- forward second order over a trailing input block -------------------

    def block_derivs(self, x: np.ndarray, start: int, *, full_hessian: bool):
        """Gradient and Hessian of the scalar output w.r.t. x[:, start:].

        Propagates first- and second-order sensitivities layer by layer. With
        ``full_hessian=False`` only the Hessian diagonal is carried, which is
        enough for Laplacians and a factor d cheaper.
        """
        if self.layer_sizes[-1] != 1:
            raise ValueError("block_derivs requires a scalar output network")
        x = np.asarray(x, dtype=np.float64)
        bsz = x.shape[0]
        d = self.layer_sizes[0] - start
        if d <= 0:
            raise ValueError("empty trailing block")
        last = self.n_layers - 1
        w0, b0 = self.layer(0)
        a0 = w0[:, start:]  # (n1, d): constant input Jacobian of the first matmul
        if last == 0:
            grad = np.broadcast_to(a0[0], (bsz, d)).copy()
            hess = np.zeros((bsz, d, d)) if full_hessian else np.zeros((bsz, d))
            return grad, hess
        inputs, pre = self._forward_cached(x)
        d1 = self.act.d1(pre[0], inputs[1])
        d2 = self.act.d2(pre[0], inputs[1])
        jac = d1[:, :, None] * a0[None, :, :]
        if full_hessian:
            a0_outer = a0[:, :, None] * a0[:, None, :]
            hess = d2[:, :, None, None] * a0_outer[None]
        else:
            hess = d2[:, :, None] * np.square(a0)[None]
        for l in range(1, last):
            w, _ = self.layer(l)
            ju = np.matmul(w[None], jac)
            if full_hessian:
                hu = np.matmul(w[None], hess.reshape(bsz, -1, d * d)).reshape(bsz, -1, d, d)
            else:
                hu = np.matmul(w[None], hess)
            d1 = self.act.d1(pre[l], inputs[l + 1])
            d2 = self.act.d2(pre[l], inputs[l + 1])
            jac = d1[:, :, None] * ju
            if full_hessian:
                hess = d2[:, :, None, None] * (ju[:, :, :, None] * ju[:, :, None, :])
                hess += d1[:, :, None, None] * hu
            else:
                hess = d2[:, :, None] * np.square(ju) + d1[:, :, None] * hu
        w, _ = self.layer(last)
        grad = np.matmul(w[None], jac)[:, 0, :]
        if full_hessian:
            hout = np.matmul(w[None], hess.reshape(bsz, -1, d * d)).reshape(bsz, 1, d, d)[:, 0]
            hout = 0.5 * (hout + np.swapaxes(hout, 1, 2))
        else:
            hout = np.matmul(w[None], hess)[:, 0, :]
        return grad, hout


@dataclass(frozen=True)
class TargetSnapshot:
    """Frozen copy of the Q parameters taken at a hard update."""

    mlp: Mlp
    state_dim: int
    action_dim: int
    step_index: int

    def q_values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.mlp.forward(_join(states, actions, self.state_dim, self.action_dim))[:, 0]

    def q_value(self, state, action) -> float:
        return float(self.q_values(np.atleast_2d(state), np.atleast_2d(action))[0])

    def action_hessians(self, states, actions, chunk: int = 2048) -> np.ndarray:
        return _chunked_hess(self.mlp, states, actions, self.state_dim, self.action_dim, chunk)

    def action_laplacians(self, states, actions, chunk: int = 8192) -> np.ndarray:
        return _chunked_lap(self.mlp, states, actions, self.state_dim, self.action_dim, chunk)


def _join(states, actions, state_dim, action_dim):
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if s.shape[1] != state_dim:
        raise ValueError(f"state dim {s.shape[1]} != {state_dim}")
    if a.shape[1] != action_dim:
        raise ValueError(f"action dim {a.shape[1]} != {action_dim}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise NonFiniteUpdateError("non-finite state or action input")
    return np.concatenate([s, a], axis=1)


def _chunked_hess(mlp, states, actions, state_dim, action_dim, chunk):
    x = _join(states, actions, state_dim, action_dim)
    outs = []
    for lo in range(0, x.shape[0], chunk):
        _, h = mlp.block_derivs(x[lo : lo + chunk], state_dim, full_hessian=True)
        outs.append(h)
    return np.concatenate(outs, axis=0)


def _chunked_lap(mlp, states, actions, state_dim, action_dim, chunk):
    x = _join(states, actions, state_dim, action_dim)
    outs = []
    for lo in range(0, x.shape[0], chunk):
        _, hd = mlp.block_derivs(x[lo : lo + chunk], state_dim, full_hessian=False)
        outs.append(hd.sum(axis=1))
    return np.concatenate(outs, axis=0)


class QNetwork:
    """Scalar Q(s, a) network with Adam state and exact derivative queries."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), activation="tanh",
                 seed=0, theta=None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        layer_sizes = (self.state_dim + self.action_dim, *hidden, 1)
        self.mlp = Mlp(layer_sizes, activation, seed=seed, theta=theta)
        self.adam_m = np.zeros(self.mlp.n_params)
        self.adam_v = np.zeros(self.mlp.n_params)
        self.adam_t = 0

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    # ---- evaluation --------------------------------------------------------

    def q_values(self, states, actions) -> np.ndarray:
        return self.mlp.forward(_join(states, actions, self.state_dim, self.action_dim))[:, 0]

    def q_value(self, state, action) -> float:
        return float(self.q_values(np.atleast_2d(state), np.atleast_2d(action))[0])

    def grad_params(self, state, action) -> np.ndarray:
        x = _join(np.atleast_2d(state), np.atleast_2d(action), self.state_dim, self.action_dim)
        return self.mlp.backprop(x, np.ones((1, 1)))

    def grads_weighted(self, states, actions, weights) -> np.ndarray:
        """sum_b weights_b * dtheta Q(s_b, a_b)."""
        x = _join(states, actions, self.state_dim, self.action_dim)
        return self.mlp.backprop(x, np.asarray(weights, dtype=np.float64)[:, None])

    def value_grad_stats(self, states, actions, weights):
        x = _join(states, actions, self.state_dim, self.action_dim)
        return self.mlp.scalar_stats(x, weights)

    def grad_sqnorms(self, states, actions) -> np.ndarray:
        x = _join(states, actions, self.state_dim, self.action_dim)
        _, _, sq = self.mlp.scalar_stats(x, np.zeros(x.shape[0]))
        return sq

    def grad_action(self, state, action) -> np.ndarray:
        return self.grad_actions(np.atleast_2d(state), np.atleast_2d(action))[0]

    def grad_actions(self, states, actions) -> np.ndarray:
        x = _join(states, actions, self.state_dim, self.action_dim)
        return self.mlp.input_grad(x)[:, self.state_dim :]

    def hess_action(self, state, action) -> np.ndarray:
        return self.action_hessians(np.atleast_2d(state), np.atleast_2d(action))[0]

    def action_hessians(self, states, actions, chunk: int = 2048) -> np.ndarray:
        return _chunked_hess(self.mlp, states, actions, self.state_dim, self.action_dim, chunk)

    def laplacian_action(self, state, action) -> float:
        return float(self.action_laplacians(np.atleast_2d(state), np.atleast_2d(action))[0])

    def action_laplacians(self, states, actions, chunk: int = 8192) -> np.ndarray:
        return _chunked_lap(self.mlp, states, actions, self.state_dim, self.action_dim, chunk)

    # ---- updates -----------------------------------------------------------

    def adam_step(self, update_vector, step_size: float) -> "QNetwork":
        """Adam moment update applied as ascent along ``update_vector``."""
        g = np.asarray(update_vector, dtype=np.float64)
        if g.shape != (self.mlp.n_params,):
            raise ValueError(f"update vector length {g.shape} != ({self.mlp.n_params},)")
        if not np.all(np.isfinite(g)):
            raise NonFiniteUpdateError("non-finite update vector; aborting training")
        self.adam_t += 1
        self.adam_m = ADAM_BETA1 * self.adam_m + (1.0 - ADAM_BETA1) * g
        self.adam_v = ADAM_BETA2 * self.adam_v + (1.0 - ADAM_BETA2) * g * g
        mhat = self.adam_m / (1.0 - ADAM_BETA1 ** self.adam_t)
        vhat = self.adam_v / (1.0 - ADAM_BETA2 ** self.adam_t)
        self.mlp.theta = self.mlp.theta + step_size * mhat / (np.sqrt(vhat) + ADAM_EPS)
        if not np.all(np.isfinite(self.mlp.theta)):
            raise NonFiniteUpdateError("parameters became non-finite after update")
        return self

    def snapshot(self) -> TargetSnapshot:
        frozen = self.mlp.copy()
        frozen.theta.setflags(write=False)
        return TargetSnapshot(
            mlp=frozen,
            state_dim=self.state_dim,
            action_dim=self.action_dim,
            step_index=self.adam_t,
        )


def hard_update(target: TargetSnapshot | None, net: QNetwork) -> TargetSnapshot:
    """Replace the frozen snapshot with a copy of the current parameters."""
    return net.snapshot()


def save_checkpoint(net: QNetwork, path) -> None:
    payload = {
        "layer_sizes": list(net.mlp.layer_sizes),
        "activation": net.mlp.activation,
        "state_dim": net.state_dim,
        "action_dim": net.action_dim,
        "params": net.mlp.theta.tolist(),
        "optimizer_state": {
            "m": net.adam_m.tolist(),
            "v": net.adam_v.tolist(),
            "step": net.adam_t,
        },
        "step": net.adam_t,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> QNetwork:
    payload = json.loads(Path(path).read_text())
    sizes = payload["layer_sizes"]
    net = QNetwork(
        state_dim=payload["state_dim"],
        action_dim=payload["action_dim"],
        hidden=tuple(sizes[1:-1]),
        activation=payload["activation"],
        theta=np.asarray(payload["params"], dtype=np.float64),
    )
    opt = payload["optimizer_state"]
    net.adam_m = np.asarray(opt["m"], dtype=np.float64)
    net.adam_v = np.asarray(opt["v"], dtype=np.float64)
    net.adam_t = int(opt["step"])
    return net
