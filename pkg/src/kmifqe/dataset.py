"""Offline transition data: generation, JSONL serialization, behavior MLE.

A dataset is stored column-wise (numpy arrays) for fast batched access and
serialized as JSON Lines: one manifest header line followed by one
transition object per line. Floats round-trip exactly through Python's
shortest-repr JSON encoding. The manifest carries a content hash over the
transition lines so truncation or edits are detected on load.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .qfunc import Mlp

__all__ = [
    "Transition",
    "DatasetManifest",
    "TransitionDataset",
    "DatasetFormatError",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "initial_states",
    "fit_behavior_gaussian",
    "FittedGaussianPolicy",
]

FORMAT_TAG = "ope-dataset-v1"
LOG_STD_CLAMP = (-5.0, 2.0)


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the offending line number."""


@dataclass(frozen=True)
class Transition:
    """One offline tuple (s, a, r, s', a') with terminal and initial flags."""

    s: np.ndarray
    a: np.ndarray
    r: float
    sp: np.ndarray
    ap: np.ndarray
    terminal: bool
    initial: bool


@dataclass(frozen=True)
class DatasetManifest:
    env_config_hash: str
    behavior_config: dict
    n: int
    seed: int
    gamma: float
    meta: dict = field(default_factory=lambda: {"format": FORMAT_TAG})

    def to_dict(self) -> dict:
        return {
            "kind": "manifest",
            "env_config_hash": self.env_config_hash,
            "behavior_config": self.behavior_config,
            "n": self.n,
            "seed": self.seed,
            "gamma": self.gamma,
            "meta": self.meta,
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        return DatasetManifest(
            env_config_hash=d["env_config_hash"],
            behavior_config=d["behavior_config"],
            n=int(d["n"]),
            seed=int(d["seed"]),
            gamma=float(d["gamma"]),
            meta=d.get("meta", {"format": FORMAT_TAG}),
        )


class TransitionDataset:
    """Column-wise transition storage with a manifest."""

    def __init__(self, s, a, r, sp, ap, terminal, initial, manifest: DatasetManifest):
        self.s = np.asarray(s, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.float64)
        self.r = np.asarray(r, dtype=np.float64)
        self.sp = np.asarray(sp, dtype=np.float64)
        self.ap = np.asarray(ap, dtype=np.float64)
        self.terminal = np.asarray(terminal, dtype=bool)
        self.initial = np.asarray(initial, dtype=bool)
        self.manifest = manifest
        n = self.s.shape[0]
        for name in ("a", "r", "sp", "ap", "terminal", "initial"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"column {name} has inconsistent length")
        for name in ("s", "a", "r", "sp", "ap"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"column {name} contains non-finite entries")

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def row(self, i: int) -> Transition:
        return Transition(
            s=self.s[i].copy(),
            a=self.a[i].copy(),
            r=float(self.r[i]),
            sp=self.sp[i].copy(),
            ap=self.ap[i].copy(),
            terminal=bool(self.terminal[i]),
            initial=bool(self.initial[i]),
        )

    def iter_rows(self):
        for i in range(len(self)):
            yield self.row(i)


def generate_dataset(spec, behavior: envs.BehaviorPolicy, n: int, seed: int,
                     env_config_hash: str = "", behavior_config: dict | None = None
                     ) -> TransitionDataset:
    """Roll behavior-policy episodes until ``n`` transitions are collected.

    Episodes run in parallel (vectorized) to the spec horizon; the stream is
    truncated to exactly ``n``. The recorded next action a' of step t is the
    action the behavior policy actually took at s' (step t+1's action); the
    final step of each episode draws a fresh a' from the behavior policy, so
    a' ~ mu(.|s') holds for every row. Episode starts carry the initial flag;
    horizon truncation is not marked terminal (the continuing-task
    convention both benchmark families use).
    """
    rng = np.random.default_rng(seed)
    horizon = spec.horizon
    episodes = max(1, math.ceil(n / horizon)) if n > 0 else 0
    manifest = DatasetManifest(
        env_config_hash=env_config_hash,
        behavior_config=behavior_config or {},
        n=n,
        seed=seed,
        gamma=spec.gamma,
    )
    q = spec.state_dim
    d = behavior.action_dim
    if n == 0:
        z = np.zeros((0, q))
        za = np.zeros((0, d))
        return TransitionDataset(z, za, np.zeros(0), z, za, np.zeros(0, bool),
                                 np.zeros(0, bool), manifest)

    states = envs.reset_batch(spec, episodes, rng)
    obs_seq = np.empty((horizon + 1, episodes, q))
    act_seq = np.empty((horizon + 1, episodes, d))
    rew_seq = np.empty((horizon, episodes))
    term_seq = np.empty((horizon, episodes), dtype=bool)
    for t in range(horizon):
        obs = envs.observe(spec, states)
        actions = behavior.sample_batch(obs, rng)
        obs_seq[t] = obs
        act_seq[t] = actions
        states, rewards, terms = envs.env_step_batch(spec, states, actions, rng)
        rew_seq[t] = rewards
        term_seq[t] = terms
    final_obs = envs.observe(spec, states)
    obs_seq[horizon] = final_obs
    act_seq[horizon] = behavior.sample_batch(final_obs, rng)

    # Episode-major assembly so each episode is contiguous in the file.
    s = obs_seq[:-1].transpose(1, 0, 2).reshape(-1, q)
    a = act_seq[:-1].transpose(1, 0, 2).reshape(-1, d)
    sp = obs_seq[1:].transpose(1, 0, 2).reshape(-1, q)
    ap = act_seq[1:].transpose(1, 0, 2).reshape(-1, d)
    r = rew_seq.T.reshape(-1)
    terminal = term_seq.T.reshape(-1)
    initial = np.zeros(episodes * horizon, dtype=bool)
    initial[::horizon] = True
    return TransitionDataset(
        s[:n], a[:n], r[:n], sp[:n], ap[:n], terminal[:n], initial[:n], manifest
    )


def _content_hash(lines: list[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def save_dataset(ds: TransitionDataset, path) -> None:
    lines = []
    for i in range(len(ds)):
        rec = {
            "s": ds.s[i].tolist(),
            "a": ds.a[i].tolist(),
            "r": float(ds.r[i]),
            "sp": ds.sp[i].tolist(),
            "ap": ds.ap[i].tolist(),
            "terminal": bool(ds.terminal[i]),
            "initial": bool(ds.initial[i]),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    header = ds.manifest.to_dict()
    header["content_sha256"] = _content_hash(lines)
    text = "\n".join([json.dumps(header, sort_keys=True), *lines])
    Path(path).write_text(text + "\n")


def load_dataset(path) -> TransitionDataset:
    raw = Path(path).read_text().splitlines()
    if not raw:
        raise DatasetFormatError("line 1: empty dataset file")
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: bad manifest JSON ({exc})") from exc
    if header.get("kind") != "manifest":
        raise DatasetFormatError("line 1: missing manifest header")
    manifest = DatasetManifest.from_dict(header)
    body = raw[1:]
    if len(body) != manifest.n:
        raise DatasetFormatError(
            f"line {len(raw)}: expected {manifest.n} transitions, found {len(body)}"
        )
    if header.get("content_sha256") != _content_hash(body):
        raise DatasetFormatError("line 1: manifest content hash does not match data")
    cols = {k: [] for k in ("s", "a", "r", "sp", "ap", "terminal", "initial")}
    for lineno, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
            for k in cols:
                cols[k].append(rec[k])
        except (json.JSONDecodeError, KeyError) as exc:
            raise DatasetFormatError(f"line {lineno}: bad transition record ({exc})") from exc
    return TransitionDataset(
        np.asarray(cols["s"], dtype=np.float64).reshape(manifest.n, -1),
        np.asarray(cols["a"], dtype=np.float64).reshape(manifest.n, -1),
        np.asarray(cols["r"], dtype=np.float64),
        np.asarray(cols["sp"], dtype=np.float64).reshape(manifest.n, -1),
        np.asarray(cols["ap"], dtype=np.float64).reshape(manifest.n, -1),
        np.asarray(cols["terminal"], dtype=bool),
        np.asarray(cols["initial"], dtype=bool),
        manifest,
    )


def initial_states(ds: TransitionDataset) -> np.ndarray:
    """States flagged as episode starts, order preserved."""
    return ds.s[ds.initial].copy()


class FittedGaussianPolicy:
    """State-conditional diagonal Gaussian fitted by maximum likelihood.

    A small network maps the state to a mean vector and per-dimension
    log-stds; log-stds are clamped so the density never collapses, keeping
    importance-ratio denominators bounded away from zero.
    """

    def __init__(self, mlp: Mlp, action_dim: int, clamp=LOG_STD_CLAMP):
        self.mlp = mlp
        self.action_dim = action_dim
        self.clamp = tuple(clamp)

    def mean_and_log_std(self, states: np.ndarray):
        out = self.mlp.forward(np.atleast_2d(np.asarray(states, dtype=np.float64)))
        mean = out[:, : self.action_dim]
        log_std = np.clip(out[:, self.action_dim :], *self.clamp)
        return mean, log_std

    def logdensity_per_dim_batch(self, states, actions) -> np.ndarray:
        mean, log_std = self.mean_and_log_std(states)
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        z = (actions - mean) / np.exp(log_std)
        return -0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)

    def logdensity_batch(self, states, actions) -> np.ndarray:
        return self.logdensity_per_dim_batch(states, actions).sum(axis=1)

    def logdensity(self, state, action) -> float:
        return float(self.logdensity_batch(np.atleast_2d(state), np.atleast_2d(action))[0])

    def density_batch(self, states, actions) -> np.ndarray:
        return np.exp(self.logdensity_batch(states, actions))

    @property
    def factorizes(self) -> bool:
        return True

    def save(self, path) -> None:
        payload = {
            "policy_head": "diag_gaussian",
            "layer_sizes": list(self.mlp.layer_sizes),
            "activation": self.mlp.activation,
            "action_dim": self.action_dim,
            "log_std_clamp": list(self.clamp),
            "params": self.mlp.theta.tolist(),
            "optimizer_state": None,
            "step": 0,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @staticmethod
    def load(path) -> "FittedGaussianPolicy":
        payload = json.loads(Path(path).read_text())
        if payload.get("policy_head") != "diag_gaussian":
            raise ValueError("checkpoint is not a diagonal Gaussian policy head")
        mlp = Mlp(payload["layer_sizes"], payload["activation"],
                  theta=np.asarray(payload["params"], dtype=np.float64))
        return FittedGaussianPolicy(mlp, int(payload["action_dim"]),
                                    tuple(payload["log_std_clamp"]))


def fit_behavior_gaussian(ds: TransitionDataset, hidden=(32, 32), epochs: int = 20,
                          seed: int = 0, learning_rate: float = 1e-3, batch_size: int = 256,
                          val_frac: float = 0.1, clamp=LOG_STD_CLAMP):
    """Fit a state-conditional Gaussian to the dataset's (s, a) pairs by MLE.

    Plain Adam on the negative log likelihood; the clamp on predicted
    log-stds is a hard projection whose gradient is zeroed outside the
    range. Returns (policy, per-epoch validation log-likelihoods).
    """
    n = len(ds)
    if n < 4:
        raise ValueError("dataset too small to fit a behavior policy")
    d = ds.action_dim
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_frac * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    layer_sizes = (ds.state_dim, *hidden, 2 * d)
    mlp = Mlp(layer_sizes, "tanh", seed=seed + 1)
    adam_m = np.zeros(mlp.n_params)
    adam_v = np.zeros(mlp.n_params)
    lo, hi = clamp
    t = 0
    val_ll = []
    policy = FittedGaussianPolicy(mlp, d, clamp)
    for _ in range(epochs):
        order = rng.permutation(train_idx.shape[0])
        for start in range(0, order.shape[0], batch_size):
            idx = train_idx[order[start : start + batch_size]]
            s_b, a_b = ds.s[idx], ds.a[idx]
            out = mlp.forward(s_b)
            mean = out[:, :d]
            raw_log_std = out[:, d:]
            log_std = np.clip(raw_log_std, lo, hi)
            inv_var = np.exp(-2.0 * log_std)
            diff = mean - a_b
            # dNLL/dmean = diff / var ; dNLL/dlogstd = 1 - diff^2 / var
            grad_out = np.concatenate(
                [diff * inv_var,
                 np.where((raw_log_std > lo) & (raw_log_std < hi),
                          1.0 - diff * diff * inv_var, 0.0)],
                axis=1,
            ) / idx.shape[0]
            g = mlp.backprop(s_b, grad_out)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite behavior-fit loss gradient")
            t += 1
            adam_m = 0.9 * adam_m + 0.1 * g
            adam_v = 0.999 * adam_v + 0.001 * g * g
            mhat = adam_m / (1.0 - 0.9 ** t)
            vhat = adam_v / (1.0 - 0.999 ** t)
            mlp.theta = mlp.theta - learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
        val_ll.append(float(policy.logdensity_batch(ds.s[val_idx], ds.a[val_idx]).mean()))
    return policy, val_ll
