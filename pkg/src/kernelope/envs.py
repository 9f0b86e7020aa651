"""Linear-Gaussian MDP environments, policies, trajectory simulation, and dataset I/O.

The benchmark environment: s_{t+1} = coeff_a * a_t + coeff_s * s_t + N(0, noise_std^2),
reward r_t = -s_{t+1}^2 (the squared state the transition lands in), behavior policy
a_t | s_t ~ N(mean_coeff * s_t, std^2), evaluation policy a_t = theta * s_t.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

InitState = Union[float, tuple]  # constant, or ("normal", mean, std)


class SimulationError(RuntimeError):
    """A rollout produced a non-finite state or action."""


@dataclass(frozen=True)
class DeterministicPolicy:
    """Linear deterministic policy tau_theta(s) = theta * s; grad wrt theta is s."""

    theta: float
    form: str = "linear"

    def __post_init__(self) -> None:
        if self.form != "linear":
            raise ValueError(f"unsupported policy form {self.form!r}")
        if not math.isfinite(self.theta):
            raise ValueError("theta must be finite")

    def tau(self, s):
        return self.theta * np.asarray(s, dtype=float)

    def grad_tau(self, s):
        return np.asarray(s, dtype=float)

    def with_theta(self, theta: float) -> "DeterministicPolicy":
        return DeterministicPolicy(float(theta), self.form)


@dataclass(frozen=True)
class BehaviorModel:
    """Gaussian behavior policy a | s ~ N(mean_coeff * s, std^2)."""

    mean_coeff: float = 0.8
    std: float = 1.0
    known: bool = True

    def __post_init__(self) -> None:
        if not self.std > 0:
            raise ValueError("behavior std must be positive")

    def mean(self, s):
        return self.mean_coeff * np.asarray(s, dtype=float)

    def density(self, s, a):
        z = (np.asarray(a, dtype=float) - self.mean(s)) / self.std
        return np.exp(-0.5 * z * z) / (self.std * math.sqrt(2.0 * math.pi))

    def density_da(self, s, a):
        """Derivative of the conditional density wrt the action."""
        a = np.asarray(a, dtype=float)
        return self.density(s, a) * (self.mean(s) - a) / (self.std**2)

    def sample(self, s, rng: np.random.Generator):
        s = np.asarray(s, dtype=float)
        return self.mean(s) + self.std * rng.standard_normal(s.shape)


@dataclass(frozen=True)
class EnvConfig:
    """Linear-Gaussian transition with negative-squared-state reward."""

    coeff_a: float = 1.0
    coeff_s: float = -1.0
    noise_std: float = 0.3
    horizon: int = 20
    init_state: InitState = 0.0
    transition: str = "linear_gaussian"
    reward: str = "neg_square"
    env_id: str = "lqg"

    def __post_init__(self) -> None:
        if self.transition != "linear_gaussian":
            raise ValueError(f"unsupported transition {self.transition!r}")
        if self.reward != "neg_square":
            raise ValueError(f"unsupported reward {self.reward!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if isinstance(self.init_state, tuple):
            kind = self.init_state[0]
            if kind != "normal" or len(self.init_state) != 3:
                raise ValueError(f"bad init_state spec {self.init_state!r}")

    def draw_init(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if isinstance(self.init_state, tuple):
            _, mean, std = self.init_state
            return float(mean) + float(std) * rng.standard_normal(n)
        return np.full(n, float(self.init_state))

    def init_moments(self) -> tuple[float, float]:
        """(mean, variance) of the initial state."""
        if isinstance(self.init_state, tuple):
            _, mean, std = self.init_state
            return float(mean), float(std) ** 2
        return float(self.init_state), 0.0

    def step(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator):
        """One transition; returns (next_state, reward). Reward is -next_state^2."""
        eps = self.noise_std * rng.standard_normal(s.shape)
        s_next = self.coeff_a * a + self.coeff_s * s + eps
        return s_next, -s_next * s_next


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.states) == len(self.actions) == len(self.rewards) >= 1):
            raise ValueError("states/actions/rewards must share a length H >= 1")
        for name in ("states", "actions", "rewards"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def horizon(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class Dataset:
    """Logged trajectories as (n, H) arrays, row i = trajectory i."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    horizon: int
    seed: int = 0
    env_id: str = ""

    def __post_init__(self) -> None:
        for name in ("states", "actions", "rewards"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape != (self.n, self.horizon):
                raise ValueError(f"{name} must have shape (n, horizon)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        if self.n < 1:
            raise ValueError("dataset must contain at least one trajectory")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i])

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.states[idx].copy(),
            self.actions[idx].copy(),
            self.rewards[idx].copy(),
            self.horizon,
            self.seed,
            self.env_id,
        )

    # -- CSV interface: header traj_id,t,state,action,reward; t is 1-based --

    def to_csv(self, path_or_buf) -> None:
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            buf = open(path_or_buf, "w", newline="")
            close = True
        else:
            buf = path_or_buf
        try:
            writer = csv.writer(buf)
            writer.writerow(["traj_id", "t", "state", "action", "reward"])
            for i in range(self.n):
                for t in range(self.horizon):
                    writer.writerow(
                        [
                            i,
                            t + 1,
                            format(self.states[i, t], ".17g"),
                            format(self.actions[i, t], ".17g"),
                            format(self.rewards[i, t], ".17g"),
                        ]
                    )
        finally:
            if close:
                buf.close()

    @classmethod
    def from_csv(cls, path_or_buf, seed: int = 0, env_id: str = "") -> "Dataset":
        if isinstance(path_or_buf, (str, bytes)):
            with open(path_or_buf, "r", newline="") as fh:
                text = fh.read()
        else:
            text = path_or_buf.read()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["traj_id", "t", "state", "action", "reward"]:
            raise ValueError("bad dataset CSV header")
        records: dict[int, dict[int, tuple[float, float, float]]] = {}
        for row in rows[1:]:
            if not row:
                continue
            i, t = int(row[0]), int(row[1])
            records.setdefault(i, {})[t] = (float(row[2]), float(row[3]), float(row[4]))
        ids = sorted(records)
        horizons = {len(records[i]) for i in ids}
        if len(horizons) != 1:
            raise ValueError("trajectories with unequal horizons in CSV")
        horizon = horizons.pop()
        n = len(ids)
        states = np.empty((n, horizon))
        actions = np.empty((n, horizon))
        rewards = np.empty((n, horizon))
        for row_idx, i in enumerate(ids):
            for t in range(1, horizon + 1):
                if t not in records[i]:
                    raise ValueError(f"trajectory {i} missing timestep {t}")
                states[row_idx, t - 1], actions[row_idx, t - 1], rewards[row_idx, t - 1] = records[i][t]
        return cls(states, actions, rewards, horizon, seed, env_id)


Actor = Union[BehaviorModel, DeterministicPolicy]


def _act(actor: Actor, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if isinstance(actor, BehaviorModel):
        return actor.sample(s, rng)
    return actor.tau(s)


def simulate(env: EnvConfig, actor: Actor, n: int, seed: int) -> Dataset:
    """Draw n i.i.d. trajectories of length env.horizon under the given actor.

    Bit-identical output for identical (env, actor, n, seed). Raises
    SimulationError naming the first offending (trajectory, t) if any state or
    action goes non-finite.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    H = env.horizon
    states = np.empty((n, H))
    actions = np.empty((n, H))
    rewards = np.empty((n, H))
    s = env.draw_init(n, rng)
    for t in range(H):
        _check_finite(s, "state", t)
        a = _act(actor, s, rng)
        _check_finite(a, "action", t)
        states[:, t] = s
        actions[:, t] = a
        s, r = env.step(s, a, rng)
        rewards[:, t] = r
    return Dataset(states, actions, rewards, H, seed, env.env_id)


def _check_finite(arr: np.ndarray, what: str, t: int) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise SimulationError(
            f"non-finite {what} in trajectory {bad} at t={t + 1}"
        )


def rollout_returns(env: EnvConfig, actor: Actor, n: int, rng: np.random.Generator) -> np.ndarray:
    """Total return per rollout without materializing trajectories (for MC oracles)."""
    s = env.draw_init(n, rng)
    total = np.zeros(n)
    for t in range(env.horizon):
        _check_finite(s, "state", t)
        a = _act(actor, s, rng)
        _check_finite(a, "action", t)
        s, r = env.step(s, a, rng)
        total += r
    return total
