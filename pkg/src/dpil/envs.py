"""Toy continuous-control tasks with closed-form expert controllers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class PointReach:
    """2-D point mass steered toward a goal.

    ``s' = clip(s + clip(a, -1, 1) * dt, -box, box)``, reward ``-||s - goal||``.
    Initial positions are uniform on ``[-1, 1]^2``. Rewards are computed on the
    state before the move.
    """

    goal: tuple = (0.5, 0.5)
    dt: float = 0.1
    gain: float = 5.0
    horizon: int = 25
    box: float = 2.0
    name: str = "point_reach"

    state_dim = 2
    action_dim = 2

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < 1 or self.gain <= 0 or self.box <= 0:
            raise InvalidInputError("PointReach needs dt > 0, gain > 0, box > 0 and horizon >= 1")
        if len(self.goal) != 2 or np.any(np.abs(self.goal) > self.box):
            raise InvalidInputError(f"goal {self.goal} must be a 2-vector inside the state box")

    @property
    def goal_vec(self):
        return np.asarray(self.goal, dtype=float)

    @property
    def action_low(self):
        return -np.ones(self.action_dim)

    @property
    def action_high(self):
        return np.ones(self.action_dim)

    @property
    def r_max(self):
        corners = np.array([[sx, sy] for sx in (-self.box, self.box) for sy in (-self.box, self.box)])
        return float(np.max(np.linalg.norm(corners - self.goal_vec, axis=1)))

    def reset(self, rng, n=None):
        shape = (self.state_dim,) if n is None else (n, self.state_dim)
        return rng.uniform(-1.0, 1.0, size=shape)

    def reward(self, states):
        return -np.linalg.norm(np.asarray(states) - self.goal_vec, axis=-1)

    def step(self, states, actions):
        """Advance one step; returns ``(next_states, rewards)`` for the given states."""
        states = np.asarray(states, dtype=float)
        actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        if states.shape[-1] != self.state_dim or actions.shape != states.shape:
            raise InvalidInputError(f"state/action shape mismatch: {states.shape} vs {actions.shape}")
        rewards = self.reward(states)
        nxt = np.clip(states + actions * self.dt, -self.box, self.box)
        return nxt, rewards

    def optimal_action(self, states):
        return np.clip(self.gain * (self.goal_vec - np.asarray(states, dtype=float)), -1.0, 1.0)

    def config(self):
        return {"env": self.name, "goal": list(self.goal), "dt": self.dt, "k": self.gain,
                "H": self.horizon, "box": self.box}


def point_reach_env(goal=(0.5, 0.5), dt=0.1, gain_bound=5.0, H=25, box=2.0):
    return PointReach(goal=tuple(float(g) for g in goal), dt=float(dt), gain=float(gain_bound),
                      horizon=int(H), box=float(box))


@dataclass(frozen=True)
class LinearTrack:
    """1-D analogue of PointReach, used for fast unit tests."""

    goal: float = 0.0
    dt: float = 0.1
    gain: float = 5.0
    horizon: int = 20
    box: float = 2.0
    name: str = "linear_track"

    state_dim = 1
    action_dim = 1

    @property
    def goal_vec(self):
        return np.array([self.goal], dtype=float)

    @property
    def action_low(self):
        return -np.ones(1)

    @property
    def action_high(self):
        return np.ones(1)

    @property
    def r_max(self):
        return float(self.box + abs(self.goal))

    def reset(self, rng, n=None):
        shape = (1,) if n is None else (n, 1)
        return rng.uniform(-1.0, 1.0, size=shape)

    def reward(self, states):
        return -np.abs(np.asarray(states)[..., 0] - self.goal)

    def step(self, states, actions):
        states = np.asarray(states, dtype=float)
        actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        rewards = self.reward(states)
        return np.clip(states + actions * self.dt, -self.box, self.box), rewards

    def optimal_action(self, states):
        return np.clip(self.gain * (self.goal_vec - np.asarray(states, dtype=float)), -1.0, 1.0)

    def config(self):
        return {"env": self.name, "goal": self.goal, "dt": self.dt, "k": self.gain, "H": self.horizon,
                "box": self.box}


def make_env(cfg):
    """Build an environment from a manifest-style dict."""
    cfg = dict(cfg)
    name = cfg.pop("env", "point_reach")
    if name == "point_reach":
        return point_reach_env(goal=cfg.get("goal", (0.5, 0.5)), dt=cfg.get("dt", 0.1),
                               gain_bound=cfg.get("k", 5.0), H=cfg.get("H", 25), box=cfg.get("box", 2.0))
    if name == "linear_track":
        return LinearTrack(goal=float(cfg.get("goal", 0.0)), dt=cfg.get("dt", 0.1), gain=cfg.get("k", 5.0),
                           horizon=cfg.get("H", 20), box=cfg.get("box", 2.0))
    raise InvalidInputError(f"unknown environment {name!r}")


class OptimalController:
    """Deterministic closed-form expert for an environment."""

    deterministic = True

    def __init__(self, env):
        if not hasattr(env, "optimal_action"):
            raise InvalidInputError(f"{type(env).__name__} has no analytic controller")
        self.env = env

    def act(self, states, rng=None):
        return self.env.optimal_action(states)


def optimal_policy(env):
    return OptimalController(env)


class UniformRandomPolicy:
    """Actions drawn uniformly from the action box."""

    def __init__(self, env):
        self.low, self.high = env.action_low, env.action_high

    def act(self, states, rng):
        states = np.atleast_2d(states)
        return rng.uniform(self.low, self.high, size=(states.shape[0], len(self.low)))


@dataclass
class Rollouts:
    """Batch of full episodes, arrays shaped ``(n_episodes, H, ...)``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def n_episodes(self):
        return self.states.shape[0]

    def returns(self, gamma=1.0):
        disc = gamma ** np.arange(self.rewards.shape[1])
        return self.rewards @ disc


def rollout(policy, env, n_episodes, rng):
    """Run ``n_episodes`` episodes in lockstep; the policy sees all of them at once."""
    if n_episodes < 1:
        raise InvalidInputError("n_episodes must be >= 1")
    H = env.horizon
    s = env.reset(rng, n_episodes)
    states = np.empty((n_episodes, H, env.state_dim))
    actions = np.empty((n_episodes, H, env.action_dim))
    rewards = np.empty((n_episodes, H))
    for t in range(H):
        a = np.asarray(policy.act(s, rng), dtype=float).reshape(n_episodes, env.action_dim)
        states[:, t], actions[:, t] = s, a
        s, rewards[:, t] = env.step(s, a)
        if np.any(np.abs(rewards[:, t]) > env.r_max + 1e-9):
            raise RuntimeError(f"reward bound violated at t={t}")
    return Rollouts(states, actions, rewards)


@dataclass(frozen=True)
class PolicyValueEstimate:
    mean_discounted: float
    mean_return: float
    stderr: float
    n_episodes: int
    gamma: float
    stderr_discounted: float = 0.0

    def to_dict(self):
        return {"mean_discounted": self.mean_discounted, "mean_return": self.mean_return,
                "stderr": self.stderr, "n_episodes": self.n_episodes, "gamma": self.gamma,
                "stderr_discounted": self.stderr_discounted}


def _stderr(x):
    return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def evaluate_policy(policy, env, n_episodes=10, gamma=0.995, rng=None):
    """Monte-Carlo value estimate; ``mean_return`` is the undiscounted sum."""
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError(f"gamma must lie in [0, 1), got {gamma}")
    rng = np.random.default_rng(0) if rng is None else rng
    ro = rollout(policy, env, n_episodes, rng)
    disc = ro.returns(gamma)
    undisc = ro.returns(1.0)
    return PolicyValueEstimate(float(disc.mean()), float(undisc.mean()), _stderr(undisc), int(n_episodes),
                               float(gamma), _stderr(disc))
