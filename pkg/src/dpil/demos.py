"""Demonstration sets: generation, mixing, temporal filtering and file I/O.

File format (line-delimited JSON): the first line is a header
``{"version", "state_dim", "action_dim", "source_label", "generator_meta", "n"}``,
then one record per transition
``{"episode_id", "step_index", "state", "action", "reward"}``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .envs import rollout
from .errors import DemoParseError, InvalidInputError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float | None
    episode_id: int
    step_index: int


def _as_rows(x):
    x = np.asarray(x, dtype=float)
    return x if x.ndim == 2 else x.reshape(len(x), -1)


@dataclass(frozen=True, eq=False)
class DemoSet:
    """Ordered transitions stored column-wise."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    episode_ids: np.ndarray
    step_indices: np.ndarray
    source_label: str = "demos"
    generator_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states, actions = _as_rows(self.states), _as_rows(self.actions)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        object.__setattr__(self, "episode_ids", np.asarray(self.episode_ids, dtype=np.int64))
        object.__setattr__(self, "step_indices", np.asarray(self.step_indices, dtype=np.int64))
        n = states.shape[0]
        if not (actions.shape[0] == self.rewards.shape[0] == self.episode_ids.shape[0]
                == self.step_indices.shape[0] == n):
            raise InvalidInputError("DemoSet columns have different lengths")
        for ep in np.unique(self.episode_ids):
            steps = self.step_indices[self.episode_ids == ep]
            if np.any(steps < 0) or np.any(np.diff(steps) <= 0):
                raise InvalidInputError(f"episode {ep}: step indices must be non-negative and increasing")

    @classmethod
    def empty(cls, state_dim, action_dim, source_label="demos"):
        return cls(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros(0), np.zeros(0, int),
                   np.zeros(0, int), source_label)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def __len__(self):
        return self.states.shape[0]

    def __iter__(self):
        for k in range(len(self)):
            r = self.rewards[k]
            yield Transition(self.states[k], self.actions[k], None if np.isnan(r) else float(r),
                             int(self.episode_ids[k]), int(self.step_indices[k]))

    @property
    def transitions(self):
        return list(self)

    def pairs(self):
        """Concatenated ``(s, a)`` rows, shape ``(n, state_dim + action_dim)``."""
        return np.concatenate([self.states, self.actions], axis=1)

    def episodes(self):
        """Row-index arrays per episode, in order of first appearance."""
        _, first = np.unique(self.episode_ids, return_index=True)
        return [np.flatnonzero(self.episode_ids == self.episode_ids[i]) for i in sorted(first)]

    def episode_returns(self):
        return np.array([self.rewards[idx].sum() for idx in self.episodes()])

    def replace(self, **changes):
        return replace(self, **changes)

    def digest(self):
        """Content hash over the columns and labels (16 hex chars)."""
        h = hashlib.sha256()
        h.update(json.dumps([self.source_label, self.generator_meta], sort_keys=True).encode())
        for col in (self.states, self.actions, self.rewards, self.episode_ids, self.step_indices):
            h.update(np.ascontiguousarray(col).tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, DemoSet):
            return NotImplemented
        return (self.source_label == other.source_label
                and self.generator_meta == other.generator_meta
                and all(np.array_equal(getattr(self, f), getattr(other, f), equal_nan=True)
                        for f in ("states", "actions", "rewards", "episode_ids", "step_indices")))

    def concat(self, other, source_label=None):
        """Stack two sets, shifting ``other``'s episode ids past ours."""
        _check_dims([self, other])
        offset = int(self.episode_ids.max()) + 1 if len(self) else 0
        _, other_ids = np.unique(other.episode_ids, return_inverse=True)
        return DemoSet(
            np.concatenate([self.states, other.states]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.rewards, other.rewards]),
            np.concatenate([self.episode_ids, other_ids + offset]),
            np.concatenate([self.step_indices, other.step_indices]),
            source_label or self.source_label,
            dict(self.generator_meta),
        )


def _check_dims(sets):
    dims = {(s.state_dim, s.action_dim) for s in sets}
    if len(dims) > 1:
        raise InvalidInputError(f"dimension mismatch between demo sets: {sorted(dims)}")


class NoisyPolicyWrapper:
    """Adds isotropic Gaussian noise of std ``delta`` to a base policy's actions."""

    def __init__(self, base_policy, delta, low=None, high=None):
        if delta < 0:
            raise InvalidInputError(f"delta must be non-negative, got {delta}")
        self.base_policy = base_policy
        self.delta = float(delta)
        self.low, self.high = low, high

    def act(self, states, rng):
        a = np.asarray(self.base_policy.act(states, rng), dtype=float)
        if self.delta == 0.0:
            return a
        a = a + self.delta * rng.standard_normal(a.shape)
        if self.low is not None or self.high is not None:
            a = np.clip(a, self.low, self.high)
        return a


def wrap_noisy(policy, delta, env=None):
    """Noisy version of ``policy``; actions are clipped to ``env``'s bounds if given."""
    if env is None:
        return NoisyPolicyWrapper(policy, delta)
    return NoisyPolicyWrapper(policy, delta, env.action_low, env.action_high)


def collect_demos(policy, env, n_transitions, rng, source_label="demos", generator_meta=None):
    """Roll out whole episodes and keep the first ``n_transitions`` transitions."""
    if n_transitions < 1:
        raise InvalidInputError("n_transitions must be >= 1")
    n_episodes = -(-int(n_transitions) // env.horizon)
    ro = rollout(policy, env, n_episodes, rng)
    H = env.horizon
    ep = np.repeat(np.arange(n_episodes), H)
    step = np.tile(np.arange(H), n_episodes)
    keep = slice(0, int(n_transitions))
    return DemoSet(
        ro.states.reshape(-1, env.state_dim)[keep],
        ro.actions.reshape(-1, env.action_dim)[keep],
        ro.rewards.reshape(-1)[keep],
        ep[keep],
        step[keep],
        source_label,
        dict(generator_meta or {}),
    )


@dataclass
class TrainingHistory:
    """Policy snapshots keyed by the fraction of training completed."""

    snapshots: dict = field(default_factory=dict)

    def add(self, fraction, policy):
        self.snapshots[round(float(fraction), 6)] = policy

    def get(self, fraction):
        key = round(float(fraction), 6)
        if key not in self.snapshots:
            raise InvalidInputError(f"no snapshot at training fraction {fraction}; have {sorted(self.snapshots)}")
        return self.snapshots[key]


def collect_checkpoint_demos(history, fraction, env, n_transitions, rng):
    """Demonstrations from a partially trained policy snapshot."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction}")
    policy = history.get(fraction)
    return collect_demos(policy, env, n_transitions, rng, source_label=f"checkpoint@{fraction:g}",
                         generator_meta={"checkpoint_fraction": float(fraction)})


def mix_demosets(sets):
    """Concatenate sets with fresh episode ids; per-source counts go to the metadata."""
    if not sets:
        raise InvalidInputError("need at least one demo set to mix")
    _check_dims(sets)
    out = sets[0].concat(DemoSet.empty(sets[0].state_dim, sets[0].action_dim))
    _, ids = np.unique(out.episode_ids, return_inverse=True)
    out = out.replace(episode_ids=ids)
    for s in sets[1:]:
        out = out.concat(s)
    sources = [{"source_label": s.source_label, "count": len(s), "generator_meta": s.generator_meta}
               for s in sets]
    return out.replace(source_label="mixed", generator_meta={"sources": sources})


def filter_denoise(demos, kind="mean", param=3, smooth_states=False):
    """Smooth actions (and optionally states) along time within each episode.

    ``kind`` is ``mean`` or ``median`` (``param`` = odd window) or ``gaussian``
    (``param`` = sigma in steps). Edges are padded by half-sample reflection
    (the edge value repeats), so a window of 3 over ``[0, 3, 0]`` sees
    ``[0, 0, 3, 0, 0]`` and returns ``[1, 1, 1]``.
    """
    if kind in ("mean", "median"):
        window = int(param)
        if window < 1 or window % 2 == 0:
            raise InvalidInputError(f"window must be a positive odd integer, got {param}")
    elif kind == "gaussian":
        if param <= 0:
            raise InvalidInputError(f"gaussian sigma must be positive, got {param}")
    else:
        raise InvalidInputError(f"unknown filter kind {kind!r}")

    def smooth(seq):
        if kind == "mean":
            return ndimage.uniform_filter1d(seq, size=window, axis=0, mode="reflect")
        if kind == "median":
            return ndimage.median_filter(seq, size=(window, 1), mode="reflect")
        return ndimage.gaussian_filter1d(seq, sigma=float(param), axis=0, mode="reflect")

    states, actions = demos.states.copy(), demos.actions.copy()
    for idx in demos.episodes():
        if len(idx) == 1:
            continue
        actions[idx] = smooth(demos.actions[idx])
        if smooth_states:
            states[idx] = smooth(demos.states[idx])
    meta = dict(demos.generator_meta)
    meta["filter"] = {"kind": kind, "param": param, "smooth_states": smooth_states}
    return demos.replace(states=states, actions=actions, source_label=f"{demos.source_label}+{kind}-filter",
                         generator_meta=meta)


def _finite_or_none(x):
    return None if np.isnan(x) else float(x)


def save_demos(demos, path):
    """Write ``demos`` as line-delimited JSON (atomic replace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": FORMAT_VERSION, "state_dim": demos.state_dim, "action_dim": demos.action_dim,
              "source_label": demos.source_label, "generator_meta": demos.generator_meta, "n": len(demos)}
    lines = [json.dumps(header, sort_keys=True)]
    for k in range(len(demos)):
        lines.append(json.dumps({
            "episode_id": int(demos.episode_ids[k]),
            "step_index": int(demos.step_indices[k]),
            "state": [float(v) for v in demos.states[k]],
            "action": [float(v) for v in demos.actions[k]],
            "reward": _finite_or_none(demos.rewards[k]),
        }))
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_demos(path):
    """Parse a file written by :func:`save_demos`; never returns partial data."""
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DemoParseError("empty file", record=0)
    try:
        header = json.loads(lines[0])
        sd, ad, n = int(header["state_dim"]), int(header["action_dim"]), int(header["n"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DemoParseError(f"bad header: {exc}", record=0) from exc
    if header.get("version") != FORMAT_VERSION:
        raise DemoParseError(f"unsupported version {header.get('version')}", record=0)
    if len(lines) - 1 != n:
        raise DemoParseError(f"header declares {n} records, found {len(lines) - 1}", record=len(lines) - 1)
    states, actions = np.empty((n, sd)), np.empty((n, ad))
    rewards, eps, steps = np.empty(n), np.empty(n, np.int64), np.empty(n, np.int64)
    for k, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            s, a = rec["state"], rec["action"]
            eps[k], steps[k] = int(rec["episode_id"]), int(rec["step_index"])
            r = rec["reward"]
        except (ValueError, KeyError, TypeError) as exc:
            raise DemoParseError(f"malformed record: {exc}", record=k + 1) from exc
        if len(s) != sd or len(a) != ad:
            raise DemoParseError(f"dimension mismatch: header ({sd}, {ad}) vs record ({len(s)}, {len(a)})",
                                 record=k + 1)
        states[k], actions[k] = s, a
        rewards[k] = np.nan if r is None else r
    try:
        return DemoSet(states, actions, rewards, eps, steps, header["source_label"],
                       header.get("generator_meta", {}))
    except InvalidInputError as exc:
        raise DemoParseError(str(exc)) from exc


def export_csv(demos, path):
    """Flat CSV (episode_id, step_index, s0.., a0.., reward) for plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode_id", "step_index"] + [f"s{i}" for i in range(demos.state_dim)]
                   + [f"a{i}" for i in range(demos.action_dim)] + ["reward"])
        for t in demos:
            w.writerow([t.episode_id, t.step_index] + [repr(float(v)) for v in t.state]
                       + [repr(float(v)) for v in t.action] + ["" if t.reward is None else repr(t.reward)])
