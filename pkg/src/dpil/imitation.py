"""Behavioral cloning and adversarial imitation on (purified) demonstrations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import rollout
from .errors import InvalidInputError, NumericalError
from .nn_core import Adam, Mlp, load_checkpoint, mlp_gradient, save_checkpoint

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = np.log(2.0 * np.pi)


class GaussianPolicy:
    """Diagonal Gaussian policy; one MLP emits ``[mean, log_std]`` per state."""

    deterministic = False

    def __init__(self, state_dim, action_dim, hidden=(100, 100), low=None, high=None, rng=None, net=None,
                 init_log_std=-0.5):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.low = None if low is None else np.asarray(low, dtype=float)
        self.high = None if high is None else np.asarray(high, dtype=float)
        if net is None:
            dims = [self.state_dim, *hidden, 2 * self.action_dim]
            net = Mlp(dims, hidden_activation="tanh", last_layer_scale=0.1, rng=rng)
            net.biases[-1][self.action_dim:] += init_log_std
        if net.in_dim != self.state_dim or net.out_dim != 2 * self.action_dim:
            raise InvalidInputError("policy network dims do not match state/action dims")
        self.net = net

    @classmethod
    def for_env(cls, env, hidden=(100, 100), rng=None):
        return cls(env.state_dim, env.action_dim, hidden, env.action_low, env.action_high, rng=rng)

    def _split(self, out):
        mean = out[:, :self.action_dim]
        raw = out[:, self.action_dim:]
        return mean, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw

    def distribution(self, states):
        """``(mean, log_std)`` for a batch of states."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[1] != self.state_dim:
            raise InvalidInputError(f"state dim {states.shape[1]} != policy state dim {self.state_dim}")
        out, _ = self.net.forward(states)
        mean, log_std, _ = self._split(out)
        return mean, log_std

    def act(self, states, rng, deterministic=False, clip=True):
        mean, log_std = self.distribution(states)
        a = mean if deterministic else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        if clip and self.low is not None:
            a = np.clip(a, self.low, self.high)
        return a

    def log_prob(self, states, actions):
        mean, log_std = self.distribution(states)
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        if actions.shape != mean.shape:
            raise InvalidInputError(f"action shape {actions.shape} != {mean.shape}")
        z = (actions - mean) * np.exp(-log_std)
        return -0.5 * (z**2).sum(axis=1) - log_std.sum(axis=1) - 0.5 * self.action_dim * LOG_2PI

    def copy(self):
        return GaussianPolicy(self.state_dim, self.action_dim, low=self.low, high=self.high, net=self.net.copy())

    def save(self, path, extra=None):
        meta = {"kind": "gaussian_policy", "state_dim": self.state_dim, "action_dim": self.action_dim,
                "low": None if self.low is None else self.low.tolist(),
                "high": None if self.high is None else self.high.tolist(), **(extra or {})}
        save_checkpoint(path, {"net": self.net}, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "gaussian_policy":
            raise InvalidInputError(f"{path} is not a policy checkpoint")
        return cls(meta["state_dim"], meta["action_dim"], low=meta["low"], high=meta["high"], net=nets["net"])


class RawSampler:
    """Exposes a policy's unclipped samples; the environment clips on execution.

    Policy-gradient updates need the density at the sampled action, not at its
    clipped image.
    """

    def __init__(self, policy):
        self.policy = policy

    def act(self, states, rng):
        return self.policy.act(states, rng, clip=False)


def policy_log_prob(policy, s, a):
    """Log-density of action(s) ``a`` at state(s) ``s``; scalar for single vectors."""
    single = np.ndim(s) == 1
    lp = policy.log_prob(s, a)
    return float(lp[0]) if single else lp


def _gaussian_loss(policy, actions, adv=None, entropy_coef=0.0):
    """Per-row loss ``-w * log pi(a|s) - c * H`` and its gradient w.r.t. the net output.

    With ``adv=None`` the weights are 1 (plain negative log-likelihood).
    """
    d = policy.action_dim

    def loss_fn(out):
        mean, log_std, raw = policy._split(out)
        inv_var = np.exp(-2.0 * log_std)
        diff = actions - mean
        logp = -0.5 * (diff**2 * inv_var).sum(axis=1) - log_std.sum(axis=1) - 0.5 * d * LOG_2PI
        w = np.ones(len(out)) if adv is None else adv
        entropy = log_std.sum(axis=1) + 0.5 * d * (1.0 + LOG_2PI)
        loss = -w * logp - entropy_coef * entropy
        dmean = -w[:, None] * diff * inv_var
        dlog_std = -w[:, None] * (diff**2 * inv_var - 1.0) - entropy_coef
        inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        return loss, np.concatenate([dmean, dlog_std * inside], axis=1)

    return loss_fn


@dataclass
class BCConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (100, 100)


def bc_train(demos, cfg=None, rng=None, low=None, high=None):
    """Maximum-likelihood behavioral cloning; returns a policy with ``loss_history``."""
    cfg = cfg or BCConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(demos)
    if n == 0:
        raise InvalidInputError("cannot clone an empty demonstration set")
    policy = GaussianPolicy(demos.state_dim, demos.action_dim, tuple(cfg.hidden), low, high, rng=rng)
    opt = Adam(policy.net.parameters(), lr=cfg.lr)
    states, actions = demos.states, demos.actions
    bs = min(cfg.batch_size, n)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            try:
                loss, grads = mlp_gradient(policy.net, _gaussian_loss(policy, actions[idx]), states[idx])
            except NumericalError as exc:
                raise NumericalError(f"non-finite BC loss in epoch {epoch}", index=epoch, where="epoch") from exc
            opt.step(policy.net.parameters(), grads)
            total += loss * len(idx)
        history.append(total / n)
    policy.loss_history = history
    return policy


def bc_nll(policy, demos):
    """Mean negative log-likelihood of ``demos`` under ``policy``."""
    return float(-policy.log_prob(demos.states, demos.actions).mean())


class Discriminator:
    """Logit network over normalized ``(s, a)``; ``D = sigmoid(V)`` scores expert-likeness."""

    def __init__(self, input_dim, hidden=(100, 100), norm_mean=None, norm_std=None, rng=None):
        self.net = Mlp([input_dim, *hidden, 1], hidden_activation="tanh", last_layer_scale=0.1, rng=rng)
        self.norm_mean = np.zeros(input_dim) if norm_mean is None else np.asarray(norm_mean, dtype=float)
        self.norm_std = np.ones(input_dim) if norm_std is None else np.asarray(norm_std, dtype=float)

    def _inputs(self, pairs):
        return (np.atleast_2d(pairs) - self.norm_mean) / self.norm_std

    def logits(self, pairs):
        out, _ = self.net.forward(self._inputs(pairs))
        return out[:, 0]

    def prob(self, pairs):
        return 1.0 / (1.0 + np.exp(-self.logits(pairs)))

    def reward(self, pairs):
        """Surrogate reward ``-log(1 - D)`` (softplus of the logit)."""
        return np.logaddexp(0.0, self.logits(pairs))

    def objective(self, expert_pairs, agent_pairs):
        """``E_expert[log D] + E_agent[log(1 - D)]``."""
        v_e, v_a = self.logits(expert_pairs), self.logits(agent_pairs)
        return float(-np.logaddexp(0.0, -v_e).mean() - np.logaddexp(0.0, v_a).mean())


def discriminator_update(disc, expert_batch, agent_batch, opt):
    """One descent step on the negated GAN objective; returns the objective before the step."""
    expert_batch = np.atleast_2d(expert_batch)
    agent_batch = np.atleast_2d(agent_batch)
    if len(expert_batch) == 0 or len(agent_batch) == 0:
        raise InvalidInputError("discriminator batches must be non-empty")
    n_e, n_a = len(expert_batch), len(agent_batch)
    x = np.concatenate([disc._inputs(expert_batch), disc._inputs(agent_batch)])
    is_expert = np.r_[np.ones(n_e), np.zeros(n_a)]
    # rows weighted so the batch mean equals mean over expert + mean over agent
    weight = np.r_[np.full(n_e, (n_e + n_a) / n_e), np.full(n_a, (n_e + n_a) / n_a)]

    def loss_fn(out):
        v = out[:, 0]
        # -log D for expert rows, -log(1 - D) for agent rows
        loss = np.where(is_expert == 1, np.logaddexp(0.0, -v), np.logaddexp(0.0, v))
        d = 1.0 / (1.0 + np.exp(-v))
        return weight * loss, (weight * (d - is_expert))[:, None]

    neg_obj, grads = mlp_gradient(disc.net, loss_fn, x)
    opt.step(disc.net.parameters(), grads)
    return -neg_obj


def discounted_to_go(rewards, gamma):
    """Reward-to-go along the last axis."""
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in reversed(range(rewards.shape[-1])):
        running = rewards[..., t] + gamma * running
        out[..., t] = running
    return out


def policy_gradient_loss(policy, states, actions, advantages, entropy_coef=0.0):
    """Surrogate loss ``-mean(adv * log pi) - c * mean(entropy)`` with its gradient."""
    return mlp_gradient(policy.net, _gaussian_loss(policy, actions, advantages, entropy_coef), states)


def policy_gradient_step(policy, rollouts, gamma, opt, entropy_coef=0.0, rewards=None):
    """One REINFORCE step with a batch-mean baseline.

    ``rollouts`` holds ``(n_ep, H, ...)`` arrays; ``rewards`` overrides the
    environment rewards (GAIL passes discriminator rewards here). The baseline
    is the batch mean of the reward-to-go at each time index, and advantages
    are scaled by their batch std unless that std is at round-off level.
    """
    r = rollouts.rewards if rewards is None else rewards
    G = discounted_to_go(np.asarray(r, dtype=float), gamma)
    adv = G - G.mean(axis=0, keepdims=True)
    scale = adv.std()
    # a spread at round-off level means the returns were identical; rescaling would amplify noise
    if scale > 1e-10 * max(1.0, float(np.abs(G).max())):
        adv = adv / scale
    else:
        adv = np.zeros_like(adv)
    states = rollouts.states.reshape(-1, policy.state_dim)
    actions = rollouts.actions.reshape(-1, policy.action_dim)
    loss, grads = policy_gradient_loss(policy, states, actions, adv.reshape(-1), entropy_coef)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError("non-finite policy gradient")
    opt.step(policy.net.parameters(), grads)
    return policy


@dataclass
class GailConfig:
    n_iters: int = 200
    disc_updates_per_iter: int = 5
    policy_updates_per_iter: int = 1
    episodes_per_iter: int = 32
    disc_batch: int = 256
    gamma: float = 0.99
    entropy_coef: float = 0.0
    policy_lr: float = 1e-3
    disc_lr: float = 3e-4
    hidden: tuple = (100, 100)

    def __post_init__(self):
        if min(self.n_iters, self.disc_updates_per_iter, self.policy_updates_per_iter,
               self.episodes_per_iter, self.disc_batch) < 1:
            raise InvalidInputError("GAIL counts must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidInputError(f"gamma must lie in [0, 1), got {self.gamma}")


@dataclass
class GailCurve:
    iteration: list = field(default_factory=list)
    env_return_mean: list = field(default_factory=list)
    env_return_stderr: list = field(default_factory=list)
    disc_loss: list = field(default_factory=list)

    def __len__(self):
        return len(self.iteration)

    def rows(self):
        return list(zip(self.iteration, self.env_return_mean, self.env_return_stderr, self.disc_loss))


def _pairs(ro, env):
    """Executed ``(s, a)`` rows of a rollout batch (actions clipped as the env applies them)."""
    actions = np.clip(ro.actions, env.action_low, env.action_high)
    return np.concatenate([ro.states, actions], axis=-1).reshape(-1, env.state_dim + env.action_dim)


def gail_train(demos, env, cfg=None, rng=None, norm_mean=None, norm_std=None):
    """Adversarial imitation: discriminator steps then a policy-gradient step per iteration.

    Returns ``(policy, curve)``; the curve has one row per iteration with the
    true environment return of that iteration's rollouts and the discriminator
    objective from its last update.
    """
    cfg = cfg or GailConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    if (demos.state_dim, demos.action_dim) != (env.state_dim, env.action_dim):
        raise InvalidInputError("demo dims do not match the environment")
    expert = demos.pairs()
    policy = GaussianPolicy.for_env(env, cfg.hidden, rng=rng)
    disc = Discriminator(expert.shape[1], cfg.hidden, norm_mean, norm_std, rng=rng)
    p_opt = Adam(policy.net.parameters(), lr=cfg.policy_lr)
    d_opt = Adam(disc.net.parameters(), lr=cfg.disc_lr)
    curve = GailCurve()
    for it in range(cfg.n_iters):
        ro = rollout(RawSampler(policy), env, cfg.episodes_per_iter, rng)
        agent = _pairs(ro, env)
        for _ in range(cfg.disc_updates_per_iter):
            e_idx = rng.integers(0, len(expert), size=min(cfg.disc_batch, len(expert)))
            a_idx = rng.integers(0, len(agent), size=min(cfg.disc_batch, len(agent)))
            d_loss = discriminator_update(disc, expert[e_idx], agent[a_idx], d_opt)
        surrogate = disc.reward(agent).reshape(ro.rewards.shape)
        for _ in range(cfg.policy_updates_per_iter):
            policy_gradient_step(policy, ro, cfg.gamma, p_opt, cfg.entropy_coef, rewards=surrogate)
        returns = ro.returns(1.0)
        mean_ret = float(returns.mean())
        if not np.isfinite(mean_ret) or not np.isfinite(d_loss):
            raise NumericalError(f"GAIL diverged at iteration {it}", index=it, where="iteration")
        curve.iteration.append(it)
        curve.env_return_mean.append(mean_ret)
        curve.env_return_stderr.append(float(returns.std(ddof=1) / np.sqrt(len(returns))))
        curve.disc_loss.append(float(d_loss))
    policy.discriminator = disc
    return policy, curve


def self_imitation_objectives(env, cfg=None, rng=None):
    """Discriminator objectives when the "expert" is the agent itself.

    Each iteration draws two independent rollout batches from the current
    policy, trains the discriminator to tell them apart and then updates the
    policy on the discriminator reward. The objective should hover at -2 log 2.
    """
    cfg = cfg or GailConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    policy = GaussianPolicy.for_env(env, cfg.hidden, rng=rng)
    disc = Discriminator(env.state_dim + env.action_dim, cfg.hidden, rng=rng)
    p_opt = Adam(policy.net.parameters(), lr=cfg.policy_lr)
    d_opt = Adam(disc.net.parameters(), lr=cfg.disc_lr)
    objectives = []
    for _ in range(cfg.n_iters):
        expert = _pairs(rollout(RawSampler(policy), env, cfg.episodes_per_iter, rng), env)
        ro = rollout(RawSampler(policy), env, cfg.episodes_per_iter, rng)
        agent = _pairs(ro, env)
        for _ in range(cfg.disc_updates_per_iter):
            e_idx = rng.integers(0, len(expert), size=min(cfg.disc_batch, len(expert)))
            a_idx = rng.integers(0, len(agent), size=min(cfg.disc_batch, len(agent)))
            objectives.append(discriminator_update(disc, expert[e_idx], agent[a_idx], d_opt))
        surrogate = disc.reward(agent).reshape(ro.rewards.shape)
        policy_gradient_step(policy, ro, cfg.gamma, p_opt, cfg.entropy_coef, rewards=surrogate)
    return objectives


def train_rl_expert(env, n_iters=300, snapshot_fractions=(0.3, 0.6, 1.0), episodes_per_iter=32, gamma=0.99,
                    lr=1e-3, rng=None):
    """REINFORCE on the true reward, saving policy snapshots at training fractions.

    Feeds :func:`dpil.demos.collect_checkpoint_demos` with early-checkpoint
    experts.
    """
    from .demos import TrainingHistory

    rng = np.random.default_rng(0) if rng is None else rng
    policy = GaussianPolicy.for_env(env, rng=rng)
    opt = Adam(policy.net.parameters(), lr=lr)
    history = TrainingHistory()
    marks = {max(1, int(round(f * n_iters))): f for f in snapshot_fractions}
    for it in range(1, n_iters + 1):
        ro = rollout(RawSampler(policy), env, episodes_per_iter, rng)
        policy_gradient_step(policy, ro, gamma, opt)
        if it in marks:
            history.add(marks[it], policy.copy())
    return history
