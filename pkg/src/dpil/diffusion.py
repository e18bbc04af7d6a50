"""DDPM noise schedule, noise-predictor training and two-step purification.

Steps are 1-based: step ``i`` uses ``beta[i - 1]``. Training draws the
0-based index uniformly from ``{0, ..., T-1}``, which is step ``index + 1``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericalError
from .nn_core import Adam, Mlp, load_checkpoint, mlp_gradient, save_checkpoint

log = logging.getLogger(__name__)

MIN_STD = 1e-6


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_1: float
    beta_T: float

    def digest(self):
        h = hashlib.sha256()
        h.update(f"{self.T}:{self.beta_1!r}:{self.beta_T!r}".encode())
        h.update(self.beta.tobytes())
        return h.hexdigest()[:16]

    def to_dict(self):
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T}


def make_schedule(T=1000, beta_1=1e-4, beta_T=0.02):
    """Linear variance schedule from ``beta_1`` to ``beta_T`` over ``T`` steps."""
    T = int(T)
    if T < 1:
        raise InvalidInputError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise InvalidInputError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if T == 1:
        beta = np.array([float(beta_1)])
    else:
        beta = beta_1 + np.arange(T) / (T - 1) * (beta_T - beta_1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar, float(beta_1), float(beta_T))


def t_to_step(t_star, T):
    """Map a continuous diffusion time in (0, 1] onto a discrete step in 1..T."""
    if not 0.0 < t_star <= 1.0:
        raise InvalidInputError(f"t_star must lie in (0, 1], got {t_star}")
    return min(T, max(1, int(round(t_star * T))))


def timestep_embedding(steps, dim=32):
    """Sinusoidal features of integer steps, shape ``(n, dim)``."""
    steps = np.atleast_1d(np.asarray(steps, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class Denoiser:
    """Noise predictor over standardized inputs conditioned on the step."""

    net: Mlp
    norm_mean: np.ndarray
    norm_std: np.ndarray
    schedule_id: str
    embed_dim: int = 32
    loss_history: list = field(default_factory=list)

    @property
    def dim(self):
        return len(self.norm_mean)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.norm_mean) / self.norm_std

    def denormalize(self, x):
        return np.asarray(x, dtype=float) * self.norm_std + self.norm_mean

    def _inputs(self, x, steps):
        steps = np.broadcast_to(np.asarray(steps), (x.shape[0],))
        return np.concatenate([x, timestep_embedding(steps, self.embed_dim)], axis=1)

    def predict_noise(self, x, step):
        """Predicted noise for a normalized ``(n, d)`` batch at ``step`` (scalar or per-row)."""
        y, _ = self.net.forward(self._inputs(x, step), train=False)
        return y

    @property
    def final_loss(self):
        return self.loss_history[-1] if self.loss_history else None

    def save(self, path, schedule, extra=None):
        meta = {
            "kind": "denoiser",
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
            "schedule": schedule.to_dict(),
            "schedule_id": self.schedule_id,
            "embed_dim": self.embed_dim,
            "loss_history": [float(v) for v in self.loss_history],
            **(extra or {}),
        }
        save_checkpoint(path, {"net": self.net}, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise InvalidInputError(f"{path} is not a denoiser checkpoint")
        return cls(
            net=nets["net"],
            norm_mean=np.array(meta["norm_mean"]),
            norm_std=np.array(meta["norm_std"]),
            schedule_id=meta["schedule_id"],
            embed_dim=meta["embed_dim"],
            loss_history=list(meta["loss_history"]),
        )


class GaussianScoreDenoiser:
    """Exact posterior-mean noise predictor for data ~ Normal(mu, sigma^2 I).

    Works in raw coordinates (identity normalization), so it drops into
    :func:`purify` wherever a trained :class:`Denoiser` would.
    """

    def __init__(self, mu, sigma, schedule):
        if sigma <= 0:
            raise InvalidInputError(f"sigma must be positive, got {sigma}")
        self.mu = np.atleast_1d(np.asarray(mu, dtype=float))
        self.sigma = float(sigma)
        self.schedule = schedule
        self.schedule_id = schedule.digest()
        self.norm_mean = np.zeros_like(self.mu)
        self.norm_std = np.ones_like(self.mu)

    @property
    def dim(self):
        return len(self.mu)

    def normalize(self, x):
        return np.asarray(x, dtype=float)

    def denormalize(self, x):
        return np.asarray(x, dtype=float)

    def predict_noise(self, x, step):
        ab = self.schedule.alpha_bar[np.asarray(step) - 1]
        ab = np.reshape(ab, (-1, 1)) if np.ndim(ab) else ab
        return np.sqrt(1 - ab) * (x - np.sqrt(ab) * self.mu) / (ab * self.sigma**2 + 1 - ab)


def gaussian_score_denoiser(mu, sigma, schedule):
    return GaussianScoreDenoiser(mu, sigma, schedule)


class ZeroDenoiser:
    """Predicts zero noise everywhere; useful to isolate the sampler arithmetic."""

    def __init__(self, dim, schedule_id=""):
        self.norm_mean = np.zeros(dim)
        self.norm_std = np.ones(dim)
        self.schedule_id = schedule_id

    @property
    def dim(self):
        return len(self.norm_mean)

    def normalize(self, x):
        return np.asarray(x, dtype=float)

    def denormalize(self, x):
        return np.asarray(x, dtype=float)

    def predict_noise(self, x, step):
        return np.zeros_like(x)


@dataclass
class DenoiserTrainConfig:
    epochs: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 128
    n_layers: int = 5
    dropout: float = 0.0
    batch_norm: bool = False
    embed_dim: int = 32
    normalize: bool = True
    ema_decay: float = 0.999


def _as_matrix(data):
    if hasattr(data, "pairs"):
        data = data.pairs()
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def train_denoiser(demos, schedule, cfg=None, rng=None):
    """Fit the noise predictor on optimal ``(s, a)`` pairs.

    ``demos`` is a DemoSet or an ``(n, d)`` array. Each minibatch draws fresh
    steps and Gaussian noise and takes one Adam step on the noise-regression
    MSE. The mean loss of every epoch lands in ``loss_history``.
    """
    cfg = cfg or DenoiserTrainConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    x = _as_matrix(demos)
    if x.shape[0] == 0:
        raise InvalidInputError("cannot train a denoiser on an empty demonstration set")
    n, d = x.shape
    if cfg.normalize:
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), MIN_STD)
    else:
        mean, std = np.zeros(d), np.ones(d)
    xn = (x - mean) / std

    dims = [d + cfg.embed_dim] + [cfg.hidden] * (cfg.n_layers - 1) + [d]
    net = Mlp(dims, hidden_activation="relu", dropout_rate=cfg.dropout, batch_norm=cfg.batch_norm, rng=rng)
    den = Denoiser(net, mean, std, schedule.digest(), cfg.embed_dim)
    opt = Adam(net.parameters(), lr=cfg.lr)
    sqrt_ab = np.sqrt(schedule.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bar)
    bs = min(cfg.batch_size, n)
    if not 0.0 <= cfg.ema_decay < 1.0:
        raise InvalidInputError(f"ema_decay must lie in [0, 1), got {cfg.ema_decay}")
    shadow = [p.copy() for p in net.parameters()] if cfg.ema_decay > 0 else None

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            x0 = xn[idx]
            k = rng.integers(0, schedule.T, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            xt = sqrt_ab[k, None] * x0 + sqrt_1mab[k, None] * eps
            inputs = den._inputs(xt, k + 1)

            def loss_fn(pred, eps=eps):
                diff = pred - eps
                return (diff**2).mean(axis=1), 2.0 * diff / d

            try:
                loss, grads = mlp_gradient(net, loss_fn, inputs, mode="train", rng=rng, update_stats=True)
            except NumericalError as exc:
                raise NumericalError(f"non-finite denoiser loss in epoch {epoch}", index=epoch, where="epoch") from exc
            opt.step(net.parameters(), grads)
            if shadow is not None:
                # warm-up keeps early averages from being dominated by the random init
                decay = min(cfg.ema_decay, (1.0 + opt.t) / (10.0 + opt.t))
                for sp, p in zip(shadow, net.parameters()):
                    sp += (1.0 - decay) * (p - sp)
            total += loss * len(idx)
            count += len(idx)
        den.loss_history.append(total / count)
    if shadow is not None:
        # the averaged weights replace the last iterate
        for sp, p in zip(shadow, net.parameters()):
            p[...] = sp
    log.debug("denoiser trained: final loss %.4f", den.loss_history[-1] if den.loss_history else float("nan"))
    return den


def denoising_loss(denoiser, x0, steps, eps, schedule):
    """Noise-regression loss of ``denoiser`` on normalized ``x0`` with given steps and noise."""
    x0 = np.atleast_2d(x0)
    ab = schedule.alpha_bar[np.asarray(steps) - 1].reshape(-1, 1)
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    return float(((denoiser.predict_noise(xt, steps) - eps) ** 2).mean())


def _check_step(i_star, schedule):
    if not 1 <= int(i_star) <= schedule.T:
        raise InvalidInputError(f"i_star must lie in 1..{schedule.T}, got {i_star}")
    return int(i_star)


def forward_diffuse(x0, i_star, schedule, rng=None, eps=None):
    """Jump straight to step ``i_star``: sqrt(ab) * x0 + sqrt(1 - ab) * eps."""
    i_star = _check_step(i_star, schedule)
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise InvalidInputError("x0 must be finite")
    if eps is None:
        if rng is None:
            raise InvalidInputError("forward_diffuse needs rng or a fixed eps")
        eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[i_star - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


def reverse_denoise(x_start, i_star, denoiser, schedule, rng=None, z=None, noise_at_last_step=False):
    """Ancestral sampling from step ``i_star`` down to 0 in normalized space.

    ``z`` optionally fixes the injected noise: an array whose leading axis has
    one entry per step, ordered ``i_star, ..., 1``. Without
    ``noise_at_last_step`` the step-1 update is noise-free.
    """
    i_star = _check_step(i_star, schedule)
    x = np.array(x_start, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if z is not None:
        z = np.asarray(z, dtype=float)
        if single and z.ndim == 2:
            z = z[:, None, :]
        if z.shape[0] < i_star:
            raise InvalidInputError(f"fixed z holds {z.shape[0]} steps, need {i_star}")
    elif rng is None:
        raise InvalidInputError("reverse_denoise needs rng or a fixed z sequence")
    for n_done, i in enumerate(range(i_star, 0, -1)):
        a = schedule.alpha[i - 1]
        ab = schedule.alpha_bar[i - 1]
        b = schedule.beta[i - 1]
        eps_hat = denoiser.predict_noise(x, i)
        x = (x - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
        if i > 1 or noise_at_last_step:
            noise = z[n_done] if z is not None else rng.standard_normal(x.shape)
            x = x + np.sqrt(b) * noise
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state at reverse step {i}", index=i, where="step")
    return x[0] if single else x


@dataclass
class PurifyConfig:
    t_star: float = 0.1
    T: int = 1000
    noise_at_last_step: bool = False
    eps: np.ndarray | None = None
    z: np.ndarray | None = None

    def __post_init__(self):
        self.i_star = t_to_step(self.t_star, self.T)

    @classmethod
    def for_schedule(cls, t_star, schedule, **kw):
        return cls(t_star=t_star, T=schedule.T, **kw)


def purify(x0, cfg, denoiser, schedule, rng=None):
    """Forward-diffuse then reverse-denoise raw ``(s, a)`` vectors, returning raw units."""
    if cfg.T != schedule.T:
        raise InvalidInputError(f"config built for T={cfg.T} but schedule has T={schedule.T}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != denoiser.dim:
        raise InvalidInputError(f"input dim {x0.shape[-1]} != denoiser dim {denoiser.dim}")
    xn = denoiser.normalize(x0)
    xt = forward_diffuse(xn, cfg.i_star, schedule, rng=rng, eps=cfg.eps)
    x_hat = reverse_denoise(xt, cfg.i_star, denoiser, schedule, rng=rng, z=cfg.z,
                            noise_at_last_step=cfg.noise_at_last_step)
    return denoiser.denormalize(x_hat)


def transition_noise(seed, index, i_star, dim):
    """Forward and reverse noise for one transition, keyed by (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    eps = rng.standard_normal(dim)
    z = rng.standard_normal((i_star, dim))
    return eps, z


def purify_dataset(demos, cfg, denoiser, schedule, seed):
    """Purify every transition of a DemoSet independently.

    Noise for transition ``k`` comes from ``transition_noise(seed, k, ...)``, so
    the result does not depend on how rows are batched. Episode ids, step
    indices and rewards are carried over untouched.
    """
    n = len(demos)
    d = demos.state_dim + demos.action_dim
    if d != denoiser.dim:
        raise InvalidInputError(f"demo dim {d} != denoiser dim {denoiser.dim}")
    if n == 0:
        return demos.replace(source_label=f"{demos.source_label}+purified")
    eps = np.empty((n, d))
    z = np.empty((cfg.i_star, n, d))
    for k in range(n):
        eps[k], z[:, k, :] = transition_noise(seed, k, cfg.i_star, d)
    batch_cfg = PurifyConfig(cfg.t_star, cfg.T, cfg.noise_at_last_step, eps=eps, z=z)
    x_hat = purify(demos.pairs(), batch_cfg, denoiser, schedule)
    meta = dict(demos.generator_meta)
    meta["purified"] = {"t_star": cfg.t_star, "i_star": cfg.i_star, "seed": int(seed)}
    return demos.replace(
        states=x_hat[:, :demos.state_dim],
        actions=x_hat[:, demos.state_dim:],
        source_label=f"{demos.source_label}+purified",
        generator_meta=meta,
    )
