"""Distribution distances, bound diagnostics, t* sweeps and significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist, pdist

from .diffusion import PurifyConfig, forward_diffuse, purify_dataset, t_to_step
from .envs import evaluate_policy
from .errors import InvalidInputError
from .imitation import BCConfig, bc_train
from .seeding import derive_seed


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: float | str = "median"


def _as_samples(x):
    if hasattr(x, "pairs"):
        x = x.pairs()
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def median_bandwidth(X, Y):
    """Median pairwise Euclidean distance over the pooled sample."""
    d = pdist(np.vstack([X, Y]))
    sigma = float(np.median(d)) if d.size else 0.0
    return sigma if sigma > 0 else 1.0


def mmd2_unbiased(X, Y, bandwidth="median"):
    """Unbiased MMD^2 with an RBF kernel ``exp(-|u - v|^2 / (2 sigma^2))``."""
    X, Y = _as_samples(X), _as_samples(Y)
    if len(X) < 2 or len(Y) < 2:
        raise InvalidInputError("MMD needs at least two samples per set")
    if X.shape[1] != Y.shape[1]:
        raise InvalidInputError(f"sample dims differ: {X.shape[1]} vs {Y.shape[1]}")
    # fixed argument order makes the estimate exactly symmetric
    if (len(X), X.tobytes()) > (len(Y), Y.tobytes()):
        X, Y = Y, X
    sigma = median_bandwidth(X, Y) if bandwidth == "median" else float(bandwidth)
    if sigma <= 0:
        raise InvalidInputError(f"bandwidth must be positive, got {sigma}")
    g = 1.0 / (2.0 * sigma**2)
    m, n = len(X), len(Y)
    kxx = np.exp(-g * cdist(X, X, "sqeuclidean"))
    kyy = np.exp(-g * cdist(Y, Y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(X, Y, "sqeuclidean"))
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def mmd(X, Y, cfg=None):
    """Square root of the clipped unbiased MMD^2 estimate."""
    cfg = cfg or MmdConfig()
    return math.sqrt(max(0.0, mmd2_unbiased(X, Y, cfg.bandwidth)))


def permutation_null_std(X, Y, n_perm=50, rng=None, cfg=None):
    """Std of the MMD statistic under random relabelling of the pooled sample."""
    X, Y = _as_samples(X), _as_samples(Y)
    rng = np.random.default_rng(0) if rng is None else rng
    Z = np.vstack([X, Y])
    vals = []
    for _ in range(n_perm):
        perm = rng.permutation(len(Z))
        vals.append(mmd(Z[perm[:len(X)]], Z[perm[len(X):]], cfg))
    return float(np.std(vals, ddof=1))


@dataclass
class DecayCurve:
    t: list = field(default_factory=list)
    mmd: list = field(default_factory=list)
    null_std: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.t, self.mmd, self.null_std))

    def worst_violation(self):
        """Largest increase between consecutive points, in units of the local null std."""
        worst = 0.0
        for k in range(1, len(self.t)):
            rise = self.mmd[k] - self.mmd[k - 1]
            if rise > 0:
                scale = max(self.null_std[k], self.null_std[k - 1], 1e-12)
                worst = max(worst, rise / scale)
        return worst


def divergence_decay_curve(optimal, imperfect, schedule, t_grid, n_samples=500, rng=None, n_perm=30,
                           norm_mean=None, norm_std=None, cfg=None):
    """MMD between the two sets after forward diffusion to each time in ``t_grid``.

    Both sets are standardized with the optimal set's statistics (or the ones
    given), diffused with independent noise, and compared; each point carries
    the permutation-null std of the statistic at that time. Each sample keeps
    one noise draw across the whole grid, so every point has the exact forward
    marginal while neighbouring points differ only through the schedule.
    """
    t_grid = [float(t) for t in t_grid]
    if not t_grid or any(b <= a for a, b in zip(t_grid, t_grid[1:])) or t_grid[0] <= 0 or t_grid[-1] > 1:
        raise InvalidInputError("t_grid must be strictly increasing within (0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    X, Y = _as_samples(optimal), _as_samples(imperfect)
    if norm_mean is None:
        norm_mean = X.mean(axis=0)
        norm_std = np.maximum(X.std(axis=0), 1e-6)
    X = (X[_subset(len(X), n_samples, rng)] - norm_mean) / norm_std
    Y = (Y[_subset(len(Y), n_samples, rng)] - norm_mean) / norm_std
    eps_x, eps_y = rng.standard_normal(X.shape), rng.standard_normal(Y.shape)
    curve = DecayCurve()
    for t in t_grid:
        i = t_to_step(t, schedule.T)
        xo = forward_diffuse(X, i, schedule, eps=eps_x)
        xn = forward_diffuse(Y, i, schedule, eps=eps_y)
        curve.t.append(t)
        curve.mmd.append(mmd(xo, xn, cfg))
        curve.null_std.append(permutation_null_std(xo, xn, n_perm, rng, cfg))
    return curve


def _subset(n, k, rng):
    if n <= k:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def zeta(t_star, schedule):
    """Riemann sum of half the variance rate up to ``t_star``: sum(beta[:i*]) / (2T).

    ``schedule`` may be a NoiseSchedule or a raw beta array.
    """
    beta = np.asarray(getattr(schedule, "beta", schedule), dtype=float)
    T = len(beta)
    i_star = t_to_step(t_star, T)
    return float(beta[:i_star].sum() / (2.0 * T))


def c_varpi(d, varpi):
    """Chi-square concentration constant sqrt(2d + 4 sqrt(d log(1/w)) + 4 log(1/w))."""
    if not 0.0 < varpi <= 1.0:
        raise InvalidInputError(f"varpi must lie in (0, 1], got {varpi}")
    lg = math.log(1.0 / varpi)
    return math.sqrt(2 * d + 4 * math.sqrt(d * lg) + 4 * lg)


@dataclass(frozen=True)
class BoundInputs:
    t_star: float
    schedule: object
    d: int
    varpi: float = 0.05
    L: float = 1.0
    C: float = 0.0
    C_sw: float = 1.0
    delta_norm: float = 0.0
    R_max: float = 1.0
    gamma: float = 0.995

    def __post_init__(self):
        if not 0.0 < self.varpi <= 1.0:
            raise InvalidInputError(f"varpi must lie in (0, 1], got {self.varpi}")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidInputError(f"gamma must lie in [0, 1), got {self.gamma}")
        if min(self.L, self.C, self.C_sw, self.delta_norm) < 0:
            raise InvalidInputError("L, C, C_sw and delta_norm must be non-negative")


def tv_bound(inputs):
    """Right-hand sides of the TV-distance bound and the policy-value-gap bound."""
    z = zeta(inputs.t_star, inputs.schedule)
    cw = c_varpi(inputs.d, inputs.varpi)
    tv = inputs.L * (inputs.delta_norm + math.sqrt(math.expm1(2.0 * z)) * cw + z * inputs.C_sw) + inputs.C
    gap = inputs.R_max / (1.0 - inputs.gamma) ** 2 * tv
    return tv, gap


@dataclass
class SweepResult:
    t_grid: list
    mean_return: list
    stderr: list
    seed_count: int
    baseline_mean: float | None = None
    baseline_stderr: float | None = None
    per_seed: list = field(default_factory=list)

    @property
    def argmax(self):
        """Best t*; ties go to the smaller t*."""
        return self.t_grid[int(np.argmax(self.mean_return))]

    def rows(self):
        return [(t, m, s, self.seed_count) for t, m, s in zip(self.t_grid, self.mean_return, self.stderr)]


def _stderr(x):
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def bc_evaluate(train_set, env, bc_cfg, seed, n_eval_episodes, gamma=0.995):
    """Train BC on ``train_set`` and estimate its value.

    Training and evaluation rngs are keyed only by ``seed``, so policies
    compared under the same seed share an initialization and face the same
    start states.
    """
    policy = bc_train(train_set, bc_cfg, np.random.default_rng(derive_seed(seed, "bc")),
                      env.action_low, env.action_high)
    est = evaluate_policy(policy, env, n_eval_episodes, gamma, np.random.default_rng(derive_seed(seed, "eval")))
    return policy, est


def bc_return(train_set, env, bc_cfg, seed, n_eval_episodes, gamma=0.995):
    """Undiscounted mean return of a BC policy trained on ``train_set``."""
    return bc_evaluate(train_set, env, bc_cfg, seed, n_eval_episodes, gamma)[1].mean_return


def t_star_sweep(optimal, imperfect, env, denoiser, schedule, t_grid, n_seeds=3, bc_cfg=None,
                 n_eval_episodes=100, seed=0, with_baseline=True):
    """Return of DP-BC across purification times.

    For every t* and seed: purify the imperfect set, clone the union of the
    optimal and purified sets, and evaluate. The baseline clones the raw union.
    """
    t_grid = [float(t) for t in t_grid]
    if not t_grid:
        raise InvalidInputError("t_grid must be non-empty")
    bc_cfg = bc_cfg or BCConfig()
    per_seed = []
    for k in range(n_seeds):
        s = derive_seed(seed, "sweep", k)
        row = []
        for t in t_grid:
            purified = purify_dataset(imperfect, PurifyConfig.for_schedule(t, schedule), denoiser, schedule,
                                      derive_seed(s, "purify"))
            row.append(bc_return(optimal.concat(purified), env, bc_cfg, s, n_eval_episodes))
        per_seed.append(row)
    arr = np.array(per_seed)
    result = SweepResult(t_grid, arr.mean(axis=0).tolist(), [_stderr(arr[:, j]) for j in range(len(t_grid))],
                         n_seeds, per_seed=per_seed)
    if with_baseline:
        base = [bc_return(optimal.concat(imperfect), env, bc_cfg, derive_seed(seed, "sweep", k), n_eval_episodes)
                for k in range(n_seeds)]
        result.baseline_mean = float(np.mean(base))
        result.baseline_stderr = _stderr(base)
    return result


def welch_t_test(returns_a, returns_b):
    """One-sided Welch p-value for mean(a) > mean(b).

    When both samples have zero variance the test degenerates: equal means give
    0.5, otherwise 0 or 1 by the sign of the difference.
    """
    a = np.asarray(returns_a, dtype=float)
    b = np.asarray(returns_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise InvalidInputError("Welch test needs at least two samples per group")
    if a.var() == 0 and b.var() == 0:
        diff = a.mean() - b.mean()
        return 0.5 if diff == 0 else (0.0 if diff > 0 else 1.0)
    return float(stats.ttest_ind(a, b, equal_var=False, alternative="greater").pvalue)
