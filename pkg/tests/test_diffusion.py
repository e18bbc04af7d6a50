import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpil.demos import DemoSet
from dpil.diffusion import (Denoiser, DenoiserTrainConfig, PurifyConfig, ZeroDenoiser, denoising_loss,
                            forward_diffuse, gaussian_score_denoiser, make_schedule, purify, purify_dataset,
                            reverse_denoise, t_to_step, timestep_embedding, train_denoiser, transition_noise)
from dpil.errors import InvalidInputError, NumericalError
from dpil.nn_core import Mlp


def two_step():
    # beta = (0.1, 0.2): the only linear schedule through those endpoints with T = 2
    return make_schedule(2, 0.1, 0.2)


# --- schedule --------------------------------------------------------------------------------

def test_default_schedule_endpoints():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.beta[0] == pytest.approx(1e-4, abs=1e-15)
    assert s.beta[-1] == pytest.approx(0.02, abs=1e-15)
    assert len(s.beta) == 1000


def test_single_step_schedule():
    s = make_schedule(1, 0.01, 0.01)
    np.testing.assert_array_equal(s.beta, [0.01])
    assert s.alpha_bar[0] == pytest.approx(0.99)


def test_two_step_alpha_bar_by_hand():
    assert two_step().alpha_bar[1] == pytest.approx(0.9 * 0.8)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedule_rejected(args):
    with pytest.raises(InvalidInputError):
        make_schedule(*args)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 400), st.floats(1e-6, 0.05), st.floats(0.0, 0.5))
def test_schedule_identities(T, b1, extra):
    s = make_schedule(T, b1, min(b1 + extra, 0.9))
    assert np.all(s.alpha + s.beta == 1.0)
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] < s.alpha_bar[0] < 1
    ratios = s.alpha_bar[1:] / s.alpha_bar[:-1]
    np.testing.assert_allclose(ratios, s.alpha[1:], rtol=1e-12)


def test_alpha_bar_is_exact_running_product():
    s = make_schedule(50, 1e-3, 0.05)
    acc = 1.0
    for i in range(50):
        acc *= s.alpha[i]
        assert s.alpha_bar[i] == acc


@pytest.mark.parametrize("t,T,i", [(0.1, 1000, 100), (1.0, 1000, 1000), (1e-6, 1000, 1), (0.5, 100, 50),
                                   (0.005, 100, 1), (0.015, 100, 2)])
def test_time_to_step(t, T, i):
    assert t_to_step(t, T) == i


@pytest.mark.parametrize("t", [0.0, -0.1, 1.5])
def test_time_out_of_range(t):
    with pytest.raises(InvalidInputError):
        t_to_step(t, 100)


def test_purify_config_derives_step():
    cfg = PurifyConfig(t_star=0.1, T=1000)
    assert cfg.i_star == 100
    with pytest.raises(InvalidInputError):
        PurifyConfig(t_star=1.5)


def test_embedding_shape_and_range():
    e = timestep_embedding([1, 2, 1000], 32)
    assert e.shape == (3, 32)
    assert np.all(np.abs(e) <= 1)
    assert not np.array_equal(e[0], e[1])


# --- forward diffusion -----------------------------------------------------------------------

def test_forward_no_noise_limit():
    s = make_schedule(10, 1e-12, 1e-12)
    x0 = np.array([0.3, -1.2])
    np.testing.assert_allclose(forward_diffuse(x0, 10, s, eps=np.ones(2)), x0, atol=1e-5)


def test_forward_two_step_by_hand():
    out = forward_diffuse(np.array([1.0, 0.0]), 2, two_step(), eps=np.zeros(2))
    np.testing.assert_allclose(out, [math.sqrt(0.72), 0.0])
    assert out[0] == pytest.approx(0.84853, abs=1e-5)


@pytest.mark.parametrize("i", [1, 37, 100])
def test_forward_zero_signal(i):
    s = make_schedule(100)
    e = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(forward_diffuse(np.zeros(3), i, s, eps=e), math.sqrt(1 - s.alpha_bar[i - 1]) * e)


def test_forward_step_out_of_range():
    with pytest.raises(InvalidInputError):
        forward_diffuse(np.zeros(2), 0, make_schedule(10), eps=np.zeros(2))
    with pytest.raises(InvalidInputError):
        forward_diffuse(np.zeros(2), 11, make_schedule(10), eps=np.zeros(2))


# --- reverse denoising -----------------------------------------------------------------------

def test_single_reverse_step_with_zero_denoiser():
    s = make_schedule(10, 0.01, 0.05)
    v = np.array([0.5, -2.0])
    out = reverse_denoise(v, 1, ZeroDenoiser(2), s, z=np.zeros((1, 2)))
    np.testing.assert_allclose(out, v / math.sqrt(s.alpha[0]))


def test_reverse_matches_hand_loop():
    s = make_schedule(20, 1e-3, 0.05)
    den = gaussian_score_denoiser([0.7], 0.4, s)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 1))
    z = rng.normal(size=(6, 5, 1))
    out = reverse_denoise(x, 6, den, s, z=z, noise_at_last_step=True)
    ref = x.copy()
    for k, i in enumerate(range(6, 0, -1)):
        a, ab, b = s.alpha[i - 1], s.alpha_bar[i - 1], s.beta[i - 1]
        e = math.sqrt(1 - ab) * (ref - math.sqrt(ab) * 0.7) / (ab * 0.16 + 1 - ab)
        ref = (ref - (1 - a) / math.sqrt(1 - ab) * e) / math.sqrt(a) + math.sqrt(b) * z[k]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_last_step_noise_flag():
    s = make_schedule(10, 0.01, 0.05)
    z = np.ones((1, 1))
    quiet = reverse_denoise(np.zeros(1), 1, ZeroDenoiser(1), s, z=z)
    noisy = reverse_denoise(np.zeros(1), 1, ZeroDenoiser(1), s, z=z, noise_at_last_step=True)
    assert quiet[0] == 0.0
    assert noisy[0] == pytest.approx(math.sqrt(s.beta[0]))


def test_reverse_is_deterministic_under_fixed_seed():
    s = make_schedule(50)
    den = gaussian_score_denoiser([1.0, -1.0], 0.5, s)
    x = np.random.default_rng(0).normal(size=(4, 2))
    a = reverse_denoise(x, 30, den, s, rng=np.random.default_rng(9))
    b = reverse_denoise(x, 30, den, s, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_reverse_reports_failing_step():
    class Exploding:
        def predict_noise(self, x, step):
            return np.full_like(x, np.inf) if step == 3 else np.zeros_like(x)

    with pytest.raises(NumericalError) as info:
        reverse_denoise(np.zeros(1), 5, Exploding(), make_schedule(10), z=np.zeros((5, 1)))
    assert info.value.index == 3


def test_reverse_pulls_toward_data_mean():
    """Gaussian oracle: a 3-sigma outlier, diffused then denoised, ends closer to mu on average."""
    s = make_schedule(1000)
    mu, sigma = 2.0, 0.5
    den = gaussian_score_denoiser([mu], sigma, s)
    i_star = 100
    dists = []
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        x_i = forward_diffuse(np.array([mu + 3 * sigma]), i_star, s, rng=rng)
        dists.append(abs(reverse_denoise(x_i, i_star, den, s, rng=rng)[0] - mu))
    assert np.mean(dists) < 3 * sigma


# --- Gaussian oracle -------------------------------------------------------------------------

def test_oracle_zero_at_diffused_mean():
    s = make_schedule(100)
    den = gaussian_score_denoiser([1.5, -0.5], 0.3, s)
    for i in (1, 50, 100):
        x = math.sqrt(s.alpha_bar[i - 1]) * np.array([[1.5, -0.5]])
        np.testing.assert_allclose(den.predict_noise(x, i), 0.0, atol=1e-15)


def test_oracle_standard_normal_simplifies():
    s = make_schedule(100)
    den = gaussian_score_denoiser([0.0], 1.0, s)
    x = np.linspace(-2, 2, 7)[:, None]
    for i in (1, 40, 100):
        np.testing.assert_allclose(den.predict_noise(x, i), math.sqrt(1 - s.alpha_bar[i - 1]) * x, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(0.1, 2.0), st.integers(1, 100))
def test_oracle_is_affine_in_x(x, c, sigma, i):
    s = make_schedule(100)
    den = gaussian_score_denoiser([0.4], sigma, s)
    ab = s.alpha_bar[i - 1]
    diff = den.predict_noise(np.array([[x + c]]), i) - den.predict_noise(np.array([[x]]), i)
    assert diff[0, 0] == pytest.approx(math.sqrt(1 - ab) * c / (ab * sigma**2 + 1 - ab), abs=1e-12)


def test_oracle_rejects_bad_sigma():
    with pytest.raises(InvalidInputError):
        gaussian_score_denoiser([0.0], 0.0, make_schedule(10))


def test_oracle_purification_preserves_moments():
    """Diffuse samples of N(mu, sigma^2) to i* <= T/10 and denoise: moments survive within 5%."""
    s = make_schedule(1000)
    mu, sigma = 2.0, 0.5
    den = gaussian_score_denoiser([mu], sigma, s)
    rng = np.random.default_rng(0)
    x0 = rng.normal(mu, sigma, size=(20000, 1))
    for i_star in (10, 50, 100):
        out = reverse_denoise(forward_diffuse(x0, i_star, s, rng=rng), i_star, den, s, rng=rng)
        assert out.mean() == pytest.approx(mu, rel=0.05)
        assert out.var() == pytest.approx(sigma**2, rel=0.05)


# --- purify ----------------------------------------------------------------------------------

class ScaledZero(ZeroDenoiser):
    def __init__(self, mean, std):
        super().__init__(len(mean))
        self.norm_mean, self.norm_std = np.asarray(mean, float), np.asarray(std, float)

    def normalize(self, x):
        return (np.asarray(x) - self.norm_mean) / self.norm_std

    def denormalize(self, x):
        return np.asarray(x) * self.norm_std + self.norm_mean


def test_purify_one_step_composition():
    s = make_schedule(10, 0.01, 0.05)
    den = ScaledZero([1.0, -2.0], [2.0, 0.5])
    x0 = np.array([3.0, -1.0])
    e = np.array([1.0, -0.5])
    cfg = PurifyConfig(t_star=0.1, T=10, eps=e, z=np.zeros((1, 2)))
    assert cfg.i_star == 1
    # one forward jump then one reverse step with a zero predictor: n + sqrt(beta/alpha) * eps in scaled units
    a = s.alpha[0]
    expected = den.denormalize(den.normalize(x0) + math.sqrt((1 - a) / a) * e)
    np.testing.assert_allclose(purify(x0, cfg, den, s), expected)


def test_purify_identity_in_no_noise_limit():
    s = make_schedule(100, 1e-12, 1e-12)
    x0 = np.array([0.3, -4.0, 2.5])
    cfg = PurifyConfig(t_star=0.5, T=100, eps=np.zeros(3), z=np.zeros((50, 3)))
    np.testing.assert_allclose(purify(x0, cfg, ZeroDenoiser(3), s), x0, atol=1e-4)


def test_purify_oracle_shrinks_perturbation():
    s = make_schedule(1000)
    mu = 2.0
    den = gaussian_score_denoiser([mu], 0.5, s)
    cfg = PurifyConfig(t_star=0.1, T=1000)
    rng = np.random.default_rng(0)
    before = np.full((1000, 1), mu + 0.6)
    after = purify(before, cfg, den, s, rng)
    assert np.mean(np.abs(after - mu)) < np.mean(np.abs(before - mu))


def test_purify_schedule_mismatch():
    with pytest.raises(InvalidInputError):
        purify(np.zeros(1), PurifyConfig(0.1, T=100), ZeroDenoiser(1), make_schedule(10), np.random.default_rng(0))


def small_demos(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return DemoSet(rng.normal(size=(n, 2)), rng.normal(size=(n, 1)), rng.normal(size=n),
                   np.repeat(np.arange(n // 4), 4), np.tile(np.arange(4), n // 4), "toy", {"delta": 0.6})


def test_purify_dataset_matches_per_transition_purify():
    s = make_schedule(100)
    demos = small_demos()
    den = gaussian_score_denoiser([0.1, -0.2, 0.3], 0.8, s)
    cfg = PurifyConfig(t_star=0.2, T=100)
    out = purify_dataset(demos, cfg, den, s, seed=42)
    for k in range(len(demos)):
        eps, z = transition_noise(42, k, cfg.i_star, 3)
        one = purify(demos.pairs()[k], PurifyConfig(0.2, 100, eps=eps, z=z), den, s)
        np.testing.assert_allclose(np.concatenate([out.states[k], out.actions[k]]), one, rtol=1e-12, atol=1e-14)
    assert np.array_equal(out.episode_ids, demos.episode_ids)
    assert np.array_equal(out.step_indices, demos.step_indices)
    assert np.array_equal(out.rewards, demos.rewards)
    assert out.generator_meta["purified"] == {"t_star": 0.2, "i_star": 20, "seed": 42}
    assert out.generator_meta["delta"] == 0.6


def test_purify_dataset_independent_of_row_subset():
    s = make_schedule(100)
    demos = small_demos()
    den = gaussian_score_denoiser([0.0, 0.0, 0.0], 1.0, s)
    cfg = PurifyConfig(t_star=0.3, T=100)
    a = purify_dataset(demos, cfg, den, s, seed=3)
    b = purify_dataset(demos, cfg, den, s, seed=3)
    assert a == b


def test_purify_dataset_empty_and_dim_check():
    s = make_schedule(10)
    empty = DemoSet.empty(2, 1)
    out = purify_dataset(empty, PurifyConfig(0.5, 10), ZeroDenoiser(3), s, seed=0)
    assert len(out) == 0
    with pytest.raises(InvalidInputError):
        purify_dataset(small_demos(), PurifyConfig(0.5, 10), ZeroDenoiser(4), s, seed=0)


# --- training --------------------------------------------------------------------------------

def test_perfect_predictor_has_zero_loss():
    s = make_schedule(100)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(8, 2))
    eps = rng.normal(size=(8, 2))
    steps = rng.integers(1, 101, size=8)

    class Cheat:
        def predict_noise(self, x, step):
            return eps

    assert denoising_loss(Cheat(), x0, steps, eps, s) == 0.0


def test_training_is_deterministic_and_reduces_loss():
    s = make_schedule(100)
    x = np.random.default_rng(0).normal(2.0, 0.5, size=(64, 1))
    cfg = DenoiserTrainConfig(epochs=40, batch_size=16, hidden=16, n_layers=3)
    a = train_denoiser(x, s, cfg, np.random.default_rng(5))
    b = train_denoiser(x, s, cfg, np.random.default_rng(5))
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        assert np.array_equal(p, q)
    assert a.loss_history == b.loss_history
    assert len(a.loss_history) == 40
    assert np.mean(a.loss_history[-5:]) < np.mean(a.loss_history[:5])
    assert np.all(a.norm_std >= 1e-6)


def test_training_with_regularizers_and_ema_runs():
    s = make_schedule(50)
    x = np.random.default_rng(0).normal(size=(32, 3))
    cfg = DenoiserTrainConfig(epochs=5, batch_size=8, hidden=16, n_layers=5, dropout=0.2, batch_norm=True,
                              ema_decay=0.9)
    den = train_denoiser(x, s, cfg, np.random.default_rng(0))
    out = den.predict_noise(den.normalize(x), 10)
    assert out.shape == (32, 3) and np.all(np.isfinite(out))


def test_constant_feature_gets_floored_std():
    s = make_schedule(20)
    x = np.column_stack([np.ones(10), np.arange(10.0)])
    den = train_denoiser(x, s, DenoiserTrainConfig(epochs=1, hidden=8, n_layers=2), np.random.default_rng(0))
    assert den.norm_std[0] == 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_rejects_empty_and_reports_epoch():
    s = make_schedule(10)
    with pytest.raises(InvalidInputError):
        train_denoiser(np.zeros((0, 2)), s, DenoiserTrainConfig(epochs=1))
    with pytest.raises(NumericalError) as info:
        train_denoiser(np.full((4, 1), 1e200), s, DenoiserTrainConfig(epochs=2, normalize=False, hidden=4, n_layers=2),
                       np.random.default_rng(0))
    assert info.value.index == 0


def test_denoiser_checkpoint_round_trip(tmp_path):
    s = make_schedule(30)
    x = np.random.default_rng(0).normal(size=(16, 2))
    den = train_denoiser(x, s, DenoiserTrainConfig(epochs=3, hidden=8, n_layers=3), np.random.default_rng(1))
    den.save(tmp_path / "d.npz", s, {"note": "x"})
    back = Denoiser.load(tmp_path / "d.npz")
    probe = np.random.default_rng(2).normal(size=(5, 2))
    assert np.array_equal(back.predict_noise(probe, 7), den.predict_noise(probe, 7))
    assert np.array_equal(back.norm_mean, den.norm_mean) and back.schedule_id == s.digest()
    assert back.loss_history == den.loss_history


def test_denoiser_output_dim_matches_input():
    net = Mlp([3 + 32, 8, 3])
    den = Denoiser(net, np.zeros(3), np.ones(3), "x")
    assert den.predict_noise(np.zeros((2, 3)), 5).shape == (2, 3)
