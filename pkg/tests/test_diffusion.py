import numpy as np
import pytest

from hades import diffusion as df
from hades import nn
from hades.errors import DegenerateBatchError, UsageError

T = 100


@pytest.fixture(scope="module")
def schedule():
    return df.schedule_cosine(T)


def zero_denoiser(d=2, cond_dim=0):
    spec = nn.NetSpec(d + 1 + 2 * cond_dim, 1, 4, d)
    return df.DenoiserNet(nn.NetParams(np.zeros(spec.param_count()), spec),
                          time_features=1, cond_dim=cond_dim)


def make_mixture(n=512, seed=0, spread=0.1):
    """Two tight Gaussian blobs at (+1,+1) and (-1,-1) with labels +-1."""
    rng = np.random.default_rng(seed)
    half = n // 2
    a = rng.normal(0, spread, (half, 2)) + 1.0
    b = rng.normal(0, spread, (n - half, 2)) - 1.0
    x = np.vstack([a, b])
    labels = np.concatenate([np.ones(half), -np.ones(n - half)])
    return x, labels


class TestSchedule:
    def test_endpoints(self, schedule):
        assert schedule.alpha_bar[0] == 1.0
        assert schedule.alpha_bar[T] == 0.0

    def test_midpoint_half(self, schedule):
        assert np.isclose(schedule.alpha_bar[T // 2], 0.5, atol=1e-12)

    def test_strictly_decreasing(self, schedule):
        assert np.all(np.diff(schedule.alpha_bar) < 0)

    def test_small_T_still_valid(self):
        s = df.schedule_cosine(2)
        assert s.alpha_bar[0] == 1.0 and s.alpha_bar[2] == 0.0

    def test_invalid_schedules_rejected(self):
        with pytest.raises(UsageError):
            df.schedule_cosine(1)
        with pytest.raises(UsageError):
            df.NoiseSchedule(2, np.array([1.0, 0.5, 0.1]))


class TestForwardDiffuse:
    def test_t0_identity(self, schedule):
        x0 = np.array([1.0, -2.0])
        x_t, _ = df.forward_diffuse(x0, 0, schedule, np.random.default_rng(0))
        assert np.array_equal(x_t, x0)

    def test_tT_pure_noise(self, schedule):
        x0 = np.array([3.0, 5.0])
        x_t, eps = df.forward_diffuse(x0, T, schedule, np.random.default_rng(1))
        assert np.array_equal(x_t, eps)

    def test_half_blend(self, schedule):
        x0 = np.array([1.0, 2.0, 3.0])
        x_t, eps = df.forward_diffuse(x0, T // 2, schedule, np.random.default_rng(2))
        assert np.allclose(x_t, (x0 + eps) / np.sqrt(2.0), atol=1e-12)

    def test_marginal_statistics(self, schedule):
        # Empirical mean/variance over 10^4 draws within 5% of the closed form.
        x0 = np.array([2.0, -1.0])
        rng = np.random.default_rng(3)
        t = 30
        draws = np.stack([df.forward_diffuse(x0, t, schedule, rng)[0]
                          for _ in range(10_000)])
        ab = schedule.alpha_bar[t]
        assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(ab) * x0)
                      <= 0.05 * np.abs(np.sqrt(ab) * x0) + 0.01)
        assert np.all(np.abs(draws.var(axis=0) - (1 - ab)) <= 0.05 * (1 - ab))

    def test_terminal_normality(self, schedule):
        x0 = np.array([4.0, -7.0])
        rng = np.random.default_rng(4)
        draws = np.stack([df.forward_diffuse(x0, T, schedule, rng)[0]
                          for _ in range(10_000)])
        assert np.all(np.abs(draws.mean(axis=0)) < 0.05)
        assert np.all((draws.var(axis=0) > 0.9) & (draws.var(axis=0) < 1.1))

    def test_out_of_range_step(self, schedule):
        with pytest.raises(UsageError):
            df.forward_diffuse(np.zeros(2), T + 1, schedule, np.random.default_rng(0))


class TestCfgEpsilon:
    def _trained_conditional(self, schedule):
        x, labels = make_mixture(128, seed=5)
        model = df.build_denoiser(2, 1, 2, 24, "elu", np.random.default_rng(6))
        model, _ = df.dm_train(model, x, np.ones(len(x)), labels[:, None], schedule,
                               df.GuidanceConfig(cond_dropout_prob=0.2),
                               df.TrainOpts(lr=1e-2, epochs=5), np.random.default_rng(7))
        return model

    def test_zero_weight_equals_conditional_pass(self, schedule):
        model = self._trained_conditional(schedule)
        x_t = np.random.default_rng(8).normal(size=(5, 2))
        out = df.cfg_epsilon(model, x_t, 10, np.array([1.0]),
                             df.GuidanceConfig(guidance_weight=0.0), schedule)
        # oracle: assemble the conditional input by hand
        t_arr = np.full(5, 10)
        inputs = np.concatenate(
            [x_t, (t_arr / T)[:, None],
             model.standardize(np.ones((5, 1))), np.ones((5, 1))], axis=1)
        ref, _ = nn.forward_batch(model.net, inputs)
        assert np.array_equal(out, ref)

    def test_absent_condition_null_token(self, schedule):
        model = self._trained_conditional(schedule)
        x_t = np.random.default_rng(9).normal(size=(4, 2))
        out = df.cfg_epsilon(model, x_t, 20, None, df.GuidanceConfig(), schedule)
        inputs = np.concatenate(
            [x_t, np.full((4, 1), 20 / T), np.zeros((4, 1)), np.zeros((4, 1))], axis=1)
        ref, _ = nn.forward_batch(model.net, inputs)
        assert np.array_equal(out, ref)

    def test_guided_combination_two_pass_oracle(self, schedule):
        model = self._trained_conditional(schedule)
        x_t = np.random.default_rng(10).normal(size=(3, 2))
        cond = np.array([-1.0])
        eps_c = df.cfg_epsilon(model, x_t, 15, cond,
                               df.GuidanceConfig(guidance_weight=0.0), schedule)
        eps_u = df.cfg_epsilon(model, x_t, 15, None, df.GuidanceConfig(), schedule)
        out = df.cfg_epsilon(model, x_t, 15, cond,
                             df.GuidanceConfig(guidance_weight=1.0), schedule)
        assert np.allclose(out, 2.0 * eps_c - eps_u, atol=1e-12)


class TestDdimSample:
    def test_zero_denoiser_closed_form(self, schedule):
        # with eps == 0 and sigma == 0 each step scales by sqrt(ab[t-1]/ab[t])
        model = zero_denoiser()
        init = np.random.default_rng(11).normal(size=(4, 2))
        start = 60
        out = df.ddim_sample(model, schedule, df.SamplerConfig("deterministic", start),
                             4, np.random.default_rng(0), init=init)
        ab = schedule.alpha_bar
        expected = init.copy()
        for t in range(start, 0, -1):
            expected *= np.sqrt(ab[t - 1] / ab[t])
        assert np.allclose(out, expected, atol=1e-9)
        # telescoped form: init / sqrt(ab[start])
        assert np.allclose(out, init / np.sqrt(ab[start]), atol=1e-9)

    def test_start_step_zero_is_identity(self, schedule):
        model = zero_denoiser()
        init = np.random.default_rng(12).normal(size=(3, 2))
        out = df.ddim_sample(model, schedule, df.SamplerConfig("deterministic", 0),
                             3, np.random.default_rng(0), init=init)
        assert np.array_equal(out, init)

    def test_deterministic_sampling_is_pure(self, schedule):
        x, _ = make_mixture(64, seed=13)
        model = df.build_denoiser(2, 0, 2, 16, "relu", np.random.default_rng(14))
        model, _ = df.dm_train(model, x, np.ones(len(x)), None, schedule,
                               df.GuidanceConfig(), df.TrainOpts(epochs=3),
                               np.random.default_rng(15))
        init = np.random.default_rng(16).normal(size=(8, 2))
        cfg = df.SamplerConfig("deterministic", T)
        a = df.ddim_sample(model, schedule, cfg, 8, np.random.default_rng(0), init=init)
        b = df.ddim_sample(model, schedule, cfg, 8, np.random.default_rng(99), init=init)
        assert np.array_equal(a, b)

    def test_bad_start_step(self, schedule):
        model = zero_denoiser()
        with pytest.raises(UsageError):
            df.ddim_sample(model, schedule, df.SamplerConfig("deterministic", T + 1),
                           2, np.random.default_rng(0), init=np.zeros((2, 2)))


class TestDmTrain:
    def test_single_point_recovery(self, schedule):
        p = np.array([1.5, -0.5])
        model = df.build_denoiser(2, 0, 2, 32, "elu", np.random.default_rng(20))
        model, losses = df.dm_train(model, p[None, :].repeat(32, axis=0), np.ones(32),
                                    None, schedule, df.GuidanceConfig(),
                                    df.TrainOpts(lr=1e-2, epochs=400),
                                    np.random.default_rng(21))
        samples = df.ddim_sample(model, schedule, df.SamplerConfig(), 256,
                                 np.random.default_rng(22))
        err = np.linalg.norm(samples.mean(axis=0) - p)
        assert err < 0.1 * np.linalg.norm(p) + 0.1
        assert losses[-1] < losses[0]

    def test_bimodal_recovery(self, schedule):
        x, _ = make_mixture(512, seed=23)
        model = df.build_denoiser(2, 0, 2, 64, "elu", np.random.default_rng(24))
        model, _ = df.dm_train(model, x, np.ones(len(x)), None, schedule,
                               df.GuidanceConfig(), df.TrainOpts(lr=1e-2, epochs=300),
                               np.random.default_rng(25))
        samples = df.ddim_sample(model, schedule, df.SamplerConfig(), 1024,
                                 np.random.default_rng(26))
        # split by nearest mode (a 2-component mixture fit with known centers)
        plus = samples[np.linalg.norm(samples - 1.0, axis=1)
                       < np.linalg.norm(samples + 1.0, axis=1)]
        minus = samples[np.linalg.norm(samples - 1.0, axis=1)
                        >= np.linalg.norm(samples + 1.0, axis=1)]
        assert len(plus) > 100 and len(minus) > 100
        assert np.linalg.norm(plus.mean(axis=0) - np.array([1.0, 1.0])) < 0.2
        assert np.linalg.norm(minus.mean(axis=0) - np.array([-1.0, -1.0])) < 0.2

    def test_degenerate_weights_collapse_to_point(self, schedule):
        x, _ = make_mixture(64, seed=27)
        q = np.array([1.0, 1.0])
        x[7] = q
        w = np.zeros(64)
        w[7] = 1.0
        model = df.build_denoiser(2, 0, 2, 32, "elu", np.random.default_rng(28))
        model, _ = df.dm_train(model, x, w, None, schedule, df.GuidanceConfig(),
                               df.TrainOpts(lr=1e-2, epochs=300,
                                            sample_by_weight=True),
                               np.random.default_rng(29))
        samples = df.ddim_sample(model, schedule, df.SamplerConfig(), 256,
                                 np.random.default_rng(30))
        assert np.linalg.norm(samples.mean(axis=0) - q) < 0.1 * np.linalg.norm(q) + 0.1

    def test_all_zero_weights_rejected(self, schedule):
        x, _ = make_mixture(16, seed=31)
        model = df.build_denoiser(2, 0, 1, 8, "relu", np.random.default_rng(32))
        with pytest.raises(DegenerateBatchError):
            df.dm_train(model, x, np.zeros(16), None, schedule, df.GuidanceConfig(),
                        df.TrainOpts(epochs=1), np.random.default_rng(33))

    def test_same_seed_identical_models(self, schedule):
        x, _ = make_mixture(64, seed=34)
        vals = []
        for _ in range(2):
            model = df.build_denoiser(2, 0, 1, 16, "relu", np.random.default_rng(35))
            model, _ = df.dm_train(model, x, np.ones(64), None, schedule,
                                   df.GuidanceConfig(), df.TrainOpts(epochs=5),
                                   np.random.default_rng(36))
            vals.append(model.net.values)
        assert np.array_equal(vals[0], vals[1])


class TestConditionalRouting:
    def test_condition_routes_samples(self, schedule):
        x, labels = make_mixture(512, seed=40)
        model = df.build_denoiser(2, 1, 2, 64, "elu", np.random.default_rng(41))
        model, _ = df.dm_train(model, x, np.ones(len(x)), labels[:, None], schedule,
                               df.GuidanceConfig(guidance_weight=0.0,
                                                 cond_dropout_prob=0.1),
                               df.TrainOpts(lr=1e-2, epochs=300),
                               np.random.default_rng(42))
        samples = df.ddim_sample(model, schedule, df.SamplerConfig(), 256,
                                 np.random.default_rng(43), condition=np.array([1.0]))
        nearer_plus = (np.linalg.norm(samples - 1.0, axis=1)
                       < np.linalg.norm(samples + 1.0, axis=1))
        assert nearer_plus.mean() >= 0.9


class TestPartialDenoise:
    def test_ta_zero_identity(self, schedule):
        model = zero_denoiser()
        g = np.random.default_rng(50).normal(size=(5, 2))
        out = df.partial_denoise(model, schedule, g, 0, np.random.default_rng(51))
        assert np.array_equal(out, g)

    def test_readaptation_moves_toward_data(self, schedule):
        x, _ = make_mixture(256, seed=52)
        model = df.build_denoiser(2, 0, 2, 64, "elu", np.random.default_rng(53))
        model, _ = df.dm_train(model, x, np.ones(len(x)), None, schedule,
                               df.GuidanceConfig(), df.TrainOpts(lr=1e-2, epochs=200),
                               np.random.default_rng(54))
        rng = np.random.default_rng(55)
        noisy = x[:64] + 0.6 * rng.standard_normal((64, 2))

        def mean_dist(pts):
            d_plus = np.linalg.norm(pts - 1.0, axis=1)
            d_minus = np.linalg.norm(pts + 1.0, axis=1)
            return np.minimum(d_plus, d_minus).mean()

        adapted = df.partial_denoise(model, schedule, noisy, 30, rng)
        assert mean_dist(adapted) < mean_dist(noisy)

    def test_bad_ta(self, schedule):
        with pytest.raises(UsageError):
            df.partial_denoise(zero_denoiser(), schedule, np.zeros((2, 2)), T + 5,
                               np.random.default_rng(0))


class TestSnapshot:
    def test_round_trip(self, tmp_path, schedule):
        x, labels = make_mixture(64, seed=60)
        model = df.build_denoiser(2, 1, 2, 16, "leaky_relu", np.random.default_rng(61))
        model, _ = df.dm_train(model, x, np.ones(64), labels[:, None], schedule,
                               df.GuidanceConfig(), df.TrainOpts(epochs=3),
                               np.random.default_rng(62))
        path = tmp_path / "model.json"
        df.save_denoiser(model, schedule, path, sigma_init=0.5)
        loaded, sched2, sigma_init = df.load_denoiser(path)
        assert sigma_init == 0.5
        assert sched2.steps == schedule.steps
        assert np.array_equal(loaded.net.values, model.net.values)
        assert np.array_equal(loaded.cond_mean, model.cond_mean)
        init = np.random.default_rng(63).normal(size=(4, 2))
        cfg = df.SamplerConfig("deterministic", T)
        a = df.ddim_sample(model, schedule, cfg, 4, np.random.default_rng(0),
                           condition=np.array([1.0]), init=init)
        b = df.ddim_sample(loaded, sched2, cfg, 4, np.random.default_rng(0),
                           condition=np.array([1.0]), init=init)
        assert np.array_equal(a, b)
