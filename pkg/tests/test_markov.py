"""Markov scanpath model: fit recovery, likelihood, gradient, sampling."""

import math

import numpy as np
import pytest
from scipy.special import digamma, gammaln

from gazeid import markov
from gazeid.core import BASE_CHANNELS, DYNAMICS_CHANNELS, extract_features
from gazeid.distributions import PROB_FLOOR, GammaParams, multinomial_mle


def gamma_entropy(p: GammaParams) -> float:
    """Differential entropy of the shape/scale Gamma (closed form)."""
    a, b = p.shape, p.scale
    return a + math.log(b) + float(gammaln(a)) + (1.0 - a) * float(digamma(a))


def finite_difference_gradient(features, params, channels, h=1e-6):
    vec = markov.params_to_vector(params)
    fd = np.zeros_like(vec)
    for i in range(len(vec)):
        step = h * max(1.0, abs(vec[i]))
        vp, vm = vec.copy(), vec.copy()
        vp[i] += step
        vm[i] -= step
        fd[i] = (
            markov.loglik(features, markov.vector_to_params(vp, channels))
            - markov.loglik(features, markov.vector_to_params(vm, channels))
        ) / (2 * step)
    return fd


def sample_features(params, n_paths, n_fixations, seed):
    rng = np.random.default_rng(seed)
    return [
        markov.sample_scanpath(params, n_fixations, seed_or_rng=rng)[1] for _ in range(n_paths)
    ]


class TestFit:
    def test_recovers_generating_parameters(self):
        # 10 paths x 2000 saccades gives every per-type cell >= ~2400
        # samples, where the Gamma-shape MLE's relative sd (~sqrt(2/n)) puts
        # the 5% tolerance at >3 sigma.
        true = markov.default_params(BASE_CHANNELS)
        data = sample_features(true, n_paths=10, n_fixations=2001, seed=42)
        fit = markov.fit(data, BASE_CHANNELS)
        for ch in BASE_CHANNELS:
            for u in range(4):
                assert fit.channels[ch][u].shape == pytest.approx(
                    true.channels[ch][u].shape, rel=0.05
                )
                assert fit.channels[ch][u].scale == pytest.approx(
                    true.channels[ch][u].scale, rel=0.05
                )
        np.testing.assert_allclose(fit.pi, true.pi / true.pi.sum(), atol=0.02)

    def test_single_type_floored(self):
        base = markov.default_params(BASE_CHANNELS)
        feats = [
            [f for path in sample_features(base, 5, 50, 1) for f in path if f.saccade_type == 1]
        ]
        fit = markov.fit(feats, BASE_CHANNELS)
        assert fit.pi[0] == pytest.approx(1.0 - 3 * PROB_FLOOR)
        np.testing.assert_allclose(fit.pi[1:], PROB_FLOOR)
        # every empty cell fell back to the pooled fit
        assert len(fit.fit_report.fallback_cells) == 6

    def test_factorization_ignores_disabled_channels(self):
        true = markov.default_params(DYNAMICS_CHANNELS)
        data = sample_features(true, 5, 60, 3)
        fit_a = markov.fit(data, BASE_CHANNELS)
        perturbed = [
            [
                type(f)(
                    saccade_type=f.saccade_type,
                    amplitude=f.amplitude,
                    duration=f.duration,
                    direction=f.direction,
                    mean_velocity=f.mean_velocity * 7.7,
                )
                for f in path
            ]
            for path in data
        ]
        fit_b = markov.fit(perturbed, BASE_CHANNELS)
        assert markov.params_to_json_dict(fit_a) == markov.params_to_json_dict(fit_b)


class TestLoglik:
    def test_single_saccade_decomposition(self):
        params = markov.MarkovModelParams(
            pi=multinomial_mle([5, 0, 0, 0]).pi,
            channels={
                "amplitude": tuple(GammaParams(2.0, 1.5) for _ in range(4)),
                "duration": tuple(GammaParams(6.0, 40.0) for _ in range(4)),
            },
        )
        from gazeid.core import SaccadeFeatures

        f = SaccadeFeatures(saccade_type=1, amplitude=3.0, duration=240.0, direction=0.0)
        from gazeid.distributions import gamma_logpdf

        expected = (
            math.log(params.pi[0])
            + float(gamma_logpdf(3.0, params.channels["amplitude"][0]))
            + float(gamma_logpdf(240.0, params.channels["duration"][0]))
        )
        assert markov.loglik([f], params) == pytest.approx(expected, rel=1e-12)

    def test_additive_over_concatenation(self):
        params = markov.default_params(BASE_CHANNELS)
        a = sample_features(params, 1, 20, 5)[0]
        b = sample_features(params, 1, 25, 6)[0]
        assert markov.loglik(a + b, params) == pytest.approx(
            markov.loglik(a, params) + markov.loglik(b, params), rel=1e-12
        )

    def test_mean_loglik_matches_negative_entropy(self):
        # Large-sample oracle: E[log p] per saccade equals the negative
        # entropy of the generating model (categorical term, no
        # multinomial coefficient, matching the implementation).
        params = markov.default_params(BASE_CHANNELS)
        pi = params.pi / params.pi.sum()
        neg_entropy = float(pi @ np.log(pi))
        for ch in BASE_CHANNELS:
            neg_entropy -= float(
                sum(pi[u] * gamma_entropy(params.channels[ch][u]) for u in range(4))
            )
        feats = sample_features(params, 1, 100_001, 7)[0]
        mean_ll = markov.loglik(feats, params) / len(feats)
        assert mean_ll == pytest.approx(neg_entropy, rel=0.01)

    def test_skips_invalid_channel_values(self):
        from gazeid.core import SaccadeFeatures

        params = markov.default_params(BASE_CHANNELS)
        good = SaccadeFeatures(saccade_type=1, amplitude=2.0, duration=100.0, direction=0.0)
        bad = SaccadeFeatures(saccade_type=1, amplitude=math.nan, duration=100.0, direction=0.0)
        diag = markov.LikelihoodDiagnostics()
        ll = markov.loglik([good, bad], params, diagnostics=diag)
        assert diag.skipped == {"amplitude": 1}
        assert np.isfinite(ll)


class TestGradient:
    @pytest.mark.parametrize("channels", [BASE_CHANNELS, DYNAMICS_CHANNELS])
    def test_matches_finite_differences(self, channels):
        params = markov.default_params(channels)
        feats = sample_features(params, 1, 25, 11)[0]
        g = markov.grad_loglik(feats, params)
        fd = finite_difference_gradient(feats, params, channels)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_empty_type_block_is_zero(self):
        params = markov.default_params(BASE_CHANNELS)
        feats = [f for f in sample_features(params, 1, 40, 13)[0] if f.saccade_type != 4]
        g = markov.grad_loglik(feats, params)
        block = 1 + 2 * len(BASE_CHANNELS)
        np.testing.assert_array_equal(g[3 * block :], 0.0)

    def test_score_zero_mean_at_generating_params(self):
        # E[grad log p] = 0 at the generating parameters; check each
        # coordinate within 3 standard errors over ~1e5 saccades.
        params = markov.default_params(BASE_CHANNELS)
        paths = sample_features(params, 200, 501, 17)
        grads = np.array([markov.grad_loglik(f, params) for f in paths])
        n_saccades = sum(len(f) for f in paths)
        per_saccade_mean = grads.sum(axis=0) / n_saccades
        per_saccade_sd = grads.std(axis=0, ddof=1) * math.sqrt(len(paths)) / n_saccades
        # the pi block has nonzero expectation T*(1) per coordinate pair
        # (unconstrained categorical score), so restrict to Gamma blocks
        block = 1 + 2 * len(BASE_CHANNELS)
        gamma_coords = [u * block + j for u in range(4) for j in range(1, block)]
        for idx in gamma_coords:
            assert abs(per_saccade_mean[idx]) <= 3.0 * per_saccade_sd[idx] + 1e-12

    def test_layout_length(self):
        assert markov.default_params(BASE_CHANNELS).dim == 20
        assert markov.default_params(DYNAMICS_CHANNELS).dim == 68

    def test_dynamics_with_base_channels_bit_identical(self):
        params = markov.default_params(BASE_CHANNELS)
        feats = sample_features(params, 1, 30, 19)[0]
        # A "dynamics" configuration restricted to {amplitude, duration} is
        # the base configuration: same params object, same code path.
        ll_base = markov.loglik(feats, params)
        g_base = markov.grad_loglik(feats, params)
        again = markov.MarkovModelParams(pi=params.pi, channels=dict(params.channels))
        assert markov.loglik(feats, again) == ll_base
        np.testing.assert_array_equal(markov.grad_loglik(feats, again), g_base)

    def test_fit_is_local_maximum(self):
        rng = np.random.default_rng(23)
        true = markov.default_params(BASE_CHANNELS)
        feats = sample_features(true, 1, 400, 29)[0]
        fit = markov.fit([feats], BASE_CHANNELS)
        base_ll = markov.loglik(feats, fit)
        vec = markov.params_to_vector(fit)
        for _ in range(100):
            delta = rng.standard_normal(vec.size) * 0.02 * np.maximum(np.abs(vec), 1e-3)
            perturbed = vec + delta
            # keep pi a simplex so the comparison is within the feasible set
            block = 1 + 2 * len(BASE_CHANNELS)
            pi_idx = [u * block for u in range(4)]
            pis = np.abs(perturbed[pi_idx])
            perturbed[pi_idx] = pis / pis.sum()
            if np.any(perturbed <= 0):
                continue
            other = markov.vector_to_params(perturbed, BASE_CHANNELS)
            assert markov.loglik(feats, other) <= base_ll + 1e-9


class TestSampling:
    def test_round_trip_recovers_drawn_values(self):
        params = markov.default_params(DYNAMICS_CHANNELS)
        path, feats = markov.sample_scanpath(params, 40, seed_or_rng=101)
        re = extract_features(path)
        assert [f.saccade_type for f in re] == [f.saccade_type for f in feats]
        np.testing.assert_allclose(
            [f.amplitude for f in re], [f.amplitude for f in feats], rtol=1e-12
        )
        np.testing.assert_array_equal(
            [f.duration for f in re], [f.duration for f in feats]
        )

    def test_maintain_only_stays_in_bin(self):
        params = markov.MarkovModelParams(
            pi=multinomial_mle([10, 0, 0, 0]).pi,
            channels=markov.default_params(BASE_CHANNELS).channels,
        )
        path, feats = markov.sample_scanpath(params, 60, seed_or_rng=5)
        re = extract_features(path)
        assert all(f.saccade_type == 1 for f in re)

    def test_deterministic(self):
        params = markov.default_params(BASE_CHANNELS)
        p1, f1 = markov.sample_scanpath(params, 30, seed_or_rng=7)
        p2, f2 = markov.sample_scanpath(params, 30, seed_or_rng=7)
        np.testing.assert_array_equal(p1.positions, p2.positions)
        np.testing.assert_array_equal(p1.durations, p2.durations)
        assert [f.amplitude for f in f1] == [f.amplitude for f in f2]


class TestBayesIdentify:
    def test_single_user(self):
        params = markov.default_params(BASE_CHANNELS)
        feats = sample_features(params, 1, 10, 3)[0]
        assert markov.bayes_identify([feats], [params]) == 0

    def test_well_separated_users(self):
        rng = np.random.default_rng(31)
        users = []
        for u in range(5):
            scale = 1.0 + 0.8 * u
            users.append(
                markov.MarkovModelParams(
                    pi=np.array([0.4, 0.3, 0.2, 0.1]),
                    channels={
                        "amplitude": tuple(GammaParams(2.0 + u, 1.0) for _ in range(4)),
                        "duration": tuple(GammaParams(6.0, 30.0 * scale) for _ in range(4)),
                    },
                )
            )
        per_image = [
            markov.sample_scanpath(users[3], 40, seed_or_rng=rng)[1] for _ in range(3)
        ]
        assert markov.bayes_identify(per_image, users) == 3

    def test_permutation_equivariance(self):
        params = [markov.default_params(BASE_CHANNELS) for _ in range(3)]
        params[1] = markov.MarkovModelParams(
            pi=params[1].pi,
            channels={
                "amplitude": tuple(GammaParams(8.0, 2.0) for _ in range(4)),
                "duration": params[1].channels["duration"],
            },
        )
        feats = [markov.sample_scanpath(params[1], 30, seed_or_rng=3)[1]]
        winner = markov.bayes_identify(feats, params)
        order = [2, 0, 1]
        permuted = [params[i] for i in order]
        assert order[markov.bayes_identify(feats, permuted)] == winner


class TestPersistence:
    @pytest.mark.parametrize("channels", [BASE_CHANNELS, DYNAMICS_CHANNELS])
    def test_json_round_trip_value_exact(self, tmp_path, channels):
        true = markov.default_params(channels)
        data = sample_features(true, 3, 80, 37)
        fit = markov.fit(data, channels, b_star=3.25)
        markov.save_params_json(fit, tmp_path / "m.json")
        loaded = markov.load_params_json(tmp_path / "m.json")
        np.testing.assert_array_equal(loaded.pi, fit.pi)
        for ch in channels:
            for u in range(4):
                assert loaded.channels[ch][u] == fit.channels[ch][u]
        assert loaded.b_star == fit.b_star
        assert loaded.config == fit.config
