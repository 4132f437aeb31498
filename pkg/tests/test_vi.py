"""Tests for the variational inference module."""

import copy
import itertools

import numpy as np
import pytest
from scipy.special import digamma, expit, logsumexp
from scipy.stats import mannwhitneyu

from gphawkes.gp import SparseGp
from gphawkes.kernels import (AggregatedKernel, DecayParam, RbfParams,
                              chol_with_jitter)
from gphawkes.model import EventSequence, GammaPrior, ModelHyper
from gphawkes.optim import AdamOptimizer
from gphawkes.polya_gamma import pg_mean, pg_sample
from gphawkes.simulate import posterior_predictive_simulate, thinning_simulate
from gphawkes.vi import (ViConfig, elbo, elbo_hypergrads, fit, hyper_step_vi,
                         init_vi_state, update_q_lambda, update_q_latent,
                         update_q_pg, update_q_phi)

REF_HYPER = ModelHyper(RbfParams(1.0, 0.5), RbfParams(1.0, 0.07),
                       DecayParam(20.0), GammaPrior(2.5, 0.007))
SMALL_HYPER = ModelHyper(RbfParams(1.0, 0.5), RbfParams(0.8, 0.1),
                         DecayParam(10.0), GammaPrior(4.0, 2.0))


def small_state(times=(0.2, 0.45, 0.8), hyper=SMALL_HYPER, grid_count=80,
                inducing_count=10, window=1.0):
    ev = EventSequence(np.asarray(times, dtype=np.float64), window=window)
    cfg = ViConfig(inducing_count=inducing_count, grid_count=grid_count,
                   learn_hypers=False)
    return init_vi_state(ev, hyper, cfg)


class TestUpdateQLambda:
    def test_reference_values(self):
        state = small_state(times=np.linspace(0.04, 0.96, 18),
                            hyper=REF_HYPER)
        state.lambda_q2 = np.zeros_like(state.lambda_q2)
        a, b = update_q_lambda(state)
        np.testing.assert_allclose([a, b], [20.5, 1.007])

    def test_no_data_prior_plus_window(self):
        state = small_state(times=())
        state.lambda_q2 = np.zeros_like(state.lambda_q2)
        a, b = update_q_lambda(state)
        np.testing.assert_allclose([a, b], [4.0, 3.0])

    def test_constant_latent_intensity_exact(self):
        state = small_state()
        state.lambda_q2 = np.full_like(state.lambda_q2, 7.0)
        a, _ = update_q_lambda(state)
        np.testing.assert_allclose(a, 4.0 + 3 + 7.0 * 1.0, rtol=1e-12)

    def test_caches_refresh(self):
        state = small_state()
        update_q_lambda(state)
        np.testing.assert_allclose(state.lam_mean, state.alpha / state.beta)
        np.testing.assert_allclose(
            state.log_lam_mean, digamma(state.alpha) - np.log(state.beta))


class TestUpdateQPg:
    def test_zero_moments(self):
        state = small_state(times=(0.5,))
        state.mu_ev = np.zeros(1)
        state.var_ev = np.zeros(1)
        c = update_q_pg(state)
        np.testing.assert_allclose(c, [0.0])
        np.testing.assert_allclose(state.obs_pg_means, [0.25])

    def test_tilt_definition(self):
        state = small_state(times=(0.5,))
        state.mu_ev = np.array([3.0])
        state.var_ev = np.array([4.0])
        np.testing.assert_allclose(update_q_pg(state), [np.sqrt(13.0)])

    def test_pg_mean_matches_mc(self):
        state = small_state(times=(0.3, 0.7))
        state.mu_ev = np.array([1.0, -2.0])
        state.var_ev = np.array([0.5, 1.5])
        update_q_pg(state)
        rng = np.random.default_rng(0)
        for c_val, want in zip(state.tilts, state.obs_pg_means):
            draws = pg_sample(np.full(20_000, c_val), rng)
            se = draws.std(ddof=1) / np.sqrt(draws.size)
            assert abs(draws.mean() - want) < 4 * se


class TestUpdateQLatent:
    def test_flat_phi(self):
        state = small_state()
        state.mu_grid = np.zeros_like(state.mu_grid)
        state.var_grid = np.zeros_like(state.var_grid)
        lam2 = update_q_latent(state)
        np.testing.assert_allclose(lam2, np.exp(state.log_lam_mean) / 2.0,
                                   rtol=1e-12)

    def test_saturated_phi_kills_latent_mass(self):
        state = small_state()
        state.mu_grid = np.full_like(state.mu_grid, 60.0)
        state.var_grid = np.zeros_like(state.var_grid)
        assert update_q_latent(state).max() < 1e-20

    def test_degenerate_phi_sigmoid_identity(self):
        # with var -> 0: Lambda = exp(<ln lam>) * sigmoid(-phi0)
        state = small_state()
        phi0 = np.linspace(-6, 6, state.grid.size)
        state.mu_grid = phi0
        state.var_grid = np.zeros_like(phi0)
        lam2 = update_q_latent(state)
        want = np.exp(state.log_lam_mean) * expit(-phi0)
        np.testing.assert_allclose(lam2, want, rtol=1e-10)

    def test_no_overflow_for_deeply_negative_phi(self):
        state = small_state()
        state.mu_grid = np.full_like(state.mu_grid, -200.0)
        state.var_grid = np.zeros_like(state.mu_grid)
        lam2 = update_q_latent(state)
        np.testing.assert_allclose(lam2, np.exp(state.log_lam_mean),
                                   rtol=1e-10)


class TestUpdateQPhi:
    def test_no_evidence_recovers_prior(self):
        state = small_state(times=())
        state.lambda_q2 = np.zeros_like(state.lambda_q2)
        sgp = update_q_phi(state)
        kern = AggregatedKernel.univariate(state.events, state.hyper)
        want = kern.matrix(sgp.inducing) + sgp.jitter * np.eye(
            sgp.inducing.size)
        np.testing.assert_allclose(sgp.mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(sgp.Sigma, want, rtol=1e-8)

    def test_single_event_scalar_oracle(self):
        # one inducing point sitting exactly on the single event
        state = small_state(times=(0.5,), inducing_count=1, grid_count=40)
        assert state.sgp.inducing[0] == 0.5
        state.lambda_q2 = np.zeros_like(state.lambda_q2)
        state.tilts = np.zeros(1)
        sgp = update_q_phi(state)
        kern = AggregatedKernel.univariate(state.events, state.hyper)
        k = kern.matrix(np.array([0.5]))[0, 0] + sgp.jitter
        w = 0.25
        sigma_want = 1.0 / (w + 1.0 / k)
        np.testing.assert_allclose(sgp.Sigma[0, 0], sigma_want, rtol=1e-9)
        np.testing.assert_allclose(sgp.mu[0], sigma_want * 0.5, rtol=1e-9)

    def test_matches_dense_update(self):
        # inducing points = all evaluation points reduces the sparse update
        # to the dense Gaussian update
        state = small_state(times=(0.15, 0.6, 0.85), grid_count=30)
        kern = state.sgp.kernel
        pts = np.concatenate([state.events.times, state.grid])
        chol, jit = chol_with_jitter(kern.matrix(pts))
        state.sgp = SparseGp(inducing=pts, mu=np.zeros(pts.size),
                             Sigma=chol @ chol.T, chol_kc=chol, kernel=kern,
                             jitter=jit)
        state.tilts = np.array([0.4, 1.1, 0.2])
        state.lambda_q2 = 3.0 * np.exp(-state.grid)
        state.grid_tilts = 0.5 + state.grid
        sgp = update_q_phi(state)
        # dense reference on the jittered kernel
        kj = kern.matrix(pts) + jit * np.eye(pts.size)
        a = np.concatenate([pg_mean(np.array([0.4, 1.1, 0.2])),
                            pg_mean(0.5 + state.grid) * state.lambda_q2])
        b = np.concatenate([np.full(3, 0.5), -0.5 * state.lambda_q2])
        qw = np.concatenate([np.ones(3), state.quad_w])
        sigma_dense = np.linalg.inv(np.linalg.inv(kj) + np.diag(qw * a))
        mu_dense = sigma_dense @ (qw * b)
        np.testing.assert_allclose(state.mu_ev, mu_dense[:3],
                                   rtol=1e-6, atol=1e-9)


class TestElbo:
    def test_single_factor_updates_never_decrease(self):
        state = small_state(times=(0.1, 0.35, 0.5, 0.9))
        updates = [update_q_phi, update_q_lambda, update_q_pg,
                   update_q_latent]
        prev = elbo(state)
        for _ in range(6):
            for up in updates:
                up(state)
                cur = elbo(state)
                assert cur >= prev - 1e-8 * abs(prev), up.__name__
                prev = cur

    def test_monotone_under_every_update_order(self):
        ev = (0.2, 0.55, 0.75)
        for perm in itertools.permutations(("phi", "lambda", "pg", "latent")):
            cfg = ViConfig(inducing_count=8, grid_count=60, max_rounds=6,
                           tol=1e-14, learn_hypers=False, update_order=perm)
            state = fit(EventSequence(np.asarray(ev), window=1.0),
                        SMALL_HYPER, cfg)
            trace = np.asarray(state.elbo_trace)
            diffs = np.diff(trace)
            assert np.all(diffs >= -1e-8 * np.abs(trace[:-1])), perm

    def test_empty_data_constant_phi_hand_computation(self):
        # tiny GP amplitude pins phi ~ 0; with prior-matched q(lambda) the
        # bound is -<lam> T + integral of the latent intensity
        hyper = ModelHyper(RbfParams(1e-12, 0.5), RbfParams(1e-12, 0.1),
                           DecayParam(10.0), GammaPrior(4.0, 2.0))
        state = small_state(times=(), hyper=hyper)
        state.alpha, state.beta = 4.0, 2.0
        update_q_latent(state)
        got = elbo(state)
        c = np.sqrt(state.var_grid)
        geo = np.exp(digamma(4.0) - np.log(2.0))
        want = -2.0 * 1.0 + geo * np.dot(state.quad_w,
                                         1.0 / (2.0 * np.cosh(c / 2.0)))
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_latent_bracket_collapses_at_optimum(self):
        # right after a latent update the integrand bracket equals Lambda
        state = small_state()
        for _ in range(3):
            update_q_phi(state)
            update_q_lambda(state)
            update_q_pg(state)
            update_q_latent(state)
        lam1 = state.lambda_q2
        c = state.grid_tilts
        bracket = (state.log_lam_mean - 0.5 * state.mu_grid
                   - (0.5 * c + np.log1p(np.exp(-c)))
                   - np.log(np.maximum(lam1, 1e-300)) + 1.0)
        np.testing.assert_allclose(bracket, 1.0, atol=1e-9)

    def test_bounded_by_importance_sampled_evidence(self):
        # ELBO must sit below the log marginal likelihood
        ev = EventSequence(np.array([0.25, 0.5, 0.7]), window=1.0)
        cfg = ViConfig(inducing_count=20, grid_count=200, max_rounds=60,
                       tol=1e-10, learn_hypers=False)
        state = fit(ev, SMALL_HYPER, cfg)
        bound = state.elbo_trace[-1]

        grid = np.linspace(0, 1, 80)
        qw = np.full(80, 1 / 79)
        qw[0] = qw[-1] = 0.5 / 79
        pts = np.concatenate([ev.times, grid])
        kern = AggregatedKernel.univariate(ev, SMALL_HYPER)
        chol, _ = chol_with_jitter(kern.matrix(pts))
        rng = np.random.default_rng(1)
        lls = []
        for _ in range(10):
            lam = rng.gamma(4.0, 1.0 / 2.0, size=100_000)
            z = rng.standard_normal((100_000, pts.size))
            phi = z @ chol.T
            ll = (np.sum(np.log(lam[:, None] * expit(phi[:, :3])), axis=1)
                  - lam * (expit(phi[:, 3:]) @ qw))
            lls.append(ll)
        ll = np.concatenate(lls)
        log_p = logsumexp(ll) - np.log(ll.size)
        w = np.exp(ll - ll.max())
        se = w.std() / (w.mean() * np.sqrt(ll.size))
        assert bound <= log_p + 3 * se + 0.02


class TestHyperStepVi:
    def test_frozen_config_keeps_hyper(self):
        ev = EventSequence(np.array([0.3, 0.6]), window=1.0)
        cfg = ViConfig(inducing_count=8, grid_count=50, max_rounds=5,
                       learn_hypers=False)
        state = fit(ev, SMALL_HYPER, cfg)
        assert state.hyper == SMALL_HYPER
        assert state.hyper_trajectory == []

    def test_gradient_matches_finite_differences(self):
        state = small_state(times=(0.2, 0.4, 0.65, 0.9), grid_count=25,
                            inducing_count=8)
        for _ in range(3):
            update_q_phi(state)
            update_q_lambda(state)
            update_q_pg(state)
            update_q_latent(state)
        grads = elbo_hypergrads(state)
        from gphawkes.vi import _rebuild_kernel
        for name, grad in grads.items():
            base = state.hyper.to_dict()[name]
            h = 1e-5 * base
            vals = []
            for sign in (+1, -1):
                probe = copy.deepcopy(state)
                probe.hyper = probe.hyper.with_kernel_params(
                    **{name: base + sign * h})
                _rebuild_kernel(probe)
                vals.append(elbo(probe))
            fd = (vals[0] - vals[1]) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-8)

    def test_learning_beats_frozen_at_poor_init(self):
        rng = np.random.default_rng(2)
        times = np.sort(rng.uniform(0, 1, 14))
        ev = EventSequence(times, window=1.0)
        poor = ModelHyper(RbfParams(0.2, 1.5), RbfParams(0.3, 0.4),
                          DecayParam(3.0), GammaPrior(4.0, 0.2))
        base = dict(inducing_count=20, grid_count=150, max_rounds=50,
                    tol=1e-12)
        learned = fit(ev, poor, ViConfig(learn_hypers=True, **base))
        frozen = fit(ev, poor, ViConfig(learn_hypers=False, **base))
        assert learned.elbo_trace[-1] >= frozen.elbo_trace[-1]

    def test_nonfinite_gradient_skips(self, caplog):
        state = small_state()
        with caplog.at_level("WARNING", logger="gphawkes.vi"):
            out = hyper_step_vi(state, AdamOptimizer(),
                                grads={"a_s": np.inf})
        assert out == SMALL_HYPER
        assert "non-finite" in caplog.text


class TestFit:
    def test_zero_rounds_returns_initialized_state(self):
        ev = EventSequence(np.array([0.5]), window=1.0)
        cfg = ViConfig(inducing_count=5, grid_count=20, max_rounds=0)
        state = fit(ev, SMALL_HYPER, cfg)
        assert state.rounds_run == 0
        assert state.elbo_trace == []
        np.testing.assert_allclose(state.alpha, 4.0 + 1)

    def test_reference_config_converges(self):
        rng = np.random.default_rng(3)
        times = np.sort(rng.uniform(0, 1, 18))
        ev = EventSequence(times, window=1.0)
        cfg = ViConfig(inducing_count=100, grid_count=1000, max_rounds=200,
                       tol=1e-6, learn_hypers=False)
        state = fit(ev, REF_HYPER, cfg)
        assert state.rounds_run < 200
        trace = np.asarray(state.elbo_trace)
        rel = abs(trace[-1] - trace[-2]) / abs(trace[-1])
        assert rel < 1e-6

    def test_deterministic(self):
        ev = EventSequence(np.array([0.2, 0.6, 0.9]), window=1.0)
        cfg = ViConfig(inducing_count=10, grid_count=60, max_rounds=10,
                       seed=7)
        a = fit(ev, SMALL_HYPER, cfg)
        b = fit(ev, SMALL_HYPER, cfg)
        np.testing.assert_array_equal(np.asarray(a.elbo_trace),
                                      np.asarray(b.elbo_trace))
        np.testing.assert_array_equal(a.sgp.mu, b.sgp.mu)

    def test_mean_field_fixed_point(self):
        ev = EventSequence(np.array([0.15, 0.4, 0.75]), window=1.0)
        cfg = ViConfig(inducing_count=10, grid_count=80, max_rounds=400,
                       tol=1e-14, learn_hypers=False)
        state = fit(ev, SMALL_HYPER, cfg)
        before = (state.alpha, state.tilts.copy(), state.lambda_q2.copy(),
                  state.sgp.mu.copy())
        update_q_phi(state)
        update_q_lambda(state)
        update_q_pg(state)
        update_q_latent(state)
        np.testing.assert_allclose(state.alpha, before[0], rtol=1e-8)
        np.testing.assert_allclose(state.tilts, before[1], rtol=1e-8)
        np.testing.assert_allclose(state.lambda_q2, before[2], rtol=1e-7)
        np.testing.assert_allclose(state.sgp.mu, before[3], atol=1e-8)

    def test_grid_refinement_stability(self):
        ev = EventSequence(np.array([0.2, 0.5, 0.8]), window=1.0)
        base = dict(inducing_count=15, max_rounds=80, tol=1e-12,
                    learn_hypers=False)
        e1 = fit(ev, SMALL_HYPER, ViConfig(grid_count=300, **base))
        e2 = fit(ev, SMALL_HYPER, ViConfig(grid_count=600, **base))
        rel = abs(e1.elbo_trace[-1] - e2.elbo_trace[-1]) / abs(
            e2.elbo_trace[-1])
        assert rel < 1e-3

    def test_posterior_predictive_overlaps_truth(self):
        # simulate data, fit with a diffuse rate prior, then compare
        # simulated-count distributions against fresh truth simulations
        from gphawkes.simulate import GroundTruth
        grid2 = np.array([0.0, 1.0])
        hyper = ModelHyper(RbfParams(1.0, 0.5), RbfParams(0.8, 0.1),
                           DecayParam(10.0), GammaPrior(2.5, 0.05))
        gt = GroundTruth(s_grid=grid2, s_values=np.array([0.5, 0.5]),
                         g_grid=grid2, g_values=np.zeros(2), lam=40.0,
                         hyper=hyper, window=1.0)
        rng = np.random.default_rng(0)
        ev = thinning_simulate(gt, rng)
        cfg = ViConfig(inducing_count=20, grid_count=200, max_rounds=40,
                       tol=1e-8, learn_hypers=False)
        state = fit(ev, hyper, cfg)
        fitted_counts = [len(posterior_predictive_simulate(
            state, rng, function_draw=True)) for _ in range(100)]
        truth_counts = [len(thinning_simulate(gt, rng)) for _ in range(100)]
        p = mannwhitneyu(fitted_counts, truth_counts).pvalue
        assert p > 0.01

    def test_predictive_interface(self):
        state = small_state()
        mu, var = state.predict_phi(np.array([0.3, 0.7]))
        assert mu.shape == (2,) and np.all(var >= 0)
        draw = state.draw_phi(np.linspace(0.1, 0.9, 5),
                              np.random.default_rng(5))
        assert draw.shape == (5,)
