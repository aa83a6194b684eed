import dataclasses
import math

import numpy as np
import pytest

from stochnudge.artifacts import read_observation_log, write_observation_log
from stochnudge.data_structures import (
    AssimilationConfig, ConstantsRecord, ErrorSeries, ExperimentConfig, NoiseModel, SolverConfig,
    WienerStats,
)
from stochnudge.dynamics import ObservationPipeline, make_forcing
from stochnudge.harness import (
    LoggedObservations, SyntheticObservations, bound_thresholds, effective_traces, evaluate_bound,
    fit_to_grid, minimize_minlog, minlog_bound, noise_for_target, record_reference, run_ensemble,
    run_free_control, select_parameters,
)
from stochnudge.noise import covariance_traces
from stochnudge.observables import InterpolantBasis
from stochnudge.spectral import random_field

CONSTANTS = ConstantsRecord(C_L=1.0, C_B=1.0, c=1.0)


def experiment_for(grid, members=2, n_steps=20, mu=2.0, K=4, sigma2=1e-4, cadence=1, q=1,
                   bound='explore', nu=0.1, G=2.0, dt=0.01, workers=1, t_avg=None):
    solver = SolverConfig(nu=nu, forcing=make_forcing(grid, nu, G), dt=dt, t_spinup=0.1)
    acfg = AssimilationConfig(mu=mu, K=K, noise=NoiseModel(sigma2, 2 * (K * q) ** 2, seed=7),
                              cadence=cadence, oversample=q)
    t_run = n_steps * dt
    return ExperimentConfig(solver=solver, assimilation=acfg, members=members, t_run=t_run,
                            t_avg=t_avg or 0.2 * t_run, bound_mode=bound, workers=workers)


class TestMinLog:
    """min over r >= 1 of r - eta (1 + log r)."""

    @pytest.mark.parametrize('eta', [0.01, 0.3, 0.99, 1.0, 1.5, 4.0, 9.7])
    def test_lower_bound(self, eta):
        r, value = minimize_minlog(eta)
        assert r >= 1.0
        assert value >= minlog_bound(eta) - 1e-9
        if eta >= 1:
            assert value == pytest.approx(minlog_bound(eta), abs=1e-6)
            assert r == pytest.approx(eta, rel=1e-4)

    def test_random_eta(self):
        rng = np.random.default_rng(0)
        for eta in rng.uniform(1e-6, 10.0, 300):
            assert minimize_minlog(eta)[1] >= -eta * math.log(eta) - 1e-9

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError, match='eta must be positive'):
            minlog_bound(0.0)
        with pytest.raises(ValueError, match='eta must be positive'):
            minimize_minlog(-1.0)


class TestParameterSelection:
    """Nudging rate and square size per bound mode."""

    def test_cor1_worked_example(self):
        # mu = 4 C_L^2 nu lambda_1 G^2 = 64 with nu = 1, L = 2 pi
        choice = select_parameters('cor1', 4.0, 1.0, 2.0 * math.pi, CONSTANTS)
        assert choice.mu == pytest.approx(64.0)
        assert choice.h_max == pytest.approx(math.sqrt(3.0 / 64.0))
        assert choice.K == 30
        assert choice.h <= choice.h_max

    def test_fit_to_grid(self):
        choice = fit_to_grid(select_parameters('cor1', 4.0, 1.0, 2.0 * math.pi, CONSTANTS), 128)
        assert choice.K == 32
        assert choice.h == pytest.approx(2.0 * math.pi / 32)
        assert any('raised' in note for note in choice.notes)

    def test_fit_to_grid_needs_resolution(self):
        with pytest.raises(ValueError, match='increase M'):
            fit_to_grid(select_parameters('cor1', 4.0, 1.0, 2.0 * math.pi, CONSTANTS), 16)

    @pytest.mark.parametrize('epsilon, q', [(1.0, 1), (0.25, 2), (0.3, 2), (0.0625, 4), (0.05, 5)])
    def test_oversampling_factor(self, epsilon, q):
        choice = select_parameters('cor2', 4.0, 1.0, 2.0 * math.pi, CONSTANTS, epsilon)
        assert choice.q == q
        assert choice.K2 == choice.K
        assert choice.h == pytest.approx(2.0 * math.pi / (choice.K * q))

    def test_epsilon_range(self):
        with pytest.raises(ValueError, match='epsilon must lie in'):
            select_parameters('cor2', 4.0, 1.0, 2.0 * math.pi, CONSTANTS, 1.5)

    def test_degenerate_case(self):
        choice = select_parameters('cor1', 0.01, 1.0, 2.0 * math.pi, CONSTANTS)
        assert choice.degenerate
        assert choice.K == 1

    def test_explore_has_no_rule(self):
        with pytest.raises(ValueError, match="No parameter rule for mode 'explore'"):
            select_parameters('explore', 4.0, 1.0, 2.0 * math.pi, CONSTANTS)

    def test_nodal_modes_use_c3(self):
        constants = ConstantsRecord(C_L=1.0, C_B=1.0, c=1.0, c2=0.25)
        choice = select_parameters('nodcor1', 2.0, 1.0, 2.0 * math.pi, constants)
        assert choice.mu == pytest.approx(constants.c5 * 4.0 * (1.0 + math.log(3.0)) ** 2)
        assert choice.h_max == pytest.approx(math.sqrt(1.0 / (2.0 * 0.5 * choice.mu)))


class TestObservationSources:
    """Synthetic and replayed observations."""

    def test_zero_order_hold(self, grid16, rng):
        cfg = experiment_for(grid16, cadence=2)
        pipeline = ObservationPipeline(grid16, cfg.assimilation)
        source = SyntheticObservations(pipeline, cfg.solver.dt, 2)
        U = random_field(grid16, rng, max_mode=4)
        source.prepare(0, U)
        held = source(0, 1).values
        source.prepare(1, random_field(grid16, rng, max_mode=4))
        np.testing.assert_array_equal(source(1, 1).values, held)

    def test_log_cadence_mismatch(self):
        times = np.array([0.0, 0.02, 0.05])
        with pytest.raises(ValueError, match='cadence incompatible'):
            LoggedObservations(times, np.zeros((3, 32)), 4, 'volume', dt=0.01, cadence=2)

    def test_log_width(self):
        with pytest.raises(ValueError, match='observations need 32'):
            LoggedObservations(np.array([0.0, 0.01]), np.zeros((2, 8)), 4, 'volume', dt=0.01)

    def test_log_too_short(self):
        source = LoggedObservations(np.array([0.0]), np.zeros((1, 32)), 4, 'volume', dt=0.01)
        with pytest.raises(ValueError, match='Observation log ends'):
            source(1, 0)


class TestEnsemble:
    """Lockstep Monte Carlo runs."""

    def test_independent_of_worker_count(self, grid16, rng):
        U0 = random_field(grid16, rng, max_mode=4) * 0.2
        serial = run_ensemble(experiment_for(grid16, members=3), reference=U0)
        threaded = run_ensemble(experiment_for(grid16, members=3, workers=3), reference=U0)
        np.testing.assert_array_equal(serial.h2, threaded.h2)
        np.testing.assert_array_equal(serial.da2, threaded.da2)

    def test_members_see_different_noise(self, grid16, rng):
        U0 = random_field(grid16, rng, max_mode=4) * 0.2
        series = run_ensemble(experiment_for(grid16, members=2), reference=U0)
        assert series.members == 2
        assert series.h2.shape == (2, 21)
        assert not np.array_equal(series.h2[0], series.h2[1])

    def test_replay_matches_synthetic(self, grid16, rng, tmp_path):
        U0 = random_field(grid16, rng, max_mode=4) * 0.2
        cfg = experiment_for(grid16, members=1, cadence=2)
        pipeline = ObservationPipeline(grid16, cfg.assimilation)
        _, times, rows = record_reference(U0, cfg, pipeline)
        path = write_observation_log(str(tmp_path / 'obs.csv'), times, rows)
        times, values = read_observation_log(path)
        logged = LoggedObservations(times, values, 4, 'volume', cfg.solver.dt, 2)

        synthetic = run_ensemble(cfg, reference=U0, pipeline=pipeline)
        replayed = run_ensemble(cfg, reference=U0, observations=logged, pipeline=pipeline)
        np.testing.assert_allclose(replayed.h2, synthetic.h2, rtol=1e-12, atol=0.0)

    def test_resume_continues_run(self, grid16, rng, tmp_path):
        U0 = random_field(grid16, rng, max_mode=4) * 0.2
        path = str(tmp_path / 'checkpoint.pkl')
        straight = run_ensemble(experiment_for(grid16, n_steps=20), reference=U0)
        run_ensemble(experiment_for(grid16, n_steps=10), reference=U0, checkpoint_path=path, checkpoint_every=10)
        resumed = run_ensemble(experiment_for(grid16, n_steps=20), reference=U0, checkpoint_path=path,
                               checkpoint_every=10, resume=True)
        np.testing.assert_array_equal(resumed.h2, straight.h2)

    def test_checkpoint_every_respects_cadence(self, grid16, rng):
        U0 = random_field(grid16, rng, max_mode=4)
        with pytest.raises(ValueError, match='multiple of the cadence'):
            run_ensemble(experiment_for(grid16, cadence=2), reference=U0, checkpoint_path='x.pkl', checkpoint_every=3)

    def test_zero_noise_synchronizes(self, grid16, rng):
        U0 = random_field(grid16, rng, max_mode=4) * 0.2
        cfg = experiment_for(grid16, members=1, n_steps=300, mu=10.0, K=8, sigma2=0.0)
        series = run_ensemble(cfg, reference=U0)
        control = run_free_control(U0, cfg)
        assert series.mean('H')[-1] < 1e-2 * series.mean('H')[0]
        assert series.mean('H')[-1] < control.mean('H')[-1]

    def test_noise_raises_the_error_floor(self, grid16, rng):
        U0 = random_field(grid16, rng, max_mode=4) * 0.2
        clean = run_ensemble(experiment_for(grid16, members=2, n_steps=300, mu=10.0, K=8, sigma2=0.0), reference=U0)
        noisy = run_ensemble(experiment_for(grid16, members=2, n_steps=300, mu=10.0, K=8, sigma2=1e-4), reference=U0)
        tail = clean.times >= 0.75 * clean.times[-1]
        assert noisy.mean('H')[tail].mean() > clean.mean('H')[tail].mean()


class TestNoiseCalibration:
    """Noise intensity targets and effective traces."""

    def test_noise_for_target(self, grid16):
        cfg = experiment_for(grid16)
        pipeline = ObservationPipeline(grid16, cfg.assimilation)
        sigma2 = noise_for_target(pipeline, 3.0, 2.0, fraction=1e-3)
        assert 3.0 * covariance_traces(pipeline.basis, sigma2).trace_q == pytest.approx(2e-3)

    def test_effective_traces_average_out(self, grid16):
        cfg = experiment_for(grid16, K=2, q=2)
        pipeline = ObservationPipeline(grid16, cfg.assimilation)
        coarse = effective_traces(pipeline, 1.0)
        assert coarse.trace_q == pytest.approx(covariance_traces(pipeline.basis, 1.0).trace_q / 4.0)


class TestBoundEvaluation:
    """Comparison of an ensemble with a bound."""

    def series(self, level, members=4, samples=41, t_end=1.0, spread=0.0):
        times = np.linspace(0.0, t_end, samples)
        offsets = spread * np.arange(members)[:, None]
        values = np.full((members, samples), level) + offsets
        return ErrorSeries(times, values, values, values, nu=0.1)

    def test_main1_threshold(self, grid16):
        cfg = experiment_for(grid16, bound='main1', n_steps=100, t_avg=0.2)
        stats = WienerStats(2.0, None, 'step', 1e-4)
        report = evaluate_bound(self.series(0.5), cfg, stats, CONSTANTS)
        assert report.threshold == pytest.approx(cfg.assimilation.mu * 2.0)
        assert report.norm == 'H'
        assert report.passed

    def test_cor2_threshold_is_linear_in_epsilon(self, grid16):
        stats = WienerStats(1.0, None, 'step', 1e-4)
        limsups = []
        for epsilon in (1.0, 0.5, 0.125):
            cfg = dataclasses.replace(experiment_for(grid16, bound='cor2', n_steps=100, t_avg=0.2), epsilon=epsilon)
            limsups.append(bound_thresholds('cor2', cfg, stats, CONSTANTS, 2.0)[0])
        assert limsups[1] == pytest.approx(0.5 * limsups[0])
        assert limsups[2] == pytest.approx(0.125 * limsups[0])

    def test_cor1_threshold_ignores_square_size(self, grid16):
        thresholds = []
        for K in (2, 4, 8):
            cfg = experiment_for(grid16, bound='cor1', K=K, n_steps=100, t_avg=0.2)
            stats = covariance_traces(InterpolantBasis('step', K, grid16), cfg.assimilation.noise.sigma2)
            thresholds.append(bound_thresholds('cor1', cfg, stats, CONSTANTS, 2.0)[:2])
        assert thresholds[0] == pytest.approx(thresholds[1])
        assert thresholds[0] == pytest.approx(thresholds[2])

    def test_failing_bound(self, grid16):
        cfg = experiment_for(grid16, bound='main1', n_steps=100, t_avg=0.2)
        stats = WienerStats(1e-3, None, 'step', 1e-4)
        report = evaluate_bound(self.series(1.0), cfg, stats, CONSTANTS)
        assert not report.limsup_passed
        assert not report.passed

    def test_standard_error_counts(self, grid16):
        cfg = experiment_for(grid16, bound='main1', n_steps=100, t_avg=0.2)
        stats = WienerStats(1.0, None, 'step', 1e-4)
        # mean 1.5 passes alone but not with two standard errors added
        report = evaluate_bound(self.series(0.0, spread=1.0), cfg, stats, CONSTANTS)
        assert report.observed == pytest.approx(1.5)
        assert report.observed < report.threshold < report.observed_upper
        assert not report.passed

    def test_explore_reports_without_asserting(self, grid16):
        cfg = experiment_for(grid16, bound='explore', n_steps=100, t_avg=0.2)
        stats = WienerStats(1e-6, None, 'step', 1e-4)
        report = evaluate_bound(self.series(5.0), cfg, stats, CONSTANTS)
        assert not report.asserted
        assert report.passed
        assert any('main1' in note for note in report.notes)

    def test_zero_noise_uses_tolerance(self, grid16):
        cfg = experiment_for(grid16, bound='main1', n_steps=100, t_avg=0.2, sigma2=0.0)
        stats = WienerStats(0.0, None, 'step', 0.0)
        report = evaluate_bound(self.series(1e-25), cfg, stats, CONSTANTS)
        assert report.threshold == cfg.zero_noise_tolerance
        assert report.passed

    def test_window_must_fit(self, grid16):
        cfg = experiment_for(grid16, bound='main1', n_steps=100, t_avg=0.5)
        stats = WienerStats(1.0, None, 'step', 1e-4)
        with pytest.raises(ValueError, match='shorter than the averaging window'):
            evaluate_bound(self.series(0.1), cfg, stats, CONSTANTS)

    def test_main2_overflow_is_vacuous(self, grid16):
        cfg = experiment_for(grid16, bound='main2', mu=1e-4, G=10.0)
        stats = WienerStats(1.0, 1.0, 'mollified', 1e-4)
        limsup, average, notes = bound_thresholds('main2', cfg, stats, CONSTANTS, 10.0)
        assert math.isinf(limsup) and math.isinf(average)
        assert 'vacuous' in notes[0]

    def test_h2_modes_need_mollified_stats(self, grid16):
        cfg = experiment_for(grid16, bound='cor1main2')
        with pytest.raises(ValueError, match='infinite for the step basis'):
            bound_thresholds('cor1main2', cfg, WienerStats(1.0, None, 'step', 1e-4), CONSTANTS, 2.0)
