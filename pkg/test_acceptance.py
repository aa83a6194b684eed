"""
Acceptance-scale runs on 128^2 modes. Enabled with --runslow.
"""
import dataclasses
import math
import os

import numpy as np
import pytest

from stochnudge.calibration import _check_identities, verify_properties
from stochnudge.config import Config, build_setup
from stochnudge.data_structures import ExperimentConfig, NoiseModel, ObservationVector
from stochnudge.dynamics import ObservationPipeline, grashof
from stochnudge.harness import (
    FINAL_FRACTION, effective_traces, evaluate_bound, fit_to_grid, minimize_minlog, noise_for_target,
    pathwise_rate, prepare_reference, run_ensemble, select_parameters,
)
from stochnudge.noise import ou_second_moments, sample_increments, stationary_ou_bound
from stochnudge.observables import InterpolantBasis, oversample_average
from stochnudge.spectral import WaveGrid, norm

ACCEPTANCE_CONFIG = os.path.join(os.path.dirname(__file__), 'configs', 'acceptance.ini')


@pytest.fixture(scope='module')
def acceptance():
    """Calibrated setup and spun-up reference shared by the ensemble checks."""
    config = Config.load(ACCEPTANCE_CONFIG)
    setup = build_setup(config)
    U0, apriori = prepare_reference(setup.solver, config.get_int('harness', 'seed'))
    return setup, U0, apriori


def nudging(setup, U0, mu, K, q=1, basis='step', kind='volume', sigma2=None):
    """Assimilation config whose noise puts mu trace[Q] at 1e-4 of the reference energy."""
    acfg = dataclasses.replace(
        setup.assimilation, mu=mu, K=K, oversample=q, basis_kind=basis, observation_kind=kind,
        noise=NoiseModel(0.0, 2 * (K * q) ** 2, setup.assimilation.noise.seed),
    )
    if sigma2 is None:
        sigma2 = noise_for_target(ObservationPipeline(U0.grid, acfg), mu, norm(U0, 'H') ** 2)
    return dataclasses.replace(acfg, noise=NoiseModel(sigma2, acfg.noise.D, acfg.noise.seed))


def experiment(setup, acfg, bound, members, t_run=None, epsilon=1.0):
    t_run = t_run or Config.RUN_TIMES / acfg.mu
    solver = setup.solver
    if acfg.mu * solver.dt > Config.AUTO_NUDGING_STEP:
        solver = dataclasses.replace(solver, dt=Config.AUTO_NUDGING_STEP / acfg.mu)
    return ExperimentConfig(
        solver=solver, assimilation=acfg, members=members, t_run=t_run,
        t_avg=Config.AVERAGE_TIMES / acfg.mu, bound_mode=bound, epsilon=epsilon, record_every=10,
    )


def selection(setup, mode, epsilon=1.0):
    solver = setup.solver
    choice = select_parameters(mode, grashof(solver), solver.nu, solver.grid.L, setup.constants, epsilon)
    try:
        return fit_to_grid(choice, solver.grid.M)
    except ValueError as e:
        pytest.skip(str(e))


def final_floor(series):
    tail = series.times >= series.times[-1] * (1.0 - FINAL_FRACTION)
    return float(series.mean('H')[tail].max())


@pytest.mark.slow
class TestProperties:
    """Identity, interpolation and trace suites on the acceptance grid."""

    def test_identities(self):
        assert _check_identities(WaveGrid(2.0 * math.pi, 128), trials=100, seed=0)['passed']

    def test_suites(self):
        report = verify_properties(WaveGrid(2.0 * math.pi, 128), Ks=(4, 8, 16), approximation_trials=500)
        assert all(entry['passed'] for entry in report['partition_of_unity'])
        assert report['gradient_uniformity']['c_uniform'], report['gradient_uniformity']
        assert all(entry['passed'] for entry in report['nodal_approximation'])
        assert all(entry['passed'] for entry in report['approximation'])
        assert report['traces']['passed']
        assert report['passed']

    def test_oversampled_noise_variance(self):
        K = 4
        for q in (2, 4):
            model = NoiseModel(1.0, 2 * (K * q) ** 2, seed=q)
            fine, coarse = [], []
            for step in range(100_000 // (2 * K * K) + 1):
                draws = sample_increments(1.0, model, step)
                fine.append(draws)
                coarse.append(oversample_average(ObservationVector(draws, K * q), q).values)
            ratio = np.concatenate(coarse).var() / np.concatenate(fine).var()
            assert ratio == pytest.approx(1.0 / q ** 2, rel=0.1)

    def test_ou_moments(self):
        grid = WaveGrid(2.0 * math.pi, 32)
        basis = InterpolantBasis('step', 4, grid)
        model = NoiseModel(1.0, basis.D, seed=11)
        nu, mu = 1.0, 1.0
        measured = ou_second_moments(basis, model, nu, mu, dt=0.05, burn_in=5.0 / (nu * grid.lambda1),
                                     duration=2000.0)
        bound = stationary_ou_bound(basis, model.sigma2, nu, mu)
        carrying = bound >= 0.01 * bound.sum()
        assert carrying.any()
        np.testing.assert_allclose(measured[carrying], bound[carrying], rtol=0.1)


class TestMinLog:

    def test_lower_bound_on_random_eta(self):
        rng = np.random.default_rng(2024)
        for eta in 10.0 * (1.0 - rng.random(10_000)):
            value = minimize_minlog(eta)[1]
            assert value >= -eta * math.log(eta) - 1e-9
            if eta >= 1.0:
                assert abs(value + eta * math.log(eta)) <= 1e-6


@pytest.mark.slow
class TestAcceptanceRuns:
    """Bound checks on the calibrated 128^2 configuration."""

    def test_apriori_bounds(self, acceptance):
        setup, U0, apriori = acceptance
        assert apriori.window == pytest.approx(10.0 / (setup.solver.nu * U0.grid.lambda1))
        assert apriori.passed

    def test_noise_free_synchronization(self, acceptance):
        setup, U0, _ = acceptance
        choice = selection(setup, 'cor1')
        acfg = nudging(setup, U0, choice.mu, choice.K, sigma2=0.0)
        series = run_ensemble(experiment(setup, acfg, 'cor1', members=1, t_run=50.0), U0)
        assert pathwise_rate(series, floor=1e-20) <= -choice.mu / 4.0
        reached = np.nonzero(series.mean('H') <= 1e-20)[0]
        assert reached.size, series.mean('H')[-1]
        assert series.times[reached[0]] <= 50.0

    def test_main1_and_cor1(self, acceptance):
        setup, U0, _ = acceptance
        choice = selection(setup, 'cor1')
        acfg = nudging(setup, U0, choice.mu, choice.K)
        cfg = experiment(setup, acfg, 'main1', members=64)
        pipeline = ObservationPipeline(U0.grid, acfg)
        series = run_ensemble(cfg, U0, pipeline=pipeline)
        stats = effective_traces(pipeline, acfg.noise.sigma2)
        for bound in ('main1', 'cor1'):
            report = evaluate_bound(series, dataclasses.replace(cfg, bound_mode=bound), stats, setup.constants)
            assert report.passed, report.to_dict()

    def test_oversampling_lowers_the_floor(self, acceptance):
        setup, U0, _ = acceptance
        base = selection(setup, 'cor1')
        sigma2 = nudging(setup, U0, base.mu, base.K).noise.sigma2
        floors = []
        for epsilon in (1.0, 0.25, 0.0625):
            choice = selection(setup, 'cor2', epsilon)
            acfg = nudging(setup, U0, choice.mu, choice.K, q=choice.q, sigma2=sigma2)
            cfg = experiment(setup, acfg, 'cor2', members=16, epsilon=epsilon)
            pipeline = ObservationPipeline(U0.grid, acfg)
            series = run_ensemble(cfg, U0, pipeline=pipeline)
            report = evaluate_bound(series, cfg, effective_traces(pipeline, sigma2), setup.constants)
            assert report.passed, report.to_dict()
            floors.append(final_floor(series))
        assert floors[0] > floors[1] > floors[2]

    def test_mollified_nodal_pipeline(self, acceptance):
        setup, U0, _ = acceptance
        choice = selection(setup, 'cor1main2')
        acfg = nudging(setup, U0, choice.mu, choice.K, basis='mollified', kind='nodal')
        cfg = experiment(setup, acfg, 'cor1main2', members=32)
        pipeline = ObservationPipeline(U0.grid, acfg)
        series = run_ensemble(cfg, U0, pipeline=pipeline)
        report = evaluate_bound(series, cfg, effective_traces(pipeline, acfg.noise.sigma2), setup.constants)
        assert report.norm == 'V'
        assert report.limsup_passed, report.to_dict()
