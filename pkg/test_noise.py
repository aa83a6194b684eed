import math

import numpy as np
import pytest

from stochnudge.data_structures import NoiseModel, WienerStats
from stochnudge.noise import (
    STREAM_OBSERVATION, STREAM_PERTURBATION, covariance_traces, lift_increment, mode_spectrum,
    ou_second_moments, ou_step, require_ahalf_trace, sample_increments, sample_perturbation, stationary_ou_bound,
    stream_generator,
)
from stochnudge.observables import InterpolantBasis
from stochnudge.spectral import SpectralField, eigenmode, norm, random_field


class TestStreams:
    """Counter-based generators keyed by (seed, member, stream)."""

    def test_same_coordinates_same_draws(self):
        first = stream_generator(5, 2, STREAM_OBSERVATION, step=17).standard_normal(10)
        second = stream_generator(5, 2, STREAM_OBSERVATION, step=17).standard_normal(10)
        np.testing.assert_array_equal(first, second)

    def test_coordinates_are_independent_streams(self):
        base = stream_generator(5, 2, STREAM_OBSERVATION, step=17).standard_normal(10)
        for other in (stream_generator(5, 3, STREAM_OBSERVATION, step=17),
                      stream_generator(5, 2, STREAM_PERTURBATION, step=17),
                      stream_generator(5, 2, STREAM_OBSERVATION, step=18),
                      stream_generator(6, 2, STREAM_OBSERVATION, step=17)):
            assert not np.array_equal(base, other.standard_normal(10))

    def test_draw_order_does_not_matter(self):
        model = NoiseModel(2.0, 8, seed=1)
        late_first = [sample_increments(0.1, model, 9, member=1), sample_increments(0.1, model, 3, member=0)]
        early_first = [sample_increments(0.1, model, 3, member=0), sample_increments(0.1, model, 9, member=1)]
        np.testing.assert_array_equal(late_first[0], early_first[1])
        np.testing.assert_array_equal(late_first[1], early_first[0])


class TestIncrements:
    """Brownian increments of the measurement error."""

    def test_variance(self):
        model = NoiseModel(3.0, 32, seed=0)
        dt = 0.02
        draws = np.concatenate([sample_increments(dt, model, step) for step in range(2000)])
        assert draws.var() == pytest.approx(0.5 * dt * model.sigma2, rel=0.03)
        assert abs(draws.mean()) < 4.0 * math.sqrt(0.5 * dt * model.sigma2 / draws.size)

    def test_zero_noise(self):
        np.testing.assert_array_equal(sample_increments(0.1, NoiseModel(0.0, 8), 4), np.zeros(8))

    def test_invalid_arguments(self):
        with pytest.raises(ValueError, match='non-negative'):
            NoiseModel(-1.0, 8)
        with pytest.raises(ValueError, match='positive'):
            sample_increments(0.0, NoiseModel(1.0, 8), 0)

    def test_uncorrelated_across_channels_and_steps(self):
        model = NoiseModel(1.0, 16, seed=3)
        draws = np.stack([sample_increments(0.1, model, step) for step in range(4000)])
        channels = np.corrcoef(draws.T)
        assert np.abs(channels[~np.eye(16, dtype=bool)]).max() < 0.1
        lagged = np.corrcoef(draws[:-1].ravel(), draws[1:].ravel())[0, 1]
        assert abs(lagged) < 0.03

    def test_lift_is_linear_in_one_channel(self, grid16):
        basis = InterpolantBasis('mollified', 4, grid16)
        unit = np.zeros(basis.D)
        unit[5] = 1.0
        lifted = lift_increment(-0.7 * unit, basis)
        np.testing.assert_allclose(lifted.coeffs, -0.7 * lift_increment(unit, basis).coeffs, atol=1e-14)
        np.testing.assert_allclose(lift_increment(unit, basis).coeffs, basis.gamma(6).coeffs)

    def test_lift_dimension(self, grid16):
        basis = InterpolantBasis('step', 4, grid16)
        with pytest.raises(ValueError, match='expects D=32'):
            lift_increment(np.zeros(8), basis)


class TestTraces:
    """trace[Q] and trace[A^1/2 Q A^1/2] of the lifted noise."""

    def test_step_trace_closed_form(self, grid32):
        L = grid32.L
        for K in (4, 8):
            h = L / K
            stats = covariance_traces(InterpolantBasis('step', K, grid32), 2.0)
            assert stats.trace_q == pytest.approx(0.5 * 2.0 * (L ** 2 - h ** 2), rel=1e-9)
            assert stats.trace_q <= 2.0 * (L ** 2 - h ** 2) + 1e-9
            assert stats.trace_ahalf_q is None

    def test_galerkin_traces_are_smaller(self, grid32):
        stats = covariance_traces(InterpolantBasis('mollified', 4, grid32), 1.0)
        assert 0.0 < stats.trace_q_galerkin <= stats.trace_q
        assert 0.0 < stats.trace_ahalf_q_galerkin <= stats.trace_ahalf_q

    def test_mollified_trace_bound(self, grid32):
        stats = covariance_traces(InterpolantBasis('mollified', 8, grid32), 1.5)
        assert stats.trace_q <= 36.0 / 25.0 * 1.5 * grid32.L ** 2

    def test_traces_scale_with_sigma2(self, grid32):
        basis = InterpolantBasis('mollified', 4, grid32)
        one, three = covariance_traces(basis, 1.0), covariance_traces(basis, 3.0)
        assert three.trace_q == pytest.approx(3.0 * one.trace_q)
        assert three.trace_ahalf_q == pytest.approx(3.0 * one.trace_ahalf_q)

    def test_step_basis_has_no_ahalf_trace(self, grid32):
        stats = covariance_traces(InterpolantBasis('step', 4, grid32), 1.0)
        with pytest.raises(ValueError, match='infinite for the step basis'):
            require_ahalf_trace(stats)

    def test_require_returns_value(self):
        assert require_ahalf_trace(WienerStats(1.0, 2.5, 'mollified', 1.0)) == 2.5

    def test_spectrum_matches_galerkin_trace(self, grid32):
        basis = InterpolantBasis('step', 4, grid32)
        stats = covariance_traces(basis, 2.0)
        assert grid32.L ** 2 * mode_spectrum(basis, 2.0).sum() == pytest.approx(stats.trace_q_galerkin)

    def test_lifted_variance_matches_spectrum(self, grid16):
        basis = InterpolantBasis('step', 4, grid16)
        model = NoiseModel(1.0, basis.D, seed=2)
        dt = 0.5
        energy = np.mean([
            norm(lift_increment(sample_increments(dt, model, step), basis), 'H') ** 2 for step in range(3000)
        ])
        expected = dt * grid16.L ** 2 * mode_spectrum(basis, model.sigma2).sum()
        assert energy == pytest.approx(expected, rel=0.05)


class TestOrnsteinUhlenbeck:
    """Exact modewise transition of the auxiliary process."""

    def test_decay_without_forcing(self, grid16):
        z = eigenmode(grid16, 2, 1)
        nu, dt = 0.3, 0.1
        stepped = ou_step(z, dt, nu, 1.0, SpectralField.zeros(grid16))
        np.testing.assert_allclose(stepped.coeffs, math.exp(-nu * 5.0 * dt) * z.coeffs, atol=1e-15)

    def test_bound_scales(self, grid16):
        basis = InterpolantBasis('step', 4, grid16)
        low = stationary_ou_bound(basis, 1.0, 0.1, 1.0)
        high = stationary_ou_bound(basis, 1.0, 0.1, 2.0)
        np.testing.assert_allclose(high, 4.0 * low)
        assert low[0, 0] == 0.0

    def test_stationary_enstrophy_bound(self, grid16):
        basis = InterpolantBasis('mollified', 4, grid16)
        model = NoiseModel(1.0, basis.D, seed=4)
        nu, mu = 1.0, 1.0
        stats = covariance_traces(basis, model.sigma2)
        ceiling = mu ** 2 / (2.0 * nu) * stats.trace_ahalf_q_galerkin
        predicted = grid16.L ** 2 * np.sum(grid16.k2 * stationary_ou_bound(basis, model.sigma2, nu, mu))
        assert predicted == pytest.approx(mu ** 2 / (2.0 * nu) * stats.trace_q_galerkin)
        assert predicted <= ceiling
        moments = ou_second_moments(basis, model, nu, mu, dt=0.05, burn_in=5.0, duration=200.0)
        measured = grid16.L ** 2 * np.sum(grid16.k2 * moments)
        assert measured == pytest.approx(predicted, rel=0.15)
        assert measured <= ceiling

    def test_step_must_be_positive(self, grid16):
        zero = SpectralField.zeros(grid16)
        with pytest.raises(ValueError, match='positive'):
            ou_step(zero, 0.0, 1.0, 1.0, zero)


class TestPerturbation:
    """Seeded initial perturbations of ensemble members."""

    def test_relative_size(self, grid16, rng):
        reference = random_field(grid16, rng, max_mode=5)
        pert = sample_perturbation(reference, 0.5, seed=3, member=1)
        assert norm(pert, 'H') == pytest.approx(0.5 * norm(reference, 'H'))
        assert pert.divergence_residual() < 1e-12

    def test_members_differ(self, grid16, rng):
        reference = random_field(grid16, rng, max_mode=5)
        first = sample_perturbation(reference, 1.0, seed=3, member=0)
        second = sample_perturbation(reference, 1.0, seed=3, member=1)
        assert not np.allclose(first.coeffs, second.coeffs)

    def test_zero_reference(self, grid16):
        pert = sample_perturbation(SpectralField.zeros(grid16), 1.0, seed=0, member=0)
        assert norm(pert, 'H') == 0.0
