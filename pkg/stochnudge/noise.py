"""
Seeded measurement noise, its lift to a Q-Wiener process and the auxiliary
Ornstein-Uhlenbeck process.

Every draw comes from a Philox generator whose key is derived from
(seed, member, stream) and whose counter is set from the step index, so a draw
depends only on those coordinates and never on the order members are run in.
"""
import logging
import math
from functools import lru_cache

import numpy as np

from .data_structures import NoiseModel, ObservationVector, WienerStats
from .observables import InterpolantBasis
from .spectral import SpectralField, leray_project, norm, random_field

logger = logging.getLogger(__name__)

# stream identifiers mixed into the generator key
STREAM_OBSERVATION = 0
STREAM_PERTURBATION = 1
STREAM_FORCING = 2
STREAM_CALIBRATION = 3
STREAM_REFERENCE = 4


@lru_cache(maxsize=4096)
def _stream_key(seed: int, member: int, stream: int) -> tuple:
    state = np.random.SeedSequence([seed, member, stream]).generate_state(2, dtype=np.uint64)
    return tuple(int(word) for word in state)


def stream_generator(seed: int, member: int = 0, stream: int = STREAM_OBSERVATION,
                     step: int = 0) -> np.random.Generator:
    """Generator positioned at block `step` of the (seed, member, stream) sequence."""
    key = np.array(_stream_key(seed, member, stream), dtype=np.uint64)
    counter = np.array([0, 0, step, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def sample_increments(dt: float, model: NoiseModel, step: int, member: int = 0) -> np.ndarray:
    """
    Brownian increments db_d over one step for all D channels.

    Args:
        dt: Step length
        model: Noise intensity, channel count and seed
        step: Stream position (time step index)
        member: Ensemble member index

    Returns:
        Array of D independent N(0, dt sigma2 / 2) draws
    """
    if dt <= 0:
        raise ValueError(f"Increment length must be positive, got dt={dt}")
    if model.sigma2 == 0:
        return np.zeros(model.D)
    draws = stream_generator(model.seed, member, STREAM_OBSERVATION, step).standard_normal(model.D)
    return math.sqrt(0.5 * dt * model.sigma2) * draws


def lift_increment(dbeta: np.ndarray, basis: InterpolantBasis) -> SpectralField:
    """W increment sum_d dbeta_d gamma_d."""
    dbeta = np.asarray(dbeta, dtype=float)
    if dbeta.shape != (basis.D,):
        raise ValueError(f"Increment has {dbeta.size} channels, basis expects D={basis.D}")
    return basis.interpolate(ObservationVector(dbeta, basis.K))


def mode_spectrum(basis: InterpolantBasis, sigma2: float) -> np.ndarray:
    """
    s(k) = (sigma2/2) sum_d |gamma_d(k)|^2 on the simulation modes.

    Summed over both components, |Pi e_c|^2 adds up to one, so the channel sum
    collapses to N |c(k)|^2 with c the coefficients of psi_1.
    """
    spectrum = 0.5 * sigma2 * basis.N * np.abs(basis.coefficients) ** 2
    spectrum = np.where(basis.grid.retained, spectrum, 0.0)
    spectrum[0, 0] = 0.0
    return spectrum


def covariance_traces(basis: InterpolantBasis, sigma2: float) -> WienerStats:
    """
    trace[Q] and trace[A^{1/2} Q A^{1/2}] for the lifted noise.

    The traces use psi_1 as resolved on the construction grid; the *_galerkin values
    restrict the same sums to the simulated modes and are never larger.
    """
    if sigma2 < 0:
        raise ValueError(f"Noise intensity must be non-negative, got {sigma2}")
    grid = basis.grid
    size = basis.construction_size
    power = np.abs(basis.spectrum) ** 2
    power[0, 0] = 0.0
    trace_q = 0.5 * sigma2 * basis.N * grid.L ** 2 * float(power.sum())

    modal = mode_spectrum(basis, sigma2)
    trace_q_galerkin = grid.L ** 2 * float(modal.sum())

    trace_ahalf_q = trace_ahalf_q_galerkin = None
    if basis.kind == 'mollified':
        j = np.fft.fftfreq(size, d=1.0 / size)
        k2 = (2.0 * math.pi / grid.L) ** 2 * (j[:, None] ** 2 + j[None, :] ** 2)
        trace_ahalf_q = 0.5 * sigma2 * basis.N * grid.L ** 2 * float(np.sum(k2 * power))
        trace_ahalf_q_galerkin = grid.L ** 2 * float(np.sum(grid.k2 * modal))

    return WienerStats(
        trace_q=trace_q,
        trace_ahalf_q=trace_ahalf_q,
        basis_kind=basis.kind,
        sigma2=sigma2,
        trace_q_galerkin=trace_q_galerkin,
        trace_ahalf_q_galerkin=trace_ahalf_q_galerkin,
    )


def require_ahalf_trace(stats: WienerStats) -> float:
    """trace[A^{1/2} Q A^{1/2}], which only the mollified basis has."""
    if stats.trace_ahalf_q is None:
        raise ValueError(
            f"trace[A^1/2 Q A^1/2] is infinite for the {stats.basis_kind} basis (its functions are not in H^1)"
        )
    return stats.trace_ahalf_q


def ou_step(z: SpectralField, dt: float, nu: float, mu: float, dW: SpectralField) -> SpectralField:
    """
    Exact transition of dz + nu A z dt = mu dW over one step.

    Each mode decays by exp(-nu |k|^2 dt); the increment is rescaled so its variance
    equals that of the stochastic convolution over the step.
    """
    if dt <= 0:
        raise ValueError(f"Step must be positive, got dt={dt}")
    if z.grid != dW.grid:
        raise ValueError(f"Grid mismatch: {z.grid} vs {dW.grid}")
    rate = nu * z.grid.k2_safe * dt
    decay = np.exp(-rate)
    gain = np.sqrt(-np.expm1(-2.0 * rate) / (2.0 * rate))
    coeffs = decay * z.coeffs + mu * gain * dW.coeffs
    return leray_project(coeffs, z.grid)


def stationary_ou_bound(basis: InterpolantBasis, sigma2: float, nu: float, mu: float) -> np.ndarray:
    """Per-mode mu^2 sigma2 / (4 nu lambda_k) sum_d |gamma_d(k)|^2."""
    return mu ** 2 * mode_spectrum(basis, sigma2) / (2.0 * nu * basis.grid.k2_safe)


def sample_perturbation(reference: SpectralField, ratio: float, seed: int, member: int,
                        max_mode: int = 8) -> SpectralField:
    """Random solenoidal field with |pert|_H = ratio * |reference|_H."""
    grid = reference.grid
    limit = int(grid.dealias_fraction * grid.M / 2)
    rng = stream_generator(seed, member, STREAM_PERTURBATION)
    field = random_field(grid, rng, max_mode=min(max_mode, limit))
    size = norm(field, 'H')
    target = ratio * norm(reference, 'H')
    if size == 0 or target == 0:
        return SpectralField.zeros(grid)
    return (target / size) * field


def ou_second_moments(basis: InterpolantBasis, model: NoiseModel, nu: float, mu: float, dt: float,
                      burn_in: float, duration: float, member: int = 0) -> np.ndarray:
    """
    Time-averaged |z(k)|^2 of the auxiliary process started at zero.

    Samples are taken every step after the burn-in; the process is ergodic so the
    average estimates the stationary second moment of each mode.
    """
    if burn_in < 0 or duration <= 0:
        raise ValueError(f"Need burn_in >= 0 and duration > 0, got {burn_in}, {duration}")
    if model.D != basis.D:
        raise ValueError(f"Noise model has D={model.D} channels, basis expects D={basis.D}")
    skip = int(round(burn_in / dt))
    count = int(round(duration / dt))
    z = SpectralField.zeros(basis.grid)
    moments = np.zeros((2,) + basis.grid.k2.shape)
    for step in range(skip + count):
        dW = lift_increment(sample_increments(dt, model, step, member), basis)
        z = ou_step(z, dt, nu, mu, dW)
        if step >= skip:
            moments += np.abs(z.coeffs) ** 2
    return moments.sum(axis=0) / count
