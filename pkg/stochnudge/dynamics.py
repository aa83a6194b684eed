"""
Time integration of the reference and nudged Navier-Stokes equations.
"""
import logging
import math
import os
import pickle
from functools import lru_cache
from typing import Any, Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .data_structures import AprioriReport, AssimilationConfig, ObservationVector, SolverConfig
from .noise import STREAM_FORCING, sample_increments, stream_generator
from .observables import InterpolantBasis, node_positions, observe_nodes, observe_volumes, oversample_average
from .spectral import SpectralField, WaveGrid, bilinear, inner, leray_project, norm, symmetrize

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
# explicit nudging is stable for mu * dt up to this value
MAX_NUDGING_STEP = 0.5


class BlowUpError(RuntimeError):
    """A trajectory produced non-finite values."""

    def __init__(self, t: float, member: Optional[int] = None):
        self.t = t
        self.member = member
        where = f" in member {member}" if member is not None else ""
        super().__init__(f"Non-finite state{where} at t={t:.6g}")


@lru_cache(maxsize=16)
def _exponential_factors(grid: WaveGrid, nu: float, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """exp(-nu k^2 dt) and the ETD weights phi1, phi2."""
    rate = nu * grid.k2_safe
    x = rate * dt
    em1 = np.expm1(-x)
    decay = np.exp(-x)
    phi1 = -em1 / rate
    phi2 = (em1 + x) / (dt * rate ** 2)
    return decay, phi1, phi2


def grashof_of(forcing: SpectralField, nu: float) -> float:
    return norm(forcing, 'H') / (nu ** 2 * forcing.grid.lambda1)


def grashof(cfg: SolverConfig) -> float:
    """G = |f|_H / (nu^2 lambda_1)."""
    return grashof_of(cfg.forcing, cfg.nu)


def make_forcing(grid: WaveGrid, nu: float, grashof_target: float, seed: int = 0,
                 shell: Tuple[float, float] = (1.0, 2.0)) -> SpectralField:
    """
    Time-independent solenoidal force on the wavenumber shell shell[0] <= |j| <= shell[1].

    Phases are drawn from the seed and the amplitude is set so that G equals
    grashof_target.
    """
    if grashof_target < 0:
        raise ValueError(f"Target Grashof number must be non-negative, got {grashof_target}")
    if grashof_target == 0:
        return SpectralField.zeros(grid)
    jx, jy = grid.j
    radius2 = jx ** 2 + jy ** 2
    band = (radius2 >= shell[0] ** 2) & (radius2 <= shell[1] ** 2) & grid.retained
    if not band.any():
        raise ValueError(f"Forcing shell {shell} contains no retained modes")
    rng = stream_generator(seed, 0, STREAM_FORCING)
    phases = np.exp(2j * math.pi * rng.random((grid.M, grid.M)))
    kx, ky = grid.k
    modulus = np.sqrt(grid.k2_safe)
    scalar = np.where(band, phases, 0.0)
    # rotate k by 90 degrees so the force is solenoidal
    raw = np.stack([-ky / modulus * scalar, kx / modulus * scalar])
    forcing = leray_project(symmetrize(raw), grid)
    size = norm(forcing, 'H')
    return (grashof_target * nu ** 2 * grid.lambda1 / size) * forcing


def _forced_advection(U: SpectralField, forcing: SpectralField) -> np.ndarray:
    return forcing.coeffs - bilinear(U, U).coeffs


def step_reference(U: SpectralField, cfg: SolverConfig, t: float = 0.0) -> SpectralField:
    """
    One step of dU/dt + nu A U + B(U, U) = f.

    'etd1' is exponential Euler, U' = E U + phi1 (f - B(U, U)), so forced steady states
    are exact fixed points; 'etd2rk' adds the second-order Cox-Matthews correction.
    """
    if U.grid != cfg.grid:
        raise ValueError(f"Grid mismatch between state and forcing: {U.grid} vs {cfg.grid}")
    decay, phi1, phi2 = _exponential_factors(U.grid, cfg.nu, cfg.dt)
    drive = _forced_advection(U, cfg.forcing)
    coeffs = decay * U.coeffs + phi1 * drive
    if cfg.scheme == 'etd2rk':
        predictor = SpectralField(U.grid, coeffs)
        coeffs = coeffs + phi2 * (_forced_advection(predictor, cfg.forcing) - drive)
    result = SpectralField(U.grid, coeffs)
    if not result.is_finite():
        raise BlowUpError(t + cfg.dt)
    return result


def validate_assimilation(cfg: SolverConfig, acfg: AssimilationConfig) -> None:
    """Check the explicit nudging restriction mu * dt <= 1/2."""
    if acfg.mu * cfg.dt > MAX_NUDGING_STEP:
        raise ValueError(
            f"mu * dt = {acfg.mu * cfg.dt:.4g} exceeds {MAX_NUDGING_STEP}; "
            f"reduce dt below {MAX_NUDGING_STEP / acfg.mu:.4g}"
        )


class ObservationPipeline:
    """Observe, add noise, average and interpolate for one assimilation setup."""

    def __init__(self, grid: WaveGrid, acfg: AssimilationConfig):
        self.grid = grid
        self.config = acfg
        self.q = acfg.oversample
        self.fine_K = acfg.fine_K
        self.basis = InterpolantBasis(
            acfg.basis_kind, acfg.K, grid, acfg.points_per_square, acfg.construction_oversample,
        )
        self.nodes = None
        if acfg.observation_kind == 'nodal':
            self.nodes = node_positions(self.fine_K, grid.L, acfg.node_placement, acfg.node_seed)
        expected = 2 * self.fine_K ** 2
        if acfg.noise.D != expected:
            raise ValueError(f"Noise model has D={acfg.noise.D} channels, observations need {expected}")

    @property
    def warnings(self):
        return self.basis.warnings

    def observe(self, field: SpectralField) -> ObservationVector:
        """Noiseless measurements at the fine resolution."""
        if self.nodes is not None:
            return observe_nodes(field, self.nodes, self.fine_K)
        return observe_volumes(field, self.fine_K)

    def add_noise(self, clean: ObservationVector, dt: float, step: int, member: int = 0) -> ObservationVector:
        """Measurement over one step: clean values plus db/dt."""
        increments = sample_increments(dt, self.config.noise, step, member)
        return ObservationVector(clean.values + increments / dt, clean.K, clean.kind)

    def reduce(self, zeta: ObservationVector) -> ObservationVector:
        if zeta.K == self.config.K:
            return zeta
        return oversample_average(zeta, self.q)

    def predict(self, field: SpectralField) -> ObservationVector:
        return self.reduce(self.observe(field))

    def nudging_field(self, u: SpectralField, observation: ObservationVector) -> SpectralField:
        """Pi R_h u minus the interpolated observation."""
        return self.basis.interpolate(self.predict(u) - self.reduce(observation))


def step_nudged(u: SpectralField, observation: ObservationVector, cfg: SolverConfig,
                acfg: AssimilationConfig, pipeline: Optional[ObservationPipeline] = None,
                t: float = 0.0) -> SpectralField:
    """
    One Euler-Maruyama step of du + (nu A u + B(u, u)) dt = (f - mu Pi R_h(u - U)) dt + mu dW.

    The noisy observation carries db/dt, so the explicit nudging term applied after
    the integrating factor contributes both the relaxation and mu dW.
    """
    validate_assimilation(cfg, acfg)
    if pipeline is None:
        pipeline = ObservationPipeline(u.grid, acfg)
    decay, phi1, _ = _exponential_factors(u.grid, cfg.nu, cfg.dt)
    nudge = pipeline.nudging_field(u, observation)
    coeffs = decay * u.coeffs + phi1 * _forced_advection(u, cfg.forcing) - acfg.mu * cfg.dt * nudge.coeffs
    result = SpectralField(u.grid, coeffs)
    if not result.is_finite():
        raise BlowUpError(t + cfg.dt)
    return result


def cfl_number(U: SpectralField, dt: float) -> float:
    """dt max|U| (2 pi M / L)."""
    samples = U.to_physical()
    speed = math.sqrt(float((samples[0] ** 2 + samples[1] ** 2).max()))
    return dt * speed * 2.0 * math.pi * U.grid.M / U.grid.L


def default_spinup(nu: float, grid: WaveGrid) -> float:
    """20 viscous times 1/(nu lambda_1)."""
    return 20.0 / (nu * grid.lambda1)


def spin_up(U0: SpectralField, cfg: SolverConfig, window: Optional[float] = None,
            progress: bool = False, cfl_every: int = 10) -> Tuple[SpectralField, AprioriReport]:
    """
    Integrate the reference equation for cfg.t_spinup and check the attractor bounds.

    Args:
        U0: Initial state
        cfg: Solver configuration
        window: Length T of the closing time-average window, default
            min(10/(nu lambda_1), t_spinup/2)
        progress: Show a progress bar
        cfl_every: Steps between CFL evaluations

    Returns:
        Endpoint state and its a-priori diagnostics
    """
    if cfg.t_spinup <= 0:
        raise ValueError(f"Spin-up time must be positive, got {cfg.t_spinup}")
    grid = U0.grid
    lambda1 = grid.lambda1
    if window is None:
        window = min(10.0 / (cfg.nu * lambda1), 0.5 * cfg.t_spinup)
    n_steps = int(round(cfg.t_spinup / cfg.dt))
    window_steps = min(max(int(round(window / cfg.dt)), 1), n_steps)
    logger.info(f"Spinning up for {n_steps} steps (dt={cfg.dt}), averaging the last {window_steps}")

    U = U0
    t = 0.0
    max_cfl = 0.0
    mean_v = mean_a = 0.0
    previous = None
    for step in tqdm(range(n_steps), desc='spin-up', disable=not progress, leave=False):
        if step % cfl_every == 0:
            courant = cfl_number(U, cfg.dt)
            max_cfl = max(max_cfl, courant)
            if courant > cfg.cfl_limit:
                logger.warning(f"CFL number {courant:.3f} exceeds {cfg.cfl_limit} at t={t:.4g}")
        if step >= n_steps - window_steps:
            current = (norm(U, 'V') ** 2, norm(U, 'DA') ** 2)
            if previous is not None:
                mean_v += 0.5 * (previous[0] + current[0]) * cfg.dt
                mean_a += 0.5 * (previous[1] + current[1]) * cfg.dt
            previous = current
        U = step_reference(U, cfg, t)
        t += cfg.dt
    current = (norm(U, 'V') ** 2, norm(U, 'DA') ** 2)
    if previous is not None:
        mean_v += 0.5 * (previous[0] + current[0]) * cfg.dt
        mean_a += 0.5 * (previous[1] + current[1]) * cfg.dt
    span = window_steps * cfg.dt

    report = apriori_report(U, cfg, span, mean_v / span, mean_a / span, max_cfl)
    logger.info(
        f"Spin-up finished at t={t:.4g}: G={report.G:.4g}, |U|^2={report.energy:.4g} "
        f"(bound {report.bound_energy:.4g}), passed={report.passed}"
    )
    return U, report


def apriori_report(U: SpectralField, cfg: SolverConfig, window: float, mean_enstrophy: float,
                   mean_palinstrophy: float, max_cfl: float = 0.0) -> AprioriReport:
    """Compare a state and its window averages with the attractor bounds."""
    nu, lambda1 = cfg.nu, U.grid.lambda1
    G = grashof(cfg)
    palinstrophy = norm(U, 'DA') ** 2
    return AprioriReport(
        G=G,
        energy=norm(U, 'H') ** 2,
        enstrophy=norm(U, 'V') ** 2,
        palinstrophy=palinstrophy,
        bound_energy=2.0 * nu ** 2 * G ** 2,
        bound_enstrophy=2.0 * nu ** 2 * lambda1 * G ** 2,
        measured_c_palinstrophy=palinstrophy / (nu ** 2 * lambda1 ** 2 * (1.0 + G) ** 4),
        window=window,
        mean_enstrophy=mean_enstrophy,
        bound_mean_enstrophy=2.0 * (1.0 / window + nu * lambda1) * nu * G ** 2,
        mean_palinstrophy=mean_palinstrophy,
        bound_mean_palinstrophy=2.0 * (1.0 / window + nu * lambda1) * nu * lambda1 * G ** 2,
        max_cfl=max_cfl,
    )


def energy_residual(U: SpectralField, U_next: SpectralField, cfg: SolverConfig) -> float:
    """Discrete (|U'|^2 - |U|^2)/dt + 2 nu ||U||_V^2 - 2 <f, U>."""
    rate = (norm(U_next, 'H') ** 2 - norm(U, 'H') ** 2) / cfg.dt
    return rate + 2.0 * cfg.nu * norm(U, 'V') ** 2 - 2.0 * inner(cfg.forcing, U)


def decay_rate(times: np.ndarray, values: np.ndarray, floor: float = 1e-20) -> float:
    """
    Exponential rate of a decaying error from a log-linear fit.

    Only samples before the series first reaches the floor are used.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    below = np.nonzero(values <= floor)[0]
    stop = below[0] if below.size else values.size
    if stop < 2:
        raise ValueError("Need at least two samples above the floor to fit a decay rate")
    slope, _ = np.polyfit(times[:stop], np.log(values[:stop]), 1)
    return float(slope)


def save_checkpoint(path: str, fields: Dict[str, Any], t: float, step: int,
                    extra: Optional[Dict[str, Any]] = None) -> None:
    """
    Pickle states with their grid, time and stream position.

    Args:
        path: Output file
        fields: Named SpectralFields or arrays of stacked coefficients sharing one grid
        t: Simulation time
        step: Step index, which is also the noise stream position
        extra: Additional picklable data
    """
    grid = None
    payload = {}
    for name, value in fields.items():
        if isinstance(value, SpectralField):
            grid = value.grid
            payload[name] = value.coeffs
        else:
            payload[name] = np.asarray(value)
    if grid is None:
        grid = (extra or {}).get('grid')
    if grid is None:
        raise ValueError("Checkpoint needs at least one SpectralField or an explicit grid in extra")
    state = {
        'format': CHECKPOINT_FORMAT,
        'grid': {'L': grid.L, 'M': grid.M, 'dealias_fraction': grid.dealias_fraction},
        't': t,
        'step': step,
        'fields': payload,
        'extra': {k: v for k, v in (extra or {}).items() if k != 'grid'},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        pickle.dump(state, f)
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> Dict[str, Any]:
    """Inverse of save_checkpoint; 2-D coefficient stacks come back as SpectralFields."""
    with open(path, 'rb') as f:
        state = pickle.load(f)
    if state.get('format') != CHECKPOINT_FORMAT:
        raise ValueError(f"Unsupported checkpoint format in {path}: {state.get('format')}")
    grid = WaveGrid(**state['grid'])
    fields = {}
    for name, coeffs in state['fields'].items():
        if coeffs.ndim == 3:
            fields[name] = SpectralField(grid, coeffs)
        else:
            fields[name] = coeffs
    return {'grid': grid, 't': state['t'], 'step': state['step'], 'fields': fields, 'extra': state['extra']}
