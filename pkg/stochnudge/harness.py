"""
Parameter selection, Monte Carlo ensembles and checks of the expected-error bounds.
"""
import concurrent.futures
import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import minimize_scalar
from tqdm import tqdm

from .data_structures import (
    H_NORM_MODES, OVERSAMPLING_MODES, AprioriReport, ConstantsRecord, ErrorSeries,
    ExperimentConfig, ObservationVector, ParameterChoice, SolverConfig, BoundReport,
    WienerStats,
)
from .dynamics import (
    BlowUpError, ObservationPipeline, decay_rate, load_checkpoint, save_checkpoint,
    grashof, spin_up, step_nudged, step_reference, validate_assimilation,
)
from .noise import (
    STREAM_REFERENCE, covariance_traces, require_ahalf_trace, sample_perturbation,
    stream_generator,
)
from .spectral import SpectralField, norm, random_field

logger = logging.getLogger(__name__)

# fraction of the run treated as the asymptotic regime
FINAL_FRACTION = 0.25
# exponents beyond this overflow a float
MAX_EXPONENT = 700.0


def minlog_bound(eta: float) -> float:
    """-eta log(eta), a lower bound of min{r - eta (1 + log r) : r >= 1}."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return -eta * math.log(eta)


def minlog_objective(r: float, eta: float) -> float:
    return r - eta * (1.0 + math.log(r))


def minimize_minlog(eta: float) -> Tuple[float, float]:
    """
    Numerically minimize r - eta (1 + log r) over r >= 1.

    Returns:
        (minimizer, minimum)
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    upper = max(2.0, 4.0 * eta)
    result = minimize_scalar(
        minlog_objective, bounds=(1.0, upper), args=(eta,), method='bounded',
        options={'xatol': 1e-12 * upper},
    )
    # the bounded search never lands exactly on the endpoint
    edge = minlog_objective(1.0, eta)
    if edge <= result.fun:
        return 1.0, edge
    return float(result.x), float(result.fun)


def _squares_for(spacing: float, L: float) -> int:
    """Smallest K with L/K <= spacing."""
    K = math.ceil(L / spacing)
    if K > 1 and L / (K - 1) <= spacing:
        K -= 1
    return K


def _oversampling_factor(epsilon: float) -> int:
    """The integer q with q^2 >= 1/epsilon > (q - 1)^2."""
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    target = 1.0 / epsilon
    q = max(1, math.ceil(math.sqrt(target)))
    while q * q < target:
        q += 1
    while q > 1 and (q - 1) ** 2 >= target:
        q -= 1
    return q


def select_parameters(mode: str, G: float, nu: float, L: float, constants: ConstantsRecord,
                      epsilon: float = 1.0) -> ParameterChoice:
    """
    Nudging rate and the coarsest admissible square size prescribed for a bound mode.

    Args:
        mode: One of main1, cor1, cor2, main2, cor1main2, nodcor1, nodes-oversampled
        G: Grashof number
        nu: Viscosity
        L: Domain side
        constants: Absolute constants (C_L, C_B, c, c1, c2)
        epsilon: Noise reduction target of the oversampling modes

    Returns:
        ParameterChoice with mu, h = L/(K q), K and, for oversampling modes, q and K2
    """
    if G <= 0 or nu <= 0 or L <= 0:
        raise ValueError(f"G, nu and L must be positive, got G={G}, nu={nu}, L={L}")
    lambda1 = (2.0 * math.pi / L) ** 2
    log_factor = (1.0 + math.log1p(G)) ** 2

    if mode in ('main1', 'cor1', 'cor2'):
        mu = 4.0 * constants.C_L ** 2 * nu * lambda1 * G ** 2
        interp = constants.c1
    elif mode == 'main2':
        mu = 2.0 * nu * lambda1 * G * constants.J(G)
        interp = constants.c3
    elif mode in ('cor1main2', 'nodcor1', 'nodes-oversampled'):
        mu = constants.c5 * nu * lambda1 * G ** 2 * log_factor
        interp = constants.c3
    else:
        raise ValueError(f"No parameter rule for mode '{mode}'")

    h_max = math.sqrt(nu / (2.0 * interp * mu))
    notes = []
    if h_max >= L:
        notes.append("sqrt(nu/(2 c mu)) >= L: the reference is a steady state and h = L suffices")
        return ParameterChoice(mode, mu, L, 1, h_max, K2=1 if mode in OVERSAMPLING_MODES else None,
                               q=1, degenerate=True, notes=notes)

    K = _squares_for(h_max, L)
    if mode in OVERSAMPLING_MODES:
        q = _oversampling_factor(epsilon)
        return ParameterChoice(mode, mu, L / (K * q), K, h_max, K2=K, q=q, notes=notes)
    return ParameterChoice(mode, mu, L / K, K, h_max, notes=notes)


def _next_power_of_two(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def fit_to_grid(choice: ParameterChoice, M: int) -> ParameterChoice:
    """
    Refine a selection until the fine squares divide the grid.

    Smaller squares and larger q keep every hypothesis satisfied, so K and q are raised
    to powers of two.
    """
    K = _next_power_of_two(choice.K)
    q = _next_power_of_two(choice.q)
    if K * q > M:
        raise ValueError(
            f"Mode {choice.mode} needs {K * q} squares per side but the grid has M={M}; increase M"
        )
    notes = list(choice.notes)
    if (K, q) != (choice.K, choice.q):
        notes.append(f"raised K={choice.K}, q={choice.q} to K={K}, q={q} so squares align with M={M}")
    L = choice.h * choice.K * choice.q
    return ParameterChoice(
        choice.mode, choice.mu, L / (K * q), K,
        choice.h_max, K2=K if choice.K2 is not None else None, q=q,
        degenerate=choice.degenerate, notes=notes,
    )


def prepare_reference(solver: SolverConfig, seed: int = 0, progress: bool = False,
                      max_mode: int = 4) -> Tuple[SpectralField, AprioriReport]:
    """Spin a seeded random state up to the attractor."""
    grid = solver.grid
    limit = int(grid.dealias_fraction * grid.M / 2)
    rng = stream_generator(seed, 0, STREAM_REFERENCE)
    U0 = random_field(grid, rng, max_mode=min(max_mode, limit))
    size = norm(U0, 'H')
    scale = max(grashof(solver), 1.0) * solver.nu
    U0 = (scale / size) * U0 if size > 0 else U0
    return spin_up(U0, solver, progress=progress)


class SyntheticObservations:
    """Noisy observations of the reference, drawn member by member."""

    def __init__(self, pipeline: ObservationPipeline, dt: float, cadence: int = 1):
        self.pipeline = pipeline
        self.dt = dt
        self.cadence = cadence
        self._clean = None
        self._base = None

    def prepare(self, step: int, U: SpectralField) -> None:
        """Measure the reference at observation steps; in between the last value is held."""
        if step % self.cadence == 0 or self._clean is None:
            self._base = step - step % self.cadence
            self._clean = self.pipeline.observe(U)

    def __call__(self, step: int, member: int) -> ObservationVector:
        window = self.dt * self.cadence
        return self.pipeline.add_noise(self._clean, window, self._base, member)


class LoggedObservations:
    """Observations replayed from a log; every member receives the same record."""

    def __init__(self, times: np.ndarray, values: np.ndarray, K: int, kind: str, dt: float, cadence: int = 1):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != times.shape[0]:
            raise ValueError(f"Log has {times.shape[0]} times but values of shape {values.shape}")
        if values.shape[1] != 2 * K * K:
            raise ValueError(f"Log rows hold {values.shape[1]} values, observations need {2 * K * K}")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError("Observation log times must be strictly increasing")
        expected = np.arange(times.size) * dt * cadence
        if not np.allclose(times, expected, rtol=1e-9, atol=1e-12 * max(1.0, dt)):
            bad = int(np.nonzero(~np.isclose(times, expected, rtol=1e-9, atol=1e-12 * max(1.0, dt)))[0][0])
            raise ValueError(
                f"Observation log cadence incompatible with dt={dt} and cadence={cadence}: "
                f"row {bad + 1} has t={times[bad]!r}, expected {expected[bad]!r}"
            )
        self.times = times
        self.values = values
        self.K = K
        self.kind = kind
        self.cadence = cadence

    def prepare(self, step: int, U: SpectralField) -> None:
        return None

    def __call__(self, step: int, member: int) -> ObservationVector:
        row = step // self.cadence
        if row >= self.times.size:
            raise ValueError(f"Observation log ends at t={self.times[-1]!r}; step {step} needs row {row + 1}")
        return ObservationVector(self.values[row], self.K, self.kind)


def record_reference(U0: SpectralField, cfg: ExperimentConfig, pipeline: Optional[ObservationPipeline] = None,
                     progress: bool = False) -> Tuple[SpectralField, np.ndarray, np.ndarray]:
    """
    Run the reference for t_run and log member 0's fine noisy observations.

    Returns:
        (final state, observation times, observation rows)
    """
    solver, acfg = cfg.solver, cfg.assimilation
    if pipeline is None:
        pipeline = ObservationPipeline(U0.grid, acfg)
    source = SyntheticObservations(pipeline, solver.dt, acfg.cadence)
    times: List[float] = []
    rows: List[np.ndarray] = []
    U = U0
    for step in tqdm(range(cfg.n_steps), desc='reference', disable=not progress, leave=False):
        source.prepare(step, U)
        if step % acfg.cadence == 0:
            times.append(step * solver.dt)
            rows.append(source(step, 0).values)
        U = step_reference(U, solver, step * solver.dt)
    return U, np.array(times), np.array(rows)


def _error_norms(U: SpectralField, u: SpectralField) -> Tuple[float, float, float]:
    v = U - u
    return norm(v, 'H') ** 2, norm(v, 'V') ** 2, norm(v, 'DA') ** 2


def run_ensemble(cfg: ExperimentConfig, reference: Optional[SpectralField] = None,
                 observations=None, pipeline: Optional[ObservationPipeline] = None,
                 progress: bool = False, checkpoint_path: Optional[str] = None,
                 checkpoint_every: int = 0, resume: bool = False) -> ErrorSeries:
    """
    Run the nudged members in lockstep with one reference trajectory.

    Args:
        cfg: Experiment configuration
        reference: Reference state at the start of assimilation; spun up from the
            seed when omitted
        observations: Source of observations with prepare(step, U) and
            __call__(step, member); synthetic noisy observations by default
        pipeline: Observation pipeline to reuse
        progress: Show a progress bar
        checkpoint_path: Where to pickle the ensemble state
        checkpoint_every: Steps between checkpoints (0 disables)
        resume: Continue from checkpoint_path when it exists

    Returns:
        ErrorSeries of v = U - u for every member

    Raises:
        BlowUpError: If a member leaves the finite range, naming the member and time
    """
    solver, acfg = cfg.solver, cfg.assimilation
    validate_assimilation(solver, acfg)
    grid = solver.grid
    if reference is None:
        reference, _ = prepare_reference(solver, cfg.seed, progress)
    if pipeline is None:
        pipeline = ObservationPipeline(grid, acfg)
    if observations is None:
        observations = SyntheticObservations(pipeline, solver.dt, acfg.cadence)

    if checkpoint_every and checkpoint_every % acfg.cadence:
        raise ValueError(f"checkpoint_every={checkpoint_every} must be a multiple of the cadence {acfg.cadence}")
    n_steps = cfg.n_steps
    n_records = n_steps // cfg.record_every + 1
    times = np.arange(n_records) * cfg.record_every * solver.dt
    norms = np.zeros((3, cfg.members, n_records))

    U = reference
    members = [U + sample_perturbation(U, cfg.perturbation_ratio, cfg.seed, m) for m in range(cfg.members)]
    start = 0
    if resume and checkpoint_path:
        try:
            state = load_checkpoint(checkpoint_path)
        except FileNotFoundError:
            state = None
        if state is not None:
            stacked = state['fields']['members']
            if state['grid'] != grid or stacked.shape[0] != cfg.members:
                raise ValueError(f"Checkpoint {checkpoint_path} does not match this configuration")
            U = state['fields']['reference']
            members = [SpectralField(grid, coeffs) for coeffs in stacked]
            start = state['step']
            norms[:, :, :state['extra']['records']] = state['extra']['norms']
            logger.info(f"Resuming ensemble from step {start} (t={state['t']:.4g})")

    if start == 0:
        for m, u in enumerate(members):
            norms[:, m, 0] = _error_norms(U, u)

    logger.info(
        f"Running {cfg.members} members for {n_steps} steps (mu={acfg.mu:.4g}, K={acfg.K}, "
        f"q={acfg.oversample}, sigma2={acfg.noise.sigma2:.4g})"
    )

    def advance(m: int, step: int, U_next: SpectralField, record: Optional[int]) -> SpectralField:
        t = step * solver.dt
        try:
            u_next = step_nudged(members[m], observations(step, m), solver, acfg, pipeline, t)
        except BlowUpError as e:
            logger.error(f"Member {m} left the finite range at t={e.t:.4g}")
            raise BlowUpError(e.t, m) from e
        if record is not None:
            norms[:, m, record] = _error_norms(U_next, u_next)
        return u_next

    with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        for step in tqdm(range(start, n_steps), desc='ensemble', disable=not progress, leave=False):
            observations.prepare(step, U)
            U_next = step_reference(U, solver, step * solver.dt)
            record = (step + 1) // cfg.record_every if (step + 1) % cfg.record_every == 0 else None
            futures = [executor.submit(advance, m, step, U_next, record) for m in range(cfg.members)]
            # ordered reduction keeps the result independent of the schedule
            members = [future.result() for future in futures]
            U = U_next
            if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
                records = (step + 1) // cfg.record_every + 1
                save_checkpoint(
                    checkpoint_path,
                    {'reference': U, 'members': np.stack([u.coeffs for u in members])},
                    (step + 1) * solver.dt, step + 1,
                    extra={'records': records, 'norms': norms[:, :, :records].copy()},
                )

    series = ErrorSeries(times, norms[0], norms[1], norms[2], nu=solver.nu)
    logger.info(f"Ensemble finished: final mean |v|^2_H = {series.mean('H')[-1]:.4g}")
    return series


def run_free_control(reference: SpectralField, cfg: ExperimentConfig, progress: bool = False) -> ErrorSeries:
    """The mu = 0 control: reference and perturbed copy both evolve without nudging."""
    solver = cfg.solver
    U = reference
    u = reference + sample_perturbation(reference, cfg.perturbation_ratio, cfg.seed, 0)
    n_records = cfg.n_steps // cfg.record_every + 1
    norms = np.zeros((3, 1, n_records))
    norms[:, 0, 0] = _error_norms(U, u)
    for step in tqdm(range(cfg.n_steps), desc='control', disable=not progress, leave=False):
        t = step * solver.dt
        U = step_reference(U, solver, t)
        u = step_reference(u, solver, t)
        if (step + 1) % cfg.record_every == 0:
            norms[:, 0, (step + 1) // cfg.record_every] = _error_norms(U, u)
    times = np.arange(n_records) * cfg.record_every * solver.dt
    return ErrorSeries(times, norms[0], norms[1], norms[2], nu=solver.nu)


def pathwise_rate(series: ErrorSeries, floor: float = 1e-20) -> float:
    """Exponential rate of the ensemble-mean |v|_H^2 before it reaches the floor."""
    return decay_rate(series.times, series.mean('H'), floor)


def effective_traces(pipeline: ObservationPipeline, sigma2: float) -> WienerStats:
    """Traces of the noise seen by the interpolant after averaging q^2 measurements."""
    return covariance_traces(pipeline.basis, sigma2 / pipeline.q ** 2)


def noise_for_target(pipeline: ObservationPipeline, mu: float, energy: float, fraction: float = 1e-4) -> float:
    """sigma2 for which mu trace[Q] equals fraction * |U|_H^2 without oversampling."""
    unit = covariance_traces(pipeline.basis, 1.0).trace_q
    if unit <= 0:
        raise ValueError("Interpolant basis carries no noise variance")
    return fraction * energy / (mu * unit)


def _final_indices(times: np.ndarray) -> np.ndarray:
    span = times[-1] - times[0]
    return np.nonzero(times >= times[-1] - FINAL_FRACTION * span - 1e-12 * max(span, 1.0))[0]


def _limsup_proxy(series: ErrorSeries, norm_name: str, times_idx: np.ndarray, terminal: bool = False):
    mean = series.mean(norm_name)
    se = series.standard_error(norm_name)
    if terminal:
        i = len(mean) - 1
    else:
        i = int(times_idx[np.argmax(mean[times_idx])])
    return float(mean[i]), float(se[i])


def _window_proxy(series: ErrorSeries, norm_name: str, window: float, times_idx: np.ndarray):
    """Largest nu/T int_t^{t+T} E(.) over windows inside the final fraction, with its standard error."""
    times = series.times
    tail_start = times[times_idx[0]]
    # half a record interval of slack absorbs rounding of n_steps
    slack = 0.5 * float(times[1] - times[0]) if len(times) > 1 else 0.0
    if times[-1] - tail_start < window - slack:
        raise ValueError(
            f"Final {FINAL_FRACTION:.0%} of the run spans {times[-1] - tail_start:.4g}, "
            f"shorter than the averaging window T_avg={window:.4g}"
        )
    values = series._select(norm_name)
    cumulative = cumulative_trapezoid(values, times, axis=1, initial=0.0)
    best = (-math.inf, 0.0)
    for s in times_idx:
        e = max(int(np.searchsorted(times, times[s] + window - slack)), s + 1)
        if e >= len(times):
            break
        per_member = series.nu * (cumulative[:, e] - cumulative[:, s]) / (times[e] - times[s])
        mean = float(per_member.mean())
        se = float(per_member.std(ddof=1) / math.sqrt(series.members)) if series.members > 1 else 0.0
        if mean > best[0]:
            best = (mean, se)
    return best


def bound_thresholds(mode: str, cfg: ExperimentConfig, stats: WienerStats, constants: ConstantsRecord,
                     G: float) -> Tuple[float, float, List[str]]:
    """Right-hand sides (limsup, window average) of the bound for one mode."""
    solver, acfg = cfg.solver, cfg.assimilation
    nu, mu, L = solver.nu, acfg.mu, solver.grid.L
    lambda1 = solver.grid.lambda1
    sigma2, eps, T = acfg.noise.sigma2, cfg.epsilon, cfg.t_avg
    log_factor = (1.0 + math.log1p(G)) ** 2
    notes: List[str] = []

    if mode == 'main1':
        limsup = mu * stats.trace_q
        return limsup, (1.0 / T + mu) * limsup, notes
    if mode == 'cor1':
        k1 = constants.kappa1
        limsup = k1 * nu * G ** 2 * sigma2
        return limsup, (1.0 / T + k1 * nu * G ** 2 / L ** 2) * limsup, notes
    if mode == 'cor2':
        limsup = mu * sigma2 * L ** 2 * eps
        return limsup, (1.0 / T + mu) * limsup, notes

    sigma = require_ahalf_trace(stats) if mode in ('main2', 'cor1main2') else None
    if mode == 'main2':
        J = constants.J(G)
        exponent = nu * lambda1 * G ** 2 * J ** 2 / mu
        if exponent > MAX_EXPONENT:
            notes.append(f"exp({exponent:.4g}) overflows: the bound is vacuous")
            return math.inf, math.inf, notes
        growth = math.exp(exponent)
        limsup = 4.0 * mu * growth * sigma
        average = (8.0 * growth * (mu / T + 4.0 * J ** 2 * (1.0 / T + nu * lambda1) * nu * lambda1 * G ** 2)
                   + mu ** 2) * 2.0 * sigma
        return limsup, average, notes
    if mode == 'cor1main2':
        limsup = 4.0 * math.e * mu * sigma
        return limsup, (20.0 / T + 16.0 * nu * lambda1 + mu / (2.0 * math.e)) * limsup, notes
    if mode == 'nodcor1':
        limsup = constants.kappa3 * nu * lambda1 * G ** 4 * log_factor ** 2 * sigma2
        rate = constants.c5 * nu * lambda1 * G ** 2 * log_factor / (2.0 * math.e)
        return limsup, (20.0 / T + 16.0 * nu * lambda1 + rate) * limsup, notes
    if mode == 'nodes-oversampled':
        limsup = 32.0 * math.e * constants.c * constants.c3 * mu ** 2 / nu * sigma2 * L ** 2 * eps
        return limsup, (20.0 / T + 16.0 * nu * lambda1 + mu / (2.0 * math.e)) * limsup, notes
    raise ValueError(f"Unknown bound mode '{mode}'")


def evaluate_bound(series: ErrorSeries, cfg: ExperimentConfig, stats: WienerStats,
                   constants: ConstantsRecord, parameters: Optional[ParameterChoice] = None) -> BoundReport:
    """
    Compare an ensemble against the bound of cfg.bound_mode.

    The limsup is estimated by the largest ensemble mean over the final quarter of the
    run and the time average by the largest window of length t_avg inside it. A check
    passes when observed + 2 standard errors stays below the threshold.

    Raises:
        ValueError: If the final quarter is shorter than t_avg
    """
    mode = cfg.bound_mode
    G = grashof(cfg.solver)
    asserted = mode != 'explore'
    if mode == 'explore':
        judged = 'main1' if stats.trace_ahalf_q is None else 'cor1main2'
    else:
        judged = mode
    limsup_norm, average_norm = ('H', 'V') if judged in H_NORM_MODES else ('V', 'DA')

    tail = _final_indices(series.times)
    zero_noise = cfg.assimilation.noise.sigma2 == 0
    observed, se = _limsup_proxy(series, limsup_norm, tail, terminal=zero_noise)
    average, average_se = _window_proxy(series, average_norm, cfg.t_avg, tail)
    threshold, average_threshold, notes = bound_thresholds(judged, cfg, stats, constants, G)

    if zero_noise:
        tolerance = cfg.zero_noise_tolerance
        notes.append(f"sigma2 = 0: thresholds replaced by the solver-floor tolerance {tolerance:g}")
        threshold = max(threshold, tolerance)
        average_threshold = max(average_threshold, tolerance)
        logger.warning(f"Zero-noise run judged against tolerance {tolerance:g}")
    if mode == 'explore':
        notes.append(f"exploratory run reported against the {judged} form without asserting")

    report = BoundReport(
        mode=mode,
        norm=limsup_norm,
        threshold=threshold,
        observed=observed,
        standard_error=se,
        average_threshold=average_threshold,
        average_observed=average,
        average_standard_error=average_se,
        constants=constants.to_dict(G),
        parameters={
            'G': G, 'mu': cfg.assimilation.mu, 'K': cfg.assimilation.K, 'q': cfg.assimilation.oversample,
            'h': cfg.solver.grid.L / cfg.assimilation.fine_K, 'epsilon': cfg.epsilon,
            't_run': cfg.t_run, 't_avg': cfg.t_avg, 'members': cfg.members,
            'selection': parameters.to_dict() if parameters is not None else None,
        },
        traces=stats.to_dict(),
        notes=notes,
        asserted=asserted,
    )
    logger.info(
        f"{mode}: observed {observed:.4g} (+2SE {report.observed_upper:.4g}) vs threshold {threshold:.4g}; "
        f"average {average:.4g} vs {average_threshold:.4g}; passed={report.passed}"
    )
    return report
