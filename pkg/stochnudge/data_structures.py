"""
Data structures shared by the assimilation library.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, TYPE_CHECKING

import numpy as np
import pandas as pd

if TYPE_CHECKING:
    from .spectral import SpectralField


OBSERVATION_KINDS = ('volume', 'nodal')
BASIS_KINDS = ('step', 'mollified')
SCHEMES = ('etd1', 'etd2rk')
BOUND_MODES = (
    'main1', 'cor1', 'cor2', 'main2', 'cor1main2', 'nodcor1', 'nodes-oversampled', 'explore',
)
# modes whose guarantee is on E|v|_H^2; the rest bound E||v||_V^2
H_NORM_MODES = ('main1', 'cor1', 'cor2')
OVERSAMPLING_MODES = ('cor2', 'nodes-oversampled')


@dataclass
class ObservationVector:
    """Measurements on the K x K squares, one interleaved (first, second) pair per square."""
    values: np.ndarray
    K: int
    kind: str = 'volume'

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in OBSERVATION_KINDS:
            raise ValueError(f"Unknown observation kind '{self.kind}', expected one of {OBSERVATION_KINDS}")
        expected = 2 * self.K * self.K
        if self.values.shape != (expected,):
            raise ValueError(
                f"Observation vector for K={self.K} must hold {expected} entries, got shape {self.values.shape}"
            )

    @property
    def N(self) -> int:
        return self.K * self.K

    @property
    def D(self) -> int:
        return 2 * self.N

    def _check_compatible(self, other: 'ObservationVector') -> None:
        if other.K != self.K or other.kind != self.kind:
            raise ValueError(
                f"Cannot combine observations of ({self.kind}, K={self.K}) and ({other.kind}, K={other.K})"
            )

    def __add__(self, other: 'ObservationVector') -> 'ObservationVector':
        self._check_compatible(other)
        return ObservationVector(self.values + other.values, self.K, self.kind)

    def __sub__(self, other: 'ObservationVector') -> 'ObservationVector':
        self._check_compatible(other)
        return ObservationVector(self.values - other.values, self.K, self.kind)


@dataclass(frozen=True)
class NoiseModel:
    """Measurement-error model: D independent Brownian channels of variance t*sigma2/2."""
    sigma2: float
    D: int
    seed: int = 0

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError(f"Noise intensity sigma2 must be non-negative, got {self.sigma2}")
        if self.D <= 0:
            raise ValueError(f"Noise model needs at least one channel, got D={self.D}")


@dataclass
class WienerStats:
    """Covariance traces of the lifted Q-Wiener process."""
    trace_q: float
    trace_ahalf_q: Optional[float]
    basis_kind: str
    sigma2: float
    # the same sums restricted to the simulated (truncated) modes
    trace_q_galerkin: float = 0.0
    trace_ahalf_q_galerkin: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'basis_kind': self.basis_kind,
            'sigma2': self.sigma2,
            'trace_q': self.trace_q,
            'trace_ahalf_q': self.trace_ahalf_q,
            'trace_q_galerkin': self.trace_q_galerkin,
            'trace_ahalf_q_galerkin': self.trace_ahalf_q_galerkin,
        }


@dataclass
class SolverConfig:
    """Reference-equation setup: viscosity, body force and time stepping."""
    nu: float
    forcing: 'SpectralField'
    dt: float
    t_spinup: float
    scheme: str = 'etd1'
    cfl_limit: float = 0.5

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError(f"Viscosity must be positive, got nu={self.nu}")
        if self.dt <= 0:
            raise ValueError(f"Time step must be positive, got dt={self.dt}")
        if self.t_spinup < 0:
            raise ValueError(f"Spin-up time must be non-negative, got {self.t_spinup}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"Unknown time scheme '{self.scheme}', expected one of {SCHEMES}")

    @property
    def grid(self):
        return self.forcing.grid


@dataclass
class AssimilationConfig:
    """Nudging setup: relaxation rate, observation layout and noise."""
    mu: float
    K: int
    noise: NoiseModel
    basis_kind: str = 'step'
    observation_kind: str = 'volume'
    cadence: int = 1
    oversample: int = 1
    node_placement: str = 'center'
    node_seed: int = 0
    points_per_square: int = 40
    construction_oversample: int = 4

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"Nudging coefficient must be positive, got mu={self.mu}")
        if self.K < 1:
            raise ValueError(f"Need at least one square per side, got K={self.K}")
        if self.basis_kind not in BASIS_KINDS:
            raise ValueError(f"Unknown basis kind '{self.basis_kind}', expected one of {BASIS_KINDS}")
        if self.observation_kind not in OBSERVATION_KINDS:
            raise ValueError(
                f"Unknown observation kind '{self.observation_kind}', expected one of {OBSERVATION_KINDS}"
            )
        if self.cadence < 1:
            raise ValueError(f"Observation cadence must be at least one step, got {self.cadence}")
        if self.oversample < 1:
            raise ValueError(f"Oversampling factor must be a positive integer, got {self.oversample}")

    @property
    def fine_K(self) -> int:
        """Squares per side at which the raw measurements are taken."""
        return self.K * self.oversample


@dataclass
class ExperimentConfig:
    """Everything needed to run and judge one Monte Carlo experiment."""
    solver: SolverConfig
    assimilation: AssimilationConfig
    members: int
    t_run: float
    t_avg: float
    bound_mode: str = 'cor1'
    epsilon: float = 1.0
    perturbation_ratio: float = 1.0
    seed: int = 0
    workers: int = 1
    record_every: int = 1
    zero_noise_tolerance: float = 1e-20

    def __post_init__(self):
        if self.members < 1:
            raise ValueError(f"Ensemble needs at least one member, got {self.members}")
        if not self.t_run > self.t_avg > 0:
            raise ValueError(f"Need t_run > t_avg > 0, got t_run={self.t_run}, t_avg={self.t_avg}")
        if self.bound_mode not in BOUND_MODES:
            raise ValueError(f"Unknown bound mode '{self.bound_mode}', expected one of {BOUND_MODES}")
        if self.bound_mode in OVERSAMPLING_MODES and not 0 < self.epsilon <= 1:
            raise ValueError(f"Oversampling modes need epsilon in (0, 1], got {self.epsilon}")
        if self.workers < 1 or self.record_every < 1:
            raise ValueError("workers and record_every must be positive integers")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_run / self.solver.dt))


@dataclass
class ConstantsRecord:
    """Calibrated and derived absolute constants used by the bounds."""
    C_L: float
    C_B: float
    c: float
    c1: float = 1.0 / 6.0
    c2: float = 0.0
    trials: int = 0
    source: str = 'configured'
    # first constant of the (R2) fit for nodal observations, when measured
    c1_nodal: Optional[float] = None

    @property
    def c3(self) -> float:
        first = self.c1 if self.c1_nodal is None else self.c1_nodal
        return max(first, math.sqrt(self.c2))

    @property
    def log_term(self) -> float:
        # 2 + log(2 C_B c^{1/2})
        return 2.0 + math.log(2.0 * self.C_B * math.sqrt(self.c))

    @property
    def c5(self) -> float:
        return 4.0 * self.C_B ** 2 * self.log_term ** 2

    @property
    def kappa1(self) -> float:
        return 16.0 * math.pi ** 2 * self.C_L ** 2

    @property
    def kappa2(self) -> float:
        return 32.0 * math.pi ** 2 * self.c1 * self.C_L ** 2

    @property
    def kappa3(self) -> float:
        return 128.0 * math.pi ** 2 * math.e * self.c * self.c3 * self.c5 ** 2

    @property
    def kappa4(self) -> float:
        return 32.0 * math.pi ** 2 * self.c3 * self.C_B ** 2 * self.log_term ** 2

    def J(self, G: float) -> float:
        return 2.0 * self.C_B * self.log_term * (1.0 + math.log1p(G))

    def J_tilde(self, G: float) -> float:
        return 4.0 * self.C_B * math.log(4.0 * self.C_B * math.sqrt(self.c) * (1.0 + G) ** 2)

    def to_dict(self, G: Optional[float] = None) -> Dict[str, Any]:
        record = {
            'C_L': self.C_L, 'C_B': self.C_B, 'c': self.c, 'c1': self.c1, 'c1_nodal': self.c1_nodal, 'c2': self.c2,
            'c3': self.c3, 'c5': self.c5,
            'kappa1': self.kappa1, 'kappa2': self.kappa2, 'kappa3': self.kappa3, 'kappa4': self.kappa4,
            'trials': self.trials, 'source': self.source,
        }
        if G is not None:
            record['J'] = self.J(G)
            record['J_tilde'] = self.J_tilde(G)
        return record


@dataclass
class ParameterChoice:
    """Nudging rate and observation density prescribed for one bound mode."""
    mode: str
    mu: float
    h: float
    K: int
    h_max: float
    K2: Optional[int] = None
    q: int = 1
    degenerate: bool = False
    notes: List[str] = None

    def __post_init__(self):
        if self.notes is None:
            self.notes = []

    @property
    def fine_K(self) -> int:
        return self.K * self.q

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode, 'mu': self.mu, 'h': self.h, 'K': self.K, 'h_max': self.h_max,
            'K2': self.K2, 'q': self.q, 'degenerate': self.degenerate, 'notes': list(self.notes),
        }


@dataclass
class ExperimentSetup:
    """Solver, nudging and constants resolved from a configuration before the reference exists."""
    solver: SolverConfig
    assimilation: AssimilationConfig
    constants: ConstantsRecord
    selection: Optional[ParameterChoice] = None
    # sigma2 is derived from the reference energy once the spin-up is done
    sigma2_pending: bool = False


@dataclass
class AprioriReport:
    """Attractor bounds checked on a reference trajectory."""
    G: float
    energy: float
    enstrophy: float
    palinstrophy: float
    bound_energy: float
    bound_enstrophy: float
    measured_c_palinstrophy: float
    window: float
    mean_enstrophy: float
    bound_mean_enstrophy: float
    mean_palinstrophy: float
    bound_mean_palinstrophy: float
    max_cfl: float = 0.0

    @property
    def passed(self) -> bool:
        return (
            self.energy <= self.bound_energy
            and self.enstrophy <= self.bound_enstrophy
            and self.mean_enstrophy <= self.bound_mean_enstrophy
            and self.mean_palinstrophy <= self.bound_mean_palinstrophy
        )

    def to_dict(self) -> Dict[str, Any]:
        record = dict(self.__dict__)
        record['passed'] = self.passed
        return record


@dataclass
class ErrorSeries:
    """Per-member squared norms of v = U - u at the recorded times."""
    times: np.ndarray
    h2: np.ndarray
    v2: np.ndarray
    da2: np.ndarray
    nu: float = 1.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.h2, self.v2, self.da2 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.h2, self.v2, self.da2))
        for name, arr in (('h2', self.h2), ('v2', self.v2), ('da2', self.da2)):
            if arr.shape[1] != self.times.shape[0]:
                raise ValueError(f"ErrorSeries.{name} has {arr.shape[1]} samples for {self.times.shape[0]} times")

    @property
    def members(self) -> int:
        return self.h2.shape[0]

    def _stats(self, arr: np.ndarray):
        mean = arr.mean(axis=0)
        var = arr.var(axis=0, ddof=1) if self.members > 1 else np.zeros_like(mean)
        return mean, var, np.sqrt(var / self.members)

    def mean(self, norm: str) -> np.ndarray:
        return self._stats(self._select(norm))[0]

    def standard_error(self, norm: str) -> np.ndarray:
        return self._stats(self._select(norm))[2]

    def _select(self, norm: str) -> np.ndarray:
        try:
            return {'H': self.h2, 'V': self.v2, 'DA': self.da2}[norm]
        except KeyError:
            raise ValueError(f"Unknown norm '{norm}', expected H, V or DA")

    def to_frame(self) -> pd.DataFrame:
        columns = {'t': self.times}
        for norm, label in (('H', 'H2'), ('V', 'V2'), ('DA', 'DA2')):
            mean, _, se = self._stats(self._select(norm))
            columns[f'mean_{label}'] = mean
            columns[f'se_{label}'] = se
        return pd.DataFrame(columns)


@dataclass
class BoundReport:
    """Outcome of one bound check against an ensemble."""
    mode: str
    norm: str
    threshold: float
    observed: float
    standard_error: float
    average_threshold: float
    average_observed: float
    average_standard_error: float = 0.0
    constants: Dict[str, Any] = None
    parameters: Dict[str, Any] = None
    traces: Dict[str, Any] = None
    notes: List[str] = None
    asserted: bool = True

    def __post_init__(self):
        if self.constants is None:
            self.constants = {}
        if self.parameters is None:
            self.parameters = {}
        if self.traces is None:
            self.traces = {}
        if self.notes is None:
            self.notes = []

    @property
    def observed_upper(self) -> float:
        return self.observed + 2.0 * self.standard_error

    @property
    def average_observed_upper(self) -> float:
        return self.average_observed + 2.0 * self.average_standard_error

    @property
    def margin(self) -> float:
        if self.observed_upper == 0.0:
            return math.inf
        return self.threshold / self.observed_upper

    @property
    def limsup_passed(self) -> bool:
        return self.observed_upper <= self.threshold

    @property
    def average_passed(self) -> bool:
        return self.average_observed_upper <= self.average_threshold

    @property
    def passed(self) -> bool:
        if not self.asserted:
            return True
        return self.limsup_passed and self.average_passed

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode,
            'norm': self.norm,
            'threshold': self.threshold,
            'observed': self.observed,
            'standard_error': self.standard_error,
            'observed_upper': self.observed_upper,
            'margin': self.margin,
            'limsup_passed': self.limsup_passed,
            'average_threshold': self.average_threshold,
            'average_observed': self.average_observed,
            'average_standard_error': self.average_standard_error,
            'average_passed': self.average_passed,
            'asserted': self.asserted,
            'passed': self.passed,
            'constants': self.constants,
            'parameters': self.parameters,
            'traces': self.traces,
            'notes': list(self.notes),
        }


@dataclass
class RunManifest:
    """Record sufficient to reproduce a run."""
    mode: str
    config_path: Optional[str]
    resolved_config: Dict[str, Dict[str, str]]
    seed: int
    version: str
    constants: Dict[str, Any] = None
    outputs: Dict[str, str] = None
    environment: Dict[str, Any] = None
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.constants is None:
            self.constants = {}
        if self.outputs is None:
            self.outputs = {}
        if self.environment is None:
            self.environment = {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode,
            'config_path': self.config_path,
            'resolved_config': self.resolved_config,
            'seed': self.seed,
            'version': self.version,
            'constants': self.constants,
            'outputs': self.outputs,
            'environment': self.environment,
            'warnings': list(self.warnings),
        }
