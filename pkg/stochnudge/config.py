"""
Configuration: environment defaults, the INI layer and builders for experiment records.
"""
import configparser
import logging
import math
import os
import re
from typing import Dict, Iterable, Optional, Tuple

from .calibration import calibrate_constants
from .data_structures import (
    BASIS_KINDS, BOUND_MODES, H_NORM_MODES, OBSERVATION_KINDS, SCHEMES,
    AssimilationConfig, ConstantsRecord, ExperimentConfig, ExperimentSetup, NoiseModel,
    SolverConfig,
)
from .dynamics import ObservationPipeline, default_spinup, grashof_of, make_forcing
from .harness import fit_to_grid, noise_for_target, select_parameters
from .spectral import WaveGrid

logger = logging.getLogger(__name__)

AUTO = 'auto'


class ConfigError(ValueError):
    """Malformed configuration, anchored to a file and line when known."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        if path and line:
            message = f"{path}:{line}: {message}"
        elif path:
            message = f"{path}: {message}"
        super().__init__(message)


class Config:
    """Run configuration with environment-overridable defaults."""

    # Environment defaults
    OUTPUT_DIR = os.getenv('STOCHNUDGE_OUTPUT_DIR', 'results')
    SEED = int(os.getenv('STOCHNUDGE_SEED', '0'))
    MEMBERS = int(os.getenv('STOCHNUDGE_MEMBERS', '16'))
    WORKERS = int(os.getenv('STOCHNUDGE_WORKERS', '1'))
    CALIBRATION_TRIALS = int(os.getenv('STOCHNUDGE_CALIBRATION_TRIALS', '10000'))
    MODES_PER_SIDE = int(os.getenv('STOCHNUDGE_MODES_PER_SIDE', '128'))
    # largest time step taken when dt_s is auto
    MAX_DT = float(os.getenv('STOCHNUDGE_MAX_DT', '0.01'))
    LOG_FORMAT = os.getenv('STOCHNUDGE_LOG_FORMAT', '%(asctime)s %(levelname)s %(name)s: %(message)s')

    # Run-length multiples of 1/mu
    RUN_TIMES = 20.0
    AVERAGE_TIMES = 5.0
    # mu * dt when dt is derived
    AUTO_NUDGING_STEP = 0.25

    SECTIONS = ('spectral', 'dynamics', 'observables', 'noise', 'harness', 'constants', 'replay', 'output')

    @classmethod
    def defaults(cls) -> Dict[str, Dict[str, str]]:
        """Every key with its default value as text."""
        return {
            'spectral': {
                'domain_length_m': repr(2.0 * math.pi),
                'modes_per_side': str(cls.MODES_PER_SIDE),
                'dealias_fraction': repr(2.0 / 3.0),
            },
            'dynamics': {
                'nu_m2_per_s': '0.01',
                'grashof': '10',
                'forcing_seed': '0',
                'forcing_shell': '1, 2',
                'dt_s': AUTO,
                't_spinup_s': AUTO,
                'scheme': 'etd1',
                'cfl_limit': '0.5',
            },
            'observables': {
                'kind': AUTO,
                'basis': AUTO,
                'squares_per_side': AUTO,
                'oversample': AUTO,
                'cadence': '1',
                'node_placement': 'center',
                'node_seed': '0',
                'points_per_square': '40',
                'construction_oversample': '4',
            },
            'noise': {
                'sigma2_m2_per_s': AUTO,
                'target_fraction': '1e-4',
            },
            'harness': {
                'bound': 'cor1',
                'mu_per_s': AUTO,
                'members': str(cls.MEMBERS),
                't_run_s': AUTO,
                't_avg_s': AUTO,
                'epsilon': '1.0',
                'perturbation_ratio': '1.0',
                'seed': str(cls.SEED),
                'workers': str(cls.WORKERS),
                'record_every': '1',
                'zero_noise_tolerance': '1e-20',
            },
            'constants': {
                'C_L': AUTO,
                'C_B': AUTO,
                'c': AUTO,
                'c1': repr(1.0 / 6.0),
                'c2': AUTO,
                'c1_nodal': AUTO,
                'calibration_trials': str(cls.CALIBRATION_TRIALS),
                'calibration_seed': '0',
            },
            'replay': {
                'log_path': '',
            },
            'output': {
                'directory': cls.OUTPUT_DIR,
                'checkpoint_every': '0',
            },
        }

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._values = self.defaults()
        self._lines: Dict[Tuple[str, Optional[str]], int] = {}

    @classmethod
    def load(cls, path: str) -> 'Config':
        """
        Read an INI file on top of the defaults.

        Raises:
            FileNotFoundError: If the file does not exist
            ConfigError: On syntax errors, unknown sections or unknown keys
        """
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
        config = cls(path)
        config._lines = _locate_keys(text)
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
        parser.optionxform = str
        try:
            parser.read_string(text, source=path)
        except configparser.Error as e:
            line = getattr(e, 'lineno', None)
            if line is None and isinstance(e, configparser.ParsingError) and e.errors:
                line = e.errors[0][0]
            raise ConfigError(_parser_message(e), path, line)

        for section in parser.sections():
            if section not in config._values:
                raise ConfigError(
                    f"unknown section [{section}], expected one of {', '.join(cls.SECTIONS)}",
                    path, config._lines.get((section, None)),
                )
            for key, value in parser.items(section):
                if key not in config._values[section]:
                    raise ConfigError(f"unknown key '{key}' in [{section}]", path, config._lines.get((section, key)))
                config._values[section][key] = value.strip()
        logger.info(f"Loaded configuration from {path}")
        return config

    def error(self, section: str, key: str, message: str) -> ConfigError:
        return ConfigError(f"[{section}] {key}: {message}", self.path, self._lines.get((section, key)))

    def get(self, section: str, key: str) -> str:
        try:
            return self._values[section][key]
        except KeyError:
            raise KeyError(f"No configuration key [{section}] {key}")

    def is_auto(self, section: str, key: str) -> bool:
        return self.get(section, key).lower() == AUTO

    def get_float(self, section: str, key: str, positive: bool = False, allow_zero: bool = False) -> float:
        raw = self.get(section, key)
        try:
            value = float(raw)
        except ValueError:
            raise self.error(section, key, f"expected a number, got '{raw}'")
        if not math.isfinite(value):
            raise self.error(section, key, f"expected a finite number, got '{raw}'")
        if positive and not (value > 0 or (allow_zero and value == 0)):
            bound = 'non-negative' if allow_zero else 'positive'
            raise self.error(section, key, f"must be {bound}, got {raw}")
        return value

    def get_int(self, section: str, key: str, minimum: Optional[int] = None) -> int:
        raw = self.get(section, key)
        try:
            value = int(raw)
        except ValueError:
            raise self.error(section, key, f"expected an integer, got '{raw}'")
        if minimum is not None and value < minimum:
            raise self.error(section, key, f"must be at least {minimum}, got {value}")
        return value

    def get_choice(self, section: str, key: str, choices: Iterable[str]) -> str:
        value = self.get(section, key)
        choices = tuple(choices)
        if value not in choices:
            raise self.error(section, key, f"expected one of {', '.join(choices)}, got '{value}'")
        return value

    def get_pair(self, section: str, key: str) -> Tuple[float, float]:
        raw = self.get(section, key)
        parts = [part.strip() for part in raw.split(',')]
        try:
            low, high = (float(part) for part in parts)
        except ValueError:
            raise self.error(section, key, f"expected two comma-separated numbers, got '{raw}'")
        if not 0 <= low <= high:
            raise self.error(section, key, f"expected 0 <= low <= high, got '{raw}'")
        return low, high

    def set(self, section: str, key: str, value) -> None:
        """Store a value; floats are written with repr so they read back exactly."""
        if key not in self._values.get(section, {}):
            raise KeyError(f"No configuration key [{section}] {key}")
        self._values[section][key] = repr(float(value)) if isinstance(value, float) else str(value)

    def override(self, section: str, key: str, value) -> None:
        """Apply a command-line flag when it was given."""
        if value is not None:
            self.set(section, key, value)

    def resolved(self) -> Dict[str, Dict[str, str]]:
        return {section: dict(values) for section, values in self._values.items()}

    def dump(self, path: str) -> str:
        """Write the configuration as INI."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_dict(self._values)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            parser.write(f)
        return path


_SECTION_RE = re.compile(r'^\s*\[([^\]]+)\]')
_KEY_RE = re.compile(r'^\s*([^#;=:\s][^=:]*?)\s*[=:]')


def _locate_keys(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """Line number of every section header and key."""
    lines: Dict[Tuple[str, Optional[str]], int] = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1).strip()
            lines.setdefault((section, None), number)
            continue
        key = _KEY_RE.match(line)
        if key and section is not None:
            lines.setdefault((section, key.group(1).strip()), number)
    return lines


def _parser_message(error: configparser.Error) -> str:
    if isinstance(error, configparser.MissingSectionHeaderError):
        return "key outside of any [section]"
    if isinstance(error, configparser.DuplicateOptionError):
        return f"duplicate key '{error.option}' in [{error.section}]"
    if isinstance(error, configparser.DuplicateSectionError):
        return f"duplicate section [{error.section}]"
    if isinstance(error, configparser.ParsingError):
        return "malformed line"
    return str(error).splitlines()[0]


def build_grid(config: Config) -> WaveGrid:
    L = config.get_float('spectral', 'domain_length_m', positive=True)
    M = config.get_int('spectral', 'modes_per_side', minimum=4)
    fraction = config.get_float('spectral', 'dealias_fraction', positive=True)
    try:
        return WaveGrid(L, M, fraction)
    except ValueError as e:
        raise config.error('spectral', 'modes_per_side', str(e))


def build_constants(config: Config, grid: WaveGrid, progress: bool = False) -> ConstantsRecord:
    """Configured constants, calibrating once for every key left at auto."""
    keys = ('C_L', 'C_B', 'c', 'c2', 'c1_nodal')
    values = {}
    pending = [key for key in keys if config.is_auto('constants', key)]
    trials = config.get_int('constants', 'calibration_trials', minimum=1)
    if pending:
        seed = config.get_int('constants', 'calibration_seed', minimum=0)
        logger.info(f"Calibrating {', '.join(pending)} with {trials} trials")
        calibrated = calibrate_constants(grid, trials=trials, seed=seed, progress=progress)
        for key in pending:
            values[key] = getattr(calibrated, key)
            config.set('constants', key, values[key])
    for key in keys:
        if key not in values:
            values[key] = config.get_float('constants', key, positive=True, allow_zero=key == 'c2')
    c1 = config.get_float('constants', 'c1', positive=True)
    return ConstantsRecord(
        C_L=values['C_L'], C_B=values['C_B'], c=values['c'], c1=c1, c2=values['c2'],
        c1_nodal=values['c1_nodal'], trials=trials if pending else 0,
        source='calibrated' if pending else 'configured',
    )


def _observation_layout(mode: str) -> Tuple[str, str]:
    if mode in H_NORM_MODES or mode == 'explore':
        return 'volume', 'step'
    return 'nodal', 'mollified'


def build_setup(config: Config, progress: bool = False) -> ExperimentSetup:
    """
    Resolve everything that does not depend on the reference trajectory.

    Order: grid, forcing (hence G), constants, mu and K, dt. Each value derived from an
    auto key is written back into the config so the resolved file reproduces the run.

    Raises:
        ConfigError: If a value is malformed or an auto key cannot be derived
    """
    grid = build_grid(config)
    nu = config.get_float('dynamics', 'nu_m2_per_s', positive=True)
    target = config.get_float('dynamics', 'grashof', positive=True, allow_zero=True)
    forcing = make_forcing(
        grid, nu, target, config.get_int('dynamics', 'forcing_seed', minimum=0),
        config.get_pair('dynamics', 'forcing_shell'),
    )
    G = grashof_of(forcing, nu)
    mode = config.get_choice('harness', 'bound', BOUND_MODES)
    epsilon = config.get_float('harness', 'epsilon', positive=True)
    constants = build_constants(config, grid, progress)

    selection = None
    if config.is_auto('harness', 'mu_per_s') or config.is_auto('observables', 'squares_per_side'):
        if mode == 'explore':
            raise config.error('harness', 'mu_per_s', "explore mode needs explicit mu_per_s and squares_per_side")
        if G == 0:
            raise config.error('dynamics', 'grashof', "parameter selection needs a nonzero force")
        try:
            selection = fit_to_grid(select_parameters(mode, G, nu, grid.L, constants, epsilon), grid.M)
        except ValueError as e:
            raise config.error('observables', 'squares_per_side', str(e))
        for note in selection.notes:
            logger.info(f"Parameter selection: {note}")

    mu = selection.mu if config.is_auto('harness', 'mu_per_s') else config.get_float('harness', 'mu_per_s', positive=True)
    if config.is_auto('observables', 'squares_per_side'):
        K = selection.K
    else:
        K = config.get_int('observables', 'squares_per_side', minimum=1)
    if config.is_auto('observables', 'oversample'):
        q = selection.q if selection is not None else 1
    else:
        q = config.get_int('observables', 'oversample', minimum=1)
    config.set('harness', 'mu_per_s', mu)
    config.set('observables', 'squares_per_side', K)
    config.set('observables', 'oversample', q)

    kind, basis = _observation_layout(mode)
    if not config.is_auto('observables', 'kind'):
        kind = config.get_choice('observables', 'kind', OBSERVATION_KINDS)
    if not config.is_auto('observables', 'basis'):
        basis = config.get_choice('observables', 'basis', BASIS_KINDS)
    config.set('observables', 'kind', kind)
    config.set('observables', 'basis', basis)

    if config.is_auto('dynamics', 'dt_s'):
        dt = min(Config.MAX_DT, Config.AUTO_NUDGING_STEP / mu)
    else:
        dt = config.get_float('dynamics', 'dt_s', positive=True)
    if config.is_auto('dynamics', 't_spinup_s'):
        t_spinup = default_spinup(nu, grid)
    else:
        t_spinup = config.get_float('dynamics', 't_spinup_s', positive=True)
    config.set('dynamics', 'dt_s', dt)
    config.set('dynamics', 't_spinup_s', t_spinup)

    solver = SolverConfig(
        nu=nu, forcing=forcing, dt=dt, t_spinup=t_spinup,
        scheme=config.get_choice('dynamics', 'scheme', SCHEMES),
        cfl_limit=config.get_float('dynamics', 'cfl_limit', positive=True),
    )

    pending = config.is_auto('noise', 'sigma2_m2_per_s')
    sigma2 = 0.0 if pending else config.get_float('noise', 'sigma2_m2_per_s', positive=True, allow_zero=True)
    seed = config.get_int('harness', 'seed', minimum=0)
    noise = NoiseModel(sigma2, 2 * (K * q) ** 2, seed)
    assimilation = AssimilationConfig(
        mu=mu, K=K, noise=noise, basis_kind=basis, observation_kind=kind,
        cadence=config.get_int('observables', 'cadence', minimum=1),
        oversample=q,
        node_placement=config.get('observables', 'node_placement'),
        node_seed=config.get_int('observables', 'node_seed', minimum=0),
        points_per_square=config.get_int('observables', 'points_per_square', minimum=1),
        construction_oversample=config.get_int('observables', 'construction_oversample', minimum=1),
    )
    logger.info(f"Setup resolved: G={G:.4g}, mu={mu:.4g}, K={K}, q={q}, dt={dt:.4g}, basis={basis}, kind={kind}")
    return ExperimentSetup(solver, assimilation, constants, selection, sigma2_pending=pending)


def build_experiment(config: Config, setup: ExperimentSetup, pipeline: ObservationPipeline,
                     reference_energy: Optional[float] = None) -> ExperimentConfig:
    """
    Complete the setup into an ExperimentConfig once the reference energy is known.

    An auto sigma2 is chosen so that mu trace[Q] is target_fraction of |U|_H^2.
    """
    acfg = setup.assimilation
    if setup.sigma2_pending:
        if reference_energy is None:
            raise config.error('noise', 'sigma2_m2_per_s', "auto needs the reference energy")
        fraction = config.get_float('noise', 'target_fraction', positive=True)
        sigma2 = noise_for_target(pipeline, acfg.mu, reference_energy, fraction)
        # the pipeline shares this config object
        acfg.noise = NoiseModel(sigma2, acfg.noise.D, acfg.noise.seed)
        setup.sigma2_pending = False
        config.set('noise', 'sigma2_m2_per_s', sigma2)
        logger.info(f"Noise intensity sigma2={sigma2:.4g} from target fraction {fraction:g}")

    t_run = (Config.RUN_TIMES / acfg.mu if config.is_auto('harness', 't_run_s')
             else config.get_float('harness', 't_run_s', positive=True))
    t_avg = (Config.AVERAGE_TIMES / acfg.mu if config.is_auto('harness', 't_avg_s')
             else config.get_float('harness', 't_avg_s', positive=True))
    config.set('harness', 't_run_s', t_run)
    config.set('harness', 't_avg_s', t_avg)
    if not t_run > t_avg:
        raise config.error('harness', 't_avg_s', f"must be shorter than t_run_s={t_run!r}")

    return ExperimentConfig(
        solver=setup.solver,
        assimilation=acfg,
        members=config.get_int('harness', 'members', minimum=1),
        t_run=t_run,
        t_avg=t_avg,
        bound_mode=config.get('harness', 'bound'),
        epsilon=config.get_float('harness', 'epsilon', positive=True),
        perturbation_ratio=config.get_float('harness', 'perturbation_ratio', positive=True, allow_zero=True),
        seed=config.get_int('harness', 'seed', minimum=0),
        workers=config.get_int('harness', 'workers', minimum=1),
        record_every=config.get_int('harness', 'record_every', minimum=1),
        zero_noise_tolerance=config.get_float('harness', 'zero_noise_tolerance', positive=True),
    )
