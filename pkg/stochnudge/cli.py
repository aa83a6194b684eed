"""
Command line: configuration, experiment execution, observation-log replay and artifacts.
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from . import __version__
from .artifacts import (
    print_report, print_summary, read_observation_log, write_error_series, write_json,
    write_manifest, write_observation_log, write_report,
)
from .calibration import verify_properties
from .config import Config, build_constants, build_experiment, build_grid, build_setup
from .data_structures import BOUND_MODES, RunManifest
from .dynamics import ObservationPipeline, save_checkpoint
from .environment import run_diagnostics, runtime_info
from .harness import (
    LoggedObservations, effective_traces, evaluate_bound, prepare_reference, record_reference,
    run_ensemble,
)
from .spectral import norm

logger = logging.getLogger(__name__)

MODES = ('reference', 'assimilate', 'ensemble', 'verify', 'calibrate')


def configure_logging(quiet: bool = False, verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=Config.LOG_FORMAT, force=True)


def build_parser() -> argparse.ArgumentParser:
    # Common arguments
    parent_parser = argparse.ArgumentParser(add_help=False)
    parent_parser.add_argument('--quiet', action='store_true', help='Reduce verbose output')
    parent_parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parent_parser.add_argument('--diagnostics', action='store_true', help='Check the environment and exit')

    parser = argparse.ArgumentParser(
        prog='stochnudge',
        parents=[parent_parser],
        description='Nudging data assimilation for 2D periodic Navier-Stokes with noisy observations',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Calibrate the absolute constants
  stochnudge --mode calibrate --out results/

  # Property suites of the spectral core, interpolants and noise
  stochnudge --mode verify

  # Ensemble check of the cor1 bound
  stochnudge --config configs/desk.ini --mode ensemble --bound cor1 --members 64

  # Record a reference observation log, then assimilate it
  stochnudge --config configs/desk.ini --mode reference --out obs/
  stochnudge --config configs/desk.ini --mode assimilate --replay obs/observations.csv

Environment Variables:
  STOCHNUDGE_OUTPUT_DIR          Default output directory (default: results)
  STOCHNUDGE_SEED                Default seed (default: 0)
  STOCHNUDGE_MEMBERS             Default ensemble size (default: 16)
  STOCHNUDGE_WORKERS             Default worker threads (default: 1)
  STOCHNUDGE_CALIBRATION_TRIALS  Random fields per calibration (default: 10000)
  STOCHNUDGE_MODES_PER_SIDE      Fourier modes per side (default: 128)
  STOCHNUDGE_MAX_DT              Largest auto time step (default: 0.01)
        """
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--config', default=None, help='INI configuration file')
    parser.add_argument('--mode', choices=MODES, default='ensemble', help='What to run (default: ensemble)')
    parser.add_argument('--seed', type=int, default=None, help='Seed of every random stream')
    parser.add_argument('--members', type=int, default=None, help='Ensemble size')
    parser.add_argument('--out', default=None, help='Output directory')
    parser.add_argument('--bound', choices=BOUND_MODES, default=None, help='Bound to check')
    parser.add_argument('--epsilon', type=float, default=None, help='Noise reduction target of oversampling modes')
    parser.add_argument('--replay', default=None, help='Observation-log CSV to assimilate instead of synthetic data')
    parser.add_argument('--workers', type=int, default=None, help='Threads advancing ensemble members')
    parser.add_argument('--resume', action='store_true', help='Resume an ensemble from its checkpoint')
    return parser


def apply_flags(config: Config, args: argparse.Namespace) -> None:
    config.override('harness', 'seed', args.seed)
    config.override('harness', 'members', args.members)
    config.override('harness', 'bound', args.bound)
    config.override('harness', 'epsilon', args.epsilon)
    config.override('harness', 'workers', args.workers)
    config.override('output', 'directory', args.out)
    config.override('replay', 'log_path', args.replay)
    if args.mode == 'assimilate':
        config.set('harness', 'members', 1)


class Run:
    """One invocation: holds the config, the output directory and the files written."""

    def __init__(self, config: Config, mode: str, quiet: bool = False, resume: bool = False):
        self.config = config
        self.mode = mode
        self.quiet = quiet
        self.resume = resume
        self.out_dir = config.get('output', 'directory') or '.'
        self.outputs: Dict[str, str] = {}
        self.warnings: List[str] = []
        self.constants: Dict = {}
        self._step = 0

    def say(self, message: str) -> None:
        if not self.quiet:
            print(message)

    def step(self, message: str) -> None:
        self._step += 1
        self.say(f"\n{self._step}. {message}")

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def record(self, key: str, path: str) -> None:
        self.outputs[key] = path
        self.say(f"   Wrote {path}")

    def finish(self) -> None:
        """Write the resolved config and the manifest."""
        self.record('config', self.config.dump(self.path('config.ini')))
        manifest = RunManifest(
            mode=self.mode,
            config_path=self.config.path,
            resolved_config=self.config.resolved(),
            seed=int(self.config.get('harness', 'seed')),
            version=__version__,
            constants=self.constants,
            outputs=dict(self.outputs),
            environment=runtime_info(),
            warnings=self.warnings,
        )
        self.record('manifest', write_manifest(self.path('manifest.json'), manifest))


def run_calibrate(run: Run) -> int:
    run.step("Calibrating constants...")
    grid = build_grid(run.config)
    constants = build_constants(run.config, grid, progress=not run.quiet)
    run.constants = constants.to_dict()
    run.record('constants', write_json(run.path('constants.json'), run.constants))
    if not run.quiet:
        print_summary("CALIBRATED CONSTANTS", [
            ('C_L', constants.C_L), ('C_B', constants.C_B), ('c', constants.c),
            ('c2', constants.c2), ('c1 (nodal)', constants.c1_nodal), ('source', constants.source),
        ])
    run.finish()
    return 0


def run_verify(run: Run) -> int:
    run.step("Running property suites...")
    grid = build_grid(run.config)
    report = verify_properties(grid)
    run.record('verification', write_json(run.path('verification.json'), report))
    if not run.quiet:
        sections = [('identities', report['identities']['passed']),
                    ('partition of unity', all(e['passed'] for e in report['partition_of_unity'])),
                    ('step interpolation constant', all(e['passed'] for e in report['approximation'])),
                    ('gradient constant across K', report['gradient_uniformity']['passed']),
                    ('nodal interpolation constants', all(e['passed'] for e in report['nodal_approximation'])),
                    ('noise traces', report['traces']['passed'])]
        print("\nVerification Results:")
        print("-" * 20)
        for name, passed in sections:
            print(f"{'✓' if passed else '✗'} {name}")
    run.finish()
    return 0 if report['passed'] else 1


def run_experiment(run: Run) -> int:
    config = run.config
    progress = not run.quiet

    run.step("Resolving configuration...")
    setup = build_setup(config, progress=progress)
    grid = setup.solver.grid
    run.say(f"   Grid M={grid.M}, mu={setup.assimilation.mu:.4g}, K={setup.assimilation.K}, "
            f"q={setup.assimilation.oversample}, dt={setup.solver.dt:.4g}")

    run.step("Spinning up reference...")
    seed = config.get_int('harness', 'seed', minimum=0)
    U0, apriori = prepare_reference(setup.solver, seed, progress)
    if not apriori.passed:
        run.warnings.append("reference violates the a-priori attractor bounds after spin-up")
        logger.warning(run.warnings[-1])
    run.say(f"   G={apriori.G:.4g}, |U|^2={apriori.energy:.4g} (bound {apriori.bound_energy:.4g})")

    pipeline = ObservationPipeline(grid, setup.assimilation)
    for warning in pipeline.warnings:
        run.warnings.append(warning)
        logger.warning(warning)
    experiment = build_experiment(config, setup, pipeline, reference_energy=norm(U0, 'H') ** 2)
    run.constants = setup.constants.to_dict(apriori.G)

    if run.mode == 'reference':
        run.step("Recording reference observations...")
        U_end, times, rows = record_reference(U0, experiment, pipeline, progress)
        run.record('observations', write_observation_log(run.path('observations.csv'), times, rows))
        path = run.path('reference.pkl')
        save_checkpoint(path, {'initial': U0, 'final': U_end}, experiment.t_run, experiment.n_steps)
        run.record('reference', path)
        run.record('apriori', write_json(run.path('apriori.json'), apriori.to_dict()))
        run.finish()
        return 0 if apriori.passed else 1

    observations = None
    log_path = config.get('replay', 'log_path')
    if log_path:
        run.step(f"Reading observation log {log_path}...")
        times, values = read_observation_log(log_path)
        acfg = experiment.assimilation
        observations = LoggedObservations(
            times, values, acfg.fine_K, acfg.observation_kind, experiment.solver.dt, acfg.cadence,
        )
        run.say(f"   Found {len(times)} observation rows")

    run.step(f"Running {experiment.members} member(s) for {experiment.n_steps} steps...")
    checkpoint_every = config.get_int('output', 'checkpoint_every', minimum=0)
    series = run_ensemble(
        experiment, U0, observations, pipeline, progress,
        checkpoint_path=run.path('checkpoint.pkl') if checkpoint_every else None,
        checkpoint_every=checkpoint_every, resume=run.resume,
    )
    run.record('error_series', write_error_series(run.path('error_series.csv'), series))

    run.step(f"Checking the {experiment.bound_mode} bound...")
    stats = effective_traces(pipeline, experiment.assimilation.noise.sigma2)
    report = evaluate_bound(series, experiment, stats, setup.constants, setup.selection)
    run.record('report', write_report(run.path('report.json'), report, apriori))
    run.finish()
    if not run.quiet:
        print_report(report)
    return 0 if report.passed else 1


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and execute; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.quiet, args.verbose)

    if args.diagnostics:
        return 0 if run_diagnostics() else 1

    try:
        config = Config.load(args.config) if args.config else Config()
        apply_flags(config, args)
        invocation = Run(config, args.mode, args.quiet, args.resume)
        if args.mode == 'calibrate':
            return run_calibrate(invocation)
        if args.mode == 'verify':
            return run_verify(invocation)
        return run_experiment(invocation)

    except (ValueError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.")
        return 130
    except Exception as e:
        print(f"Unexpected error: {str(e)}", file=sys.stderr)
        return 1


def main():
    """Main CLI entry point."""
    sys.exit(run())


if __name__ == '__main__':
    main()
