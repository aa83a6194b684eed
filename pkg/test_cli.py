import math
import os

import numpy as np
import pytest

from stochnudge.artifacts import read_json, read_observation_log, write_json, write_observation_log
from stochnudge.cli import build_parser, run
from stochnudge.config import Config, ConfigError, build_grid

TINY = """
[spectral]
modes_per_side = 16

[dynamics]
nu_m2_per_s = 0.05
grashof = 2
dt_s = 0.01
t_spinup_s = 0.5

[observables]
squares_per_side = 4

[noise]
sigma2_m2_per_s = 1e-6

[harness]
bound = explore
mu_per_s = {mu}
members = 2
t_run_s = 1.0
t_avg_s = 0.2

[constants]
C_L = 0.2
C_B = 0.5
c = 2.0
c2 = 0.0
c1_nodal = 0.2
"""


def write_config(tmp_path, text, name='run.ini'):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return str(path)


def tiny_config(tmp_path, mu=1.0):
    return write_config(tmp_path, TINY.format(mu=mu))


class TestConfig:
    """Defaults, the INI layer and line-anchored errors."""

    def test_defaults(self):
        config = Config()
        assert config.is_auto('harness', 'mu_per_s')
        assert config.get_int('spectral', 'modes_per_side') == Config.MODES_PER_SIDE
        assert config.get_float('constants', 'c1') == pytest.approx(1.0 / 6.0)
        assert config.get_pair('dynamics', 'forcing_shell') == (1.0, 2.0)

    def test_default_grid(self):
        assert Config.MODES_PER_SIDE == int(os.getenv('STOCHNUDGE_MODES_PER_SIDE', '128'))
        assert Config().get_int('spectral', 'modes_per_side') == Config.MODES_PER_SIDE

    def test_environment_defaults(self, monkeypatch):
        monkeypatch.setattr(Config, 'MEMBERS', 3)
        assert Config().get_int('harness', 'members') == 3

    def test_bad_value_names_line(self, tmp_path):
        path = write_config(tmp_path, "[spectral]\nmodes_per_side = 24\n")
        with pytest.raises(ConfigError, match=r'run\.ini:2: \[spectral\] modes_per_side: .*power of two'):
            build_grid(Config.load(path))

    def test_non_number(self, tmp_path):
        path = write_config(tmp_path, "[dynamics]\n\nnu_m2_per_s = fast\n")
        with pytest.raises(ConfigError, match=r':3: .*expected a number'):
            Config.load(path).get_float('dynamics', 'nu_m2_per_s')

    def test_unknown_key(self, tmp_path):
        path = write_config(tmp_path, "[harness]\nmember = 3\n")
        with pytest.raises(ConfigError, match=r":2: unknown key 'member' in \[harness\]"):
            Config.load(path)

    def test_unknown_section(self, tmp_path):
        path = write_config(tmp_path, "\n[solver]\nx = 1\n")
        with pytest.raises(ConfigError, match=r':2: unknown section \[solver\]'):
            Config.load(path)

    def test_missing_header(self, tmp_path):
        path = write_config(tmp_path, "members = 3\n")
        with pytest.raises(ConfigError, match=r':1: key outside of any \[section\]'):
            Config.load(path)

    def test_inline_comments(self, tmp_path):
        path = write_config(tmp_path, "[harness]\nmembers = 5  # small\n")
        assert Config.load(path).get_int('harness', 'members') == 5

    def test_dump_reads_back(self, tmp_path):
        config = Config()
        config.set('harness', 'members', 3)
        config.set('dynamics', 'dt_s', 0.1 + 0.2)
        path = config.dump(str(tmp_path / 'out' / 'config.ini'))
        loaded = Config.load(path)
        assert loaded.resolved() == config.resolved()
        assert loaded.get_float('dynamics', 'dt_s') == 0.1 + 0.2

    def test_set_unknown_key(self):
        with pytest.raises(KeyError):
            Config().set('harness', 'speed', 1)


class TestArtifacts:
    """Observation logs and JSON documents."""

    def test_log_header(self, tmp_path):
        path = tmp_path / 'obs.csv'
        path.write_text("time,v_1,v_2\n0.0,1.0,2.0\n", encoding='utf-8')
        with pytest.raises(ValueError, match="header must be 't, v_1, ..., v_D'"):
            read_observation_log(str(path))

    def test_log_non_finite(self, tmp_path):
        path = tmp_path / 'obs.csv'
        path.write_text("t, v_1, v_2\n0.0, 1.0, 2.0\n0.1, nan, 2.0\n", encoding='utf-8')
        with pytest.raises(ValueError, match=r'obs\.csv:3: .*non-finite'):
            read_observation_log(str(path))

    def test_log_values_read_back_exactly(self, tmp_path):
        rng = np.random.default_rng(3)
        times, values = np.arange(4) * 0.01, rng.standard_normal((4, 8))
        read_times, read_values = read_observation_log(write_observation_log(str(tmp_path / 'o.csv'), times, values))
        np.testing.assert_array_equal(read_times, times)
        np.testing.assert_array_equal(read_values, values)

    def test_json_non_finite(self, tmp_path):
        path = write_json(str(tmp_path / 'r.json'), {'threshold': math.inf, 'values': np.arange(2)})
        assert read_json(path) == {'threshold': 'inf', 'values': [0, 1]}


class TestCommandLine:
    """End-to-end invocations on a tiny grid."""

    def test_parser_defaults(self):
        args = build_parser().parse_args([])
        assert args.mode == 'ensemble'
        assert not args.resume

    def test_calibrate(self, tmp_path):
        config = write_config(tmp_path, "[spectral]\nmodes_per_side = 16\n\n[constants]\ncalibration_trials = 20\n")
        out = str(tmp_path / 'out')
        assert run(['--config', config, '--mode', 'calibrate', '--out', out, '--quiet']) == 0
        constants = read_json(os.path.join(out, 'constants.json'))
        assert constants['source'] == 'calibrated'
        assert constants['C_L'] > 0
        manifest = read_json(os.path.join(out, 'manifest.json'))
        assert manifest['mode'] == 'calibrate'
        assert manifest['constants']['C_L'] == constants['C_L']
        assert os.path.exists(os.path.join(out, 'config.ini'))

    def test_bad_config_exit_code(self, tmp_path, capsys):
        config = write_config(tmp_path, "[spectral]\nmodes_per_side = 24\n")
        assert run(['--config', config, '--quiet']) == 2
        assert 'run.ini:2:' in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert run(['--config', str(tmp_path / 'absent.ini'), '--quiet']) == 2
        assert 'absent.ini' in capsys.readouterr().err

    def test_step_limit_exit_code(self, tmp_path, capsys):
        assert run(['--config', tiny_config(tmp_path, mu=100.0), '--quiet', '--out', str(tmp_path)]) == 2
        assert 'exceeds 0.5' in capsys.readouterr().err

    def test_explore_ensemble(self, tmp_path):
        out = str(tmp_path / 'out')
        assert run(['--config', tiny_config(tmp_path), '--quiet', '--out', out]) == 0
        for name in ('error_series.csv', 'report.json', 'config.ini', 'manifest.json'):
            assert os.path.exists(os.path.join(out, name))
        report = read_json(os.path.join(out, 'report.json'))
        assert report['asserted'] is False
        manifest = read_json(os.path.join(out, 'manifest.json'))
        assert manifest['resolved_config']['harness']['members'] == '2'
        assert manifest['resolved_config']['observables']['basis'] == 'step'

    def test_resolved_config_reproduces_run(self, tmp_path):
        first, second = str(tmp_path / 'first'), str(tmp_path / 'second')
        assert run(['--config', tiny_config(tmp_path), '--quiet', '--out', first]) == 0
        assert run(['--config', os.path.join(first, 'config.ini'), '--quiet', '--out', second]) == 0
        with open(os.path.join(first, 'error_series.csv')) as a, open(os.path.join(second, 'error_series.csv')) as b:
            assert a.read() == b.read()

    def test_replay_matches_synthetic(self, tmp_path):
        config = tiny_config(tmp_path)
        recorded, replayed, synthetic = (str(tmp_path / name) for name in ('recorded', 'replayed', 'synthetic'))
        assert run(['--config', config, '--mode', 'reference', '--quiet', '--out', recorded]) in (0, 1)
        log = os.path.join(recorded, 'observations.csv')
        times, values = read_observation_log(log)
        assert values.shape == (100, 32)

        assert run(['--config', config, '--mode', 'assimilate', '--replay', log, '--quiet', '--out', replayed]) == 0
        assert run(['--config', config, '--mode', 'assimilate', '--quiet', '--out', synthetic]) == 0
        with open(os.path.join(replayed, 'error_series.csv')) as a, open(os.path.join(synthetic, 'error_series.csv')) as b:
            assert a.read() == b.read()

    def test_diagnostics(self, capsys):
        assert run(['--diagnostics']) == 0
        assert 'Diagnostic Results' in capsys.readouterr().out
