"""
Result files written by the command line: error series, reports, manifests and observation logs.
"""
import json
import logging
import math
import os
from typing import Any, Dict, Iterable, Tuple

import numpy as np
import pandas as pd

from .data_structures import AprioriReport, ErrorSeries, RunManifest, BoundReport

logger = logging.getLogger(__name__)

# enough digits to round-trip a double
FLOAT_FORMAT = '%.17g'


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _sanitize(value: Any) -> Any:
    # JSON has no infinities; vacuous thresholds are written as strings
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {key: _sanitize(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(item) for item in value]
    return value


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_json(path: str, payload: Dict[str, Any]) -> str:
    """Write a JSON document, converting numpy scalars and non-finite floats."""
    _ensure_parent(path)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_sanitize(json.loads(json.dumps(payload, default=_to_builtin))), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.debug(f"Wrote {path}")
    return path


def read_json(path: str) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_error_series(path: str, series: ErrorSeries) -> str:
    """Time series of ensemble means and standard errors of |v|_H^2, ||v||_V^2 and |Av|^2."""
    _ensure_parent(path)
    series.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"Wrote {path} ({len(series.times)} rows)")
    return path


def write_report(path: str, report: BoundReport, apriori: AprioriReport = None) -> str:
    payload = report.to_dict()
    if apriori is not None:
        payload['apriori'] = apriori.to_dict()
    return write_json(path, payload)


def write_manifest(path: str, manifest: RunManifest) -> str:
    return write_json(path, manifest.to_dict())


def observation_columns(D: int) -> list:
    return ['t'] + [f'v_{i}' for i in range(1, D + 1)]


def write_observation_log(path: str, times: np.ndarray, values: np.ndarray) -> str:
    """
    Write observation rows as CSV with header t, v_1, ..., v_D.

    Args:
        path: Destination file
        times: Observation times, one per row
        values: Array of shape (rows, D), interleaved (first, second) components per square

    Returns:
        The path written
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    times = np.asarray(times, dtype=float)
    if values.shape[0] != times.shape[0]:
        raise ValueError(f"{times.shape[0]} times for {values.shape[0]} observation rows")
    frame = pd.DataFrame(values, columns=observation_columns(values.shape[1])[1:])
    frame.insert(0, 't', times)
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {times.shape[0]} observation rows of width {values.shape[1]} to {path}")
    return path


def read_observation_log(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read an observation log written by write_observation_log or by hand.

    Returns:
        (times, values)

    Raises:
        FileNotFoundError: If the log does not exist
        ValueError: If the header is not t, v_1, ..., v_D or a value is not a number
    """
    frame = pd.read_csv(path, skipinitialspace=True)
    frame.columns = [str(column).strip() for column in frame.columns]
    expected = observation_columns(frame.shape[1] - 1)
    if list(frame.columns) != expected:
        raise ValueError(
            f"{path}: header must be 't, v_1, ..., v_D', got {', '.join(frame.columns[:4])}"
            f"{', ...' if frame.shape[1] > 4 else ''}"
        )
    try:
        data = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise ValueError(f"{path}: observation log holds non-numeric values ({e})")
    if not np.all(np.isfinite(data)):
        row = int(np.nonzero(~np.isfinite(data).all(axis=1))[0][0])
        raise ValueError(f"{path}:{row + 2}: observation log holds a non-finite value")
    return data[:, 0].copy(), data[:, 1:].copy()


def print_summary(title: str, rows: Iterable[Tuple[str, Any]]) -> None:
    """Boxed block of label/value lines."""
    print(f"\n{'=' * 60}")
    print(title)
    print(f"{'=' * 60}")
    for label, value in rows:
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{label:<28} {value}")
    print(f"{'=' * 60}")


def print_report(report: BoundReport) -> None:
    status = "✓" if report.passed else "✗"
    rows = [
        ('Bound mode', report.mode),
        ('Norm', report.norm),
        ('Observed (+2 SE)', report.observed_upper),
        ('Threshold', report.threshold),
        ('Margin', report.margin),
        ('Window average (+2 SE)', report.average_observed_upper),
        ('Window threshold', report.average_threshold),
        ('Asserted', report.asserted),
    ]
    print_summary(f"{status} BOUND CHECK {'PASSED' if report.passed else 'FAILED'}", rows)
    for note in report.notes:
        print(f"   • {note}")
