"""CSV emission/parsing for every table this package produces.

All schemas are part of the public contract (docs/formats.md). Floats are
written with repr-level precision so parsing a file reproduces the original
float32 values exactly.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile

import numpy as np

from .analysis import ActivationProfile, QualityReport, StrategyResult, TimestepErrorCurve
from .diffusion import Trajectory
from .errors import ParameterError

LOSS_HEADER = ["step", "loss", "loss_ma100"]
SAMPLES_HEADER = ["sample_id", "t", "dim0", "dim1"]
CURVE_HEADER = ["step", "t", "mse"]
PROFILE_HEADER = ["layer", "t", "min", "p1", "p99", "max"]
COMPARISON_HEADER = ["strategy", "bits_w", "bits_a", "energy_distance",
                     "mode_coverage_min", "final_mse"]
QUALITY_HEADER = ["energy_distance", "mode_coverage_min", "n_samples"]


def _f(x) -> str:
    return repr(float(np.float32(x)))


def write_csv(path: str, header: list[str], rows) -> None:
    """Atomic CSV write with exactly the documented header."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path: str, expect_header: list[str]) -> list[list[str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != expect_header:
        raise ParameterError(f"{path}: expected header {','.join(expect_header)}")
    return rows[1:]


def write_loss_csv(path: str, losses: np.ndarray, ma: np.ndarray) -> None:
    write_csv(path, LOSS_HEADER,
              ((i + 1, _f(l), _f(m)) for i, (l, m) in enumerate(zip(losses, ma))))


def write_samples_csv(path: str, samples: np.ndarray, t: int = 0) -> None:
    write_csv(path, SAMPLES_HEADER,
              ((i, t, _f(x[0]), _f(x[1])) for i, x in enumerate(samples)))


def write_trajectory_csv(path: str, traj: Trajectory) -> None:
    def rows():
        for t, xs in zip(traj.ts, traj.xs):
            for i, x in enumerate(xs):
                yield (i, t, _f(x[0]), _f(x[1]))
        for i, x in enumerate(traj.final_sample):
            yield (i, 0, _f(x[0]), _f(x[1]))

    write_csv(path, SAMPLES_HEADER, rows())


def read_samples_csv(path: str) -> np.ndarray:
    """Final-state points (t == 0 rows) from a sample/trajectory dump."""
    rows = _read(path, SAMPLES_HEADER)
    pts = [(float(r[2]), float(r[3])) for r in rows if int(r[1]) == 0]
    if not pts:
        raise ParameterError(f"{path}: no t=0 rows")
    return np.asarray(pts, dtype=np.float32)


def write_curve_csv(path: str, curve: TimestepErrorCurve) -> None:
    write_csv(path, CURVE_HEADER,
              ((int(s), int(t), _f(m)) for s, t, m in zip(curve.steps, curve.ts, curve.mse)))


def read_curve_csv(path: str, mode: str = "closed") -> TimestepErrorCurve:
    rows = _read(path, CURVE_HEADER)
    steps = np.array([int(r[0]) for r in rows], dtype=np.int64)
    ts = np.array([int(r[1]) for r in rows], dtype=np.int64)
    mse = np.array([float(r[2]) for r in rows])
    return TimestepErrorCurve(steps, ts, mse, mode)


def write_profile_csv(path: str, profile: ActivationProfile) -> None:
    def rows():
        for li, layer in enumerate(profile.layers):
            for sj, t in enumerate(profile.steps):
                mn, p1, p99, mx = profile.stats[li, sj]
                yield (layer, int(t), _f(mn), _f(p1), _f(p99), _f(mx))

    write_csv(path, PROFILE_HEADER, rows())


def read_profile_csv(path: str) -> ActivationProfile:
    rows = _read(path, PROFILE_HEADER)
    layers: list[str] = []
    steps: list[int] = []
    for layer, t, *_ in rows:
        if layer not in layers:
            layers.append(layer)
        if layer == layers[0]:
            steps.append(int(t))
    stats = np.zeros((len(layers), len(steps), 4), dtype=np.float32)
    for layer, t, mn, p1, p99, mx in rows:
        li = layers.index(layer)
        sj = steps.index(int(t))
        stats[li, sj] = (np.float32(float(mn)), np.float32(float(p1)),
                         np.float32(float(p99)), np.float32(float(mx)))
    return ActivationProfile(layers, np.asarray(steps, dtype=np.int64), stats)


def write_comparison_csv(path: str, results: list[StrategyResult]) -> None:
    write_csv(path, COMPARISON_HEADER,
              ((r.strategy, r.bits_w, r.bits_a, _f(r.report.energy_distance),
                _f(r.report.coverage.min()) if r.report.coverage is not None else "",
                _f(r.curve.mse[-1])) for r in results))


def write_quality_csv(path: str, report: QualityReport) -> None:
    cov = report.coverage
    header = QUALITY_HEADER + [f"coverage_{k}" for k in range(len(cov) if cov is not None else 0)]
    row = [_f(report.energy_distance),
           _f(cov.min()) if cov is not None else "", report.n_samples]
    if cov is not None:
        row += [_f(c) for c in cov]
    write_csv(path, header, [row])
