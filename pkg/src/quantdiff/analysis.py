"""Diagnostics: per-timestep quantization error, activation ranges, sample quality.

These reproduce the measurement methodology at desk scale: trajectory
divergence curves over the sampler plan, per-(layer, step) activation range
profiles, and an energy-distance + mode-coverage quality proxy in place of
image-space metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .calibration import CalibOptConfig, run_calibration
from .datasets import gmm8_centers
from .diffusion import NoiseSchedule, SamplerPlan, ddim_sample
from .errors import ParameterError
from .network import ForwardRecord, NoisePredictor, model_forward
from .quantizer import QuantConfig, QuantizedModel
from .rng import Rng

MSE_CURVE_BATCH = 64       # matches the reference measurement batch
PROFILE_BATCH = 1000       # trajectories used for activation profiling
EVAL_SAMPLES = 1024
EVAL_REFERENCE = 4096


@dataclass
class TimestepErrorCurve:
    """MSE between full-precision and quantized evaluation, per sampler step."""

    steps: np.ndarray  # 1..T_sample
    ts: np.ndarray     # diffusion timestep per row
    mse: np.ndarray
    mode: str          # "open" | "closed"

    def __len__(self) -> int:
        return int(self.steps.size)


def per_timestep_mse(fp_model: NoisePredictor, qm: QuantizedModel, schedule: NoiseSchedule,
                     plan: SamplerPlan, batch: int, rng: Rng, mode: str = "closed") -> TimestepErrorCurve:
    """Quantization error across denoising steps.

    closed: run both models' trajectories from identical noise and measure
    state divergence after each step (captures error accumulation). open: run
    one FP trajectory and compare both models' noise predictions on the same
    FP states (isolates per-step output error).
    """
    if qm.base.data_dim != fp_model.data_dim or len(qm.base.layers()) != len(fp_model.layers()):
        raise ParameterError("models do not share a topology")
    S = plan.n_steps
    steps = np.arange(1, S + 1, dtype=np.int64)
    if mode == "closed":
        traj_fp = ddim_sample(fp_model, schedule, plan, batch, rng, record=True)
        traj_q = ddim_sample(qm, schedule, plan, batch, rng, record=True)
        xs_fp = traj_fp.xs[1:] + [traj_fp.final_sample]
        xs_q = traj_q.xs[1:] + [traj_q.final_sample]
        ts = np.concatenate([plan.steps[1:], [0]])
        mse = np.array([float(np.mean((a - b) ** 2)) for a, b in zip(xs_fp, xs_q)])
    elif mode == "open":
        traj = ddim_sample(fp_model, schedule, plan, batch, rng, record=True)
        ts = plan.steps.copy()
        mse = np.zeros(S)
        for j, (t, x) in enumerate(traj.states):
            e_fp = model_forward(fp_model, x, t)
            e_q = qm.predict(x, t)
            mse[j] = float(np.mean((e_fp - e_q) ** 2))
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    return TimestepErrorCurve(steps, np.asarray(ts, dtype=np.int64), mse, mode)


@dataclass
class ActivationProfile:
    """min/p1/p99/max of each layer's post-activation output per sampler step."""

    layers: list[str]
    steps: np.ndarray                # diffusion timesteps profiled, decreasing
    stats: np.ndarray                # (n_layers, n_steps, 4) float32: min,p1,p99,max

    def layer_aggregate(self, name: str) -> np.ndarray:
        """Per-layer stats averaged across all time steps."""
        return self.stats[self.layers.index(name)].mean(axis=0)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ActivationProfile)
                and self.layers == other.layers
                and np.array_equal(self.steps, other.steps)
                and np.array_equal(self.stats, other.stats))


def activation_profile(model, schedule: NoiseSchedule, plan: SamplerPlan,
                       batch: int, rng: Rng) -> ActivationProfile:
    """Range statistics of every quantizable layer's output across time steps.

    Runs a recorded sampling pass, then re-evaluates each recorded state with
    activation capture and summarizes each layer's post-activation values
    over the batch.
    """
    base = model.base if isinstance(model, QuantizedModel) else model
    names = list(base.layers())
    traj = ddim_sample(model, schedule, plan, batch, rng, record=True)
    stats = np.zeros((len(names), len(traj.ts), 4), dtype=np.float32)
    for j, (t, x) in enumerate(traj.states):
        rec = ForwardRecord()
        if isinstance(model, QuantizedModel):
            model.forward(x, t, record=rec)
        else:
            model_forward(model, x, t, record=rec)
        for li, name in enumerate(names):
            vals = rec.layer_post[name].ravel()
            p1, p99 = np.percentile(vals, [1.0, 99.0])
            stats[li, j] = (vals.min(), p1, p99, vals.max())
    return ActivationProfile(names, np.asarray(traj.ts, dtype=np.int64), stats)


def _mean_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for lo in range(0, a.shape[0], chunk):
        total += float(cdist(a[lo:lo + chunk], b).sum())
    return total / (a.shape[0] * b.shape[0])


def _mean_within(a: np.ndarray, chunk: int = 1024) -> float:
    n = a.shape[0]
    total = 0.0
    for lo in range(0, n, chunk):
        total += float(cdist(a[lo:lo + chunk], a).sum())
    return total / (n * n)


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E||x-y|| - E||x-x'|| - E||y-y'|| over all pairs.

    All three terms are all-pairs means (the V-statistic): the cross term is
    the unbiased pairwise estimator, and this convention is what makes the
    estimate nonnegative and exactly zero on identical multisets.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ParameterError("point sets must be 2-D arrays of equal dimension")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ParameterError("point sets must be nonempty")
    return 2.0 * _mean_pairwise(a, b) - _mean_within(a) - _mean_within(b)


def mode_coverage(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Fraction of samples nearest each center; sums to 1."""
    d = cdist(samples, centers)
    nearest = np.argmin(d, axis=1)
    return np.bincount(nearest, minlength=centers.shape[0]) / samples.shape[0]


@dataclass
class QualityReport:
    """Sample-quality proxy: energy distance plus per-mode coverage."""

    energy_distance: float
    coverage: Optional[np.ndarray]
    n_samples: int


def quality_report(samples: np.ndarray, reference: np.ndarray,
                   centers: Optional[np.ndarray] = None) -> QualityReport:
    cov = mode_coverage(samples, centers) if centers is not None else None
    return QualityReport(energy_distance(samples, reference), cov, samples.shape[0])


@dataclass
class StrategyResult:
    strategy: str
    bits_w: int
    bits_a: int
    report: QualityReport
    curve: TimestepErrorCurve


def compare_strategies(fp_model: NoisePredictor, schedule: NoiseSchedule, plan: SamplerPlan,
                       config: QuantConfig, reference: np.ndarray, rng: Rng,
                       c: int = 5, n: int = 256, opt: Optional[CalibOptConfig] = None,
                       n_samples: int = EVAL_SAMPLES) -> list[StrategyResult]:
    """Calibrate 4-bit weights three ways and evaluate each the same way.

    Strategies: no calibration (min-max scales), single-step (all calibration
    data from the first denoising iteration), and the uniform-interval
    default. Activations are bypassed, mirroring the weight-only comparison.
    Sampling noise and the reference set are shared across strategies so the
    comparison is paired.
    """
    config = replace(config, bits_w=4, bits_a=32)
    centers = gmm8_centers()
    eval_rng = rng.substream(100)
    curve_rng = rng.substream(101)
    results = []
    for k, strategy in enumerate(("none", "single_step", "uniform")):
        qm, _ = run_calibration(fp_model, schedule, plan, config, c, n,
                                rng.substream(k), opt=opt, strategy=strategy)
        samples = ddim_sample(qm, schedule, plan, n_samples, eval_rng).final_sample
        report = quality_report(samples, reference, centers)
        curve = per_timestep_mse(fp_model, qm, schedule, plan, MSE_CURVE_BATCH,
                                 curve_rng, mode="closed")
        results.append(StrategyResult(strategy, config.bits_w, config.bits_a, report, curve))
    return results


def spearman_rank(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
