"""Noise schedule, forward process, training loss, and the DDIM-style sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ParameterError, SamplingError, ShapeError, TrainingError
from .network import NoisePredictor, model_forward
from .optim import Adam
from .rng import Rng, normal_for_keys

# Substream layout for sampling operations (see docs/rng.md).
_INIT_STREAM = 0   # x_T draws, one substream per sample index
_STEP_STREAM = 1   # per-iteration noise when eta > 0

DEFAULT_T_TRAIN = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_T_SAMPLE = 100


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process schedule: betas and the arrays derived from them.

    All arrays are float64 and 0-indexed by t-1 for t in 1..T_train.
    posterior_vars[0] is exactly 0 (the final denoising step is noiseless).
    """

    T_train: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative alpha at timestep t, with the t=0 convention of 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bars[np.maximum(t, 1) - 1], 1.0)

    @property
    def is_converged(self) -> bool:
        """Whether the forward process ends close to an isotropic Gaussian."""
        return bool(self.alpha_bars[-1] < 0.01)


def make_linear_schedule(T_train: int, beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly interpolated betas, inclusive of both endpoints."""
    if T_train < 2:
        raise ParameterError(f"T_train must be >= 2, got {T_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_vars = (1.0 - prev_bars) / (1.0 - alpha_bars) * betas
    sched = NoiseSchedule(T_train, betas, alphas, alpha_bars, posterior_vars)
    if not np.all(np.diff(alpha_bars) < 0):
        raise ParameterError("alpha_bar must be strictly decreasing")
    return sched


@dataclass(frozen=True)
class SamplerPlan:
    """Deployed denoising plan: a decreasing subsequence of {1..T_train}."""

    steps: np.ndarray  # int64, steps[0] = T_train, steps[-1] = 1
    eta: float = 0.0

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        object.__setattr__(self, "steps", steps)
        if steps.size < 2:
            raise ParameterError("plan needs at least 2 steps")
        if not np.all(np.diff(steps) < 0):
            raise ParameterError("plan steps must be strictly decreasing")
        if steps[-1] != 1:
            raise ParameterError("plan must end at t=1")

    @property
    def n_steps(self) -> int:
        return int(self.steps.size)


def make_plan(schedule: NoiseSchedule, T_sample: int = DEFAULT_T_SAMPLE, eta: float = 0.0) -> SamplerPlan:
    """T_sample steps spaced uniformly from T_train down to 1."""
    if not 2 <= T_sample <= schedule.T_train:
        raise ParameterError(f"T_sample must be in [2, {schedule.T_train}], got {T_sample}")
    steps = np.rint(np.linspace(schedule.T_train, 1, T_sample)).astype(np.int64)
    if np.any(np.diff(steps) >= 0):
        raise ParameterError(f"T_sample={T_sample} does not round to distinct steps")
    return SamplerPlan(steps, eta)


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray):
    """Forward-process draw: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps; t may be per-sample."""
    x0v, epsv = ad.value_of(x0), ad.value_of(eps)
    if x0v.shape != epsv.shape:
        raise ShapeError(f"x0 {x0v.shape} and eps {epsv.shape} differ")
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 1) or np.any(t > schedule.T_train):
        raise ParameterError(f"t out of range 1..{schedule.T_train}")
    ab = schedule.alpha_bars[t - 1]
    c0 = np.sqrt(ab).astype(x0v.dtype)[:, None] if x0v.ndim == 2 else np.sqrt(ab).astype(x0v.dtype)
    c1 = np.sqrt(1.0 - ab).astype(x0v.dtype)[:, None] if x0v.ndim == 2 else np.sqrt(1.0 - ab).astype(x0v.dtype)
    return ad.add(ad.mul(x0, c0), ad.mul(eps, c1))


def noise_loss(schedule: NoiseSchedule, model: NoisePredictor, x0, t, eps, params=None):
    """Mean squared noise-prediction error for fixed (t, eps) draws.

    Pure in (params, x0, t, eps); pass params as autodiff Vars to get a taped
    loss (this is the function the gradient checks differentiate).
    """
    x_t = q_sample(schedule, x0, t, eps)
    pred = model_forward(model, x_t, t, params=params)
    return ad.mean_sq_norm(eps, pred)


def simple_loss(schedule: NoiseSchedule, model: NoisePredictor, x0_batch: np.ndarray, rng: Rng):
    """Draw t ~ U{1..T} and eps per sample, return (loss, gradient dict)."""
    if x0_batch.shape[0] == 0:
        raise ParameterError("empty batch")
    t = rng.integers(1, schedule.T_train + 1, (x0_batch.shape[0],))
    eps = rng.normal(x0_batch.shape, dtype=x0_batch.dtype)
    leaves = {name: (ad.Var(layer.w), ad.Var(layer.b)) for name, layer in model.layers().items()}
    params = {name: pair for name, pair in leaves.items()}
    loss = noise_loss(schedule, model, x0_batch, t, eps, params=params)
    ad.backward(loss)
    grads = {}
    for name, (wv, bv) in leaves.items():
        grads[f"{name}.w"] = wv.grad if wv.grad is not None else np.zeros_like(wv.value)
        grads[f"{name}.b"] = bv.grad if bv.grad is not None else np.zeros_like(bv.value)
    return float(loss.value), grads


def train(model: NoisePredictor, dataset: np.ndarray, schedule: NoiseSchedule, rng: Rng,
          steps: int = 20000, lr: float = 1e-3, batch: int = 512):
    """Train a copy of ``model`` on the noise-prediction objective.

    Step i draws its batch indices, timesteps and noise from rng.substream(i),
    in that order, so runs are reproducible bit for bit. Returns the trained
    model and the per-step loss curve.
    """
    if dataset.shape[0] == 0:
        raise ParameterError("empty dataset")
    model = model.copy()
    params = {key: arr.copy() for key, arr in model.param_items()}
    model.set_params(params)
    opt = Adam(lr)
    losses = np.zeros(steps, dtype=np.float64)
    for i in range(steps):
        sub = rng.substream(i)
        idx = sub.integers(0, dataset.shape[0], (batch,))
        loss, grads = simple_loss(schedule, model, dataset[idx], sub)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {i}")
        opt.step(params, grads)
        losses[i] = loss
    return model, losses


def moving_average(x: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter prefix averaged over what exists)."""
    c = np.cumsum(np.concatenate([[0.0], x]))
    n = np.arange(1, x.size + 1)
    lo = np.maximum(n - window, 0)
    return (c[n] - c[lo]) / (n - lo)


@dataclass
class Trajectory:
    """Recorded reverse-diffusion states, noise end first.

    states[j] = (t, x) is the model input of iteration j+1; final_sample is
    the x0 estimate after the last iteration.
    """

    ts: list = field(default_factory=list)
    xs: list = field(default_factory=list)
    final_sample: Optional[np.ndarray] = None

    def append(self, t: int, x: np.ndarray) -> None:
        self.ts.append(int(t))
        self.xs.append(x)

    @property
    def states(self):
        return list(zip(self.ts, self.xs))


def _predict_fn(model):
    if isinstance(model, NoisePredictor):
        return lambda x, t: model_forward(model, x, t)
    if hasattr(model, "predict"):
        return model.predict
    raise ParameterError(f"cannot sample from {type(model).__name__}")


def ddim_sample(model, schedule: NoiseSchedule, plan: SamplerPlan, batch: int, rng: Rng,
                record: bool = False, start: tuple[int, np.ndarray] | None = None) -> Trajectory:
    """Reverse-process sampling over the plan's steps.

    With eta = 0 the result is a deterministic function of (model, x_T); with
    eta > 0 each iteration adds noise scaled by eta*sqrt(posterior_var(t)),
    except the final step which is always noiseless. ``start=(t, x)`` resumes
    from a recorded state at plan step t (same seed and batch layout
    reproduce the remaining trajectory exactly).
    """
    predict = _predict_fn(model)
    steps = plan.steps
    if start is None:
        pos = 0
        keys = rng.substream(_INIT_STREAM).substream_keys(batch)
        x = normal_for_keys(keys, 2).astype(np.float32)
    else:
        t0, x = start
        matches = np.nonzero(steps == int(t0))[0]
        if matches.size == 0:
            raise ParameterError(f"start timestep {t0} is not in the plan")
        pos = int(matches[0])
        x = np.asarray(x, dtype=np.float32)
        if x.shape[0] != batch:
            raise ShapeError(f"start state batch {x.shape[0]} != {batch}")

    traj = Trajectory()
    step_rng = rng.substream(_STEP_STREAM)
    for j in range(pos, steps.size):
        t = int(steps[j])
        if record:
            traj.append(t, x.copy())
        try:
            eps = ad.value_of(predict(x, t))
        except NumericError as exc:
            raise SamplingError(f"non-finite prediction at iteration {j + 1} (t={t}): {exc}") from exc
        if not np.all(np.isfinite(eps)):
            raise SamplingError(f"non-finite prediction at iteration {j + 1} (t={t})")
        t_prev = int(steps[j + 1]) if j + 1 < steps.size else 0
        ab_t = float(schedule.alpha_bars[t - 1])
        ab_prev = float(schedule.alpha_bar(t_prev))
        x0_hat = (x - np.float32(np.sqrt(1.0 - ab_t)) * eps) / np.float32(np.sqrt(ab_t))
        final = j + 1 == steps.size
        sigma = 0.0 if final or plan.eta == 0.0 else plan.eta * float(np.sqrt(schedule.posterior_vars[t - 1]))
        dir_coef = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
        x = np.float32(np.sqrt(ab_prev)) * x0_hat + np.float32(dir_coef) * eps
        if sigma > 0.0:
            keys = step_rng.substream(j + 1).substream_keys(batch)
            x = x + np.float32(sigma) * normal_for_keys(keys, 2).astype(np.float32)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after iteration {j + 1} (t={t})")
    traj.final_sample = x
    return traj
