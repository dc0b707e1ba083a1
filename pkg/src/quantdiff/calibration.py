"""Timestep-aware calibration: set construction and block-wise reconstruction.

The calibration set is built by running full-precision denoising trajectories
and recording the model inputs every c-th sampler iteration. Weight
quantizers are then reconstructed block by block (adaptive rounding over a
continuous relaxation, jointly with log-parameterized scales) against the
full-precision block outputs, with block inputs taken from the
already-quantized prefix of the network. Activation step sizes are learned
last, per block, with the straight-through estimator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, SamplerPlan, ddim_sample
from .errors import CalibrationError, ParameterError
from .network import Affine, ForwardRecord, NoisePredictor, model_forward
from .optim import Adam
from .quantizer import (GAMMA, ZETA, QuantConfig, QuantizedModel, QuantizerParams,
                        init_act_quantizer, quantize_dequantize, quantize_model,
                        round_half_away)
from .rng import Rng

_HARD_V = 3.0  # |V| at which h saturates to exactly 0/1 in both soft and hard mode


@dataclass
class CalibrationSample:
    x: np.ndarray
    t: int
    condition: Optional[np.ndarray] = None  # reserved for conditional models


@dataclass
class CalibrationSet:
    """Intermediate denoising inputs (x, t) plus provenance metadata."""

    xs: np.ndarray  # (N, dim) float32
    ts: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.xs.shape[0])

    def sample(self, i: int) -> CalibrationSample:
        return CalibrationSample(self.xs[i], int(self.ts[i]))

    def split(self, holdout_frac: float = 0.1) -> tuple["CalibrationSet", "CalibrationSet"]:
        """Deterministic train/holdout split of the (already shuffled) set."""
        n_hold = int(len(self) * holdout_frac)
        cut = len(self) - n_hold
        return (CalibrationSet(self.xs[:cut], self.ts[:cut], self.meta),
                CalibrationSet(self.xs[cut:], self.ts[cut:], self.meta))


def build_calibration_set(fp_model: NoisePredictor, schedule: NoiseSchedule, plan: SamplerPlan,
                          c: int, n: int, rng: Rng, iterations: Optional[list[int]] = None,
                          single_trajectory: bool = False) -> CalibrationSet:
    """Sample n trajectories and record their model inputs every c-th iteration.

    Iteration indices are 1-based from the noise end; index i is recorded when
    i mod c == 0, so N = n * floor(T_sample / c). ``iterations`` overrides the
    recorded index set (used by the single-step strategy, which records only
    iteration 1, i.e. pure-noise inputs at t = T). The result is shuffled with
    a documented seeded permutation.
    """
    T_sample = plan.n_steps
    if iterations is None:
        if not 1 <= c <= T_sample:
            raise ParameterError(f"interval c must be in 1..{T_sample}, got {c}")
        iterations = [i for i in range(1, T_sample + 1) if i % c == 0]
    else:
        iterations = sorted({int(i) for i in iterations})
        if not iterations or iterations[0] < 1 or iterations[-1] > T_sample:
            raise ParameterError("explicit iterations must lie in 1..T_sample")
    if n < 1:
        raise ParameterError("per-step count n must be >= 1")
    if single_trajectory:
        n = 1

    traj = ddim_sample(fp_model, schedule, plan, batch=n, rng=rng.substream(0), record=True)
    xs, ts = [], []
    for i in iterations:
        t, x = traj.ts[i - 1], traj.xs[i - 1]
        xs.append(x)
        ts.append(np.full(n, t, dtype=np.int64))
    xs = np.concatenate(xs, axis=0)
    ts = np.concatenate(ts)
    perm = rng.substream(1).permutation(xs.shape[0])
    meta = {"T_sample": T_sample, "c": int(c), "n": n, "N": int(xs.shape[0]),
            "seed_key": rng.key, "iterations": iterations}
    return CalibrationSet(xs[perm], ts[perm], meta)


@dataclass(frozen=True)
class ReconstructionBlock:
    """A contiguous slice of the network calibrated jointly."""

    tag: str
    kind: str  # "residual" | "single-layer"
    layers: tuple[str, ...]


def partition_blocks(model: NoisePredictor) -> list[ReconstructionBlock]:
    """Group quantizable layers into reconstruction units, topologically ordered.

    Residual blocks become multi-layer units captured at the shortcut join;
    the input/output projections are single-layer units. The union of the
    units' layers is exactly the set of quantizable layers, disjointly.
    """
    blocks: list[ReconstructionBlock] = []
    by_tag: dict[str, list[str]] = {}
    for name in model.layers():
        by_tag.setdefault(model.block_tag(name), []).append(name)
    for tag, names in by_tag.items():
        kind = "residual" if len(names) > 1 else "single-layer"
        blocks.append(ReconstructionBlock(tag, kind, tuple(names)))
    return blocks


def unit_forward(model: NoisePredictor, block: ReconstructionBlock, x_in, emb,
                 weight_params: dict, act_fn: Optional[Callable] = None):
    """Standalone forward of one reconstruction unit given its captured input.

    ``weight_params`` maps layer name -> (w, b) (arrays or autodiff Vars);
    ``act_fn(name, x)`` hooks each layer input like in model_forward.
    """
    def apply(name: str, layer: Affine, inp):
        if act_fn is not None:
            inp = act_fn(name, inp)
        w, b = weight_params.get(name, (layer.w, layer.b))
        return ad.affine(inp, w, b)

    layers = model.layers()
    if block.kind == "single-layer":
        name = block.layers[0]
        return apply(name, layers[name], x_in)
    idx = int(block.tag.removeprefix("block"))
    blk = model.blocks[idx]
    a1 = ad.add(apply(f"{block.tag}.fc1", blk.fc1, x_in),
                apply(f"{block.tag}.time_proj", blk.time_proj, emb))
    z = ad.silu(a1)
    a2 = apply(f"{block.tag}.fc2", blk.fc2, z)
    if blk.shortcut is not None:
        sc = apply(f"{block.tag}.shortcut", blk.shortcut, x_in)
    else:
        sc = x_in
    return ad.add(sc, a2)


def collect_unit_io(model_like, D: CalibrationSet, tags: list[str], chunk: int = 2048):
    """Forward D through a model, returning per-unit inputs/outputs and embeddings.

    ``model_like`` is the FP model (targets) or a partially quantized model
    (prefix inputs); either way the captured tensors reflect that model's own
    forward, which is what the sequential reconstruction order requires.
    """
    inputs = {t: [] for t in tags}
    outputs = {t: [] for t in tags}
    embs = []
    for lo in range(0, len(D), chunk):
        xs, ts = D.xs[lo:lo + chunk], D.ts[lo:lo + chunk]
        rec = ForwardRecord()
        if isinstance(model_like, NoisePredictor):
            model_forward(model_like, xs, ts, record=rec)
        else:
            model_like.forward(xs, ts, record=rec)
        embs.append(rec.emb)
        for t in tags:
            inputs[t].append(rec.unit_inputs[t])
            outputs[t].append(rec.unit_outputs[t])
    return ({t: np.concatenate(v) for t, v in inputs.items()},
            {t: np.concatenate(v) for t, v in outputs.items()},
            np.concatenate(embs))


@dataclass
class CalibOptConfig:
    """Pinned optimizer defaults for block reconstruction."""

    iters: int = 5000
    batch: int = 64
    lr_v: float = 1e-3
    lr_s: float = 4e-5
    rounding_lambda: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup_frac: float = 0.2  # fraction of iters before the rounding loss kicks in
    n_checkpoints: int = 10
    holdout_frac: float = 0.1
    polish_limit: int = 64  # greedy flip polish only for blocks this small


def _v_from_fraction(frac: np.ndarray) -> np.ndarray:
    """Invert h(V) = frac so the relaxation starts at the raw weights."""
    p = np.clip((frac - GAMMA) / (ZETA - GAMMA), 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p)).astype(np.float32)


def _soft_h(v):
    return ad.clip(ad.add(ad.mul(ad.sigmoid(v), ZETA - GAMMA), GAMMA), 0.0, 1.0)


def adaround_weight_graph(w: np.ndarray, q: QuantizerParams, v_var, log_s_var):
    """Taped fake-quantized weight: exp(log_s) * clip(floor_frozen + h(V), c_min, c_max).

    The floor grid is evaluated at the *current* scale outside the tape, so
    the taped function is smooth and its exact gradient w.r.t. log_s equals
    the straight-through convention (zero through the floor).
    """
    s_now = np.exp(ad.value_of(log_s_var)).astype(w.dtype)
    s_col = s_now[:, None] if s_now.ndim == 1 else s_now
    floor0 = np.floor(w / s_col)
    s = ad.exp(log_s_var)
    if ad.value_of(log_s_var).ndim == 1:
        s = ad.reshape(s, (-1, 1))
    soft_q = ad.clip(ad.add(floor0, _soft_h(v_var)), q.c_min, q.c_max)
    return ad.mul(s, soft_q)


def act_quant_residual(x: np.ndarray, q: QuantizerParams, log_s: np.ndarray) -> np.ndarray:
    """Rounding residual round(u) - u of the clipped codes at a given scale.

    This is the straight-through part of the activation quantizer: it is
    recomputed between optimizer iterations but held constant inside each
    taped loss (and across the finite-difference stencil when grad-checking).
    """
    u0 = x / np.exp(log_s).astype(x.dtype) + x.dtype.type(float(q.zero_offset))
    u0c = np.clip(u0, q.c_min, q.c_max)
    return round_half_away(u0c) - u0c


def act_quant_graph(x, q: QuantizerParams, log_s_var, residual: Optional[np.ndarray] = None):
    """Taped activation fake-quant with the LSQ straight-through gradient.

    With the rounding residual entering as a constant, the surrogate's exact
    d/d(log s) is s*(round(u)-u) in range and s*(c_min/c_max - zero_offset)
    when clipped, and its d/dx is the clip mask. The forward value equals the
    production quantizer output when ``residual`` matches the current scale.
    """
    if residual is None:
        residual = act_quant_residual(ad.value_of(x), q, ad.value_of(log_s_var))
    dt = ad.value_of(x).dtype.type
    z = dt(float(q.zero_offset))
    s = ad.exp(log_s_var)
    inv_s = ad.exp(ad.mul(log_s_var, -1.0))
    u = ad.add(ad.mul(x, inv_s), z)
    return ad.mul(s, ad.add(ad.clip(u, q.c_min, q.c_max), residual - z))


def _hard_quantizer(q: QuantizerParams, log_s: np.ndarray, v: np.ndarray) -> QuantizerParams:
    out = q.with_scale(np.exp(log_s.astype(np.float64)).astype(np.float32))
    out.mode = "adaround"
    out.v = v.copy()
    out.hard = True
    out.active = True
    return out


def _block_hard_mse(model, block, state, x_in, emb, target) -> float:
    wparams = {}
    for name, st in state.items():
        layer = model.layers()[name]
        q = _hard_quantizer(st["q"], st["log_s"], st["v"])
        wparams[name] = (quantize_dequantize(layer.w, q), layer.b)
    out = ad.value_of(unit_forward(model, block, x_in, emb, wparams))
    return float(np.mean((out - target) ** 2))


def adaround_block_loss(model: NoisePredictor, block: ReconstructionBlock, state: dict,
                        x_in: np.ndarray, emb: np.ndarray, target: np.ndarray,
                        rounding_lambda: float = 0.0, beta: Optional[float] = None):
    """Taped reconstruction objective for one block.

    ``state`` maps layer name -> {"q", "v", "log_s"}; returns (loss Var,
    leaves) with leaves[name] = (V Var, log_s Var). The loss is the block
    output MSE against ``target`` plus, when beta is given, the rounding
    regularizer lambda * sum(1 - |2h - 1|^beta).
    """
    leaves = {}
    wparams = {}
    hs = []
    for name, st in state.items():
        layer = model.layers()[name]
        v_var, s_var = ad.Var(st["v"]), ad.Var(st["log_s"])
        leaves[name] = (v_var, s_var)
        h = _soft_h(v_var)
        hs.append(h)
        wparams[name] = (adaround_weight_graph(layer.w, st["q"], v_var, s_var), layer.b)
    out = unit_forward(model, block, x_in, emb, wparams)
    loss = ad.mean_sq_norm(out, target)
    if rounding_lambda > 0 and beta is not None:
        reg = None
        for h in hs:
            term = ad.total(ad.sub(1.0, ad.power(ad.absolute(ad.sub(ad.mul(h, 2.0), 1.0)), beta)))
            reg = term if reg is None else ad.add(reg, term)
        loss = ad.add(loss, ad.mul(reg, rounding_lambda))
    return loss, leaves


def step_size_block_loss(model: NoisePredictor, block: ReconstructionBlock, wparams: dict,
                         state: dict, x_in: np.ndarray, emb: np.ndarray, target: np.ndarray):
    """Taped step-size objective: block output MSE with learned activation scales.

    ``state`` maps layer name -> {"q", "log_s", optional "residual"} for the
    block's activation quantizers; weights enter as fixed arrays in
    ``wparams``. When "residual" is absent it is computed at the current
    scale (the per-iteration optimizer path).
    """
    leaves = {n: ad.Var(state[n]["log_s"]) for n in state}

    def act(name, x):
        if name not in state:
            return x
        return act_quant_graph(x, state[name]["q"], leaves[name], state[name].get("residual"))

    out = unit_forward(model, block, x_in, emb, wparams, act_fn=act)
    return ad.mean_sq_norm(out, target), leaves


def adaround_reconstruct_block(block: ReconstructionBlock, fp_model: NoisePredictor,
                               qm: QuantizedModel, D_train: CalibrationSet,
                               opt: CalibOptConfig, rng: Rng,
                               io: Optional[tuple] = None) -> list[float]:
    """Learn rounding offsets and scales for one block; returns the loss record.

    Block inputs come from the already-quantized prefix of the network (all
    earlier blocks calibrated and active); targets are the full-precision
    block outputs. Optimizes E||out_fp - out_q||^2 plus the rounding
    regularizer by Adam over V (lr_v) and log s (lr_s). Full-slice
    hard-rounding MSE is checkpointed (including the initial state, whose hard
    rounding equals nearest rounding) and the best checkpoint wins, so the
    recorded best-so-far curve is non-increasing and the final MSE never
    exceeds nearest rounding's. ``io`` = (inputs, embeddings, targets) skips
    the collection pass when the caller already has it.
    """
    if len(D_train) == 0:
        raise ParameterError("empty calibration set")
    if io is None:
        q_inputs, _, embs = collect_unit_io(qm, D_train, [block.tag])
        _, fp_outputs, _ = collect_unit_io(fp_model, D_train, [block.tag])
        io = (q_inputs[block.tag], embs, fp_outputs[block.tag])
    x_in, emb, target = io
    model = qm.base
    state: dict[str, dict] = {}
    for name in block.layers:
        q = qm.weight_q.get(name)
        if q is None:
            continue
        layer = model.layers()[name]
        s_col = q.scale[:, None] if q.scale.ndim == 1 else q.scale
        frac = layer.w / s_col - np.floor(layer.w / s_col)
        state[name] = {"q": q, "v": _v_from_fraction(frac), "log_s": q.log_scale.copy()}
    if not state:
        return []

    opt_v = Adam(opt.lr_v)
    opt_s = Adam(opt.lr_s)
    n_train = x_in.shape[0]
    every = max(opt.iters // opt.n_checkpoints, 1)
    warm_end = int(opt.iters * opt.warmup_frac)

    def checkpoint_mse() -> float:
        return _block_hard_mse(model, block, state, x_in, emb, target)

    best_mse = checkpoint_mse()
    best = {n: (st["v"].copy(), st["log_s"].copy()) for n, st in state.items()}
    curve = [best_mse]

    for it in range(opt.iters):
        idx = rng.integers(0, n_train, (opt.batch,))
        beta = None
        if opt.rounding_lambda > 0 and it >= warm_end and opt.iters > warm_end:
            frac_done = (it - warm_end) / max(opt.iters - warm_end, 1)
            beta = opt.beta_start + (opt.beta_end - opt.beta_start) * frac_done
        loss, leaves = adaround_block_loss(model, block, state, x_in[idx], emb[idx],
                                           target[idx], opt.rounding_lambda, beta)
        if not np.isfinite(float(loss.value)):
            raise CalibrationError(f"non-finite reconstruction loss in {block.tag}")
        ad.backward(loss)
        gv = {n: leaves[n][0].grad for n in state}
        gs = {n: leaves[n][1].grad for n in state}
        opt_v.step({n: st["v"] for n, st in state.items()},
                   {n: g if g is not None else np.zeros_like(state[n]["v"]) for n, g in gv.items()})
        opt_s.step({n: st["log_s"] for n, st in state.items()},
                   {n: g if g is not None else np.zeros_like(state[n]["log_s"]) for n, g in gs.items()})
        if (it + 1) % every == 0 or it + 1 == opt.iters:
            mse = checkpoint_mse()
            if mse < best_mse:
                best_mse = mse
                best = {n: (st["v"].copy(), st["log_s"].copy()) for n, st in state.items()}
            curve.append(best_mse)

    for name, (v, log_s) in best.items():
        state[name]["v"], state[name]["log_s"] = v, log_s

    n_vars = sum(st["v"].size for st in state.values())
    if n_vars <= opt.polish_limit:
        _greedy_flip_polish(model, block, state, x_in, emb, target)

    qm.invalidate()
    for name, st in state.items():
        st["v"] = np.where(st["v"] >= 0, _HARD_V, -_HARD_V).astype(np.float32)
        qm.weight_q[name] = _hard_quantizer(st["q"], st["log_s"], st["v"])
    qm.reconstruction_log.setdefault(block.tag, {})["weight"] = curve
    return curve


def _greedy_flip_polish(model, block, state, x_in, emb, target, max_passes: int = 10) -> None:
    """Flip individual rounding decisions while each flip strictly lowers MSE."""
    current = _block_hard_mse(model, block, state, x_in, emb, target)
    for _ in range(max_passes):
        improved = False
        for name, st in state.items():
            v = st["v"]
            flat = v.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = -_HARD_V if old >= 0 else _HARD_V
                trial = _block_hard_mse(model, block, state, x_in, emb, target)
                if trial < current - 1e-12:
                    current = trial
                    improved = True
                else:
                    flat[i] = old
        if not improved:
            break


def calibrate_activations(qm: QuantizedModel, fp_model: NoisePredictor, D: CalibrationSet,
                          opt: CalibOptConfig, rng: Rng,
                          observer: Optional[Callable] = None) -> None:
    """Initialize activation quantizers from D's ranges, then learn step sizes.

    Runs after weight calibration (which is never mutated here). Each block's
    step sizes are optimized on that block's output MSE with inputs from the
    already-activation-quantized prefix; full-slice MSE is checkpointed
    best-so-far, so the final per-block MSE never exceeds the min-max init.
    """
    if not qm.config.act_quant_enabled:
        warnings.warn("activation quantization disabled in config; nothing to calibrate")
        return
    D_train, _ = D.split(opt.holdout_frac)
    blocks = partition_blocks(qm.base)
    tags = [b.tag for b in blocks]

    # Ranges measured on the weight-quantized network, before any act quantizer.
    ranges: dict[str, tuple[float, float]] = {}
    for lo in range(0, len(D_train), 2048):
        rec = ForwardRecord()
        qm.forward(D_train.xs[lo:lo + 2048], D_train.ts[lo:lo + 2048], record=rec)
        for name, x in rec.layer_inputs.items():
            mn, mx = float(x.min()), float(x.max())
            if name in ranges:
                mn, mx = min(mn, ranges[name][0]), max(mx, ranges[name][1])
            ranges[name] = (mn, mx)
    for name in qm.base.layers():
        _, ba = qm.config.layer_bits(name)
        if ba is None:
            qm.act_q[name] = None
            continue
        q = init_act_quantizer(*ranges[name], ba)
        q.active = False
        qm.act_q[name] = q

    _, fp_targets, _ = collect_unit_io(fp_model, D_train, tags)
    for block in blocks:
        names = [n for n in block.layers if qm.act_q.get(n) is not None]
        for n in names:
            qm.act_q[n].active = True
        if not names:
            continue
        q_inputs, _, embs = collect_unit_io(qm, D_train, [block.tag])
        io = (q_inputs[block.tag], embs, fp_targets[block.tag])
        if observer is not None:
            observer("act", block.tag, io)
        curve = _learn_step_sizes(qm, block, names, io, opt, rng.substream(tags.index(block.tag)))
        qm.reconstruction_log.setdefault(block.tag, {})["act"] = curve


def _learn_step_sizes(qm: QuantizedModel, block: ReconstructionBlock, names: list[str],
                      io: tuple, opt: CalibOptConfig, rng: Rng) -> list[float]:
    x_in, emb, target = io
    model = qm.base
    wparams = {n: (qm.effective_weight(n), model.layers()[n].b) for n in block.layers}
    state = {n: {"q": qm.act_q[n], "log_s": qm.act_q[n].log_scale.copy()} for n in names}
    opt_s = Adam(opt.lr_s)

    def slice_mse(full: bool = True, idx=None) -> float:
        for n in names:
            qm.act_q[n].scale = np.asarray(np.exp(state[n]["log_s"].astype(np.float64)),
                                           dtype=np.float32)
        sel = slice(None) if full else idx
        act = lambda name, x: (quantize_dequantize(ad.value_of(x), qm.act_q[name])
                               if name in state else x)
        out = ad.value_of(unit_forward(model, block, x_in[sel], emb[sel], wparams, act_fn=act))
        return float(np.mean((out - target[sel]) ** 2))

    best_mse = slice_mse()
    best = {n: state[n]["log_s"].copy() for n in names}
    curve = [best_mse]
    every = max(opt.iters // opt.n_checkpoints, 1)
    n_train = x_in.shape[0]

    for it in range(opt.iters):
        idx = rng.integers(0, n_train, (opt.batch,))
        loss, leaves = step_size_block_loss(model, block, wparams, state,
                                            x_in[idx], emb[idx], target[idx])
        if not np.isfinite(float(loss.value)):
            raise CalibrationError(f"non-finite step-size loss in {block.tag}")
        ad.backward(loss)
        opt_s.step({n: state[n]["log_s"] for n in names},
                   {n: leaves[n].grad if leaves[n].grad is not None
                    else np.zeros_like(state[n]["log_s"]) for n in names})
        if (it + 1) % every == 0 or it + 1 == opt.iters:
            mse = slice_mse()
            if mse < best_mse:
                best_mse = mse
                best = {n: state[n]["log_s"].copy() for n in names}
            curve.append(best_mse)

    for n in names:
        qm.act_q[n].scale = np.asarray(np.exp(best[n].astype(np.float64)), dtype=np.float32)
    return curve


def run_calibration(fp_model: NoisePredictor, schedule: NoiseSchedule, plan: SamplerPlan,
                    config: QuantConfig, c: int, n: int, rng: Rng,
                    opt: Optional[CalibOptConfig] = None, strategy: str = "uniform",
                    observer: Optional[Callable] = None):
    """End-to-end calibration pipeline; returns (frozen QuantizedModel, CalibrationSet).

    uniform: build the cross-timestep calibration set, init weight scales by
    MSE search, reconstruct blocks sequentially, then learn activation step
    sizes if enabled. single_step: same, but every calibration sample is a
    pure-noise input from the first denoising iteration (t = T). none: plain
    min-max weight quantization with no calibration data.
    """
    if opt is None:
        opt = CalibOptConfig()
    if strategy == "none":
        qm = quantize_model(fp_model, config, scale_rule="minmax", active=True)
        if config.act_quant_enabled:
            warnings.warn("strategy 'none' has no calibration data; activations stay full precision")
        qm.freeze()
        return qm, None
    if strategy == "uniform":
        D = build_calibration_set(fp_model, schedule, plan, c, n, rng.substream(0))
    elif strategy == "single_step":
        n_total = n * (plan.n_steps // c)
        D = build_calibration_set(fp_model, schedule, plan, c, n_total, rng.substream(0),
                                  iterations=[1])
    else:
        raise ParameterError(f"unknown calibration strategy {strategy!r}")

    D_train, _ = D.split(opt.holdout_frac)
    qm = quantize_model(fp_model, config, scale_rule="mse", active=False)
    blocks = partition_blocks(qm.base)
    tags = [b.tag for b in blocks]
    _, fp_targets, _ = collect_unit_io(fp_model, D_train, tags)
    w_rng = rng.substream(1)
    for k, block in enumerate(blocks):
        if all(qm.weight_q.get(name) is None for name in block.layers):
            continue
        q_inputs, _, embs = collect_unit_io(qm, D_train, [block.tag])
        io = (q_inputs[block.tag], embs, fp_targets[block.tag])
        if observer is not None:
            observer("weight", block.tag, io)
        adaround_reconstruct_block(block, fp_model, qm, D_train, opt, w_rng.substream(k), io=io)
    if config.act_quant_enabled:
        calibrate_activations(qm, fp_model, D, opt, rng.substream(2), observer=observer)
    qm.freeze()
    return qm, D
