"""Uniform affine fake quantization for weights and activations.

Weights use symmetric signed integer grids (per output channel by default);
activations use an asymmetric unsigned grid with an integer zero offset,
shared across all time steps. Rounding is either nearest (half away from
zero) or adaptive: floor plus a learned per-element offset h(V) in [0, 1]
that collapses to {0, 1} after calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, StateError
from .network import ForwardRecord, NoisePredictor, model_forward

# Rectified-sigmoid bounds for the adaptive-rounding relaxation.
ZETA = 1.1
GAMMA = -0.1

BYPASS_BITS = 32  # "32-bit" configs mean quantizer bypass, not 32-bit grids


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (fixed tie-break)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass
class QuantizerParams:
    """State of one fake quantizer.

    ``scale`` has shape () for per-tensor grids or (out,) for per-channel
    weight grids. ``v`` holds the adaptive-rounding variables (same shape as
    the weight) when mode == "adaround"; ``hard`` collapses h(V) to {0, 1}.
    ``log_scale`` is the learned parameterization; ``scale`` mirrors exp of it.
    """

    bits: int
    scale: np.ndarray
    c_min: int
    c_max: int
    zero_offset: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=np.int64))
    mode: str = "nearest"
    v: Optional[np.ndarray] = None
    hard: bool = False
    active: bool = True

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float32)
        self.zero_offset = np.asarray(self.zero_offset, dtype=np.int64)
        if self.bits < 2:
            raise ParameterError(f"bits must be >= 2, got {self.bits}")
        if self.c_min >= self.c_max:
            raise ParameterError("c_min must be < c_max")
        if np.any(self.scale <= 0):
            raise ParameterError("scale must be positive")
        if self.mode not in ("nearest", "adaround"):
            raise ParameterError(f"unknown rounding mode {self.mode!r}")

    @property
    def log_scale(self) -> np.ndarray:
        # np.asarray keeps 0-d (per-tensor) scales as mutable arrays, not scalars
        return np.asarray(np.log(self.scale.astype(np.float64)), dtype=np.float32)

    def with_scale(self, scale: np.ndarray) -> "QuantizerParams":
        return replace(self, scale=np.asarray(scale, dtype=np.float32))


def symmetric_bounds(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _scale_col(p: QuantizerParams, w_shape) -> np.ndarray:
    """Scale broadcast-ready against an array of shape w_shape."""
    s = p.scale
    if s.ndim == 1 and len(w_shape) == 2:
        return s[:, None]
    return s


def rounding_offset(p: QuantizerParams) -> np.ndarray:
    """h(V) = clip(sigmoid(V)*(ZETA-GAMMA)+GAMMA, 0, 1); {0,1} once hard."""
    if p.v is None:
        raise StateError("adaround quantizer has no rounding variables")
    if p.hard:
        return (p.v >= 0).astype(np.float32)
    sig = ad.stable_sigmoid(p.v)
    return np.clip(sig * (ZETA - GAMMA) + GAMMA, 0.0, 1.0).astype(np.float32)


def quantize_dequantize(w: np.ndarray, p: QuantizerParams) -> np.ndarray:
    """Fake-quantize ``w`` on p's grid.

    nearest:  s * (clip(round(w/s + z), c_min, c_max) - z)
    adaround: s * clip(floor(w/s) + h(V), c_min, c_max)
    """
    w = np.asarray(w)
    s = _scale_col(p, w.shape).astype(w.dtype)
    if p.mode == "nearest":
        z = p.zero_offset.astype(w.dtype)
        q = np.clip(round_half_away(w / s + z), p.c_min, p.c_max)
        return (s * (q - z)).astype(w.dtype)
    if p.v is not None and p.v.shape != w.shape:
        raise ParameterError(f"rounding variables {p.v.shape} do not match weight {w.shape}")
    q = np.clip(np.floor(w / s) + rounding_offset(p).astype(w.dtype), p.c_min, p.c_max)
    return (s * q).astype(w.dtype)


def init_scale_minmax(w: np.ndarray, bits: int, granularity: str = "per_channel") -> QuantizerParams:
    """Symmetric scale from the absolute maximum: s = max|w| / c_max.

    All-zero channels get the documented sentinel scale 1.0.
    """
    if w.size == 0:
        raise ParameterError("cannot initialize a quantizer from an empty tensor")
    c_min, c_max = symmetric_bounds(bits)
    if granularity == "per_channel" and w.ndim == 2:
        amax = np.abs(w).max(axis=1)
    elif granularity in ("per_tensor", "per_channel"):
        amax = np.asarray(np.abs(w).max())
    else:
        raise ParameterError(f"unknown granularity {granularity!r}")
    scale = np.where(amax > 0, amax / c_max, 1.0).astype(np.float32)
    return QuantizerParams(bits=bits, scale=scale, c_min=c_min, c_max=c_max)


def init_scale_mse(w: np.ndarray, bits: int, granularity: str = "per_channel",
                   n_candidates: int = 80) -> QuantizerParams:
    """Scale search: candidates s_i = s_minmax*(1 - i/(2*n)), argmin round-trip MSE.

    Ties resolve to the smallest i (largest scale). n_candidates=1 reduces to
    the min-max rule.
    """
    if n_candidates < 1:
        raise ParameterError("n_candidates must be >= 1")
    base = init_scale_minmax(w, bits, granularity)
    best = base
    if base.scale.ndim == 0:
        best_err = np.asarray(float(np.sum((w - quantize_dequantize(w, base)) ** 2)))
    else:
        best_err = np.sum((w - quantize_dequantize(w, base)) ** 2, axis=1)
    best_scale = base.scale.copy()
    for i in range(1, n_candidates):
        cand = base.with_scale(base.scale * np.float32(1.0 - i / (2.0 * n_candidates)))
        if cand.scale.ndim == 0:
            err = np.asarray(float(np.sum((w - quantize_dequantize(w, cand)) ** 2)))
        else:
            err = np.sum((w - quantize_dequantize(w, cand)) ** 2, axis=1)
        improved = err < best_err
        best_err = np.where(improved, err, best_err)
        best_scale = np.where(improved, cand.scale, best_scale).astype(np.float32)
    return base.with_scale(best_scale)


def init_act_quantizer(x_min: float, x_max: float, bits: int) -> QuantizerParams:
    """Asymmetric unsigned activation grid covering [min, max], exact at 0."""
    c_min, c_max = 0, (1 << bits) - 1
    span = float(x_max) - float(x_min)
    scale = span / c_max if span > 0 else 1.0
    z = int(np.clip(round_half_away(np.asarray(-float(x_min) / scale)), c_min, c_max))
    return QuantizerParams(bits=bits, scale=np.asarray(scale, dtype=np.float32),
                           c_min=c_min, c_max=c_max,
                           zero_offset=np.asarray(z, dtype=np.int64))


@dataclass
class QuantConfig:
    """Bit widths, granularity, and per-layer overrides for a quantization run."""

    bits_w: int = 4
    bits_a: int = 8
    granularity_w: str = "per_channel"
    layer_overrides: dict = field(default_factory=dict)  # name -> int bits | "exempt"

    @property
    def weight_quant_enabled(self) -> bool:
        return self.bits_w != BYPASS_BITS

    @property
    def act_quant_enabled(self) -> bool:
        return self.bits_a != BYPASS_BITS

    def layer_bits(self, name: str) -> tuple[Optional[int], Optional[int]]:
        """(weight bits, activation bits) for a layer; None means bypass."""
        override = self.layer_overrides.get(name)
        if override == "exempt":
            return None, None
        bw = override if override is not None else self.bits_w
        ba = override if override is not None else self.bits_a
        return (None if bw == BYPASS_BITS else bw,
                None if ba == BYPASS_BITS else ba)

    def validate_overrides(self, model: NoisePredictor) -> None:
        known = set(model.layers())
        for name in self.layer_overrides:
            if name not in known:
                raise ParameterError(f"override references unknown layer {name!r}")


class QuantizedModel:
    """A frozen NoisePredictor executed through fake quantizers.

    Weight quantizers are per layer; activation quantizers apply to each
    quantizable layer's input and share one (scale, zero_offset) across all
    time steps. Exempted layers carry no quantizer. Forward evaluation is
    pure; mutation is limited to the calibration routines, which require
    exclusive access until ``freeze()``.
    """

    def __init__(self, base: NoisePredictor, config: QuantConfig,
                 weight_q: dict[str, Optional[QuantizerParams]],
                 act_q: dict[str, Optional[QuantizerParams]]):
        self.base = base
        self.config = config
        self.weight_q = weight_q
        self.act_q = act_q
        self.frozen = False
        self._w_cache: dict[str, np.ndarray] = {}
        self.reconstruction_log: dict[str, list] = {}

    @property
    def data_dim(self) -> int:
        return self.base.data_dim

    def invalidate(self) -> None:
        if self.frozen:
            raise StateError("cannot mutate a frozen QuantizedModel")
        self._w_cache.clear()

    def freeze(self) -> None:
        self.frozen = True

    def effective_weight(self, name: str) -> np.ndarray:
        layer = self.base.layers()[name]
        q = self.weight_q.get(name)
        if q is None or not q.active:
            return layer.w
        cached = self._w_cache.get(name)
        if cached is None:
            cached = quantize_dequantize(layer.w, q)
            self._w_cache[name] = cached
        return cached

    def quant_params(self) -> dict[str, tuple]:
        return {name: (self.effective_weight(name), layer.b)
                for name, layer in self.base.layers().items()}

    def _act_fn(self, name: str, x):
        q = self.act_q.get(name)
        if q is None or not q.active:
            return x
        return quantize_dequantize(ad.value_of(x), q)

    def forward(self, x, t, record: ForwardRecord | None = None) -> np.ndarray:
        for name, q in self.weight_q.items():
            if q is None and self.config.layer_bits(name)[0] is not None:
                raise StateError(f"weight quantizer for {name} not initialized")
        use_act = any(q is not None and q.active for q in self.act_q.values())
        return model_forward(self.base, x, t, params=self.quant_params(),
                             act_fn=self._act_fn if use_act else None, record=record)

    def predict(self, x, t) -> np.ndarray:
        return self.forward(x, t)


def quantize_model(model: NoisePredictor, config: QuantConfig, scale_rule: str = "minmax",
                   active: bool = True) -> QuantizedModel:
    """Wrap a model with initialized weight quantizers (no activation quantizers yet).

    scale_rule picks the weight scale initializer; ``active=False`` leaves
    the quantizers staged for the sequential calibration walk.
    """
    config.validate_overrides(model)
    if scale_rule not in ("minmax", "mse"):
        raise ParameterError(f"unknown scale rule {scale_rule!r}")
    init = init_scale_minmax if scale_rule == "minmax" else init_scale_mse
    weight_q: dict[str, Optional[QuantizerParams]] = {}
    act_q: dict[str, Optional[QuantizerParams]] = {}
    for name, layer in model.layers().items():
        bw, _ = config.layer_bits(name)
        if bw is None:
            weight_q[name] = None
        else:
            q = init(layer.w, bw, config.granularity_w)
            q.active = active
            weight_q[name] = q
        act_q[name] = None
    return QuantizedModel(model.copy(), config, weight_q, act_q)
