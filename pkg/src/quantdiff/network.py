"""The toy noise-prediction network.

An MLP over 2-D points with residual blocks, sinusoidal time embedding
injected into every block, and one U-Net-style concatenation skip. The
forward pass is a pure function of (parameters, x, t); parameter and
activation hooks let the quantized executor and the calibration optimizers
reuse the exact same wiring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError
from .rng import Rng


@dataclass
class Affine:
    """Dense layer y = x @ w.T + b with w of shape (out, in)."""

    name: str
    w: np.ndarray
    b: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]


@dataclass
class ResidualBlock:
    fc1: Affine
    time_proj: Affine
    fc2: Affine
    shortcut: Optional[Affine]  # projection when in/out widths differ, else identity


@dataclass
class ForwardRecord:
    """Per-layer and per-reconstruction-unit activations captured by a forward.

    ``layer_inputs`` holds the tensor fed to each affine layer *before* any
    activation quantizer; ``layer_pre`` the affine output; ``layer_post`` the
    value after the following nonlinearity (equal to ``layer_pre`` for layers
    not feeding one). Units are keyed by block tag; a unit's output is the
    shortcut-join result.
    """

    layer_inputs: dict = field(default_factory=dict)
    layer_pre: dict = field(default_factory=dict)
    layer_post: dict = field(default_factory=dict)
    unit_inputs: dict = field(default_factory=dict)
    unit_outputs: dict = field(default_factory=dict)
    emb: Optional[np.ndarray] = None


class NoisePredictor:
    """Noise estimator for 2-D diffusion; the quantization target."""

    def __init__(self, data_dim, width, emb_dim, freq_base, input_proj, blocks, skips, output_proj):
        self.data_dim = data_dim
        self.width = width
        self.emb_dim = emb_dim
        self.freq_base = freq_base
        self.input_proj = input_proj
        self.blocks = list(blocks)
        self.skips = dict(skips)  # dst block index -> src block index
        self.output_proj = output_proj
        _validate_widths(self)

    def layers(self) -> dict[str, Affine]:
        """All quantizable affine layers in topological order."""
        out = {"input_proj": self.input_proj}
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.fc1"] = blk.fc1
            out[f"block{i}.time_proj"] = blk.time_proj
            out[f"block{i}.fc2"] = blk.fc2
            if blk.shortcut is not None:
                out[f"block{i}.shortcut"] = blk.shortcut
        out["output_proj"] = self.output_proj
        return out

    def block_tag(self, layer_name: str) -> str:
        """Reconstruction-unit label for a layer (partitions layers exactly once)."""
        return layer_name.split(".", 1)[0]

    def dtype(self) -> np.dtype:
        return self.input_proj.w.dtype

    def astype(self, dtype) -> "NoisePredictor":
        """Deep copy with all parameters cast to ``dtype`` (f64 oracle paths)."""
        def cast(a: Affine) -> Affine:
            return Affine(a.name, a.w.astype(dtype), a.b.astype(dtype))

        blocks = [
            ResidualBlock(cast(b.fc1), cast(b.time_proj), cast(b.fc2),
                          cast(b.shortcut) if b.shortcut is not None else None)
            for b in self.blocks
        ]
        return NoisePredictor(self.data_dim, self.width, self.emb_dim, self.freq_base,
                              cast(self.input_proj), blocks, self.skips, cast(self.output_proj))

    def copy(self) -> "NoisePredictor":
        return self.astype(self.dtype())

    def param_items(self):
        """Ordered (key, array) pairs over all weights and biases."""
        for name, layer in self.layers().items():
            yield f"{name}.w", layer.w
            yield f"{name}.b", layer.b

    def set_params(self, params: dict) -> None:
        for name, layer in self.layers().items():
            layer.w = params[f"{name}.w"]
            layer.b = params[f"{name}.b"]


def _validate_widths(model: NoisePredictor) -> None:
    width = model.width
    if model.input_proj.in_dim != model.data_dim or model.input_proj.out_dim != width:
        raise ShapeError("input_proj width mismatch")
    for i, blk in enumerate(model.blocks):
        in_w = width + (width if i in model.skips else 0)
        if blk.fc1.in_dim != in_w:
            raise ShapeError(f"block{i}.fc1 expects width {in_w}, has {blk.fc1.in_dim}")
        if blk.time_proj.in_dim != model.emb_dim or blk.time_proj.out_dim != width:
            raise ShapeError(f"block{i}.time_proj width mismatch")
        if blk.fc2.in_dim != width or blk.fc2.out_dim != width:
            raise ShapeError(f"block{i}.fc2 width mismatch")
        if in_w != width and (blk.shortcut is None or blk.shortcut.in_dim != in_w):
            raise ShapeError(f"block{i} needs a {in_w}->{width} shortcut projection")
        if in_w == width and blk.shortcut is not None:
            raise ShapeError(f"block{i} shortcut projection is redundant")
    if model.output_proj.in_dim != width or model.output_proj.out_dim != model.data_dim:
        raise ShapeError("output_proj width mismatch")


def build_model(rng: Rng, data_dim: int = 2, width: int = 64, emb_dim: int = 32,
                n_blocks: int = 4, skips: dict[int, int] | None = None,
                freq_base: float = 10000.0, zero_output: bool = True) -> NoisePredictor:
    """Random model with the default topology (4 blocks, one skip 0 -> 2).

    Layer k draws its weights from ``rng.substream(k)`` in layer order,
    scaled by 1/sqrt(fan_in); biases start at zero and by default the output
    projection starts all-zero so an untrained model predicts zero noise
    (``zero_output=False`` randomizes it, for gradient tests).
    """
    if skips is None:
        skips = {2: 0} if n_blocks >= 3 else {}
    counter = [0]

    def make(name: str, out_dim: int, in_dim: int, zero: bool = False) -> Affine:
        sub = rng.substream(counter[0])
        counter[0] += 1
        if zero:
            w = np.zeros((out_dim, in_dim), dtype=np.float32)
        else:
            w = sub.normal((out_dim, in_dim)) * np.float32(1.0 / np.sqrt(in_dim))
        return Affine(name, w.astype(np.float32), np.zeros(out_dim, dtype=np.float32))

    input_proj = make("input_proj", width, data_dim)
    blocks = []
    for i in range(n_blocks):
        in_w = width + (width if i in skips else 0)
        blocks.append(ResidualBlock(
            fc1=make(f"block{i}.fc1", width, in_w),
            time_proj=make(f"block{i}.time_proj", width, emb_dim),
            fc2=make(f"block{i}.fc2", width, width),
            shortcut=make(f"block{i}.shortcut", width, in_w) if in_w != width else None,
        ))
    output_proj = make("output_proj", data_dim, width, zero=zero_output)
    return NoisePredictor(data_dim, width, emb_dim, freq_base, input_proj, blocks, skips, output_proj)


def time_embedding(t, emb_dim: int, freq_base: float, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding [sin(t*w_k), cos(t*w_k)], w_k = base^(-k/half)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = emb_dim // 2
    freqs = freq_base ** (-np.arange(half, dtype=np.float64) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def model_forward(model: NoisePredictor, x, t, *, params: dict | None = None,
                  act_fn: Callable | None = None, record: ForwardRecord | None = None,
                  drop_skips: bool = False, check_finite: bool = True):
    """Predicted noise for inputs x at timestep(s) t.

    ``params`` may override layer parameters (name -> (w, b)), with entries
    that are plain arrays or autodiff Vars; ``act_fn(name, tensor)`` is
    applied to each affine layer's input (the activation-quantization hook).
    With neither supplied this is the plain full-precision forward.
    ``drop_skips`` zeroes the concatenated skip inputs (wiring diagnostic).
    """
    xv = ad.value_of(x)
    if xv.ndim != 2 or xv.shape[1] != model.data_dim:
        raise ShapeError(f"expected input of shape (batch, {model.data_dim}), got {xv.shape}")
    if params is None:
        params = {}

    dtype = xv.dtype
    t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t)), (xv.shape[0],))
    emb = time_embedding(t_arr, model.emb_dim, model.freq_base, dtype=dtype)
    if record is not None:
        record.emb = emb

    def apply(name: str, layer: Affine, inp):
        if record is not None:
            record.layer_inputs[name] = ad.value_of(inp)
        if act_fn is not None:
            inp = act_fn(name, inp)
        w, b = params.get(name, (layer.w, layer.b))
        out = ad.affine(inp, w, b)
        if check_finite and not np.all(np.isfinite(ad.value_of(out))):
            raise NumericError(f"non-finite output at layer {name}")
        if record is not None:
            record.layer_pre[name] = ad.value_of(out)
        return out

    def note_post(names, tensor):
        if record is not None:
            for n in names:
                record.layer_post[n] = ad.value_of(tensor)

    def note_unit(tag, inp, out):
        if record is not None:
            record.unit_inputs[tag] = ad.value_of(inp)
            record.unit_outputs[tag] = ad.value_of(out)

    h = apply("input_proj", model.input_proj, x)
    note_post(["input_proj"], h)
    note_unit("input_proj", ad.value_of(x), h)

    block_outs = []
    for i, blk in enumerate(model.blocks):
        h_in = h
        if i in model.skips:
            skip_src = block_outs[model.skips[i]]
            if drop_skips:
                skip_src = np.zeros_like(ad.value_of(skip_src))
            h_in = ad.concat([h, skip_src], axis=1)
        tag = f"block{i}"
        a1 = ad.add(apply(f"{tag}.fc1", blk.fc1, h_in), apply(f"{tag}.time_proj", blk.time_proj, emb))
        z = ad.silu(a1)
        note_post([f"{tag}.fc1", f"{tag}.time_proj"], z)
        a2 = apply(f"{tag}.fc2", blk.fc2, z)
        note_post([f"{tag}.fc2"], a2)
        if blk.shortcut is not None:
            sc = apply(f"{tag}.shortcut", blk.shortcut, h_in)
            note_post([f"{tag}.shortcut"], sc)
        else:
            sc = h_in
        h = ad.add(sc, a2)
        note_unit(tag, h_in, h)
        block_outs.append(h)

    out = apply("output_proj", model.output_proj, h)
    note_post(["output_proj"], out)
    note_unit("output_proj", h, out)
    return out
