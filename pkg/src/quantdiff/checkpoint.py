"""Binary checkpoint container and model (de)serialization.

Container layout (little-endian throughout, defined in docs/formats.md):

    magic "QDCK" | version u32 | tensor count u32
    per tensor: name_len u32 | name UTF-8 | rank u32 | dims u64 each
                | dtype u8 (0 = float32) | raw payload
    trailing CRC32 (u32) of all preceding bytes

Only float32 tensors exist; integer metadata is stored as exact small-integer
float32 values (64-bit seeds split into three <=24-bit chunks).
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from .calibration import CalibrationSet
from .errors import (BadMagicError, CrcMismatchError, DuplicateTensorError,
                     ParameterError, TruncatedError, UnknownVersionError)
from .network import Affine, NoisePredictor, ResidualBlock
from .quantizer import QuantConfig, QuantizedModel, QuantizerParams

MAGIC = b"QDCK"
VERSION = 1
DTYPE_F32 = 0

_GRANULARITIES = ("per_channel", "per_tensor")


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors; the write is atomic (temp + rename)."""
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ParameterError(f"tensor {name!r} must be float32, got {arr.dtype}")
        encoded = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded)) + encoded
        payload += struct.pack("<I", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += struct.pack("<B", DTYPE_F32)
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a container back; every failure mode raises a distinct error."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a QDCK checkpoint")
    if len(blob) < 16:
        raise TruncatedError(f"{path}: shorter than header + checksum")
    body, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise CrcMismatchError(f"{path}: CRC32 mismatch")
    (version, count) = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise UnknownVersionError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + name_len].decode("utf-8")
            if len(body[off:off + name_len]) != name_len:
                raise struct.error("short name")
            off += name_len
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            (dtype_code,) = struct.unpack_from("<B", body, off)
            off += 1
            if dtype_code != DTYPE_F32:
                raise UnknownVersionError(f"{path}: unknown dtype code {dtype_code}")
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
            raw = body[off:off + n_bytes]
            if len(raw) != n_bytes:
                raise struct.error("short payload")
            off += n_bytes
        except struct.error as exc:
            raise TruncatedError(f"{path}: truncated tensor table ({exc})") from exc
        if name in out:
            raise DuplicateTensorError(f"{path}: duplicate tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if off != len(body):
        raise TruncatedError(f"{path}: {len(body) - off} trailing bytes")
    return out


def u64_to_chunks(value: int) -> np.ndarray:
    """Split a u64 into three float32-exact chunks (22 + 22 + 20 bits)."""
    value = int(value)
    return np.array([value & 0x3FFFFF, (value >> 22) & 0x3FFFFF, value >> 44],
                    dtype=np.float32)


def chunks_to_u64(chunks: np.ndarray) -> int:
    a, b, c = (int(v) for v in chunks)
    return a | (b << 22) | (c << 44)


# -- model serialization ------------------------------------------------------

def model_to_tensors(model: NoisePredictor) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {
        "meta/kind": np.zeros(1, dtype=np.float32),
        "meta/model": np.array(
            [model.data_dim, model.width, model.emb_dim, len(model.blocks)], dtype=np.float32),
        "meta/freq_base": np.array([model.freq_base], dtype=np.float32),
        "meta/skips": np.array(sorted(model.skips.items()), dtype=np.float32).reshape(-1, 2),
    }
    for name, layer in model.layers().items():
        tensors[f"param/{name}/w"] = layer.w.astype(np.float32)
        tensors[f"param/{name}/b"] = layer.b.astype(np.float32)
    return tensors


def model_from_tensors(tensors: dict[str, np.ndarray]) -> NoisePredictor:
    data_dim, width, emb_dim, n_blocks = (int(v) for v in tensors["meta/model"])
    freq_base = float(tensors["meta/freq_base"][0])
    skips = {int(dst): int(src) for dst, src in tensors["meta/skips"].reshape(-1, 2)}

    def layer(name: str) -> Affine:
        return Affine(name, tensors[f"param/{name}/w"].copy(), tensors[f"param/{name}/b"].copy())

    blocks = []
    for i in range(n_blocks):
        shortcut = layer(f"block{i}.shortcut") if f"param/block{i}.shortcut/w" in tensors else None
        blocks.append(ResidualBlock(layer(f"block{i}.fc1"), layer(f"block{i}.time_proj"),
                                    layer(f"block{i}.fc2"), shortcut))
    return NoisePredictor(data_dim, width, emb_dim, freq_base,
                          layer("input_proj"), blocks, skips, layer("output_proj"))


def save_model(path: str, model: NoisePredictor) -> None:
    save_checkpoint(path, model_to_tensors(model))


def load_model(path: str) -> NoisePredictor:
    tensors = load_checkpoint(path)
    if int(tensors["meta/kind"][0]) != 0:
        raise ParameterError(f"{path} holds a quantized model; use load_quantized_model")
    return model_from_tensors(tensors)


# -- quantized model serialization --------------------------------------------

_MODES = ("nearest", "adaround")


def quantized_model_to_tensors(qm: QuantizedModel) -> dict[str, np.ndarray]:
    tensors = model_to_tensors(qm.base)
    tensors["meta/kind"] = np.ones(1, dtype=np.float32)
    cfg = qm.config
    tensors["meta/quant_config"] = np.array(
        [cfg.bits_w, cfg.bits_a, _GRANULARITIES.index(cfg.granularity_w)], dtype=np.float32)
    for name, q in qm.weight_q.items():
        if q is None:
            continue
        tensors[f"quant/{name}/w_meta"] = np.array(
            [q.bits, q.c_min, q.c_max, _MODES.index(q.mode), int(q.hard), int(q.active)],
            dtype=np.float32)
        tensors[f"quant/{name}/w_scale"] = np.atleast_1d(q.scale).astype(np.float32)
        if q.v is not None:
            tensors[f"quant/{name}/w_round"] = q.v.astype(np.float32)
    for name, q in qm.act_q.items():
        if q is None:
            continue
        tensors[f"quant/{name}/a_meta"] = np.array(
            [q.bits, q.c_min, q.c_max, float(q.zero_offset), int(q.active)], dtype=np.float32)
        tensors[f"quant/{name}/a_scale"] = np.atleast_1d(q.scale).astype(np.float32)
    return tensors


def quantized_model_from_tensors(tensors: dict[str, np.ndarray]) -> QuantizedModel:
    base = model_from_tensors(tensors)
    bits_w, bits_a, gran = tensors["meta/quant_config"]
    config = QuantConfig(bits_w=int(bits_w), bits_a=int(bits_a),
                         granularity_w=_GRANULARITIES[int(gran)])
    weight_q: dict[str, QuantizerParams | None] = {}
    act_q: dict[str, QuantizerParams | None] = {}
    for name, layer in base.layers().items():
        wkey = f"quant/{name}/w_meta"
        if wkey in tensors:
            bits, c_min, c_max, mode, hard, active = tensors[wkey]
            scale = tensors[f"quant/{name}/w_scale"]
            if scale.size == 1 and layer.w.shape[0] != 1:
                scale = scale.reshape(())
            v = tensors.get(f"quant/{name}/w_round")
            q = QuantizerParams(bits=int(bits), scale=scale, c_min=int(c_min), c_max=int(c_max),
                                mode=_MODES[int(mode)], v=None if v is None else v.copy(),
                                hard=bool(hard), active=bool(active))
            weight_q[name] = q
        else:
            weight_q[name] = None
        akey = f"quant/{name}/a_meta"
        if akey in tensors:
            bits, c_min, c_max, zero, active = tensors[akey]
            act_q[name] = QuantizerParams(
                bits=int(bits), scale=tensors[f"quant/{name}/a_scale"].reshape(()),
                c_min=int(c_min), c_max=int(c_max),
                zero_offset=np.asarray(int(zero), dtype=np.int64), active=bool(active))
        else:
            act_q[name] = None
    qm = QuantizedModel(base, config, weight_q, act_q)
    qm.freeze()
    return qm


def save_quantized_model(path: str, qm: QuantizedModel) -> None:
    save_checkpoint(path, quantized_model_to_tensors(qm))


def load_quantized_model(path: str) -> QuantizedModel:
    tensors = load_checkpoint(path)
    if int(tensors["meta/kind"][0]) != 1:
        raise ParameterError(f"{path} holds a full-precision model; use load_model")
    return quantized_model_from_tensors(tensors)


def load_any_model(path: str):
    """Load either checkpoint kind (samplers accept both)."""
    tensors = load_checkpoint(path)
    if int(tensors["meta/kind"][0]) == 0:
        return model_from_tensors(tensors)
    return quantized_model_from_tensors(tensors)


# -- calibration set persistence ----------------------------------------------

def save_calibration_set(path: str, D: CalibrationSet) -> None:
    meta = D.meta
    tensors = {
        "meta/kind": np.full(1, 2.0, dtype=np.float32),
        "calib/xs": D.xs.astype(np.float32),
        "calib/ts": D.ts.astype(np.float32),
        "calib/meta": np.concatenate([
            np.array([meta["T_sample"], meta["c"], meta["n"], meta["N"]], dtype=np.float32),
            u64_to_chunks(meta.get("seed_key", 0)),
        ]),
        "calib/iterations": np.asarray(meta["iterations"], dtype=np.float32),
    }
    save_checkpoint(path, tensors)


def load_calibration_set(path: str) -> CalibrationSet:
    tensors = load_checkpoint(path)
    if int(tensors["meta/kind"][0]) != 2:
        raise ParameterError(f"{path} is not a calibration-set checkpoint")
    m = tensors["calib/meta"]
    meta = {"T_sample": int(m[0]), "c": int(m[1]), "n": int(m[2]), "N": int(m[3]),
            "seed_key": chunks_to_u64(m[4:7]),
            "iterations": [int(i) for i in tensors["calib/iterations"]]}
    return CalibrationSet(tensors["calib/xs"], tensors["calib/ts"].astype(np.int64), meta)
