"""Flat key-value run configuration.

Grammar: one ``key=value`` per line, ``#`` starts a comment, blank lines
ignored. Unknown keys are rejected by name. ``override.<layer>`` entries map
a layer to ``exempt`` or an integer bit width (applied to both its weight and
activation quantizers). The total calibration-set size N is always derived
(n * floor(T_sample / c)), never accepted as input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .quantizer import QuantConfig


@dataclass
class RunConfig:
    dataset: str = "gmm8"
    dataset_size: int = 8192
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    T_sample: int = 100
    eta: float = 0.0
    bits_w: int = 4
    bits_a: int = 8
    granularity_w: str = "per_channel"
    calib_c: int = 5
    calib_n: int = 256
    calib_strategy: str = "uniform"
    calib_iters: int = 5000
    train_steps: int = 20000
    train_lr: float = 1e-3
    train_batch: int = 512
    sample_count: int = 1024
    eval_count: int = 4096
    mse_batch: int = 64
    profile_batch: int = 1000
    seed: int = 0
    layer_overrides: dict = field(default_factory=dict)

    @property
    def calib_total(self) -> int:
        """Derived calibration-set size N."""
        return self.calib_n * (self.T_sample // self.calib_c)

    def quant_config(self) -> QuantConfig:
        return QuantConfig(bits_w=self.bits_w, bits_a=self.bits_a,
                           granularity_w=self.granularity_w,
                           layer_overrides=dict(self.layer_overrides))


# config-file key -> attribute name (dots are not valid identifiers)
_KEYS = {
    "dataset": "dataset",
    "dataset.size": "dataset_size",
    "T_train": "T_train",
    "beta_start": "beta_start",
    "beta_end": "beta_end",
    "T_sample": "T_sample",
    "eta": "eta",
    "bits_w": "bits_w",
    "bits_a": "bits_a",
    "granularity_w": "granularity_w",
    "calib.c": "calib_c",
    "calib.n": "calib_n",
    "calib.strategy": "calib_strategy",
    "calib.iters": "calib_iters",
    "train.steps": "train_steps",
    "train.lr": "train_lr",
    "train.batch": "train_batch",
    "sample.count": "sample_count",
    "eval.count": "eval_count",
    "mse.batch": "mse_batch",
    "profile.batch": "profile_batch",
    "seed": "seed",
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, attr: str, raw: str):
    ftype = _FIELD_TYPES[attr]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key.startswith("override."):
            layer = key.removeprefix("override.")
            if not layer:
                raise ConfigError(f"line {lineno}: empty override layer name")
            if raw == "exempt":
                cfg.layer_overrides[layer] = "exempt"
            else:
                try:
                    cfg.layer_overrides[layer] = int(raw)
                except ValueError as exc:
                    raise ConfigError(f"bad override value for {layer}: {raw!r}") from exc
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, _KEYS[key], _parse_value(key, _KEYS[key], raw))
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError(f"seed must fit in u64, got {cfg.seed}")
    return cfg


def render_config(cfg: RunConfig) -> str:
    lines = []
    for key, attr in _KEYS.items():
        value = getattr(cfg, attr)
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    for layer in sorted(cfg.layer_overrides):
        lines.append(f"override.{layer}={cfg.layer_overrides[layer]}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(cfg))
