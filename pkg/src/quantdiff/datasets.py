"""Procedural 2-D toy datasets, generated from the documented RNG stream."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .rng import Rng

GMM8_RADIUS = 4.0
GMM8_MODE_STD = 0.05


def gmm8_centers(radius: float = GMM8_RADIUS) -> np.ndarray:
    """The 8 mixture-mode centers, equally spaced on a circle."""
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1).astype(np.float32)


def gmm8(rng: Rng, n: int, radius: float = GMM8_RADIUS, mode_std: float = GMM8_MODE_STD) -> np.ndarray:
    """Equal-weight 8-mode Gaussian mixture on a circle. Draw order: modes, then offsets."""
    centers = gmm8_centers(radius)
    idx = rng.integers(0, 8, (n,))
    return (centers[idx] + np.float32(mode_std) * rng.normal((n, 2))).astype(np.float32)


def swiss_roll(rng: Rng, n: int, scale: float = 0.3, noise_std: float = 0.05) -> np.ndarray:
    """2-D spiral: theta ~ U[1.5pi, 4.5pi], point = scale*(theta cos, theta sin) + noise."""
    theta = 1.5 * np.pi + 3.0 * np.pi * rng.uniform((n,), dtype=np.float64)
    base = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1) * scale
    return (base + noise_std * rng.normal((n, 2), dtype=np.float64)).astype(np.float32)


def make_dataset(name: str, rng: Rng, n: int) -> np.ndarray:
    if name == "gmm8":
        return gmm8(rng, n)
    if name == "swiss_roll":
        return swiss_roll(rng, n)
    raise ParameterError(f"unknown dataset '{name}' (expected gmm8 or swiss_roll)")
