"""Corruption models: additive white Gaussian noise and Poisson shot noise.

All randomness comes from numpy's Philox4x64 generator, a counter-based
bit generator whose output stream is fixed by its key, so a given
``(image, level, seed)`` always yields the same noisy image on every
platform. Gaussian deviates are drawn by Box-Muller over that stream.
Images are on the [0, 1] scale; ``sigma`` is quoted on the 0-255 scale.
Noisy outputs are never clipped here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

_U64 = (1 << 64) - 1


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & _U64))


def derive_seed(*words: int) -> int:
    """Hash a tuple of non-negative integers into one 64-bit seed."""
    state = np.random.SeedSequence([int(w) & _U64 for w in words]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def standard_normal(shape, seed: int) -> np.ndarray:
    count = int(np.prod(shape))
    pairs = (count + 1) // 2
    u = philox(seed).random((2, pairs))
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
    angle = 2.0 * np.pi * u[1]
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return z[:count].reshape(shape)


def add_gaussian_noise(clean: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if not 0 < sigma <= 255:
        raise ConfigurationError(f"sigma must lie in (0, 255], got {sigma}")
    clean = np.asarray(clean, dtype=np.float64)
    return clean + (sigma / 255.0) * standard_normal(clean.shape, seed)


def add_poisson_noise(clean: np.ndarray, peak: float, seed: int) -> np.ndarray:
    """Photon-count noise: each pixel becomes Poisson(clean * peak) / peak."""
    if not 0 < peak <= 255:
        raise ConfigurationError(f"peak must lie in (0, 255], got {peak}")
    clean = np.asarray(clean, dtype=np.float64)
    lam = np.clip(clean, 0.0, None) * peak
    return philox(seed).poisson(lam).astype(np.float64) / peak


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    sigma: float | None = None
    peak: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.sigma is None or self.peak is not None:
                raise ConfigurationError("gaussian noise takes sigma and no peak")
            if not 0 < self.sigma <= 255:
                raise ConfigurationError(f"sigma must lie in (0, 255], got {self.sigma}")
        elif self.kind == "poisson":
            if self.peak is None or self.sigma is not None:
                raise ConfigurationError("poisson noise takes peak and no sigma")
            if not 0 < self.peak <= 255:
                raise ConfigurationError(f"peak must lie in (0, 255], got {self.peak}")
        else:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if not 0 <= int(self.seed) <= _U64:
            raise ConfigurationError("noise seed must be an unsigned 64-bit integer")

    @property
    def level(self) -> float:
        return float(self.sigma if self.kind == "gaussian" else self.peak)

    @property
    def label(self) -> str:
        return f"gaussian-s{self.sigma:g}" if self.kind == "gaussian" else f"poisson-p{self.peak:g}"

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.kind, self.sigma, self.peak, seed)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": int(self.seed)}
        if self.kind == "gaussian":
            d["sigma"] = self.sigma
        else:
            d["peak"] = self.peak
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(kind=d["kind"], sigma=d.get("sigma"), peak=d.get("peak"), seed=int(d.get("seed", 0)))


def corrupt(clean: np.ndarray, spec: NoiseSpec, index: int) -> np.ndarray:
    """Noisy version of dataset sample ``index``; a pure function of its arguments."""
    seed = derive_seed(spec.seed, index)
    if spec.kind == "gaussian":
        return add_gaussian_noise(clean, spec.sigma, seed)
    return add_poisson_noise(clean, spec.peak, seed)
