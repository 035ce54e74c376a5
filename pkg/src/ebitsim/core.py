"""Fidelity arithmetic, physical parameters and the replication RNG.

Times are seconds, rates are Hz, fidelities live in [0.25, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEPHASING_FLOOR = 0.25
ENTANGLEMENT_THRESHOLD = 0.5

_EPS = 1e-9


class ConfigurationError(ValueError):
    """Bad scenario input (rejected before any event runs)."""


class ProtocolError(RuntimeError):
    """Internal invariant broken mid-replication; the run is not salvageable."""


def dephase(fidelity: float, gamma: float, dt: float) -> float:
    """Fidelity after dt seconds in memory: 1/4 + (F - 1/4) * exp(-gamma * dt)."""
    if dt < 0:
        raise ValueError(f"negative storage time {dt}")
    if gamma < 0:
        raise ValueError(f"negative dephasing rate {gamma}")
    if not (DEPHASING_FLOOR - _EPS <= fidelity <= 1.0 + _EPS):
        raise ValueError(f"fidelity {fidelity} outside [0.25, 1]")
    return DEPHASING_FLOOR + (fidelity - DEPHASING_FLOOR) * math.exp(-gamma * dt)


def swap_fidelity(f1: float, f2: float) -> float:
    """Fidelity of the pair produced by swapping two pairs of fidelity f1, f2.

    1/4 + 3/4 * ((4 f1 - 1) / 3) * ((4 f2 - 1) / 3); symmetric, never above
    min(f1, f2), floor at 1/4.
    """
    for f in (f1, f2):
        if not (DEPHASING_FLOOR - _EPS <= f <= 1.0 + _EPS):
            raise ValueError(f"fidelity {f} outside [0.25, 1]")
    # product formed first so the expression is exactly symmetric in f1, f2
    x = ((4.0 * f1 - 1.0) / 3.0) * ((4.0 * f2 - 1.0) / 3.0)
    return DEPHASING_FLOOR + 0.75 * x


@dataclass(frozen=True)
class PhysicalParams:
    """Hardware constants shared by every node of a scenario."""

    gamma_hz: float = 1.0
    f_init: float = 0.95
    epsg_rate_hz: float = 100.0
    bsm_success_prob: float = 0.95
    bsm_duration_s: float = 1e-3
    xz_duration_s: float = 1e-3
    signal_speed_m_s: float = 3e8
    # composite pairs dephase at gamma_hz * this factor once swapped at least once
    composite_decay_multiplier: float = 1.0

    def __post_init__(self) -> None:
        if self.gamma_hz < 0:
            raise ConfigurationError(f"gamma_hz must be >= 0, got {self.gamma_hz}")
        if not (DEPHASING_FLOOR < self.f_init <= 1.0):
            raise ConfigurationError(f"f_init must lie in (0.25, 1], got {self.f_init}")
        if self.epsg_rate_hz <= 0:
            raise ConfigurationError(f"epsg_rate_hz must be > 0, got {self.epsg_rate_hz}")
        if not (0.0 <= self.bsm_success_prob <= 1.0):
            raise ConfigurationError(
                f"bsm_success_prob must lie in [0, 1], got {self.bsm_success_prob}"
            )
        if self.bsm_duration_s < 0 or self.xz_duration_s < 0:
            raise ConfigurationError("durations must be >= 0")
        if self.signal_speed_m_s <= 0:
            raise ConfigurationError(f"signal_speed_m_s must be > 0, got {self.signal_speed_m_s}")
        if self.composite_decay_multiplier < 0:
            raise ConfigurationError("composite_decay_multiplier must be >= 0")


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Steele et al. splitmix64 finalizer; stable across platforms.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *indices: int) -> int:
    """Mix a base seed with grid/replication indices into an independent seed."""
    x = base_seed & _MASK64
    for idx in indices:
        x = _splitmix64(x ^ _splitmix64(idx & _MASK64))
    return x


class RandomStream:
    """Deterministic per-replication randomness.

    Every draw is derived from Generator.random() doubles (the documented
    PCG64 path) so the sequence is reproducible bit-for-bit from the seed
    alone, independent of numpy's distribution implementations.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return float(self._gen.random())

    def uniform_array(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def exponential(self, rate: float) -> float:
        """Inter-arrival sample for a Poisson process of the given rate."""
        if rate <= 0:
            raise ValueError(f"rate must be > 0, got {rate}")
        return -math.log1p(-float(self._gen.random())) / rate

    def bernoulli(self, p: float) -> bool:
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"probability {p} outside [0, 1]")
        return float(self._gen.random()) < p

    def two_bits(self) -> int:
        """Uniform value in {0, 1, 2, 3}, the classical outcome of one fusion."""
        return min(int(self._gen.random() * 4.0), 3)
