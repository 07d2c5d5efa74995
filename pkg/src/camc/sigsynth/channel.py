"""Sensing-channel model and amplitude/phase preprocessing.

The received sample is h[l]·e^{-j2π(ν·l·T_s + ϑ)}·s[l] + z[l]; ϑ and ν·T_s
are in cycles, z is complex AWGN sized from the per-frame signal power and
the requested SNR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ChannelSpec:
    h: str = "constant"          # "constant" | "rayleigh-block"
    gain: complex = 1.0 + 0j     # used by the constant model
    nu_hz: float = 0.0           # frequency offset ν
    theta: float = 0.0           # phase offset ϑ, in cycles
    ts_s: float = 1.0            # sampling period T_s
    snr_db: float = float("inf")

    def __post_init__(self):
        if self.ts_s <= 0:
            raise ValueError("sampling period must be positive")


def apply_channel(s: np.ndarray, spec: ChannelSpec,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Pass a clean frame through gain, frequency/phase offset and AWGN."""
    s = np.asarray(s, dtype=np.complex128)
    if s.size == 0:
        raise ValueError("frame is empty")
    rng = rng or np.random.default_rng(0)

    l = np.arange(1, s.size + 1, dtype=np.float64)
    phasor = np.exp(-2j * np.pi * (spec.nu_hz * l * spec.ts_s + spec.theta))
    if spec.h == "rayleigh-block":
        g = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
    elif spec.h == "constant":
        g = spec.gain
    else:
        raise ValueError(f"unknown channel gain model: {spec.h!r}")
    x = g * phasor * s

    if np.isfinite(spec.snr_db):
        p_sig = np.mean(np.abs(x) ** 2)
        var = p_sig / (10.0 ** (spec.snr_db / 10.0))
        z = np.sqrt(var / 2) * (rng.standard_normal(s.size) + 1j * rng.standard_normal(s.size))
        x = x + z
    return x


def measure_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    p_s = np.mean(np.abs(signal) ** 2)
    p_n = np.mean(np.abs(noise) ** 2)
    return 10.0 * np.log10(p_s / p_n)


def to_ap(x: np.ndarray) -> np.ndarray:
    """Convert complex samples to an L×2 (amplitude, phase) matrix.

    Phase is atan2(Im, Re) in (−π, π]; the phase of an exact zero sample
    is defined as 0.
    """
    x = np.asarray(x, dtype=np.complex128)
    amp = np.abs(x)
    phase = np.arctan2(x.imag, x.real)
    phase = np.where(amp == 0, 0.0, phase)
    # fold atan2's -pi branch onto +pi so phase stays in (-pi, pi]
    phase = np.where(phase == -np.pi, np.pi, phase)
    return np.stack([amp, phase], axis=-1).astype(np.float32)
