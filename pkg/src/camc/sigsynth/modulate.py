"""Baseband waveform synthesis for the supported modulation types.

Digital types use Gray-coded constellations at unit average symbol energy
with rectangular pulses (``sps`` samples per symbol); root-raised-cosine
shaping is available as an option.  Analog types modulate a band-limited
Gaussian message so the corpus is self-contained without audio assets.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy import signal as sig


class ModType(str, enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "8PSK"
    PAM4 = "PAM4"
    QAM16 = "QAM16"
    QAM64 = "QAM64"
    CPFSK = "CPFSK"
    GFSK = "GFSK"
    AM_DSB = "AM-DSB"
    AM_SSB = "AM-SSB"
    WBFM = "WBFM"

    def __str__(self):
        return self.value


DIGITAL_MODS = (ModType.BPSK, ModType.QPSK, ModType.PSK8, ModType.PAM4,
                ModType.QAM16, ModType.QAM64)
FSK_MODS = (ModType.CPFSK, ModType.GFSK)
ANALOG_MODS = (ModType.AM_DSB, ModType.AM_SSB, ModType.WBFM)


def _gray(n: int) -> np.ndarray:
    k = np.arange(n)
    return k ^ (k >> 1)


def _psk_points(m: int, offset: float) -> np.ndarray:
    """Gray-coded M-PSK: symbol s lands on the gray(s)-th circle position."""
    pos = np.empty(m, dtype=np.int64)
    pos[_gray(m)] = np.arange(m)
    return np.exp(1j * (2 * np.pi * pos / m + offset))


def _pam_levels(m: int) -> np.ndarray:
    levels = 2 * np.arange(m) - (m - 1)          # -(m-1), …, +(m-1)
    order = np.empty(m, dtype=np.int64)
    order[_gray(m)] = np.arange(m)
    return levels[order].astype(np.float64)


def constellation(mod: ModType) -> np.ndarray:
    """Unit-average-energy constellation, indexed by symbol value."""
    if mod == ModType.BPSK:
        return np.array([1.0 + 0j, -1.0 + 0j])
    if mod == ModType.QPSK:
        return _psk_points(4, np.pi / 4)
    if mod == ModType.PSK8:
        return _psk_points(8, 0.0)
    if mod == ModType.PAM4:
        pts = _pam_levels(4).astype(complex)
        return pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    if mod in (ModType.QAM16, ModType.QAM64):
        side = 4 if mod == ModType.QAM16 else 8
        lv = _pam_levels(side)
        bits = int(np.log2(side))
        i_idx = np.arange(side * side) >> bits
        q_idx = np.arange(side * side) & (side - 1)
        pts = lv[i_idx] + 1j * lv[q_idx]
        return pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    raise ValueError(f"{mod} has no symbol constellation")


def _lowpass_message(n: int, rng: np.random.Generator, cutoff: float = 0.1) -> np.ndarray:
    """Gaussian noise low-passed to cutoff·f_s, unit RMS."""
    taps = sig.firwin(63, cutoff * 2)            # firwin cutoff is in Nyquist units
    m = sig.lfilter(taps, 1.0, rng.standard_normal(n + 63))[63:]
    rms = np.sqrt(np.mean(m ** 2))
    return m / rms if rms > 0 else m


def _rrc_taps(sps: int, rolloff: float = 0.35, span: int = 8) -> np.ndarray:
    t = np.arange(-span * sps, span * sps + 1) / sps
    h = np.zeros_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-9:
            h[i] = 1 - rolloff + 4 * rolloff / np.pi
        elif abs(abs(4 * rolloff * ti) - 1.0) < 1e-9:
            h[i] = (rolloff / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * rolloff))
                                             + (1 - 2 / np.pi) * np.cos(np.pi / (4 * rolloff)))
        else:
            num = np.sin(np.pi * ti * (1 - rolloff)) + 4 * rolloff * ti * np.cos(np.pi * ti * (1 + rolloff))
            h[i] = num / (np.pi * ti * (1 - (4 * rolloff * ti) ** 2))
    return h / np.sqrt(np.sum(h ** 2))


def synthesize(mod: ModType, L: int, sps: int = 4, rng: np.random.Generator | None = None,
               pulse: str = "rect", normalize: bool = True) -> np.ndarray:
    """Generate a clean complex baseband frame of length L at unit power."""
    rng = rng or np.random.default_rng(0)
    mod = ModType(mod)
    if mod in DIGITAL_MODS or mod in FSK_MODS:
        if sps < 1 or (sps > 1 and L % sps != 0):
            raise ValueError(f"frame length {L} must be a multiple of sps {sps}")

    if mod in DIGITAL_MODS:
        pts = constellation(mod)
        syms = pts[rng.integers(0, len(pts), size=L // sps)]
        if pulse == "rrc" and sps > 1:
            up = np.zeros(L, dtype=complex)
            up[::sps] = syms
            taps = _rrc_taps(sps)
            delay = (len(taps) - 1) // 2
            s = sig.lfilter(taps, 1.0, np.concatenate([up, np.zeros(delay)]))[delay:]
        else:
            s = np.repeat(syms, sps)
    elif mod in FSK_MODS:
        bits = 2.0 * rng.integers(0, 2, size=L // sps) - 1.0
        nrz = np.repeat(bits, sps)
        if mod == ModType.GFSK:
            bt = 0.35
            sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt)
            tt = np.arange(-4 * sps, 4 * sps + 1) / sps
            gauss = np.exp(-0.5 * (tt / sigma) ** 2)
            gauss /= gauss.sum()
            pad = len(gauss) // 2
            nrz = sig.lfilter(gauss, 1.0, np.concatenate([nrz, np.zeros(pad)]))[pad:]
        # modulation index 0.5 → phase step π·h·b per symbol
        phase = np.cumsum(0.5 * np.pi * nrz / sps)
        s = np.exp(1j * phase)
    elif mod == ModType.AM_DSB:
        m = _lowpass_message(L, rng)
        s = (1.0 + 0.5 * m).astype(complex)
    elif mod == ModType.AM_SSB:
        m = _lowpass_message(L, rng)
        s = sig.hilbert(m)
    elif mod == ModType.WBFM:
        m = _lowpass_message(L, rng)
        phase = 2 * np.pi * 0.25 * np.cumsum(m)
        s = np.exp(1j * phase)
    else:
        raise ValueError(f"unsupported modulation: {mod}")

    if normalize:
        p = np.mean(np.abs(s) ** 2)
        if p > 0:
            s = s / np.sqrt(p)
    return np.asarray(s, dtype=np.complex128)
