"""Portable CAMCDS01 dataset container.

Layout (little-endian): magic "CAMCDS01", L u32, M u32, count u64, then the
label table (M entries: name length u16 + UTF-8 name).  Each frame record is
2·L float32 (I, Q interleaved per sample), label id u8, snr_db i16.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .. import rng as rngmod
from .channel import ChannelSpec, apply_channel
from .modulate import ModType, synthesize

MAGIC = b"CAMCDS01"


class DatasetError(IOError):
    pass


@dataclass
class IQFrame:
    samples: np.ndarray          # complex, length L
    label: str                   # modulation name
    snr_db: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex64)


def write_dataset(path, frames: list[IQFrame], labels: list[str] | None = None):
    if labels is None:
        labels = sorted({f.label for f in frames})
    label_id = {name: i for i, name in enumerate(labels)}
    L = len(frames[0].samples) if frames else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIQ", L, len(labels), len(frames)))
        for name in labels:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
        for fr in frames:
            if len(fr.samples) != L:
                raise DatasetError(f"frame length {len(fr.samples)} != header L {L}")
            iq = np.empty(2 * L, dtype="<f4")
            iq[0::2] = fr.samples.real
            iq[1::2] = fr.samples.imag
            f.write(iq.tobytes())
            f.write(struct.pack("<Bh", label_id[fr.label], int(fr.snr_db)))


def read_dataset(path) -> tuple[list[IQFrame], list[str]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise DatasetError(f"bad magic in {path!s}")
    if len(blob) < 24:
        raise DatasetError("truncated header")
    L, M, count = struct.unpack_from("<IIQ", blob, 8)
    pos = 24
    labels = []
    for _ in range(M):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        labels.append(blob[pos:pos + nlen].decode("utf-8"))
        pos += nlen
    rec = 8 * L + 3
    if len(blob) - pos != count * rec:
        raise DatasetError(
            f"truncated payload: expected {count} records of {rec} bytes, have {len(blob) - pos} bytes"
        )
    frames = []
    for _ in range(count):
        iq = np.frombuffer(blob, dtype="<f4", count=2 * L, offset=pos)
        pos += 8 * L
        lid, snr = struct.unpack_from("<Bh", blob, pos)
        pos += 3
        if lid >= M:
            raise DatasetError(f"label id {lid} outside table of size {M}")
        frames.append(IQFrame(iq[0::2] + 1j * iq[1::2], labels[lid], snr))
    return frames, labels


def synthesize_dataset(mods, n_per_class: int, L: int, sps: int = 4,
                       snr_db: float = 10.0, seed: int = 0,
                       pulse: str = "rect") -> tuple[list[IQFrame], list[str]]:
    """Balanced synthetic corpus: every class contributes n_per_class frames."""
    mods = [ModType(m) for m in mods]
    frames = []
    for ci, mod in enumerate(mods):
        for k in range(n_per_class):
            frame_rng = rngmod.stream(seed, f"synth/{mod.value}", k)
            s = synthesize(mod, L, sps=sps, rng=frame_rng, pulse=pulse)
            x = apply_channel(s, ChannelSpec(snr_db=snr_db), rng=frame_rng)
            frames.append(IQFrame(x, mod.value, int(round(snr_db)),
                                  meta={"seed": seed, "index": k}))
    labels = [m.value for m in mods]
    return frames, labels
