"""RadioML2016.10A archive → CAMCDS01 conversion.

The source corpus is a Python pickle mapping (modulation name, snr_db) to an
array of frames, each stored as a 2×128 float32 block (I row, then Q row).
Conversion interleaves I/Q per sample, keeps the native frame length and
emits a JSON manifest of per-(mod, snr) counts.  Output ordering is fully
deterministic: modulation name, then SNR, then frame index.
"""

from __future__ import annotations

import json
import pickle
from pathlib import Path

import numpy as np

from camc.sigsynth import IQFrame, write_dataset

KNOWN_MODS = (
    "8PSK", "AM-DSB", "AM-SSB", "BPSK", "CPFSK", "GFSK",
    "PAM4", "QAM16", "QAM64", "QPSK", "WBFM",
)


class ConvertError(ValueError):
    pass


def load_archive(path) -> dict[tuple[str, int], np.ndarray]:
    """Read the pickled corpus; keys become (str modulation, int snr)."""
    try:
        with open(path, "rb") as f:
            raw = pickle.load(f, encoding="latin1")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise ConvertError(f"cannot read archive {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConvertError("archive is not a (modulation, snr) -> frames mapping")
    out = {}
    for key, frames in raw.items():
        try:
            mod, snr = key
        except (TypeError, ValueError):
            raise ConvertError(f"malformed archive key: {key!r}") from None
        mod = mod.decode() if isinstance(mod, bytes) else str(mod)
        arr = np.asarray(frames, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[1] != 2:
            raise ConvertError(
                f"frames for {key!r} must be (count, 2, length), got {arr.shape}")
        out[(mod, int(snr))] = arr
    return out


def convert(source_path, out_path, mods=None, snrs=None) -> dict:
    """Write the CAMCDS01 file and return (and save) its manifest."""
    archive = load_archive(source_path)

    present = sorted({mod for mod, _ in archive})
    unknown = [m for m in present if m not in KNOWN_MODS]
    if unknown:
        raise ConvertError(f"unknown modulation names in archive: {unknown}")

    mods = sorted(mods) if mods else present
    missing = [m for m in mods if m not in present]
    if missing:
        raise ConvertError(f"requested modulations absent from archive: {missing}")
    snr_filter = set(int(s) for s in snrs) if snrs else None

    frames = []
    counts: dict[str, int] = {}
    for mod in mods:
        cell_snrs = sorted(snr for m, snr in archive if m == mod)
        for snr in cell_snrs:
            if snr_filter is not None and snr not in snr_filter:
                continue
            block = archive[(mod, snr)]
            for k in range(block.shape[0]):
                iq = block[k]
                frames.append(IQFrame(iq[0] + 1j * iq[1], mod, snr,
                                      meta={"index": k}))
            counts[f"{mod}/{snr}"] = block.shape[0]
    if not frames:
        raise ConvertError("no frames selected by the given filters")

    write_dataset(out_path, frames, labels=mods)
    manifest = {
        "source": str(source_path),
        "total_frames": len(frames),
        "frame_len": len(frames[0].samples),
        "modulations": mods,
        "counts": counts,
    }
    manifest_path = Path(out_path).with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
