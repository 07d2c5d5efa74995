"""Stratified train/validation/test splitting of CAMCDS01 datasets.

Every (modulation, SNR) cell is shuffled with its own deterministic seed and
apportioned by largest remainder, so each cell lands within one frame of the
exact ratio and the three outputs are disjoint and exhaustive.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from camc.sigsynth import read_dataset, write_dataset


def _apportion(n: int, ratios: list[float]) -> list[int]:
    exact = [n * r for r in ratios]
    base = [int(e) for e in exact]
    short = n - sum(base)
    remainders = sorted(range(len(ratios)), key=lambda i: exact[i] - base[i],
                        reverse=True)
    for i in remainders[:short]:
        base[i] += 1
    return base


def split_dataset(dataset_path, ratios, seed: int, out_paths) -> dict:
    """Write one CAMCDS01 file per ratio; returns the split manifest."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != len(out_paths):
        raise ValueError(f"{len(ratios)} ratios but {len(out_paths)} output paths")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    frames, labels = read_dataset(dataset_path)
    cells = defaultdict(list)
    for idx, frame in enumerate(frames):
        cells[(frame.label, frame.snr_db)].append(idx)

    parts: list[list[int]] = [[] for _ in ratios]
    for key in sorted(cells):
        idxs = np.array(cells[key])
        cell_rng = np.random.default_rng([seed, hash_cell(key)])
        idxs = idxs[cell_rng.permutation(len(idxs))]
        lo = 0
        for part, take in zip(parts, _apportion(len(idxs), ratios)):
            part.extend(int(i) for i in idxs[lo:lo + take])
            lo += take

    manifest = {"source": str(dataset_path), "seed": seed, "ratios": ratios,
                "outputs": []}
    for part, out_path in zip(parts, out_paths):
        part.sort()              # preserve original ordering within each split
        write_dataset(out_path, [frames[i] for i in part], labels=labels)
        manifest["outputs"].append({"path": str(out_path), "n_frames": len(part)})
    manifest_path = Path(out_paths[0]).with_suffix(".split.json")
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest


def hash_cell(key) -> int:
    """Stable 32-bit hash of a (label, snr) cell for per-cell RNG seeding."""
    import zlib
    label, snr = key
    return zlib.crc32(f"{label}/{snr}".encode("utf-8"))
