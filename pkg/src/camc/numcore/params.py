"""Named parameter sets and the CAMCW001 checkpoint format."""

from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

ROLE_WEIGHT = 0
ROLE_BIAS = 1
ROLE_BN_STAT = 2

_ROLE_NAMES = {ROLE_WEIGHT: "weight", ROLE_BIAS: "bias", ROLE_BN_STAT: "bn_stat"}

MAGIC = b"CAMCW001"


class CheckpointError(IOError):
    pass


class ParamSet:
    """Ordered map of layer-qualified parameter name → (Tensor, role).

    bn_stat entries carry running statistics and never receive gradients.
    """

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, int]] = {}

    def add(self, name: str, data, role: int = ROLE_WEIGHT) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float32),
                   requires_grad=(role != ROLE_BN_STAT))
        self._entries[name] = (t, role)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def role(self, name: str) -> int:
        return self._entries[name][1]

    def items(self):
        for name, (t, role) in self._entries.items():
            yield name, t, role

    def trainable(self):
        for name, (t, role) in self._entries.items():
            if role != ROLE_BN_STAT:
                yield name, t

    def zero_grad(self):
        for t, _ in self._entries.values():
            t.grad = None

    def n_params(self, trainable_only: bool = True) -> int:
        return sum(t.data.size for _, t, role in self.items()
                   if not (trainable_only and role == ROLE_BN_STAT))

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t, role in self.items():
            out.add(name, t.data.copy(), role)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t, _ in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, arr in arrays.items():
            t = self[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {arr.shape}")
            t.data = np.asarray(arr, dtype=np.float32).copy()


def save_checkpoint(path, params: ParamSet):
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, t, role in params.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", role, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, tuple[np.ndarray, int]]:
    """Read a CAMCW001 file into {name: (array, role)}."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic in {path!s}")
    pos, out = 8, {}
    while pos < len(blob):
        if pos + 2 > len(blob):
            raise CheckpointError("truncated checkpoint (name length)")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        role, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        end = pos + 4 * count
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint payload for {name}")
        arr = np.frombuffer(blob[pos:end], dtype="<f4").reshape(dims).copy()
        pos = end
        out[name] = (arr, role)
    return out


def restore_into(params: ParamSet, path):
    loaded = load_checkpoint(path)
    params.load_arrays({k: v for k, (v, _) in loaded.items()})
