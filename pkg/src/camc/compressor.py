"""Model compression: magnitude pruning, uniform affine quantization,
compression-ratio formulas and per-layer FLOPs accounting."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numcore import ParamSet, ROLE_WEIGHT

QUANT_MAGIC = b"CAMCQ001"


class QuantFileError(IOError):
    pass


# ---------------------------------------------------------------------------
# layer naming

def layer_of(param_name: str) -> str:
    """Collapse a parameter name to its compression layer group.

    All attention heads share one group; the two directions and the input/
    recurrent matrices of a Bi-LSTM stage likewise prune as one layer.
    """
    head = param_name.split(".", 1)[0]
    return "attention" if head == "attn" else head


def prunable_names(params: ParamSet) -> list[str]:
    """Weight matrices only: biases and normalization parameters stay dense."""
    return [name for name, t, role in params.items()
            if role == ROLE_WEIGHT and t.data.ndim >= 2]


@dataclass
class PruneSpec:
    """Per-layer pruning ratios (fraction of weights removed) by group name."""

    ratios: dict[str, float] = field(default_factory=dict)
    fine_tune_epochs: int = 0

    def __post_init__(self):
        for name, rho in self.ratios.items():
            if not 0.0 <= rho < 1.0:
                raise ValueError(f"pruning ratio for {name} must be in [0, 1), got {rho}")

    def ratio_for(self, layer: str) -> float:
        return self.ratios.get(layer, 0.0)

    @classmethod
    def uniform(cls, rho: float, layers, fine_tune_epochs: int = 0) -> "PruneSpec":
        return cls({name: rho for name in layers}, fine_tune_epochs)


# ---------------------------------------------------------------------------
# pruning

def prune_layer(weights: np.ndarray, rho: float):
    """Zero the smallest-magnitude weights; ties at the threshold survive.

    The cut point is the ``floor(rho * N)``-th smallest magnitude (1-based);
    entries with magnitude >= that value are kept, so ``rho = 0`` or a cut
    index of zero leaves the layer untouched.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1), got {rho}")
    w = np.asarray(weights)
    k = int(np.floor(rho * w.size))
    if k == 0:
        return w.copy(), np.ones_like(w, dtype=np.float32)
    threshold = np.sort(np.abs(w), axis=None)[k - 1]
    mask = (np.abs(w) >= threshold).astype(np.float32)
    return w * mask, mask


def prune_params(params: ParamSet, spec: PruneSpec):
    """Prune every weight matrix in place; returns (masks, sparsity rows)."""
    masks: dict[str, np.ndarray] = {}
    rows = []
    for name in prunable_names(params):
        rho = spec.ratio_for(layer_of(name))
        t = params[name]
        pruned, mask = prune_layer(t.data, rho)
        t.data = pruned.astype(np.float32)
        masks[name] = mask
        n = mask.size
        # the threshold element itself is kept, so a tie-free layer zeroes
        # exactly cut − 1 entries; ties can only lower the count further
        cut = int(np.floor(rho * n))
        rows.append({"layer": name, "n_weights": n, "rho": rho,
                     "target_zeros": max(cut - 1, 0),
                     "actual_zeros": int(n - mask.sum())})
    return masks, rows


# ---------------------------------------------------------------------------
# quantization

@dataclass
class QuantParams:
    b: int
    S: float
    Z: int
    constant: bool = False


def _round_half_away(x: np.ndarray | float):
    return np.trunc(x + np.copysign(0.5, x))


def quantize_layer(weights: np.ndarray, b: int):
    """Map a layer to unsigned ``b``-bit codes with an affine scale/zero-point."""
    if not 2 <= b <= 16:
        raise ValueError(f"bit width must be in [2, 16], got {b}")
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty layer")
    lo, hi = float(w.min()), float(w.max())
    levels = 2 ** b - 1
    if hi == lo:
        # degenerate constant layer: identity scale, codes are the clamped value
        qp = QuantParams(b=b, S=1.0, Z=0, constant=True)
        codes = np.clip(_round_half_away(w), 0, levels).astype(np.uint16)
        return codes, qp
    S = (hi - lo) / levels
    Z = int(np.clip(-_round_half_away(levels * lo / (hi - lo)), 0, levels))
    codes = np.clip(_round_half_away(w / S) + Z, 0, levels).astype(np.uint16)
    return codes, QuantParams(b=b, S=S, Z=Z)


def dequantize_layer(codes: np.ndarray, qp: QuantParams) -> np.ndarray:
    return (qp.S * (codes.astype(np.float64) - qp.Z)).astype(np.float32)


def apply_quantization(params: ParamSet, b: int,
                       masks: dict[str, np.ndarray] | None = None):
    """Simulated quantized inference: replace each weight matrix with its
    dequantized value (pruned positions stay exactly zero)."""
    qps = {}
    for name in prunable_names(params):
        t = params[name]
        codes, qp = quantize_layer(t.data, b)
        deq = dequantize_layer(codes, qp)
        if masks is not None and name in masks:
            deq = deq * masks[name]
        t.data = deq
        qps[name] = qp
    return qps


# ---------------------------------------------------------------------------
# compression ratios

def net_compression_ratio(layer_sizes: dict[str, int], spec: PruneSpec, b: int) -> float:
    """Size ratio of one network: (32/b) Σ_l (N_l / N_total) / (1 − ρ_l)."""
    total = sum(layer_sizes.values())
    acc = 0.0
    for name, n in layer_sizes.items():
        rho = spec.ratio_for(layer_of(name))
        acc += (n / total) / (1.0 - rho)
    return (32.0 / b) * acc


def compression_ratio(ssc_sizes: dict[str, int], mc_sizes: dict[str, int],
                      spec: PruneSpec, b: int):
    """(device ratio, server ratio, size-weighted overall ratio)."""
    g_ssc = net_compression_ratio(ssc_sizes, spec, b)
    g_mc = net_compression_ratio(mc_sizes, spec, b)
    n_ssc, n_mc = sum(ssc_sizes.values()), sum(mc_sizes.values())
    g = (n_ssc * g_ssc + n_mc * g_mc) / (n_ssc + n_mc)
    return g_ssc, g_mc, g


def weight_matrix_sizes(params: ParamSet) -> dict[str, int]:
    return {name: params[name].data.size for name in prunable_names(params)}


def serialized_sizes(params: ParamSet, masks: dict[str, np.ndarray], b: int):
    """Measured byte counts: dense f32 payload, packed kept-weight codes and
    everything else (names, shapes, scale/zero-point, mask bitsets)."""
    dense_bytes = code_bytes = overhead_bytes = 0
    for name in prunable_names(params):
        n = params[name].data.size
        kept = int(masks[name].sum()) if name in masks else n
        dense_bytes += 4 * n
        code_bytes += (kept * b + 7) // 8
        overhead_bytes += 2 + len(name) + 1 + 8 + 4 + 1 + 4 * params[name].data.ndim
        overhead_bytes += (n + 7) // 8      # mask bitset
    return {"dense_bytes": dense_bytes, "code_bytes": code_bytes,
            "overhead_bytes": overhead_bytes}


# ---------------------------------------------------------------------------
# quantized checkpoint (CAMCQ001)

def _pack_codes(codes: np.ndarray, b: int) -> bytes:
    flat = codes.reshape(-1).astype(np.uint16)
    bits = (flat[:, None] >> np.arange(b, dtype=np.uint16)) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def _unpack_codes(blob: bytes, n: int, b: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")[:n * b]
    weights = (1 << np.arange(b, dtype=np.uint32))
    return (bits.reshape(n, b).astype(np.uint32) * weights).sum(axis=1).astype(np.uint16)


def save_quantized(path, layers: dict[str, tuple[np.ndarray, QuantParams, np.ndarray]]):
    """Write {name: (codes, QuantParams, mask)} as a CAMCQ001 file.

    Codes cover kept positions only, in row-major order of the mask.
    """
    with open(path, "wb") as f:
        f.write(QUANT_MAGIC)
        for name, (codes, qp, mask) in layers.items():
            nb = name.encode("utf-8")
            flat_mask = np.asarray(mask, dtype=bool).reshape(-1)
            kept_codes = np.asarray(codes).reshape(-1)[flat_mask]
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BdiB", qp.b, qp.S, qp.Z, np.asarray(mask).ndim))
            f.write(struct.pack(f"<{np.asarray(mask).ndim}I", *np.asarray(mask).shape))
            f.write(np.packbits(flat_mask, bitorder="little").tobytes())
            f.write(_pack_codes(kept_codes, qp.b))


def load_quantized(path) -> dict[str, tuple[np.ndarray, QuantParams, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != QUANT_MAGIC:
        raise QuantFileError(f"bad magic in {path!s}")
    pos, out = 8, {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            b, S, Z, rank = struct.unpack_from("<BdiB", blob, pos)
            pos += struct.calcsize("<BdiB")
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            mask_bytes = (n + 7) // 8
            flat_mask = np.unpackbits(
                np.frombuffer(blob[pos:pos + mask_bytes], dtype=np.uint8),
                bitorder="little")[:n].astype(bool)
            pos += mask_bytes
            kept = int(flat_mask.sum())
            code_bytes = (kept * b + 7) // 8
            if pos + code_bytes > len(blob):
                raise QuantFileError(f"truncated quantized checkpoint codes for {name}")
            kept_codes = _unpack_codes(blob[pos:pos + code_bytes], kept, b)
            pos += code_bytes
            codes = np.zeros(n, dtype=np.uint16)
            codes[flat_mask] = kept_codes
            out[name] = (codes.reshape(dims),
                         QuantParams(b=b, S=S, Z=Z, constant=(S == 1.0 and Z == 0)),
                         flat_mask.reshape(dims).astype(np.float32))
    except struct.error as exc:
        raise QuantFileError(f"truncated quantized checkpoint: {exc}") from exc
    if pos != len(blob):
        raise QuantFileError("truncated quantized checkpoint payload")
    return out


def restore_quantized(params: ParamSet, path):
    for name, (codes, qp, mask) in load_quantized(path).items():
        params[name].data = dequantize_layer(codes, qp) * mask


# ---------------------------------------------------------------------------
# FLOPs accounting

@dataclass
class FlopsReport:
    rows: list[dict]
    c_ssc: float
    c_mc: float
    lam: float
    reading: str

    @property
    def effective(self) -> float:
        return self.c_ssc + self.lam * self.c_mc


def flops_report(ssc_config, mc_config, spec: PruneSpec | None = None,
                 lam: float = 0.1, reading: str = "kept") -> FlopsReport:
    """Per-layer multiply-accumulate counts for both networks.

    ``reading`` selects how a layer's pruning ratio scales its dense count:
    "kept" multiplies by the surviving fraction (1 − ρ), "literal" by ρ
    itself.  Sparsity only pays off in the kept-fraction reading, which is
    therefore the default.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"cost factor must be in (0, 1], got {lam}")
    if reading not in ("kept", "literal"):
        raise ValueError(f"unknown reading: {reading!r}")
    spec = spec or PruneSpec()

    def mult(layer):
        rho = spec.ratio_for(layer)
        return (1.0 - rho) if reading == "kept" else (rho if rho > 0 else 1.0)

    c = ssc_config
    rows = [
        # Conv1D: 2 FLOPs per weight per output position along the feature map
        {"net": "ssc", "layer": "conv1",
         "flops": 2 * mult("conv1") * c.L * (c.conv1_len * 2 * c.conv1_kernels)},
        {"net": "ssc", "layer": "conv2",
         "flops": 2 * mult("conv2") * c.L * (c.conv2_len * c.conv1_kernels * c.conv2_kernels)},
        {"net": "ssc", "layer": "dense1",
         "flops": 2 * mult("dense1") * (c.conv2_kernels * c.N)},
    ]
    m = mc_config
    width = 2 * m.lstm_units
    rows += [
        {"net": "mc", "layer": "bilstm1",
         "flops": 4 * mult("bilstm1") * m.N * (1 * m.lstm_units + m.lstm_units ** 2)},
        {"net": "mc", "layer": "bilstm2",
         "flops": 4 * mult("bilstm2") * m.N * (width * m.lstm_units + m.lstm_units ** 2)},
        {"net": "mc", "layer": "attention",
         "flops": (mult("attention") * m.n_heads * m.head_dim * (3 * width + width)
                   + 2 * m.n_heads * m.head_dim ** 2)},
        {"net": "mc", "layer": "dense2",
         "flops": 2 * mult("dense2") * (width * m.dense2)},
        {"net": "mc", "layer": "dense3",
         "flops": 2 * mult("dense3") * (m.dense2 * m.M)},
    ]
    c_ssc = sum(r["flops"] for r in rows if r["net"] == "ssc")
    c_mc = sum(r["flops"] for r in rows if r["net"] == "mc")
    return FlopsReport(rows=rows, c_ssc=c_ssc, c_mc=c_mc, lam=lam, reading=reading)
