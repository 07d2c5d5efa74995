"""Device-side semantic encoder: two Conv1D stages, column-sum pooling and a
dense projection down to the N-dimensional embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, ParamSet, ROLE_BIAS, ROLE_BN_STAT, functional as F
from .numcore.tensor import no_grad


@dataclass
class SscConfig:
    L: int = 512
    N: int = 64
    conv1_kernels: int = 64
    conv1_len: int = 8
    conv2_kernels: int = 32
    conv2_len: int = 8
    dropout: float = 0.5
    pool: str = "sum"            # "mean"/"max" exist only for pooling-ablation tests

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.compression_rate < 1:
            raise ValueError(f"compression rate 2L/N = {self.compression_rate} must be >= 1")

    @property
    def compression_rate(self) -> float:
        return 2 * self.L / self.N


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class SSCNet:
    """f(X_AP; Θ): (B, L, 2) amplitude/phase batches → (B, N) embeddings."""

    def __init__(self, config: SscConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c = self.config = config
        p = self.params = ParamSet()
        k1, k2 = c.conv1_len, c.conv2_len
        p.add("conv1.w", _glorot(rng, k1 * 2, k1 * c.conv1_kernels, (k1, 2, c.conv1_kernels)))
        p.add("conv1.b", np.zeros(c.conv1_kernels), ROLE_BIAS)
        p.add("conv2.w", _glorot(rng, k2 * c.conv1_kernels, k2 * c.conv2_kernels,
                                 (k2, c.conv1_kernels, c.conv2_kernels)))
        p.add("conv2.b", np.zeros(c.conv2_kernels), ROLE_BIAS)
        p.add("bn1.gamma", np.ones(c.conv2_kernels))
        p.add("bn1.beta", np.zeros(c.conv2_kernels), ROLE_BIAS)
        p.add("bn1.running_mean", np.zeros(c.conv2_kernels), ROLE_BN_STAT)
        p.add("bn1.running_var", np.ones(c.conv2_kernels), ROLE_BN_STAT)
        p.add("dense1.w", _glorot(rng, c.conv2_kernels, c.N, (c.conv2_kernels, c.N)))
        p.add("dense1.b", np.zeros(c.N), ROLE_BIAS)
        p.add("bn2.gamma", np.ones(c.N))
        p.add("bn2.beta", np.zeros(c.N), ROLE_BIAS)
        p.add("bn2.running_mean", np.zeros(c.N), ROLE_BN_STAT)
        p.add("bn2.running_var", np.ones(c.N), ROLE_BN_STAT)

    def forward(self, x: Tensor, mode: str = "infer",
                rng: np.random.Generator | None = None) -> Tensor:
        c, p = self.config, self.params
        if x.data.ndim != 3 or x.data.shape[1] != c.L or x.data.shape[2] != 2:
            raise F.ShapeError(
                f"sscnet: input must be (batch, {c.L}, 2), got shape {x.data.shape}"
            )
        h = F.relu(F.conv1d(x, p["conv1.w"], p["conv1.b"]))
        if mode == "train" and c.dropout > 0:
            h = F.dropout(h, c.dropout, rng)
        h = F.relu(F.conv1d(h, p["conv2.w"], p["conv2.b"]))
        if c.pool == "sum":
            h = F.column_sum_pool(h)
        elif c.pool == "mean":
            h = F.scale(F.column_sum_pool(h), 1.0 / c.L)
        elif c.pool == "max":
            h = F.column_max_pool(h)
        else:
            raise ValueError(f"unknown pooling mode: {self.config.pool!r}")
        h = F.batchnorm(h, p["bn1.gamma"], p["bn1.beta"],
                        p["bn1.running_mean"], p["bn1.running_var"], mode)
        h = F.selu(F.dense(h, p["dense1.w"], p["dense1.b"]))
        return F.batchnorm(h, p["bn2.gamma"], p["bn2.beta"],
                           p["bn2.running_mean"], p["bn2.running_var"], mode)

    def encode(self, ap_frame: np.ndarray, mode: str = "infer",
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Embed one L×2 A/P frame."""
        x = Tensor(np.asarray(ap_frame)[None, :, :])
        if mode == "infer":
            with no_grad():
                return self.forward(x, mode).data[0].copy()
        return self.forward(x, mode, rng).data[0].copy()

    def n_params(self, trainable_only: bool = True) -> int:
        return self.params.n_params(trainable_only)

    @staticmethod
    def analytic_param_count(config: SscConfig, trainable_only: bool = True) -> int:
        c = config
        n = (c.conv1_len * 2 * c.conv1_kernels + c.conv1_kernels
             + c.conv2_len * c.conv1_kernels * c.conv2_kernels + c.conv2_kernels
             + 2 * c.conv2_kernels
             + c.conv2_kernels * c.N + c.N
             + 2 * c.N)
        if not trainable_only:
            n += 2 * c.conv2_kernels + 2 * c.N
        return n
