"""Server-side classifier: two Bi-LSTM stages, multi-head self-attention on
the final-state vector, and a dense softmax head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, ParamSet, ROLE_BIAS, ROLE_BN_STAT, functional as F
from .numcore.tensor import no_grad
from .sscnet import _glorot


@dataclass
class McConfig:
    N: int = 64                  # embedding length = sequence length
    M: int = 11                  # number of classes
    lstm_units: int = 64         # per direction
    n_heads: int = 8
    head_dim: int = 16
    dense2: int = 256
    dropout: float = 0.5

    def __post_init__(self):
        if self.n_heads * self.head_dim != 2 * self.lstm_units:
            raise ValueError(
                f"n_heads*head_dim = {self.n_heads * self.head_dim} must equal "
                f"the concatenated Bi-LSTM width {2 * self.lstm_units}"
            )


def _lstm_params(p: ParamSet, prefix: str, fan_in: int, units: int, rng):
    p.add(f"{prefix}.w", _glorot(rng, fan_in, 4 * units, (fan_in, 4 * units)))
    p.add(f"{prefix}.u", _glorot(rng, units, 4 * units, (units, 4 * units)))
    b = np.zeros(4 * units)
    b[units:2 * units] = 1.0     # forget-gate bias
    p.add(f"{prefix}.b", b, ROLE_BIAS)


class MCNet:
    """g(y; Φ): (B, N) noisy embeddings → (B, M) class logits."""

    def __init__(self, config: McConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c = self.config = config
        p = self.params = ParamSet()
        H = c.lstm_units
        width = 2 * H
        _lstm_params(p, "bilstm1.fw", 1, H, rng)
        _lstm_params(p, "bilstm1.bw", 1, H, rng)
        _lstm_params(p, "bilstm2.fw", width, H, rng)
        _lstm_params(p, "bilstm2.bw", width, H, rng)
        for n in range(c.n_heads):
            for w in ("wq", "wk", "wv"):
                p.add(f"attn.head{n}.{w}", _glorot(rng, width, c.head_dim, (width, c.head_dim)))
        p.add("attn.out.w", _glorot(rng, width, width, (width, width)))
        p.add("attn.out.b", np.zeros(width), ROLE_BIAS)
        p.add("dense2.w", _glorot(rng, width, c.dense2, (width, c.dense2)))
        p.add("dense2.b", np.zeros(c.dense2), ROLE_BIAS)
        p.add("bn.gamma", np.ones(c.dense2))
        p.add("bn.beta", np.zeros(c.dense2), ROLE_BIAS)
        p.add("bn.running_mean", np.zeros(c.dense2), ROLE_BN_STAT)
        p.add("bn.running_var", np.ones(c.dense2), ROLE_BN_STAT)
        p.add("dense3.w", _glorot(rng, c.dense2, c.M, (c.dense2, c.M)))
        p.add("dense3.b", np.zeros(c.M), ROLE_BIAS)

    def _run_lstm(self, steps, prefix: str, batch: int):
        """Run one direction over a list of step tensors; returns all h_i."""
        p = self.params
        H = self.config.lstm_units
        h = Tensor(np.zeros((batch, H)))
        c = Tensor(np.zeros((batch, H)))
        outs = []
        for x_i in steps:
            h, c = F.lstm_cell(x_i, h, c, p[f"{prefix}.w"], p[f"{prefix}.u"],
                               p[f"{prefix}.b"], activation="selu")
            outs.append(h)
        return outs

    def forward(self, y: Tensor, mode: str = "infer",
                rng: np.random.Generator | None = None) -> Tensor:
        c, p = self.config, self.params
        if y.data.ndim != 2 or y.data.shape[1] != c.N:
            raise F.ShapeError(f"mcnet: input must be (batch, {c.N}), got shape {y.data.shape}")
        B = y.data.shape[0]

        # each embedding element is one scalar time step
        steps = [y[:, i:i + 1] for i in range(c.N)]
        fw1 = self._run_lstm(steps, "bilstm1.fw", B)
        bw1 = self._run_lstm(list(reversed(steps)), "bilstm1.bw", B)[::-1]
        h_seq = [F.concat([hf, hb], axis=-1) for hf, hb in zip(fw1, bw1)]
        if mode == "train" and c.dropout > 0:
            h_seq = [F.dropout(h, c.dropout, rng) for h in h_seq]

        e_f = self._run_lstm(h_seq, "bilstm2.fw", B)[-1]
        e_b = self._run_lstm(list(reversed(h_seq)), "bilstm2.bw", B)[-1]
        e = F.concat([e_f, e_b], axis=-1)                      # (B, 128)

        e3 = F.reshape(e, (B, 1, 2 * c.lstm_units))
        heads = []
        for n in range(c.n_heads):
            q = F.matmul(e3, p[f"attn.head{n}.wq"])
            k = F.matmul(e3, p[f"attn.head{n}.wk"])
            v = F.matmul(e3, p[f"attn.head{n}.wv"])
            heads.append(F.scaled_dot_attention(q, k, v))
        r = F.reshape(F.concat(heads, axis=-1), (B, c.n_heads * c.head_dim))
        o = F.dense(r, p["attn.out.w"], p["attn.out.b"])

        h = F.selu(F.dense(o, p["dense2.w"], p["dense2.b"]))
        h = F.batchnorm(h, p["bn.gamma"], p["bn.beta"],
                        p["bn.running_mean"], p["bn.running_var"], mode)
        if mode == "train" and c.dropout > 0:
            h = F.dropout(h, c.dropout, rng)
        return F.dense(h, p["dense3.w"], p["dense3.b"])

    def classify(self, embedding: np.ndarray, mode: str = "infer",
                 rng: np.random.Generator | None = None) -> np.ndarray:
        """Probability vector(s) for one embedding or a batch of them."""
        arr = np.asarray(embedding)
        single = arr.ndim == 1
        x = Tensor(arr[None, :] if single else arr)
        if mode == "infer":
            with no_grad():
                probs = F.softmax(self.forward(x, mode)).data
        else:
            probs = F.softmax(self.forward(x, mode, rng)).data
        return probs[0].copy() if single else probs.copy()

    def n_params(self, trainable_only: bool = True) -> int:
        return self.params.n_params(trainable_only)
