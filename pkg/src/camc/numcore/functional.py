"""Differentiable layer primitives.

All primitives are batched, operate on float32 and register hand-written
backward closures.  Reductions accumulate in float64 before rounding back to
float32 for cross-platform reproducibility.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, make_node, accumulate

# Canonical self-normalizing SELU constants.
SELU_ALPHA = 1.67326324
SELU_SCALE = 1.05070098

BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# elementwise / arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, g)
        accumulate(b, g)
    return make_node(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)
    return make_node(a.data * b.data, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        accumulate(a, g * s)
    return make_node(a.data * s, (a,), bwd, "scale")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        accumulate(a, g * out_data)
    return make_node(out_data, (a,), bwd, "exp")


def clamped_log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); zero gradient where the floor is active."""
    clipped = np.maximum(a.data, a.data.dtype.type(floor))
    active = a.data >= floor

    def bwd(g):
        accumulate(a, np.where(active, g / clipped, 0.0))
    return make_node(np.log(clipped), (a,), bwd, "clamped_log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        accumulate(a, g * mask)
    return make_node(np.where(mask, a.data, 0.0), (a,), bwd, "relu")


def selu(a: Tensor) -> Tensor:
    pos = a.data > 0
    neg_branch = SELU_ALPHA * np.expm1(np.minimum(a.data, 0.0).astype(np.float64))
    out_data = np.where(pos, SELU_SCALE * a.data, SELU_SCALE * neg_branch)

    def bwd(g):
        d = np.where(pos, SELU_SCALE, SELU_SCALE * (neg_branch + SELU_ALPHA))
        accumulate(a, g * d)
    return make_node(out_data, (a,), bwd, "selu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = (1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))).astype(a.data.dtype)

    def bwd(g):
        accumulate(a, g * out_data * (1.0 - out_data))
    return make_node(out_data, (a,), bwd, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        accumulate(a, g * (1.0 - out_data * out_data))
    return make_node(out_data, (a,), bwd, "tanh")


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        accumulate(a, g.reshape(old))
    return make_node(a.data.reshape(shape), (a,), bwd, "reshape")


def slice_(a: Tensor, idx) -> Tensor:
    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        accumulate(a, buf)
    return make_node(a.data[idx], (a,), bwd, "slice")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate(t, piece)
    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat")


def swap_last(a: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, np.swapaxes(g, -1, -2))
    return make_node(np.swapaxes(a.data, -1, -2).copy(), (a,), bwd, "swap_last")


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, np.broadcast_to(g, a.data.shape))
    return make_node(a.data.sum(dtype=np.float64), (a,), bwd, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        accumulate(a, np.broadcast_to(g / n, a.data.shape))
    return make_node(a.data.sum(dtype=np.float64) / n, (a,), bwd, "mean")


def column_sum_pool(a: Tensor) -> Tensor:
    """Sum a (…, L, C) feature map over its time axis, yielding (…, C)."""
    if a.data.ndim < 2:
        raise ShapeError(f"column_sum_pool: need (length, channels) trailing dims, got shape {a.data.shape}")
    out_data = a.data.sum(axis=-2, dtype=np.float64).astype(a.data.dtype)

    def bwd(g):
        accumulate(a, np.broadcast_to(np.expand_dims(g, -2), a.data.shape))
    return make_node(out_data, (a,), bwd, "column_sum_pool")


def column_max_pool(a: Tensor) -> Tensor:
    """Max over the time axis of (…, L, C); kept for pooling ablations."""
    idx = a.data.argmax(axis=-2, keepdims=True)
    out_data = np.take_along_axis(a.data, idx, axis=-2).squeeze(-2)

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx, np.expand_dims(g, -2), axis=-2)
        accumulate(a, buf)
    return make_node(out_data, (a,), bwd, "column_max_pool")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims differ, lhs columns {a.data.shape[-1]} vs rhs rows {b.data.shape[-2]}"
        )

    def bwd(g):
        accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))
    return make_node(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"dense: input features {x.data.shape[-1]} vs weight input dim {w.data.shape[0]}"
        )

    def bwd(g):
        accumulate(x, g @ w.data.T)
        accumulate(w, x.data.reshape(-1, w.data.shape[0]).T @ g.reshape(-1, w.data.shape[1]))
        accumulate(b, g.reshape(-1, w.data.shape[1]).sum(axis=0, dtype=np.float64))
    return make_node(x.data @ w.data + b.data, (x, w, b), bwd, "dense")


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    p = (e / e.sum(axis=-1, keepdims=True)).astype(a.data.dtype)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        accumulate(a, p * (g - dot))
    return make_node(p, (a,), bwd, "softmax")


def softmax_cce(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Fused softmax + categorical cross-entropy, mean over the batch.

    Gradient of the logits is (softmax − labels) / batch.
    """
    y = np.asarray(onehot, dtype=np.float32)
    if y.shape != logits.data.shape:
        raise ShapeError(f"softmax_cce: labels shape {y.shape} vs logits shape {logits.data.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z.astype(np.float64)).sum(axis=-1, keepdims=True))
    logp = z - lse
    n_bat = logits.data.shape[0] if logits.data.ndim > 1 else 1
    loss = -(y * logp).sum(dtype=np.float64) / n_bat
    p = np.exp(logp).astype(logits.data.dtype)

    def bwd(g):
        accumulate(logits, g * (p - y) / n_bat)
    return make_node(loss, (logits,), bwd, "softmax_cce")


# ---------------------------------------------------------------------------
# structured layers

def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 1-D convolution: (B, L, Cin) ⊛ (K, Cin, Cout) → (B, L, Cout)."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d: input must be (batch, length, channels), got shape {x.data.shape}")
    K, cin, cout = w.data.shape
    if x.data.shape[2] != cin:
        raise ShapeError(f"conv1d: input channels {x.data.shape[2]} vs kernel channels {cin}")
    B, L, _ = x.data.shape
    pad_l, pad_r = (K - 1) // 2, K // 2
    xp = np.pad(x.data, ((0, 0), (pad_l, pad_r), (0, 0)))
    # (B, L, K, Cin) windows → flat matmul against (K·Cin, Cout)
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)  # (B, L, Cin, K)
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * L, K * cin)
    wf = w.data.reshape(K * cin, cout)
    out_data = (cols @ wf + b.data).reshape(B, L, cout)

    def bwd(g):
        gf = g.reshape(B * L, cout)
        accumulate(w, (cols.T @ gf).reshape(K, cin, cout))
        accumulate(b, gf.sum(axis=0, dtype=np.float64))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            g3 = g.reshape(B, L, cout)
            for k in range(K):
                dxp[:, k:k + L, :] += g3 @ w.data[k].T
            accumulate(x, dxp[:, pad_l:pad_l + L, :])
    return make_node(out_data, (x, w, b), bwd, "conv1d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout (training mode); callers use identity in inference."""
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(keep)

    def bwd(g):
        accumulate(x, g * mask)
    return make_node(x.data * mask, (x,), bwd, "dropout")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
              running_var: Tensor, mode: str, momentum: float = 0.9,
              eps: float = BN_EPS) -> Tensor:
    """Per-feature batch normalization over a (B, F) activation."""
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm: input must be (batch, features), got shape {x.data.shape}")
    if mode == "train":
        x64 = x.data.astype(np.float64)
        mu = x64.mean(axis=0)
        var = x64.var(axis=0)
        running_mean.data = (momentum * running_mean.data.astype(np.float64)
                             + (1.0 - momentum) * mu).astype(running_mean.data.dtype)
        running_var.data = (momentum * running_var.data.astype(np.float64)
                            + (1.0 - momentum) * var).astype(running_var.data.dtype)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
        xhat = ((x64 - mu) * inv_std).astype(x.data.dtype)
        out_data = gamma.data * xhat + beta.data
        B = x.data.shape[0]

        def bwd(g):
            accumulate(gamma, (g * xhat).sum(axis=0, dtype=np.float64))
            accumulate(beta, g.sum(axis=0, dtype=np.float64))
            if x.requires_grad:
                dxhat = g * gamma.data
                t1 = dxhat.sum(axis=0, dtype=np.float64)
                t2 = (dxhat * xhat).sum(axis=0, dtype=np.float64)
                dx = (inv_std / B) * (B * dxhat - t1 - xhat * t2)
                accumulate(x, dx)
        return make_node(out_data, (x, gamma, beta), bwd, "batchnorm")

    # Inference: deterministic affine map from running statistics.
    inv_std = (1.0 / np.sqrt(running_var.data.astype(np.float64) + eps)).astype(x.data.dtype)
    out_data = gamma.data * ((x.data - running_mean.data) * inv_std) + beta.data

    def bwd(g):
        accumulate(gamma, (g * (x.data - running_mean.data) * inv_std)
                   .sum(axis=0, dtype=np.float64))
        accumulate(beta, g.sum(axis=0, dtype=np.float64))
        accumulate(x, g * gamma.data * inv_std)
    return make_node(out_data, (x, gamma, beta), bwd, "batchnorm")


_ACTS = {"tanh": tanh, "selu": selu, "relu": relu}


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, u: Tensor, b: Tensor,
              activation: str = "tanh"):
    """One LSTM step: (B, Fin), (B, H), (B, H) → new (h, c).

    Gate layout along the 4H axis is [input, forget, candidate, output].
    ``activation`` squashes both the candidate and the cell output.
    """
    H = h.data.shape[-1]
    if w.data.shape != (x.data.shape[-1], 4 * H):
        raise ShapeError(
            f"lstm_cell: input weights {w.data.shape} vs expected ({x.data.shape[-1]}, {4 * H})"
        )
    act = _ACTS[activation]
    z = dense(x, w, b)
    z = add(z, matmul(h, u))
    i = sigmoid(slice_(z, (slice(None), slice(0, H))))
    f = sigmoid(slice_(z, (slice(None), slice(H, 2 * H))))
    g_ = act(slice_(z, (slice(None), slice(2 * H, 3 * H))))
    o = sigmoid(slice_(z, (slice(None), slice(3 * H, 4 * H))))
    c_new = add(mul(f, c), mul(i, g_))
    h_new = mul(o, act(c_new))
    return h_new, c_new


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (B, T, d) query/key/value stacks."""
    if q.data.ndim != 3:
        raise ShapeError(f"scaled_dot_attention: expected (batch, seq, dim), got shape {q.data.shape}")
    d = q.data.shape[-1]
    scores = scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(d))
    attn = softmax(scores)
    return matmul(attn, v)


# ---------------------------------------------------------------------------
# generic dispatch (diagnostics, grad checking)

def forward_primitive(kind: str, inputs, params=None, mode: str = "infer",
                      rng: np.random.Generator | None = None, **kw) -> Tensor:
    """Run one named primitive; shape violations raise ShapeError."""
    params = params or {}
    if kind == "conv1d":
        return conv1d(inputs[0], params["w"], params["b"])
    if kind == "dense":
        return dense(inputs[0], params["w"], params["b"])
    if kind == "lstm_cell":
        h, _ = lstm_cell(inputs[0], inputs[1], inputs[2], params["w"], params["u"],
                         params["b"], activation=kw.get("activation", "tanh"))
        return h
    if kind == "batchnorm":
        return batchnorm(inputs[0], params["gamma"], params["beta"],
                         params["running_mean"], params["running_var"], mode)
    if kind == "dropout":
        if mode != "train":
            return inputs[0]
        return dropout(inputs[0], kw.get("rate", 0.5), rng)
    if kind == "relu":
        return relu(inputs[0])
    if kind == "selu":
        return selu(inputs[0])
    if kind == "softmax":
        return softmax(inputs[0])
    if kind == "column_sum_pool":
        return column_sum_pool(inputs[0])
    if kind == "concat":
        return concat(inputs, axis=kw.get("axis", -1))
    if kind == "scaled_dot_attention":
        return scaled_dot_attention(inputs[0], inputs[1], inputs[2])
    raise ValueError(f"unknown primitive kind: {kind!r}")
