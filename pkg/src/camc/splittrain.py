"""Joint training of the encoder/classifier pair across a noisy link.

The device-side encoder and server-side classifier live in separate graphs.
One step sends the embedding forward through a noisy channel, computes the
classification loss on the server, and returns the (again noisy) embedding
gradient to the device, which back-propagates it locally.  With both link
SNRs infinite this collapses to ordinary monolithic backprop.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Tensor, ParamSet, backward, functional as F
from .numcore.params import save_checkpoint
from .rng import stream
from .sigsynth import to_ap


# ---------------------------------------------------------------------------
# configuration types

@dataclass
class LinkNoiseSpec:
    """AWGN levels on the embedding (forward) and gradient (backward) links.

    Noise power is referenced to the per-batch mean square of the clean
    signal on that link; infinite SNR means a noiseless link.
    """

    fwd_snr_db: float = float("inf")
    bwd_snr_db: float = float("inf")

    def sample(self, clean: np.ndarray, snr_db: float,
               rng: np.random.Generator | None) -> np.ndarray:
        if np.isinf(snr_db):
            return np.zeros_like(clean)
        if rng is None:
            raise ValueError("finite link SNR requires a noise generator")
        power = float(np.mean(np.square(clean, dtype=np.float64)))
        var = power / 10.0 ** (snr_db / 10.0)
        return rng.normal(0.0, np.sqrt(var), size=clean.shape).astype(clean.dtype)


@dataclass
class OptimizerConfig:
    rule: str = "sgd"            # "sgd" | "adaptive-moment"
    eta: float = 0.001
    batch: int = 200
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        if self.rule not in ("sgd", "adaptive-moment"):
            raise ValueError(f"unknown optimizer rule: {self.rule!r}")


class Optimizer:
    """Applies accumulated gradients to a ParamSet; optionally Adam-style."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamSet, masks: dict[str, np.ndarray] | None = None):
        cfg = self.config
        if cfg.rule == "sgd":
            for name, t in params.trainable():
                if t.grad is None:
                    continue
                g = t.grad if masks is None or name not in masks else t.grad * masks[name]
                t.data = t.data - cfg.eta * g.astype(t.data.dtype)
            return
        # adaptive-moment (Adam) with the usual defaults
        b1, b2, eps = 0.9, 0.999, 1e-8
        self._t += 1
        for name, t in params.trainable():
            if t.grad is None:
                continue
            g = t.grad.astype(np.float64)
            if masks is not None and name in masks:
                g = g * masks[name]
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m[:] = b1 * m + (1 - b1) * g
            v[:] = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self._t)
            v_hat = v / (1 - b2 ** self._t)
            t.data = t.data - (cfg.eta * m_hat / (np.sqrt(v_hat) + eps)).astype(t.data.dtype)


# ---------------------------------------------------------------------------
# loss

def cce_loss(preds: np.ndarray, labels: np.ndarray) -> float:
    """Mean categorical cross-entropy between probability vectors.

    ``preds`` and one-hot ``labels`` share shape (batch, M) or (M,).
    Predicted probabilities are clamped at 1e-12 before the log.
    """
    p_hat = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    p = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if p_hat.shape != p.shape:
        raise F.ShapeError(f"cce_loss: preds shape {p_hat.shape} vs labels shape {p.shape}")
    per_sample = -(p * np.log(np.maximum(p_hat, 1e-12))).sum(axis=-1)
    return float(per_sample.mean())


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# the split step

@dataclass
class StepResult:
    loss: float
    aborted: bool = False
    embedding_grad: np.ndarray | None = None


def split_gradients(sscnet, mcnet, x_batch: np.ndarray, onehot: np.ndarray,
                    noise: LinkNoiseSpec,
                    rng_fwd=None, rng_bwd=None,
                    rng_drop_dev=None, rng_drop_srv=None) -> StepResult:
    """Run the noisy forward/backward split and leave gradients on both nets.

    The embedding is detached at the link boundary: the server sees
    y = x_s + w (a fresh leaf), computes the loss, and the gradient u at
    that leaf travels back as v = u + w'; the device then back-propagates
    v through its own graph.  Neither noise draw enters either graph as a
    differentiable quantity.
    """
    sscnet.params.zero_grad()
    mcnet.params.zero_grad()

    x = Tensor(np.asarray(x_batch, dtype=np.float32))
    x_s = sscnet.forward(x, "train", rng_drop_dev)

    w_fwd = noise.sample(x_s.data, noise.fwd_snr_db, rng_fwd)
    y = Tensor(x_s.data + w_fwd, requires_grad=True)

    logits = mcnet.forward(y, "train", rng_drop_srv)
    loss = F.softmax_cce(logits, onehot)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        return StepResult(loss=loss_val, aborted=True)

    backward(loss)
    u = y.grad
    w_bwd = noise.sample(u, noise.bwd_snr_db, rng_bwd)
    v = u + w_bwd
    backward(x_s, seed_grad=v)
    return StepResult(loss=loss_val, embedding_grad=u.copy())


def offline_step(sscnet, mcnet, x_batch, onehot, noise: LinkNoiseSpec,
                 opt_dev: Optimizer, opt_srv: Optimizer,
                 rng_fwd=None, rng_bwd=None,
                 rng_drop_dev=None, rng_drop_srv=None,
                 masks_dev=None, masks_srv=None) -> StepResult:
    """One simulated-link training step: split gradients, then update both ends."""
    result = split_gradients(sscnet, mcnet, x_batch, onehot, noise,
                             rng_fwd, rng_bwd, rng_drop_dev, rng_drop_srv)
    if result.aborted:
        return result
    opt_srv.step(mcnet.params, masks_srv)
    opt_dev.step(sscnet.params, masks_dev)
    return result


def monolithic_step(sscnet, mcnet, x_batch, onehot,
                    opt_dev: Optimizer, opt_srv: Optimizer,
                    rng_drop_dev=None, rng_drop_srv=None) -> StepResult:
    """Reference update through the composed graph with no link in between."""
    sscnet.params.zero_grad()
    mcnet.params.zero_grad()
    x = Tensor(np.asarray(x_batch, dtype=np.float32))
    x_s = sscnet.forward(x, "train", rng_drop_dev)
    logits = mcnet.forward(x_s, "train", rng_drop_srv)
    loss = F.softmax_cce(logits, onehot)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        return StepResult(loss=loss_val, aborted=True)
    backward(loss)
    opt_srv.step(mcnet.params)
    opt_dev.step(sscnet.params)
    return StepResult(loss=loss_val)


# ---------------------------------------------------------------------------
# data plumbing

def frames_to_arrays(frames, label_order: list[str]):
    """IQ frames → (X: (n, L, 2) float32 amplitude/phase, y: (n,) int labels)."""
    index = {m: i for i, m in enumerate(label_order)}
    X = np.stack([to_ap(f.samples) for f in frames])
    y = np.array([index[f.label] for f in frames], dtype=np.int64)
    return X, y


def stretch_with_zeros(samples: np.ndarray, out_len: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Lengthen a frame by inserting zeros at uniformly chosen positions."""
    n = len(samples)
    if out_len < n:
        raise ValueError(f"cannot stretch length {n} down to {out_len}")
    keep = np.sort(rng.choice(out_len, size=n, replace=False))
    out = np.zeros(out_len, dtype=samples.dtype)
    out[keep] = samples
    return out


# ---------------------------------------------------------------------------
# evaluation

def evaluate(sscnet, mcnet, X: np.ndarray, y: np.ndarray, n_classes: int,
             noise: LinkNoiseSpec, rng_fwd=None, batch: int = 256):
    """Inference-mode pass over a split; returns (loss, accuracy, confusion)."""
    losses, correct = [], 0
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for lo in range(0, len(X), batch):
        xb, yb = X[lo:lo + batch], y[lo:lo + batch]
        x_s = sscnet.forward(Tensor(xb), "infer").data
        w = noise.sample(x_s, noise.fwd_snr_db, rng_fwd)
        probs = mcnet.classify(x_s + w)
        pred = probs.argmax(axis=-1)
        correct += int((pred == yb).sum())
        losses.append(cce_loss(probs, one_hot(yb, n_classes)) * len(yb))
        np.add.at(confusion, (yb, pred), 1)
    n = len(X)
    return sum(losses) / n, correct / n, confusion


# ---------------------------------------------------------------------------
# reporting

@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    confusion: np.ndarray | None = None
    wall_time_s: float = 0.0
    best_epoch: int = -1
    optimizer_rule: str = "sgd"
    aborted: bool = False

    def log(self, epoch: int, split: str, loss: float, acc: float):
        self.records.append({"epoch": epoch, "split": split,
                             "loss": float(loss), "acc": float(acc)})

    def lines(self) -> list[str]:
        return [f"epoch={r['epoch']} split={r['split']} "
                f"loss={r['loss']:.6f} acc={r['acc']:.4f}" for r in self.records]

    def write(self, out_dir, label_order: list[str] | None = None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_report.log").write_text("\n".join(self.lines()) + "\n")
        if self.confusion is not None:
            with open(out / "confusion.csv", "w", newline="") as f:
                w = csv.writer(f)
                names = label_order or [str(i) for i in range(len(self.confusion))]
                w.writerow(["true\\pred"] + list(names))
                for name, row in zip(names, self.confusion):
                    w.writerow([name] + [int(c) for c in row])


# ---------------------------------------------------------------------------
# training loops

def train_offline(sscnet, mcnet, train_data, val_data, n_classes: int,
                  noise: LinkNoiseSpec, config: OptimizerConfig,
                  out_dir=None, patience: int = 10,
                  label_order: list[str] | None = None) -> TrainReport:
    """Epoch loop with shuffling, validation early-stop and best-checkpoint.

    ``train_data``/``val_data`` are (X, y) array pairs.  Divergence (non-
    finite loss) aborts the run and keeps the last finite-loss parameters.
    """
    X_tr, y_tr = train_data
    X_val, y_val = val_data
    opt_dev, opt_srv = Optimizer(config), Optimizer(config)
    report = TrainReport(optimizer_rule=config.rule)
    t0 = time.monotonic()

    shuffle_rng = stream(config.seed, "data/shuffle")
    drop_dev = stream(config.seed, "dropout/device")
    drop_srv = stream(config.seed, "dropout/server")
    fwd_rng = stream(config.seed, "link/fwd")
    bwd_rng = stream(config.seed, "link/bwd")

    best_acc, best_state = -1.0, None
    since_best = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(X_tr))
        epoch_loss, n_seen = 0.0, 0
        for lo in range(0, len(order), config.batch):
            idx = order[lo:lo + config.batch]
            res = offline_step(sscnet, mcnet, X_tr[idx],
                               one_hot(y_tr[idx], n_classes), noise,
                               opt_dev, opt_srv,
                               fwd_rng, bwd_rng, drop_dev, drop_srv)
            if res.aborted:
                report.aborted = True
                break
            epoch_loss += res.loss * len(idx)
            n_seen += len(idx)
        if report.aborted:
            break
        report.log(epoch, "train", epoch_loss / max(n_seen, 1), float("nan"))

        val_fwd = stream(config.seed, "link/fwd/val", epoch)
        v_loss, v_acc, confusion = evaluate(sscnet, mcnet, X_val, y_val,
                                            n_classes, noise, val_fwd)
        report.log(epoch, "val", v_loss, v_acc)
        if v_acc > best_acc:
            best_acc, since_best = v_acc, 0
            report.best_epoch = epoch
            report.confusion = confusion
            best_state = (sscnet.params.state_arrays(), mcnet.params.state_arrays())
        else:
            since_best += 1
            if since_best >= patience:
                break

    if best_state is not None:
        sscnet.params.load_arrays(best_state[0])
        mcnet.params.load_arrays(best_state[1])
    report.wall_time_s = time.monotonic() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "sscnet.camcw", sscnet.params)
        save_checkpoint(out / "mcnet.camcw", mcnet.params)
        report.write(out, label_order)
    return report


def adapt(sscnet, mcnet, adapt_data, n_classes: int, noise: LinkNoiseSpec,
          config: OptimizerConfig, budget_epochs: int = 5) -> TrainReport:
    """Fine-tune every layer on a small shifted-distribution set at eta/10."""
    X, y = adapt_data
    report = TrainReport(optimizer_rule=config.rule)
    if len(X) == 0:
        return report
    tuned = OptimizerConfig(rule=config.rule, eta=config.eta / 10.0,
                            batch=min(config.batch, len(X)),
                            epochs=budget_epochs, seed=config.seed)
    opt_dev, opt_srv = Optimizer(tuned), Optimizer(tuned)
    shuffle_rng = stream(tuned.seed, "adapt/shuffle")
    drop_dev = stream(tuned.seed, "adapt/dropout/device")
    drop_srv = stream(tuned.seed, "adapt/dropout/server")
    fwd_rng = stream(tuned.seed, "adapt/link/fwd")
    bwd_rng = stream(tuned.seed, "adapt/link/bwd")
    for epoch in range(budget_epochs):
        order = shuffle_rng.permutation(len(X))
        epoch_loss, n_seen = 0.0, 0
        for lo in range(0, len(order), tuned.batch):
            idx = order[lo:lo + tuned.batch]
            res = offline_step(sscnet, mcnet, X[idx], one_hot(y[idx], n_classes),
                               noise, opt_dev, opt_srv,
                               fwd_rng, bwd_rng, drop_dev, drop_srv)
            if res.aborted:
                report.aborted = True
                return report
            epoch_loss += res.loss * len(idx)
            n_seen += len(idx)
        report.log(epoch, "adapt", epoch_loss / n_seen, float("nan"))
    return report
