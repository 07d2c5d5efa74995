"""Finite-difference gradient verification.

The oracle re-evaluates the loss with perturbed parameters and never touches
the analytic backward path, so the two stay independent.  The whole check
runs in float64 (parameters temporarily upcast) so the comparison is not
drowned in float32 rounding noise; the backward rules under test are the
same code that runs in float32 production.
"""

from __future__ import annotations

import numpy as np

from .tensor import backward, precision


def _rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / denom


def grad_check(loss_fn, params, eps: float = 1e-3, tolerance: float = 1e-3,
               max_per_block: int = 25, rng=None):
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` rebuilds the graph and returns a scalar Tensor; ``params``
    maps block name → parameter Tensor.  Returns a report dict with the max
    relative error per block and an overall pass flag.
    """
    rng = rng or np.random.default_rng(0)
    saved = {name: t.data for name, t in params.items()}
    for t in params.values():
        t.data = t.data.astype(np.float64)
        t.grad = None
    try:
        with precision(np.float64):
            loss = loss_fn()
            backward(loss)
            analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                        for name, t in params.items()}

            report = {"blocks": {}, "tolerance": tolerance, "eps": eps}
            worst = 0.0
            for name, t in params.items():
                flat = t.data.reshape(-1)
                n = flat.size
                picks = (np.arange(n) if n <= max_per_block
                         else rng.choice(n, size=max_per_block, replace=False))
                block_err = 0.0
                for j in picks:
                    orig = flat[j]
                    flat[j] = orig + eps
                    f_plus = float(loss_fn().data)
                    flat[j] = orig - eps
                    f_minus = float(loss_fn().data)
                    flat[j] = orig
                    fd = (f_plus - f_minus) / (2 * eps)
                    block_err = max(block_err, _rel_err(fd, float(analytic[name].reshape(-1)[j])))
                report["blocks"][name] = block_err
                worst = max(worst, block_err)
    finally:
        for name, t in params.items():
            t.data = saved[name]
            t.grad = None
    report["max_rel_err"] = worst
    report["passed"] = worst < tolerance
    return report
