"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

# On a disagreement, retry at these fractions of eps: a kink-contaminated
# central difference converges to the analytic value as the step shrinks,
# while a genuine backward bug disagrees at every scale. Deep nets put the
# nearest activation kink at micro-distance, hence the 1/1024 rung.
ADJUDICATION_SCALES = (0.125, 1.0 / 64.0, 1.0 / 1024.0)


def _central(fn: Callable[[], Tensor], flat: np.ndarray, i: int, eps: float) -> float:
    original = flat[i]
    flat[i] = original + eps
    f_plus = float(fn().data)
    flat[i] = original - eps
    f_minus = float(fn().data)
    flat[i] = original
    return (f_plus - f_minus) / (2.0 * eps)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-4,
    tolerance: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    adjudicate_kinks: bool = False,
) -> float:
    """Compare backward() gradients against central finite differences.

    ``fn`` must rebuild the scalar loss graph from the current parameter
    values on every call, with all other inputs held fixed. Every element
    of every parameter is perturbed unless ``samples_per_param`` caps the
    number checked per tensor (for large models). Parameters must be
    float64; float32 rounding would drown the comparison.

    Piecewise-linear nets (ReLU, max pooling) are differentiable almost
    everywhere, but a finite step can straddle a kink and corrupt the
    numeric estimate for that element even though the analytic gradient
    is right. With ``adjudicate_kinks`` an element whose error exceeds
    ``tolerance`` is re-estimated at smaller steps: if the estimate
    converges to the analytic value the element is discarded as a kink
    crossing and another element of the same tensor is drawn instead.
    A real backward bug disagrees at every step size and still fails.

    Returns the worst relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``
    over all accepted elements.
    """
    params = list(params)
    if not params:
        raise ValueError("grad_check needs at least one parameter")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(
                f"grad_check requires float64 parameters, {p.name} is {p.data.dtype}")
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued computation")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        n = flat.size

        def examine(i: int) -> float:
            """Relative error for element i, or -1 for a confirmed kink."""
            a = float(ana_flat[i])
            rel = _rel_err(a, _central(fn, flat, i, eps))
            if rel <= tolerance or not adjudicate_kinks:
                return rel
            for scale in ADJUDICATION_SCALES:
                fine = _rel_err(a, _central(fn, flat, i, eps * scale))
                if fine <= tolerance:
                    logger.debug("kink crossing at %s[%d] (coarse err %.2e)", p.name, i, rel)
                    return -1.0
                rel = min(rel, fine)
            return rel

        if samples_per_param is None or n <= samples_per_param:
            for i in range(n):
                err = examine(i)
                if err >= 0:
                    worst = max(worst, err)
        else:
            want = samples_per_param
            examined = accepted = 0
            for i in rng.permutation(n):
                if accepted >= want or examined >= want * 25:
                    break
                examined += 1
                err = examine(int(i))
                if err < 0:
                    continue  # kink crossing, gradient verified at finer step
                worst = max(worst, err)
                accepted += 1
    return worst
