"""Gradient verification suite: primitives in isolation, then full models.

Primitive checks are exhaustive over small tensors whose values keep a
safe margin from ReLU/pooling decision boundaries, so plain central
differences apply. The full-model checks sample elements per parameter
tensor and adjudicate kink crossings (see ``grad_check``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    concat,
    conv1d,
    dense,
    flatten,
    grad_check,
    maxpool1d,
    mse,
    relu,
    softmax_cross_entropy,
    subtract,
)
from .models import SiameseModel, SlotFillModel, VggConfig

FULL_MODEL_SAMPLES = 3     # elements checked per parameter tensor
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_EPS = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRADCHECK_TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max relative error {self.max_rel_error:.3e} "
                f"({self.seconds:.1f}s)")


def _margin_uniform(rng, shape, lo=0.2, hi=1.5):
    # Magnitudes in [lo, hi] with random signs: eps-perturbations cannot
    # flip a ReLU sign or a pooling argmax.
    mag = rng.uniform(lo, hi, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return mag * sign


def _check_primitives(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0

    def run(fn, params):
        nonlocal worst
        worst = max(worst, grad_check(fn, params, eps=GRADCHECK_EPS))

    # relu
    x = Parameter("x", _margin_uniform(rng, (3, 5)))
    t = Tensor(rng.normal(size=(3, 5)))
    run(lambda: mse(relu(x), t), [x])

    # dense, batched and unbatched
    w = Parameter("w", rng.normal(size=(4, 6)))
    b = Parameter("b", rng.normal(size=4))
    xb = Tensor(rng.normal(size=(3, 6)))
    tb = Tensor(rng.normal(size=(3, 4)))
    run(lambda: mse(dense(xb, w, b), tb), [w, b])
    x1 = Tensor(rng.normal(size=6))
    t1 = Tensor(rng.normal(size=4))
    run(lambda: mse(dense(x1, w, b), t1), [w, b])

    # conv1d
    k = Parameter("k", rng.normal(size=(4, 2, 3)))
    cb = Parameter("cb", rng.normal(size=4))
    xc = Tensor(rng.normal(size=(2, 2, 9)))
    tc = Tensor(rng.normal(size=(2, 4, 9)))
    run(lambda: mse(conv1d(xc, k, cb), tc), [k, cb])

    # maxpool1d: enforce a wide gap inside every pooled pair so an eps
    # perturbation cannot flip the argmax
    base = _margin_uniform(rng, (2, 3, 4))
    gap = rng.uniform(0.3, 0.8, size=(2, 3, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4))
    xp = Parameter("xp", np.stack([base, base + gap], axis=-1).reshape(2, 3, 8))
    tp = Tensor(rng.normal(size=(2, 3, 4)))
    run(lambda: mse(maxpool1d(xp), tp), [xp])

    # concat + subtract + flatten; distinct biases per branch, otherwise
    # the bias gradient cancels to exactly 0 and the finite-difference
    # noise floor dominates the relative error
    wa = Parameter("wa", rng.normal(size=(3, 4)))
    wb = Parameter("wb", rng.normal(size=(3, 4)))
    ba = Parameter("ba", rng.normal(size=3))
    bc = Parameter("bc", rng.normal(size=3))
    xj = Tensor(rng.normal(size=(2, 4)))
    tj = Tensor(rng.normal(size=(2, 6)))
    run(lambda: mse(concat((dense(xj, wa, ba), dense(xj, wb, bc)), axis=1), tj),
        [wa, wb, ba, bc])
    ts = Tensor(rng.normal(size=(2, 3)))
    run(lambda: mse(subtract(dense(xj, wa, ba), dense(xj, wb, bc)), ts), [wa, wb, ba, bc])
    tf = Tensor(rng.normal(size=8))
    xf = Parameter("xf", rng.normal(size=(2, 4)))
    run(lambda: mse(flatten(xf), tf), [xf])

    # softmax cross entropy; modest logit scale keeps probabilities and
    # therefore gradients away from the relative-error noise floor
    wl = Parameter("wl", rng.normal(scale=0.5, size=(5, 4)))
    bl = Parameter("bl", rng.normal(scale=0.5, size=5))
    labels = rng.integers(0, 5, size=4)
    xl = Tensor(rng.normal(size=(4, 4)))
    run(lambda: softmax_cross_entropy(dense(xl, wl, bl), labels), [wl, bl])

    # mse on both arguments
    pa = Parameter("pa", rng.normal(size=(3, 4)))
    pb = Parameter("pb", rng.normal(size=(3, 4)))
    run(lambda: mse(pa, pb), [pa, pb])
    return worst


def _check_siamese(seed: int, width: float) -> float:
    rng = np.random.default_rng(seed)
    model = SiameseModel(VggConfig(width_multiplier=width), seed=seed, dtype=np.float64)
    a = rng.normal(0.0, 300.0, size=(2, 100))
    b = rng.normal(0.0, 300.0, size=(2, 100))
    labels = rng.integers(0, 2, size=2)
    return grad_check(
        lambda: model.pair_loss(a, b, labels), model.parameters(),
        eps=GRADCHECK_EPS, samples_per_param=FULL_MODEL_SAMPLES,
        rng=np.random.default_rng(seed + 1), adjudicate_kinks=True)


def _check_slotfill(seed: int, hidden_dim: int) -> float:
    rng = np.random.default_rng(seed)
    model = SlotFillModel(seed=seed, dtype=np.float64, hidden_dim=hidden_dim)
    p1, p2, p3 = (rng.normal(0.0, 300.0, size=(2, 100)) for _ in range(3))
    return grad_check(
        lambda: model.triple_loss(p1, p2, p3), model.parameters(),
        eps=GRADCHECK_EPS, samples_per_param=FULL_MODEL_SAMPLES,
        rng=np.random.default_rng(seed + 1), adjudicate_kinks=True)


def run_gradcheck_suite(
    n_seeds: int = 10,
    width: float = 0.25,
    slotfill_hidden: int = 256,
    base_seed: int = 0,
) -> list[CheckResult]:
    """Run every check across ``n_seeds`` seeds; one result per check.

    The Siamese model runs at the given encoder width and the slot-fill
    model at a reduced hidden size: sampled-element checking already
    covers every parameter tensor, and the layer code is identical at
    every width, so the reduction buys speed without losing coverage.
    """
    seeds = [base_seed + i for i in range(n_seeds)]
    results = []
    for name, fn in (
        ("primitive ops (exhaustive)", _check_primitives),
        (f"siamese pair loss (width {width})", lambda s: _check_siamese(s, width)),
        (f"slot-fill triple loss (hidden {slotfill_hidden})",
         lambda s: _check_slotfill(s, slotfill_hidden)),
    ):
        start = time.perf_counter()
        worst = max(fn(s) for s in seeds)
        results.append(CheckResult(name, worst, time.perf_counter() - start))
    return results
