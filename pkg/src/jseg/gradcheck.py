"""Finite-difference verification of every differentiable operation.

Each case builds a scalar from random inputs, differentiates it on the
tape, and compares against central differences.  The error reported is
relative with an absolute floor: |a - n| / max(1, |a|, |n|), so tiny
gradients are judged on an absolute scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as T
from .tensor import Tape, Tensor

FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_err < self.tol


def numeric_gradient(f, arrays: list[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Central finite differences of scalar ``f(arrays)`` w.r.t. each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = g.reshape(-1)
        base = a.reshape(-1)
        for i in range(base.size):
            orig = base[i]
            base[i] = orig + h
            up = f(arrays)
            base[i] = orig - h
            down = f(arrays)
            base[i] = orig
            flat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def tape_gradient(build, arrays: list[np.ndarray]) -> list[np.ndarray]:
    """Reverse-mode gradients of the scalar produced by ``build(tensors)``."""
    tensors = [Tensor(a.copy(), tracked=True) for a in arrays]
    with Tape() as tape:
        out = build(tensors)
        tape.backward(out)
    return [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]


def compare(build, arrays: list[np.ndarray], h: float = FD_STEP) -> float:
    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    analytic = tape_gradient(build, arrays)
    numeric = numeric_gradient(f, arrays, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def _away_from(x: np.ndarray, point: float = 0.0, margin: float = 0.05) -> np.ndarray:
    """Nudge entries off a kink so central differences stay two-sided."""
    close = np.abs(x - point) < margin
    return x + np.where(close, np.where(x >= point, margin, -margin) * 2.0, 0.0)


def _proj_loss(rng):
    proj = None

    def build(out):
        nonlocal proj
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return (out * Tensor(proj)).sum()

    return build


def op_cases(rng: np.random.Generator):
    """Yield (name, build, arrays) triples covering every differentiable op."""
    loss = lambda: _proj_loss(rng)  # noqa: E731

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    for kind in ("add", "sub", "mul"):
        lp = loss()
        yield (
            f"elementwise.{kind}",
            lambda ts, k=kind, lp=lp: lp(T.elementwise(k, ts[0], ts[1])),
            [a.copy(), b.copy()],
        )
    lp = loss()
    yield (
        "elementwise.div",
        lambda ts, lp=lp: lp(T.elementwise("div", ts[0], ts[1])),
        [a.copy(), _away_from(rng.standard_normal((4,)), margin=0.4)],
    )
    gap = np.where(rng.random(a.shape) < 0.5, -1.0, 1.0) * (0.3 + rng.random(a.shape))
    lp = loss()
    yield (
        "elementwise.max",
        lambda ts, lp=lp: lp(T.elementwise("max", ts[0], ts[1])),
        [a.copy(), a + gap],
    )

    unary_inputs = {
        "relu": _away_from(rng.standard_normal((4, 3))),
        "softplus": rng.standard_normal((4, 3)),
        "exp": rng.standard_normal((4, 3)),
        "log": np.abs(rng.standard_normal((4, 3))) + 0.4,
        "abs": _away_from(rng.standard_normal((4, 3))),
    }
    for kind, x in unary_inputs.items():
        lp = loss()
        yield (
            f"elementwise.{kind}",
            lambda ts, k=kind, lp=lp: lp(T.elementwise(k, ts[0])),
            [x],
        )

    lp = loss()
    yield (
        "sigmoid",
        lambda ts, lp=lp: lp(T.sigmoid(ts[0])),
        [rng.standard_normal((3, 5))],
    )
    lp = loss()
    yield (
        "sqrt",
        lambda ts, lp=lp: lp(T.tsqrt(ts[0])),
        [np.abs(rng.standard_normal((3, 5))) + 0.3],
    )

    lp = loss()
    yield (
        "matmul",
        lambda ts, lp=lp: lp(ts[0] @ ts[1]),
        [rng.standard_normal((5, 4)), rng.standard_normal((4, 3))],
    )

    lp = loss()
    yield (
        "conv2d.k3s1",
        lambda ts, lp=lp: lp(ops.conv2d(ts[0], ts[1])),
        [rng.standard_normal((5, 6, 3)), rng.standard_normal((3, 3, 3, 2)) * 0.5],
    )
    lp = loss()
    yield (
        "conv2d.k1s1",
        lambda ts, lp=lp: lp(ops.conv2d(ts[0], ts[1])),
        [rng.standard_normal((4, 4, 3)), rng.standard_normal((1, 1, 3, 2))],
    )
    lp = loss()
    yield (
        "conv2d.k3s2",
        lambda ts, lp=lp: lp(ops.conv2d(ts[0], ts[1], stride=2)),
        [rng.standard_normal((6, 6, 2)), rng.standard_normal((3, 3, 2, 2)) * 0.5],
    )
    lp = loss()
    yield (
        "conv2d_kernel_grad",
        lambda ts, lp=lp: lp(ops.conv2d_kernel_grad(ts[0], ts[1], 3)),
        [rng.standard_normal((5, 5, 2)), rng.standard_normal((5, 5, 3)) * 0.5],
    )

    for axis in (-1, 0):
        lp = loss()
        yield (
            f"softmax.axis{axis}",
            lambda ts, ax=axis, lp=lp: lp(ops.softmax(ts[0], axis=ax)),
            [rng.standard_normal((4, 5))],
        )

    lp = loss()
    yield (
        "l2_normalize",
        lambda ts, lp=lp: lp(ops.l2_normalize(ts[0], axis=-1)),
        [rng.standard_normal((4, 6)) + 0.1],
    )
    lp = loss()
    yield (
        "instance_norm",
        lambda ts, lp=lp: lp(ops.instance_norm(ts[0])),
        [rng.standard_normal((7, 3))],
    )
    lp = loss()
    yield (
        "avgpool2x2",
        lambda ts, lp=lp: lp(ops.avgpool2x2(ts[0])),
        [rng.standard_normal((4, 6, 2))],
    )
    lp = loss()
    yield (
        "resize.up",
        lambda ts, lp=lp: lp(ops.resize_bilinear(ts[0], 8, 8)),
        [rng.standard_normal((4, 4, 2))],
    )
    lp = loss()
    yield (
        "resize.down",
        lambda ts, lp=lp: lp(ops.resize_bilinear(ts[0], 4, 3)),
        [rng.standard_normal((6, 5, 2))],
    )

    lp = loss()
    yield (
        "sum.axis",
        lambda ts, lp=lp: lp(ts[0].sum(axis=1)),
        [rng.standard_normal((3, 4, 2))],
    )
    lp = loss()
    yield (
        "mean.keepdims",
        lambda ts, lp=lp: lp(ts[0].mean(axis=0, keepdims=True)),
        [rng.standard_normal((5, 3))],
    )
    lp = loss()
    yield (
        "reshape.transpose",
        lambda ts, lp=lp: lp(T.transpose(ts[0].reshape(4, 6), (1, 0))),
        [rng.standard_normal((2, 3, 4))],
    )
    lp = loss()
    yield (
        "concat",
        lambda ts, lp=lp: lp(T.concat([ts[0], ts[1]], axis=0)),
        [rng.standard_normal((2, 3)), rng.standard_normal((4, 3))],
    )


def run_op_checks(seeds, tol: float = 1e-4) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, build, arrays in op_cases(rng):
            err = compare(build, arrays)
            results.append(CheckResult(f"{name}[seed={seed}]", err, tol))
    return results


def run_unrolled_checks(seeds, steps: int = 3, tol: float = 1e-3) -> list[CheckResult]:
    """Differentiate through an unrolled inner optimization (see fewshot)."""
    from .fewshot import unrolled_loss_build

    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        build, arrays = unrolled_loss_build(rng, steps=steps)
        err = compare(build, arrays)
        results.append(CheckResult(f"unrolled.{steps}steps[seed={seed}]", err, tol))
    return results
