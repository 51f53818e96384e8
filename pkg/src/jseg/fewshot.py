"""Induction branch: an online-optimized convolutional target model.

The target model is a single same-padded convolution from matching
features to mask encodings.  It is fitted per object by steepest descent
on a weighted ridge objective over the memory samples; each step uses the
analytically optimal step length for the quadratic, so the objective
never increases.  Every step is built from ordinary tape operations,
which keeps the whole unrolled optimization differentiable for offline
training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import conv2d, conv2d_kernel_grad
from .tensor import Tensor

DENOM_FLOOR = 1e-20


@dataclass
class TargetModel:
    omega: Tensor        # k x k x c x d convolution kernel
    lambda_reg: Tensor   # positive scalar (softplus-parameterized upstream)


@dataclass
class FewShotProblem:
    """Per-sample (feature, target encoding, importance weight) triples."""

    feats: list          # each h x w x c
    encodings: list      # each h x w x d
    weights: list        # each h x w x d, elementwise non-negative

    def __post_init__(self):
        if not (len(self.feats) == len(self.encodings) == len(self.weights)):
            raise ShapeError("few-shot problem lists disagree in length")
        base = self.feats[0].shape[:2]
        for z, e, w in zip(self.feats, self.encodings, self.weights):
            if z.shape[:2] != base or e.shape[:2] != base or w.shape != e.shape:
                raise ShapeError("few-shot samples must share spatial shape")


def apply_model(model: TargetModel, x: Tensor) -> Tensor:
    """Map a search feature to its target-aware mask encoding."""
    return conv2d(x, model.omega)


def objective(problem: FewShotProblem, model: TargetModel) -> Tensor:
    """0.5 sum_i ||W_i * (conv(Z_i; w) - E_i)||^2 + 0.5 lambda ||w||^2."""
    total = None
    for z, e, w in zip(problem.feats, problem.encodings, problem.weights):
        r = w * (conv2d(z, model.omega) - e)
        term = (r * r).sum()
        total = term if total is None else total + term
    reg = model.lambda_reg * (model.omega * model.omega).sum()
    return 0.5 * (total + reg)


def steepest_descent_step(problem: FewShotProblem, model: TargetModel) -> TargetModel:
    """One exact-line-search descent step on the ridge objective.

    Degenerate curvature (denominator below 1e-20) returns the model
    unchanged; this only happens at a stationary point.
    """
    omega, lam = model.omega, model.lambda_reg
    ksize = omega.shape[0]
    grad = None
    for z, e, w in zip(problem.feats, problem.encodings, problem.weights):
        residual = conv2d(z, omega) - e
        weighted = w * w * residual
        term = conv2d_kernel_grad(z, weighted, ksize)
        grad = term if grad is None else grad + term
    grad = grad + lam * omega

    gg = (grad * grad).sum()
    curvature = None
    for z, w in zip(problem.feats, problem.weights):
        wg = w * conv2d(z, grad)
        term = (wg * wg).sum()
        curvature = term if curvature is None else curvature + term
    denom = curvature + lam * gg
    if denom.item() < DENOM_FLOOR:
        return model
    step = gg / denom
    return TargetModel(omega=omega - step * grad, lambda_reg=lam)


def optimize(problem: FewShotProblem, model: TargetModel, num_steps: int) -> TargetModel:
    for _ in range(num_steps):
        model = steepest_descent_step(problem, model)
    return model


def solve_ridge_1x1(problem: FewShotProblem, lam: float) -> np.ndarray:
    """Closed-form optimum for 1x1 kernels via assembled normal equations.

    Test oracle only; the production path is the iterative optimizer.
    """
    c = problem.feats[0].shape[2]
    d = problem.encodings[0].shape[2]
    omega = np.zeros((1, 1, c, d))
    for j in range(d):
        a = lam * np.eye(c)
        b = np.zeros(c)
        for z, e, w in zip(problem.feats, problem.encodings, problem.weights):
            zf = z.data.reshape(-1, c)
            ef = e.data.reshape(-1, d)[:, j]
            wf = w.data.reshape(-1, d)[:, j]
            scaled = zf * (wf ** 2)[:, None]
            a += scaled.T @ zf
            b += scaled.T @ ef
        omega[0, 0, :, j] = np.linalg.solve(a, b)
    return omega


def unrolled_loss_build(rng: np.random.Generator, steps: int = 3):
    """(build, arrays) pair for finite-difference checks through ``steps`` updates."""
    n, h, w, c, d, k = 2, 3, 3, 2, 2, 3
    arrays = []
    for _ in range(n):
        arrays.append(rng.standard_normal((h, w, c)))
    for _ in range(n):
        arrays.append(rng.standard_normal((h, w, d)))
    for _ in range(n):
        arrays.append(rng.random((h, w, d)) + 0.2)
    arrays.append(rng.standard_normal((k, k, c, d)) * 0.1)   # initial kernel
    arrays.append(np.array(0.5 + rng.random()))              # regularizer
    x_search = rng.standard_normal((h, w, c))
    proj = rng.standard_normal((h, w, d))

    def build(ts):
        problem = FewShotProblem(feats=ts[:n], encodings=ts[n:2 * n], weights=ts[2 * n:3 * n])
        model = TargetModel(omega=ts[3 * n], lambda_reg=ts[3 * n + 1])
        fitted = optimize(problem, model, steps)
        out = apply_model(fitted, Tensor(x_search))
        return (out * Tensor(proj)).sum()

    return build, arrays
