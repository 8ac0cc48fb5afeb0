"""Central finite-difference gradient verification.

The checker evaluates the function twice per coordinate and never consults
the tape's backward rules, so it stays an independent oracle for them.
"""

from __future__ import annotations

import numpy as np

from . import engine as dc
from .engine import NumericalError, Tape, Tensor

__all__ = ["grad_check", "numeric_gradient", "primitive_suite"]


def numeric_gradient(f, x: Tensor, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = x.values.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            probe = base.copy()
            probe.reshape(-1)[i] += sign * epsilon
            val = f(Tensor(probe, requires_grad=False)).item()
            if not np.isfinite(val):
                raise NumericalError(f"grad_check: f non-finite at probe coordinate {i}")
            if slot == 0:
                plus = val
            else:
                minus = val
        flat[i] = (plus - minus) / (2.0 * epsilon)
    x.values[...] = base
    return grad


def grad_check(f, x: Tensor, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    f must be a scalar-valued function of one tensor; x should be float64 for
    the comparison to mean anything.
    """
    probe = Tensor(x.values.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
    if loss.values.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {loss.values.shape}")
    if not np.isfinite(loss.values).all():
        raise NumericalError("grad_check: f non-finite at the base point")
    tape.backward(loss)
    analytic = probe.grad.astype(np.float64)
    numeric = numeric_gradient(f, Tensor(x.values.copy()), epsilon=epsilon)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def _suite_cases(rng):
    """One (name, f, probe shape) per differentiable argument of each primitive.

    Every co-input is drawn once here so each f is a fixed function of its
    probe tensor.
    """
    c = lambda *s: Tensor(rng.normal(size=s))  # constant co-input

    a34, b34, mix34 = c(3, 4), c(3, 4), c(3, 4)
    bias4, bias5, bias3 = c(4), c(5), c(3)
    w45, x34 = c(4, 5), c(3, 4)
    s31 = Tensor(rng.uniform(0.1, 0.9, size=(3, 1)))
    cw, cb, cx = c(2, 1, 3, 3), c(2), c(1, 1, 4, 4)
    mix38, mix234, mix43 = c(3, 8), c(2, 3, 4), c(4, 3)
    half34 = Tensor(np.full((3, 4), 0.5))
    labels = rng.integers(0, 4, size=3)

    return [
        ("add", lambda v: dc.reduce_sum(dc.mul(dc.add(v, a34), b34)), (3, 4)),
        ("add_bias", lambda v: dc.reduce_sum(dc.mul(dc.add(a34, v), b34)), (4,)),
        ("sub", lambda v: dc.reduce_sum(dc.mul(dc.sub(v, a34), b34)), (3, 4)),
        ("mul", lambda v: dc.reduce_sum(dc.mul(dc.mul(v, a34), b34)), (3, 4)),
        ("scale", lambda v: dc.reduce_sum(dc.scale(v, 2.5)), (3, 4)),
        ("scale_rows_x", lambda v: dc.reduce_sum(dc.mul(dc.scale_rows(v, s31), mix34)), (3, 4)),
        ("scale_rows_s", lambda v: dc.reduce_sum(dc.mul(dc.scale_rows(a34, dc.reshape(v, (3, 1))), mix34)), (3,)),
        ("matmul_a", lambda v: dc.reduce_sum(dc.matmul(v, w45)), (3, 4)),
        ("matmul_b", lambda v: dc.reduce_sum(dc.matmul(x34, v)), (4, 5)),
        ("affine_x", lambda v: dc.reduce_sum(dc.affine(v, w45, bias5)), (3, 4)),
        ("affine_w", lambda v: dc.reduce_sum(dc.affine(x34, v, bias5)), (4, 5)),
        ("affine_b", lambda v: dc.reduce_sum(dc.affine(x34, w45, v)), (5,)),
        ("conv2d_x", lambda v: dc.reduce_sum(dc.conv2d(v, cw, cb, stride=1, padding=1)), (1, 1, 4, 4)),
        ("conv2d_w", lambda v: dc.reduce_sum(dc.conv2d(cx, v, cb, stride=1, padding=0)), (2, 1, 3, 3)),
        ("conv2d_b", lambda v: dc.reduce_sum(dc.conv2d(cx, cw, v, stride=2, padding=1)), (2,)),
        ("maxpool2d", lambda v: dc.reduce_sum(dc.maxpool2d(v, 2)), (1, 2, 4, 4)),
        ("relu", lambda v: dc.reduce_sum(dc.mul(dc.relu(v), mix34)), (3, 4)),
        ("sigmoid", lambda v: dc.reduce_sum(dc.mul(dc.sigmoid(v), mix34)), (3, 4)),
        ("exp", lambda v: dc.reduce_sum(dc.exp(dc.scale(v, 0.5))), (3, 4)),
        ("log", lambda v: dc.reduce_sum(dc.log(dc.add(dc.mul(v, v), half34))), (3, 4)),
        ("concat", lambda v: dc.reduce_sum(dc.mul(dc.concat([v, a34], axis=1), mix38)), (3, 4)),
        ("stack", lambda v: dc.reduce_sum(dc.mul(dc.stack([v, a34]), mix234)), (3, 4)),
        ("take_row", lambda v: dc.reduce_sum(dc.mul(dc.take_row(v, 1), bias4)), (3, 4)),
        ("reshape", lambda v: dc.reduce_sum(dc.mul(dc.reshape(v, (4, 3)), mix43)), (3, 4)),
        ("reduce_sum_axis", lambda v: dc.reduce_sum(dc.mul(dc.reduce_sum(v, axis=0), bias4)), (3, 4)),
        ("reduce_mean", lambda v: dc.reduce_mean(v), (3, 4)),
        ("reduce_max", lambda v: dc.reduce_sum(dc.mul(dc.reduce_max(v, axis=0), bias4)), (3, 4)),
        ("reduce_max_all", lambda v: dc.reduce_max(v), (3, 4)),
        ("bag_lse", lambda v: dc.reduce_sum(dc.mul(dc.reduce_bag(v, "lse"), bias3)), (5, 3)),
        ("bag_avg", lambda v: dc.reduce_sum(dc.mul(dc.reduce_bag(v, "avg"), bias3)), (5, 3)),
        ("bag_max", lambda v: dc.reduce_sum(dc.mul(dc.reduce_bag(v, "max"), bias3)), (5, 3)),
        ("softmax_cross_entropy", lambda v: dc.softmax_cross_entropy(v, labels), (3, 4)),
    ]


def primitive_suite(trials: int = 100, seed: int = 0, epsilon: float = 1e-5):
    """Finite-difference check of every primitive over random double inputs.

    Returns {name: max relative error over all trials}.
    """
    worst: dict[str, float] = {}
    for t in range(trials):
        rng = np.random.default_rng((seed, t))
        for name, f, shape in _suite_cases(rng):
            x = Tensor(rng.normal(size=shape))
            err = grad_check(f, x, epsilon=epsilon)
            if err > worst.get(name, 0.0):
                worst[name] = err
    return worst
