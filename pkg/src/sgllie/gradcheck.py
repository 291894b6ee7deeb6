"""Central finite-difference verification of tape gradients.

Every registered op and block is checked in 64-bit mode: build a scalar
loss from random leaves, backprop once, then perturb sampled coordinates
by +/- step and compare. The FD side never touches the backward rules, so
it stays an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import imageops as iops
from . import tensor as T
from .precision import precision

FD_STEP = 1e-4
OP_TOL = 1e-5
BLOCK_TOL = 1e-4


def leaf(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> T.Tensor:
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def fd_check(fn: Callable[[], T.Tensor], leaves: list[T.Tensor],
             samples: int = 6, step: float = FD_STEP,
             rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradient and central differences.

    `fn` rebuilds the scalar loss from the shared leaf tensors on every
    call; coordinates are sampled per leaf.
    """
    rng = rng or np.random.default_rng(0)
    for t in leaves:
        t.zero_grad()
    fn().backward()
    grads = [t.grad.copy() for t in leaves]

    worst = 0.0
    for t, grad in zip(leaves, grads):
        n = t.data.size
        idxs = range(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for i in idxs:
            keep = t.data.flat[i]
            t.data.flat[i] = keep + step
            up = fn().item()
            t.data.flat[i] = keep - step
            down = fn().item()
            t.data.flat[i] = keep
            fd = (up - down) / (2.0 * step)
            a = grad.flat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            worst = max(worst, rel)
    return worst


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _weighted_sum(out: T.Tensor, r: np.ndarray) -> T.Tensor:
    return T.sum_all(T.mul(out, T.Tensor(r)))


# -- op checks ----------------------------------------------------------------

def _binary(op):
    def check(rng):
        a = leaf(rng, (3, 4))
        b = leaf(rng, (3, 4), lo=0.5, hi=2.0)  # keep div well away from 0
        r = rng.standard_normal((3, 4))
        return fd_check(lambda: _weighted_sum(op(a, b), r), [a, b], rng=rng)
    return check


def _unary(op, lo=-1.0, hi=1.0):
    def check(rng):
        x = leaf(rng, (4, 5), lo=lo, hi=hi)
        r = rng.standard_normal((4, 5))
        return fd_check(lambda: _weighted_sum(op(x), r), [x], rng=rng)
    return check


def _check_matmul(rng):
    a = leaf(rng, (4, 5))
    b = leaf(rng, (5, 3))
    r = rng.standard_normal((4, 3))
    return fd_check(lambda: _weighted_sum(T.matmul(a, b), r), [a, b], rng=rng)


def _check_matmul_batched(rng):
    a = leaf(rng, (2, 3, 4, 5))
    b = leaf(rng, (3, 5, 6))  # broadcast over the leading batch dim
    r = rng.standard_normal((2, 3, 4, 6))
    return fd_check(lambda: _weighted_sum(T.matmul(a, b), r), [a, b], rng=rng)


def _check_softmax(rng):
    x = leaf(rng, (3, 6), lo=-2.0, hi=2.0)
    r = rng.standard_normal((3, 6))
    return fd_check(lambda: _weighted_sum(T.softmax(x, axis=1), r), [x], rng=rng)


def _check_layer_norm(rng):
    x = leaf(rng, (2, 5, 3, 3))
    gain = leaf(rng, (5,), lo=0.5, hi=1.5)
    shift = leaf(rng, (5,))
    r = rng.standard_normal((2, 5, 3, 3))
    return fd_check(lambda: _weighted_sum(T.layer_norm(x, gain, shift, axis=1), r),
                    [x, gain, shift], rng=rng)


def _check_conv(stride, padding, dilation):
    def check(rng):
        x = leaf(rng, (2, 3, 8, 8))
        w = leaf(rng, (4, 3, 3, 3), lo=-0.5, hi=0.5)
        b = leaf(rng, (4,))
        out = iops.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
        r = rng.standard_normal(out.shape)
        return fd_check(
            lambda: _weighted_sum(iops.conv2d(x, w, b, stride=stride,
                                              padding=padding, dilation=dilation), r),
            [x, w, b], rng=rng)
    return check


def _check_reflect_pad(rng):
    x = leaf(rng, (1, 2, 5, 6))
    r = rng.standard_normal((1, 2, 9, 10))
    return fd_check(lambda: _weighted_sum(iops.reflect_pad2d(x, 2), r), [x], rng=rng)


def _check_resample(mode, shape):
    def check(rng):
        x = leaf(rng, shape)
        out = iops.resample(x, mode)
        r = rng.standard_normal(out.shape)
        return fd_check(lambda: _weighted_sum(iops.resample(x, mode), r), [x], rng=rng)
    return check


def _check_concat(rng):
    a = leaf(rng, (2, 3, 2))
    b = leaf(rng, (2, 2, 2))
    r = rng.standard_normal((2, 5, 2))
    return fd_check(lambda: _weighted_sum(T.concat([a, b], axis=1), r), [a, b], rng=rng)


def _check_slice(rng):
    x = leaf(rng, (3, 6, 6))
    r = rng.standard_normal((3, 2, 3))
    key = (slice(None), slice(1, 3), slice(0, 6, 2))
    return fd_check(lambda: _weighted_sum(x[key], r), [x], rng=rng)


def _check_reshape(rng):
    x = leaf(rng, (2, 3, 4))
    r = rng.standard_normal((6, 4))
    return fd_check(lambda: _weighted_sum(T.reshape(x, (6, 4)), r), [x], rng=rng)


def _check_transpose(rng):
    x = leaf(rng, (2, 3, 4))
    r = rng.standard_normal((4, 2, 3))
    return fd_check(lambda: _weighted_sum(T.transpose(x, (2, 0, 1)), r), [x], rng=rng)


def _check_reduce(op, shape, out_shape):
    def check(rng):
        x = leaf(rng, shape)
        r = rng.standard_normal(out_shape)
        return fd_check(lambda: _weighted_sum(op(x), r), [x], rng=rng)
    return check


def _check_avg_pool(rng):
    x = leaf(rng, (2, 3, 6, 6))
    r = rng.standard_normal((2, 3, 3, 3))
    return fd_check(lambda: _weighted_sum(iops.avg_pool2x(x), r), [x], rng=rng)


OP_CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div),
    "scalar_mul": _unary(lambda x: T.scalar_mul(x, 1.7)),
    "relu": _unary(T.relu, lo=0.1, hi=1.5),
    "gelu": _unary(T.gelu, lo=-2.0, hi=2.0),
    "exp": _unary(T.exp),
    "log": _unary(T.log, lo=0.5, hi=2.0),
    "sqrt": _unary(T.sqrt, lo=0.5, hi=2.0),
    "square": _unary(T.square),
    "tanh": _unary(T.tanh, lo=-2.0, hi=2.0),
    "sigmoid": _unary(T.sigmoid, lo=-2.0, hi=2.0),
    "abs": _unary(T.absolute, lo=0.2, hi=1.5),
    "pow_const": _unary(lambda x: T.pow_const(x, 1.3), lo=0.5, hi=2.0),
    "clamp": _unary(lambda x: T.clamp(x, -10.0, 10.0), lo=-1.0, hi=1.0),
    "matmul": _check_matmul,
    "matmul_batched": _check_matmul_batched,
    "softmax": _check_softmax,
    "layer_norm": _check_layer_norm,
    "conv2d_s1p1": _check_conv(1, 1, 1),
    "conv2d_s2p1": _check_conv(2, 1, 1),
    "conv2d_d2p2": _check_conv(1, 2, 2),
    "reflect_pad": _check_reflect_pad,
    "bilinear_down_2x": _check_resample("bilinear_down_2x", (1, 2, 8, 8)),
    "bilinear_down_4x": _check_resample("bilinear_down_4x", (1, 2, 8, 8)),
    "bilinear_up_2x": _check_resample("bilinear_up_2x", (1, 2, 4, 4)),
    "pixel_shuffle_r2": _check_resample("pixel_shuffle_r2", (1, 8, 3, 3)),
    "pixel_unshuffle_r2": _check_resample("pixel_unshuffle_r2", (1, 2, 6, 6)),
    "avg_pool2x": _check_avg_pool,
    "sum_all": _check_reduce(T.sum_all, (3, 4), ()),
    "mean_all": _check_reduce(T.mean_all, (3, 4), ()),
    "sum_axis": _check_reduce(lambda x: T.sum_axis(x, 1), (3, 4, 2), (3, 2)),
    "mean_axis": _check_reduce(lambda x: T.mean_axis(x, (0, 2), keepdims=True),
                               (3, 4, 2), (1, 4, 1)),
    "global_avg_pool": _check_reduce(T.global_avg_pool, (2, 3, 4, 4), (2, 3, 1, 1)),
    "concat": _check_concat,
    "slice": _check_slice,
    "reshape": _check_reshape,
    "transpose": _check_transpose,
}


def _run_checks(names, registry, tol, repeats: int, seed: int) -> list[CheckResult]:
    results = []
    with precision("f64"):
        for name in names:
            worst = 0.0
            for rep in range(repeats):
                rng = np.random.default_rng(seed + 1000 * rep + hash(name) % 1000)
                worst = max(worst, registry[name](rng))
            results.append(CheckResult(name, worst, tol))
    return results


def check_ops(which: str = "all", repeats: int = 3, seed: int = 7) -> list[CheckResult]:
    """FD-verify tensor ops; `repeats` random shapes/seeds per op."""
    names = list(OP_CHECKS) if which == "all" else [which]
    for n in names:
        if n not in OP_CHECKS:
            raise KeyError(f"unknown op {n!r}")
    return _run_checks(names, OP_CHECKS, OP_TOL, repeats, seed)


def check_blocks(which: str = "all", repeats: int = 1, seed: int = 11) -> list[CheckResult]:
    """FD-verify composite blocks and the assembled model (64-bit)."""
    from .blockcheck import BLOCK_CHECKS
    names = list(BLOCK_CHECKS) if which == "all" else [which]
    for n in names:
        if n not in BLOCK_CHECKS:
            raise KeyError(f"unknown block {n!r}")
    return _run_checks(names, BLOCK_CHECKS, BLOCK_TOL, repeats, seed)
