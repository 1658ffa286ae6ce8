"""Central finite-difference verification of every differentiable op.

Each check builds small random tensors, scalarizes the op output through a
mean-squared deviation from an arbitrary constant (so every output element
gets a distinct weight in the pullback), and compares the autodiff
gradients against central differences computed by re-running the forward
pass with perturbed entries.  Inputs are nudged away from the non-smooth
points of ReLU/LeakyReLU, max-pooling, and the L1 loss so the difference
quotient never straddles a kink.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from . import ops
from .engine import Tensor, no_grad

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-4
_SCALARIZE_TARGET = 0.37


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.abs(analytic - numeric)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((num / den).max()) if analytic.size else 0.0


def finite_difference_gradients(loss_fn: Callable[[], Tensor],
                                params: Sequence[Tensor],
                                h: float = DEFAULT_STEP) -> list[np.ndarray]:
    grads = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.ravel()
            gflat = g.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss_fn().item()
                flat[i] = orig - h
                lo = loss_fn().item()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * h)
            grads.append(g)
    return grads


def compare_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = DEFAULT_STEP) -> float:
    """Max relative error between autodiff and finite-difference gradients."""
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_difference_gradients(loss_fn, params, h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _away_from_zero(arr: np.ndarray, margin: float) -> np.ndarray:
    """Push entries out of (-margin, margin) so kinks stay out of FD reach."""
    small = np.abs(arr) < margin
    arr[small] = arr[small] + np.where(arr[small] >= 0, margin, -margin) * 2.0
    return arr


def _separated_blocks(rng: np.random.Generator, shape: tuple[int, ...],
                      margin: float) -> np.ndarray:
    """Random volume whose 2x2x2 block maxima win by at least ``margin``."""
    for _ in range(100):
        x = rng.normal(size=shape)
        n, c, d, h, w = shape
        blocks = (x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
                  .transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(-1, 8))
        top2 = np.sort(blocks, axis=1)[:, -2:]
        if (top2[:, 1] - top2[:, 0]).min() > margin:
            return x
    raise RuntimeError("could not sample tie-free pooling input")


def _scalarize(out: Tensor) -> Tensor:
    return ops.mse_loss(out, _SCALARIZE_TARGET)


def _check_conv3d(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    return [x, w, b], lambda: _scalarize(ops.conv3d(x, w, b, stride=2, pad=1))


def _check_maxpool3d(rng):
    x = Tensor(_separated_blocks(rng, (1, 2, 2, 4, 4), margin=0.01), requires_grad=True)
    return [x], lambda: _scalarize(ops.maxpool3d(x))


def _check_upsample(rng):
    x = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
    return [x], lambda: _scalarize(ops.upsample_nearest3d(x))


def _check_instance_norm(rng):
    x = Tensor(rng.normal(size=(2, 2, 2, 3, 2)), requires_grad=True)
    gain = Tensor(rng.normal(size=2), requires_grad=True)
    shift = Tensor(rng.normal(size=2), requires_grad=True)
    return [x, gain, shift], lambda: _scalarize(ops.instance_norm(x, gain, shift, eps=1e-5))


def _check_relu(rng):
    x = Tensor(_away_from_zero(rng.normal(size=(2, 3, 2, 2, 2)), 0.01), requires_grad=True)
    return [x], lambda: _scalarize(ops.relu(x))


def _check_leaky_relu(rng):
    x = Tensor(_away_from_zero(rng.normal(size=(2, 3, 2, 2, 2)), 0.01), requires_grad=True)
    return [x], lambda: _scalarize(ops.leaky_relu(x, slope=0.2))


def _check_tanh(rng):
    x = Tensor(rng.normal(size=(2, 3, 2, 2, 2)), requires_grad=True)
    return [x], lambda: _scalarize(ops.tanh(x))


def _check_cross_entropy(rng):
    c = 4
    logits = Tensor(rng.normal(size=(1, c, 2, 2, 2)) * 2.0, requires_grad=True)
    labels = rng.integers(0, c, size=(1, 2, 2, 2))
    return [logits], lambda: ops.softmax_cross_entropy(logits, labels)


def _check_l1(rng):
    a_data = rng.normal(size=(2, 3, 4))
    b_data = rng.normal(size=(2, 3, 4))
    gap = a_data - b_data
    a_data = a_data + np.where(np.abs(gap) < 0.01, np.sign(gap + 0.5) * 0.02, 0.0)
    a = Tensor(a_data, requires_grad=True)
    b = Tensor(b_data, requires_grad=True)
    return [a, b], lambda: ops.l1_loss(a, b)


def _check_mse(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    return [a], lambda: ops.mse_loss(a, 0.5)


def _check_concat(rng):
    a = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 2, 2, 2)), requires_grad=True)
    return [a, b], lambda: _scalarize(ops.concat_channels(a, b))


def _check_add_scale(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    return [a, b], lambda: ops.mse_loss(a + b * 1.7, 0.1)


def _check_mean(rng):
    x = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), requires_grad=True)
    return [x], lambda: ops.mean_all(x)


OP_CHECKS: dict[str, Callable] = {
    "conv3d": _check_conv3d,
    "maxpool3d": _check_maxpool3d,
    "upsample_nearest3d": _check_upsample,
    "instance_norm": _check_instance_norm,
    "relu": _check_relu,
    "leaky_relu": _check_leaky_relu,
    "tanh": _check_tanh,
    "softmax_cross_entropy": _check_cross_entropy,
    "l1_loss": _check_l1,
    "mse_loss": _check_mse,
    "concat_channels": _check_concat,
    "add_scale": _check_add_scale,
    "mean_all": _check_mean,
}


def check_op(name: str, seed: int, h: float = DEFAULT_STEP) -> float:
    salt = zlib.crc32(name.encode("utf-8"))
    rng = np.random.default_rng([seed, salt])
    params, loss_fn = OP_CHECKS[name](rng)
    return compare_gradients(loss_fn, params, h=h)


def run_gradient_suite(seeds: int = 20, base_seed: int = 0,
                       h: float = DEFAULT_STEP) -> dict[str, float]:
    """Max relative FD error per op across ``seeds`` random instances."""
    results = {}
    for name in OP_CHECKS:
        results[name] = max(check_op(name, base_seed + s, h=h) for s in range(seeds))
    return results
