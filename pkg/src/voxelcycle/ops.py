"""Differentiable operations over 5-D volumetric tensors (N, C, D, H, W).

Forward values are computed with vectorized numpy; each op attaches a
backward closure to its output so :meth:`Tensor.backward` can replay the
chain rule.  Convolution uses patch-flattening (the patch matrix is rebuilt
during backward rather than stored, to keep graph memory proportional to
activations).

Non-smooth points use fixed conventions so results are deterministic:
ReLU/LeakyReLU take the positive-branch derivative at 0, the L1 subgradient
at 0 is 0, and max-pooling ties break toward the first element of the block
in (d, h, w) row-major order.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor
from .errors import LabelError, ShapeError

_SPATIAL = (2, 3, 4)


def _require_5d(t: Tensor, name: str) -> None:
    if t.ndim != 5:
        raise ShapeError(f"{name} must be 5-D (N,C,D,H,W), got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out_sp: tuple[int, int, int]) -> np.ndarray:
    """Patch matrix (N, Cin*k^3, L) from a padded input, L = prod(out_sp)."""
    n, c = xp.shape[:2]
    do, ho, wo = out_sp
    patches = np.empty((n, c, k, k, k, do, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                patches[:, :, i, j, l] = xp[
                    :, :,
                    i : i + stride * do : stride,
                    j : j + stride * ho : stride,
                    l : l + stride * wo : stride,
                ]
    return patches.reshape(n, c * k * k * k, do * ho * wo)


def _col2im(grad_cols: np.ndarray, xp_shape: tuple[int, ...], k: int, stride: int,
            out_sp: tuple[int, int, int]) -> np.ndarray:
    """Scatter-add the transpose of _im2col."""
    n, c = xp_shape[:2]
    do, ho, wo = out_sp
    grads = grad_cols.reshape(n, c, k, k, k, do, ho, wo)
    gxp = np.zeros(xp_shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gxp[
                    :, :,
                    i : i + stride * do : stride,
                    j : j + stride * ho : stride,
                    l : l + stride * wo : stride,
                ] += grads[:, :, i, j, l]
    return gxp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """3-D convolution with a cubic odd kernel; output extents follow
    floor((size + 2*pad - k) / stride) + 1 on each spatial axis."""
    _require_5d(x, "conv3d input")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5-D (Cout,Cin,k,k,k), got {weight.shape}")
    cout, cin, k, kh, kw = weight.shape
    if not (k == kh == kw):
        raise ShapeError(f"conv3d kernel must be cubic, got {(k, kh, kw)}")
    if k % 2 != 1:
        raise ShapeError(f"conv3d kernel extent must be odd, got {k}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d bias must have shape ({cout},), got {bias.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv3d channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    if stride < 1 or int(stride) != stride:
        raise ShapeError(f"conv3d stride must be a positive int, got {stride}")
    if pad < 0 or int(pad) != pad:
        raise ShapeError(f"conv3d pad must be a non-negative int, got {pad}")
    for axis, size in zip("DHW", x.shape[2:]):
        if size + 2 * pad < k:
            raise ShapeError(f"conv3d axis {axis}: extent {size} + 2*pad {pad} < kernel {k}")

    n = x.shape[0]
    out_sp = tuple(_conv_out_extent(s, k, stride, pad) for s in x.shape[2:])
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, out_sp)
    w2 = weight.data.reshape(cout, cin * k * k * k)
    out_data = (np.matmul(w2, cols) + bias.data.reshape(1, cout, 1)).reshape(n, cout, *out_sp)

    out = Tensor.result(out_data, (x, weight, bias), "conv3d")
    if out.requires_grad:
        xp_shape = xp.shape
        del xp, cols  # patch matrix is rebuilt on demand to keep the graph lean

        def _backward():
            g = out.grad.reshape(n, cout, -1)
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2)))
            if weight.requires_grad:
                xp_b = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) \
                    if pad else x.data
                cols_b = _im2col(xp_b, k, stride, out_sp)
                gw = np.matmul(g, cols_b.transpose(0, 2, 1)).sum(axis=0)
                weight.accumulate_grad(gw.reshape(weight.shape))
            if x.requires_grad:
                grad_cols = np.matmul(w2.T, g)
                gxp = _col2im(grad_cols, xp_shape, k, stride, out_sp)
                if pad:
                    gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
                x.accumulate_grad(gxp)

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# pooling / upsampling


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2; spatial extents must be even."""
    _require_5d(x, "maxpool3d input")
    for axis, size in zip("DHW", x.shape[2:]):
        if size % 2 != 0:
            raise ShapeError(f"maxpool3d axis {axis}: extent {size} is odd")
    n, c, d, h, w = x.shape
    d2, h2, w2 = d // 2, h // 2, w // 2
    blocks = (
        x.data.reshape(n, c, d2, 2, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d2, h2, w2, 8)
    )
    argmax = blocks.argmax(axis=-1)
    out = Tensor.result(blocks.max(axis=-1), (x,), "maxpool3d")
    if out.requires_grad:
        def _backward():
            g8 = np.zeros((n, c, d2, h2, w2, 8), dtype=np.float64)
            np.put_along_axis(g8, argmax[..., None], out.grad[..., None], axis=-1)
            gx = (
                g8.reshape(n, c, d2, h2, w2, 2, 2, 2)
                .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                .reshape(n, c, d, h, w)
            )
            x.accumulate_grad(gx)
        out._backward = _backward
    return out


def upsample_nearest3d(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling; backward sums each voxel's 8 children."""
    _require_5d(x, "upsample input")
    n, c, d, h, w = x.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    out = Tensor.result(out_data, (x,), "upsample_nearest3d")
    if out.requires_grad:
        def _backward():
            gx = out.grad.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7))
            x.accumulate_grad(gx)
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# normalization


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over the spatial voxels.

    Uses population variance and is differentiable through both statistics.
    """
    _require_5d(x, "instance_norm input")
    n, c = x.shape[:2]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"instance_norm gain/shift must have shape ({c},), "
                         f"got {gain.shape}/{shift.shape}")
    m = x.shape[2] * x.shape[3] * x.shape[4]
    if m < 2:
        raise ShapeError("instance_norm requires at least 2 voxels per slice "
                         "(degenerate statistics on a single voxel)")
    mu = x.data.mean(axis=_SPATIAL, keepdims=True)
    var = x.data.var(axis=_SPATIAL, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g5 = gain.data.reshape(1, c, 1, 1, 1)
    out = Tensor.result(xhat * g5 + shift.data.reshape(1, c, 1, 1, 1), (x, gain, shift),
                        "instance_norm")
    if out.requires_grad:
        def _backward():
            xh = (x.data - mu) * inv
            gy = out.grad
            if shift.requires_grad:
                shift.accumulate_grad(gy.sum(axis=(0, 2, 3, 4)))
            if gain.requires_grad:
                gain.accumulate_grad((gy * xh).sum(axis=(0, 2, 3, 4)))
            if x.requires_grad:
                dxhat = gy * g5
                term = (
                    m * dxhat
                    - dxhat.sum(axis=_SPATIAL, keepdims=True)
                    - xh * (dxhat * xh).sum(axis=_SPATIAL, keepdims=True)
                )
                x.accumulate_grad(inv / m * term)
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data >= 0
    out = Tensor.result(np.where(mask, x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        def _backward():
            x.accumulate_grad(out.grad * mask)
        out._backward = _backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ShapeError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    mask = x.data >= 0
    out = Tensor.result(np.where(mask, x.data, slope * x.data), (x,), "leaky_relu")
    if out.requires_grad:
        def _backward():
            x.accumulate_grad(out.grad * np.where(mask, 1.0, slope))
        out._backward = _backward
    return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor.result(np.tanh(x.data), (x,), "tanh")
    if out.requires_grad:
        def _backward():
            x.accumulate_grad(out.grad * (1.0 - out.data * out.data))
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# losses


def check_labels(labels: np.ndarray, class_count: int, spatial: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {arr.dtype}")
    if arr.shape != spatial:
        raise ShapeError(f"labels shape {arr.shape} does not match voxel grid {spatial}")
    lo, hi = int(arr.min()), int(arr.max())
    if lo < 0 or hi >= class_count:
        raise LabelError(f"labels must lie in [0, {class_count}), found range [{lo}, {hi}]")
    return arr.astype(np.int64, copy=False)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean voxelwise cross-entropy of channel-softmax against integer labels."""
    _require_5d(logits, "softmax_cross_entropy logits")
    n, c = logits.shape[:2]
    if c < 2:
        raise ShapeError(f"softmax_cross_entropy needs at least 2 classes, got {c}")
    lab = check_labels(labels, c, (n,) + logits.shape[2:])
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    idx = lab[:, None]
    z_true = np.take_along_axis(z, idx, axis=1)
    voxel_losses = (np.log(sez) + zmax) - z_true
    count = voxel_losses.size
    out = Tensor.result(voxel_losses.mean(), (logits,), "softmax_cross_entropy")
    if out.requires_grad:
        softmax = ez / sez

        def _backward():
            g = softmax.copy()
            np.put_along_axis(g, idx, np.take_along_axis(g, idx, axis=1) - 1.0, axis=1)
            logits.accumulate_grad(g * (float(out.grad) / count))
        out._backward = _backward
    return out


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at exact equality is 0."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor.result(np.abs(diff).mean(), (a, b), "l1_loss")
    if out.requires_grad:
        def _backward():
            s = np.sign(a.data - b.data) * (float(out.grad) / diff.size)
            if a.requires_grad:
                a.accumulate_grad(s)
            if b.requires_grad:
                b.accumulate_grad(-s)
        out._backward = _backward
    return out


def mse_loss(a: Tensor, target: float) -> Tensor:
    """Mean squared deviation from a constant target value."""
    t = float(target)
    diff = a.data - t
    out = Tensor.result(np.mean(diff * diff), (a,), "mse_loss")
    if out.requires_grad:
        def _backward():
            a.accumulate_grad((a.data - t) * (2.0 * float(out.grad) / diff.size))
        out._backward = _backward
    return out


def mean_all(x: Tensor) -> Tensor:
    """Scalar mean over all elements."""
    out = Tensor.result(x.data.mean(), (x,), "mean_all")
    if out.requires_grad:
        def _backward():
            x.accumulate_grad(np.full_like(x.data, float(out.grad) / x.size))
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# structure


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two feature volumes along the channel axis."""
    _require_5d(a, "concat_channels first input")
    _require_5d(b, "concat_channels second input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor.result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_channels")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.accumulate_grad(out.grad[:, :ca])
            if b.requires_grad:
                b.accumulate_grad(out.grad[:, ca:])
        out._backward = _backward
    return out
