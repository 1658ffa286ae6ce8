"""Independent brute-force reference implementations.

Everything here is written as plain nested loops (or direct set counting)
over numpy scalars, deliberately sharing no code with the package under
test.  Slow and obvious beats fast and clever: these are the ground truth
the vectorized implementations are judged against.
"""

import math

import numpy as np


def conv3d_loop(x, w, b, stride=1, pad=0):
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.zeros((n, cin, d + 2 * pad, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + d, pad:pad + h, pad:pad + wd] = x
    do = (d + 2 * pad - k) // stride + 1
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, do, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for zi in range(do):
                for yi in range(ho):
                    for xi in range(wo):
                        acc = b[co]
                        for ci in range(cin):
                            for kz in range(k):
                                for ky in range(k):
                                    for kx in range(k):
                                        acc += (
                                            w[co, ci, kz, ky, kx]
                                            * xp[ni, ci, zi * stride + kz,
                                                 yi * stride + ky, xi * stride + kx]
                                        )
                        out[ni, co, zi, yi, xi] = acc
    return out


def maxpool3d_loop(x):
    n, c, d, h, w = x.shape
    out = np.zeros((n, c, d // 2, h // 2, w // 2))
    for ni in range(n):
        for ci in range(c):
            for zi in range(d // 2):
                for yi in range(h // 2):
                    for xi in range(w // 2):
                        block = x[ni, ci, 2 * zi:2 * zi + 2,
                                  2 * yi:2 * yi + 2, 2 * xi:2 * xi + 2]
                        out[ni, ci, zi, yi, xi] = block.max()
    return out


def upsample_nearest3d_loop(x):
    n, c, d, h, w = x.shape
    out = np.zeros((n, c, 2 * d, 2 * h, 2 * w))
    for ni in range(n):
        for ci in range(c):
            for zi in range(2 * d):
                for yi in range(2 * h):
                    for xi in range(2 * w):
                        out[ni, ci, zi, yi, xi] = x[ni, ci, zi // 2, yi // 2, xi // 2]
    return out


def instance_norm_loop(x, gain, shift, eps=1e-5):
    n, c, d, h, w = x.shape
    out = np.zeros_like(x)
    for ni in range(n):
        for ci in range(c):
            voxels = [x[ni, ci, zi, yi, xi]
                      for zi in range(d) for yi in range(h) for xi in range(w)]
            m = len(voxels)
            mean = sum(voxels) / m
            var = sum((v - mean) ** 2 for v in voxels) / m
            for zi in range(d):
                for yi in range(h):
                    for xi in range(w):
                        xhat = (x[ni, ci, zi, yi, xi] - mean) / math.sqrt(var + eps)
                        out[ni, ci, zi, yi, xi] = xhat * gain[ci] + shift[ci]
    return out


def cross_entropy_loop(logits, labels):
    n, c, d, h, w = logits.shape
    total = 0.0
    for ni in range(n):
        for zi in range(d):
            for yi in range(h):
                for xi in range(w):
                    z = [logits[ni, ci, zi, yi, xi] for ci in range(c)]
                    zmax = max(z)
                    lse = zmax + math.log(sum(math.exp(v - zmax) for v in z))
                    total += lse - z[labels[ni, zi, yi, xi]]
    return total / (n * d * h * w)


def l1_loop(a, b):
    flat_a, flat_b = a.ravel(), b.ravel()
    return sum(abs(flat_a[i] - flat_b[i]) for i in range(flat_a.size)) / flat_a.size


def mse_loop(a, target):
    flat = a.ravel()
    return sum((flat[i] - target) ** 2 for i in range(flat.size)) / flat.size


def dice_loop(pred, gt, class_count):
    """Per-foreground-class Dice by literal voxel counting."""
    scores = {}
    for c in range(1, class_count):
        p = {tuple(idx) for idx in np.argwhere(pred == c)}
        g = {tuple(idx) for idx in np.argwhere(gt == c)}
        if not p and not g:
            scores[c] = 1.0
        else:
            scores[c] = 2.0 * len(p & g) / (len(p) + len(g))
    return scores


def finite_difference(f, arrays, h=1e-4):
    """Central finite-difference gradients of scalar f w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f()
            flat[i] = orig - h
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads
