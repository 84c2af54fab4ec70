"""Shared oracles for the test suite.

These stay deliberately naive (nested loops, tiny steps) so they are
independent of the optimized implementations they check.
"""

from __future__ import annotations

import math

import numpy as np

from lidarflow.autodiff import Tape, Tensor, backward


def conv2d_loops(x: np.ndarray, w: np.ndarray, bias=None, stride=1, dilation=1, padding=0) -> np.ndarray:
    """Six-nested-loop dilated convolution."""
    b, cin, h, wd = x.shape
    o, _, k, _ = w.shape
    span = dilation * (k - 1) + 1
    hout = (h + 2 * padding - span) // stride + 1
    wout = (wd + 2 * padding - span) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, o, hout, wout))
    for bi in range(b):
        for oi in range(o):
            for y in range(hout):
                for xx in range(wout):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += w[oi, ci, i, j] * xp[bi, ci, y * stride + i * dilation, xx * stride + j * dilation]
                    out[bi, oi, y, xx] = acc
            if bias is not None:
                out[bi, oi] += bias[oi]
    return out


def sigmoid_scalar(v: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * v))


def ray_march_cells(origin_center, angle, max_distance, rows, cols, step=0.01):
    """Cells touched by marching along a ray in tiny steps (cell units)."""
    r0, c0 = origin_center
    dr, dc = -math.sin(angle), math.cos(angle)
    cells = []
    seen = set()
    t = 0.0
    while t <= max_distance:
        r = int(math.floor(r0 + dr * t))
        c = int(math.floor(c0 + dc * t))
        if not (0 <= r < rows and 0 <= c < cols):
            if cells:
                break
        elif (r, c) not in seen:
            seen.add((r, c))
            cells.append((r, c))
        t += step
    return cells


def analytic_grads(build_loss, leaves):
    """dLoss/dLeaf for every leaf, via one taped forward/backward pass."""
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(loss, tape)
    return [leaf.grad.copy() for leaf in leaves], loss.item()


def numeric_grad_at(build_loss, leaf: Tensor, flat_index: int, step: float = 1e-4) -> float:
    """Central finite difference of the (tape-free) loss at one coordinate."""
    flat = leaf.data.reshape(-1)
    original = flat[flat_index]
    flat[flat_index] = original + step
    up = build_loss().item()
    flat[flat_index] = original - step
    down = build_loss().item()
    flat[flat_index] = original
    return (up - down) / (2.0 * step)


def check_gradients(build_loss, leaves, rng, coords_per_leaf=3, step=1e-4, rtol=1e-4, atol=1e-7):
    """Assert analytic gradients match central differences at random coords."""
    grads, _ = analytic_grads(build_loss, leaves)
    for leaf, grad in zip(leaves, grads):
        n = leaf.data.size
        picks = rng.choice(n, size=min(coords_per_leaf, n), replace=False)
        for idx in picks:
            fd = numeric_grad_at(build_loss, leaf, int(idx), step)
            an = grad.reshape(-1)[int(idx)]
            err = abs(an - fd)
            assert err <= atol + rtol * max(abs(an), abs(fd)), (
                f"gradient mismatch at coord {idx}: analytic {an!r}, finite-difference {fd!r}"
            )
