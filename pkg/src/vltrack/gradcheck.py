"""Central-difference gradient checking.

Used by the test-suite at 64-bit precision. A coordinate where the left and
right one-sided slopes disagree sits on a kink (ReLU, min in the IoU) and has
no derivative to compare against; such coordinates are resampled and counted
in the result instead of being reported as errors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple = ()

    def ok(self, tol=1e-4):
        return self.max_rel_error < tol


def rel_error(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(fn, params, *, h=1e-5, max_coords=200, rng=None, floor=1e-6, kink_tol=1e-3):
    """Compare analytic gradients of scalar ``fn()`` w.r.t. ``params`` to central differences.

    Args:
        fn: zero-argument callable returning a scalar Tensor; rebuilt on every call.
        params: tensors with ``requires_grad=True`` (float64 for meaningful results).
        h: finite-difference step.
        max_coords: at most this many coordinates, drawn uniformly over all params.
        floor: lower bound on the relative-error denominator.
        kink_tol: one-sided slopes differing by more than this (relative) mark a kink.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(total)
    worst, worst_at, checked, skipped = 0.0, (), 0, 0

    with no_grad():
        f0 = float(fn().item())
        for flat in order:
            if checked >= max_coords:
                break
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = np.unravel_index(int(flat - offsets[pi]), params[pi].shape)
            arr = params[pi].data
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(fn().item())
            arr[idx] = orig - h
            fm = float(fn().item())
            arr[idx] = orig
            right, left = (fp - f0) / h, (f0 - fm) / h
            num = (fp - fm) / (2 * h)
            if abs(right - left) > kink_tol * max(abs(right), abs(left), 1.0):
                skipped += 1
                continue
            err = rel_error(float(analytic[pi][idx]), num, floor)
            checked += 1
            if err > worst:
                worst, worst_at = err, (pi, idx, float(analytic[pi][idx]), num)
    return GradCheckResult(worst, checked, skipped, worst_at)
