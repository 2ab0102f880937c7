"""Slow, obviously-correct reference implementations.

These share no code with the fast paths they check. They exist for the
test suite and the ``selftest`` CLI command.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


def conv2d_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[bi, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[bi, o, i, j] = acc
    return out


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_error(analytic: np.ndarray, numeric: np.ndarray, small: float = 1e-8) -> tuple[float, float]:
    """(max relative error over large entries, max absolute error over small entries)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    big = np.abs(a) >= small
    rel = np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big]))
    ab = np.abs(a[~big] - n[~big])
    return (float(rel.max()) if rel.size else 0.0, float(ab.max()) if ab.size else 0.0)


def _central(f: Callable[[], float], flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = f()
    flat[i] = orig - h
    fm = f()
    flat[i] = orig
    return (fp - fm) / (2 * h)


def _bad(a: np.ndarray, n: np.ndarray, small: float, rel_tol: float, abs_tol: float) -> np.ndarray:
    big = np.maximum(np.abs(a), np.abs(n)) >= small
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    return np.where(big, rel >= rel_tol, np.abs(a - n) >= abs_tol)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-6,
    refine: int = 0,
    stats: dict | None = None,
) -> tuple[bool, float]:
    """Compare backward() gradients with central differences for every param.

    Returns (ok, worst relative error). Params must be float64.

    Piecewise-smooth losses (relu, max-pool, L1) are not differentiable where
    a unit sits within ``h`` of its kink, so the central difference there
    measures an average slope. With ``refine > 0`` each failing coordinate is
    re-probed at h/10, h/100, ... and judged on the finest step; a genuine
    gradient error does not shrink with h, a kink straddle does. ``stats``
    receives the number of coordinates checked and refined.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    f = lambda: float(loss_fn().data)  # noqa: E731
    worst = 0.0
    ok = True
    checked = refined = 0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        num = numeric_grad(f, p.data, h).reshape(-1)
        checked += num.size
        for i in np.flatnonzero(_bad(analytic, num, 1e-8, rel_tol, abs_tol)) if refine else ():
            refined += 1
            step = h
            for _ in range(refine):
                step /= 10
                num[i] = _central(f, p.data.reshape(-1), int(i), step)
                if not _bad(analytic[i : i + 1], num[i : i + 1], 1e-8, rel_tol, abs_tol)[0]:
                    break
        rel, ab = grad_error(analytic, num)
        worst = max(worst, rel)
        if rel >= rel_tol or ab >= abs_tol:
            ok = False
    if stats is not None:
        stats.update(checked=checked, refined=refined)
    return ok, worst


def cubic_weight(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def bicubic_loop_1d(row: Sequence[float], out_len: int) -> list[float]:
    n = len(row)
    scale = n / out_len
    out = []
    for i in range(out_len):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        acc = 0.0
        for m in range(-1, 3):
            idx = min(max(base + m, 0), n - 1)
            acc += row[idx] * cubic_weight(src - (base + m))
        out.append(acc)
    return out


def gaussian_window_2d(size: int = 11, sigma: float = 1.5) -> list[list[float]]:
    half = size // 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    return [[gi * gj for gj in g] for gi in g]


def ssim_naive(pred: np.ndarray, truth: np.ndarray, data_range: float = 1.0, size: int = 11, sigma: float = 1.5) -> float:
    """Window-by-window SSIM on C x H x W arrays, averaged over valid positions then bands."""
    win = gaussian_window_2d(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    bands, h, w = truth.shape
    band_scores = []
    for b in range(bands):
        total = 0.0
        count = 0
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                mx = my = sxx = syy = sxy = 0.0
                for u in range(size):
                    for v in range(size):
                        wt = win[u][v]
                        x = float(pred[b, i + u, j + v])
                        y = float(truth[b, i + u, j + v])
                        mx += wt * x
                        my += wt * y
                        sxx += wt * x * x
                        syy += wt * y * y
                        sxy += wt * x * y
                vx = sxx - mx * mx
                vy = syy - my * my
                cxy = sxy - mx * my
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                count += 1
        band_scores.append(total / count)
    return sum(band_scores) / len(band_scores)


def nrmse_loop(pred: np.ndarray, truth: np.ndarray) -> float:
    sq = 0.0
    count = 0
    lo = math.inf
    hi = -math.inf
    for p, t in zip(np.asarray(pred, dtype=np.float64).ravel().tolist(), np.asarray(truth, dtype=np.float64).ravel().tolist()):
        sq += (p - t) ** 2
        count += 1
        lo = min(lo, t)
        hi = max(hi, t)
    return math.sqrt(sq / count) / (hi - lo)
