"""Independent reference implementations used as test oracles.

Everything here deliberately avoids the library's own vectorized paths:
convolutions are plain loop nests, gradients come from central finite
differences, and the F1 metrics enumerate pixels one by one.
"""

from __future__ import annotations

import numpy as np

from rseditlab.tensor import Tensor, backward


def conv2d_loops(x: np.ndarray, k: np.ndarray, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Direct six-loop cross-correlation, NCHW."""
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for bi in range(b):
        for oi in range(o):
            for u in range(ho):
                for v in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, ci, u * stride + i,
                                          v * stride + j] * k[oi, ci, i, j]
                    out[bi, oi, u, v] = acc
    return out


def depthwise_conv2d_loops(x: np.ndarray, k: np.ndarray, stride: int = 1,
                           padding: int = 0) -> np.ndarray:
    """Grouped loop nest: channel c sees only kernel slice c."""
    b, c, h, w = x.shape
    _, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, c, ho, wo))
    for bi in range(b):
        for ci in range(c):
            for u in range(ho):
                for v in range(wo):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[bi, ci, u * stride + i,
                                      v * stride + j] * k[ci, 0, i, j]
                    out[bi, ci, u, v] = acc
    return out


def finite_diff_check(loss_fn, tensors, rel_tol: float = 1e-4,
                      step: float = 1e-5, max_entries: int = 25,
                      seed: int = 0) -> float:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``tensors`` maps names to the requires_grad leaves that ``loss_fn`` reads;
    for large arrays a seeded random subset of entries is probed.  Returns
    the worst relative error seen and asserts it is below ``rel_tol``.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_name = None
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient reached {name}"
        flat = t.data.reshape(-1)
        count = flat.size
        if count > max_entries:
            entries = rng.choice(count, size=max_entries, replace=False)
        else:
            entries = np.arange(count)
        for idx in entries:
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_fn().item()
            flat[idx] = orig - step
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = t.grad.reshape(-1)[idx]
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-3)
            if err > worst:
                worst, worst_name = err, name
    assert worst < rel_tol, f"gradient mismatch at {worst_name}: rel err {worst:.3e}"
    return worst


def f1_scores_pixel_enumeration(pred: np.ndarray, gt: np.ndarray,
                                eps: float = 1e-6):
    """Pixel-by-pixel F1 computation; returns (f1_dam_pct, f1_weighted, f1s).

    ABSENT classes are represented as None and excluded from the harmonic
    aggregation, whose numerator is the participating-class count.
    """
    tp = {c: 0 for c in (1, 2, 3, 4)}
    fp = {c: 0 for c in (1, 2, 3, 4)}
    fn = {c: 0 for c in (1, 2, 3, 4)}
    n = {c: 0 for c in (1, 2, 3, 4)}
    height, width = gt.shape
    for y in range(height):
        for x in range(width):
            g = int(gt[y, x])
            p = int(pred[y, x])
            if g == 0:
                continue
            n[g] += 1
            for c in (1, 2, 3, 4):
                if p == c and g == c:
                    tp[c] += 1
                elif p == c and g != c:
                    fp[c] += 1
                elif p != c and g == c:
                    fn[c] += 1
    f1s = {}
    for c in (1, 2, 3, 4):
        denom = 2 * tp[c] + fp[c] + fn[c]
        f1s[c] = None if denom == 0 else 2.0 * tp[c] / denom
    live = [v for v in f1s.values() if v is not None]
    if live:
        dam = 100.0 * len(live) / sum(1.0 / (v + eps) for v in live)
    else:
        dam = None
    weighted_n = sum(n[c] for c in n if n[c] > 0)
    if weighted_n:
        weighted = sum(f1s[c] * n[c] for c in n if n[c] > 0) / weighted_n
    else:
        weighted = None
    return dam, weighted, f1s, n
