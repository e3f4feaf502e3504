import numpy as np
import pytest


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Reference cross-correlation written as plain nested loops."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o]
                    for ch in range(ci):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, ch, u, v] * xp[i, ch, r * stride + u, s * stride + v]
                    out[i, o, r, s] = acc
    return out


def naive_maxpool(x, window=2, stride=2):
    n, c, h, wd = x.shape
    ho, wo = (h - window) // stride + 1, (wd - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for s in range(wo):
                    out[i, ch, r, s] = x[i, ch, r * stride:r * stride + window, s * stride:s * stride + window].max()
    return out


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
