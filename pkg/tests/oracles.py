"""Brute-force reference implementations used as independent test oracles."""

import numpy as np


def naive_conv_pm1(x, w, stride, pad):
    """Sliding-window +-1 convolution with -1 spatial padding."""
    c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.full((c, h + 2 * pad, wd + 2 * pad), -1.0)
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((f, ho, wo))
    for o in range(f):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ci, i * stride + a, j * stride + b] * w[o, ci, a, b]
                out[o, i, j] = acc
    return out


def naive_float_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((f, ho, wo))
    for o in range(f):
        for i in range(ho):
            for j in range(wo):
                for ci in range(c):
                    for a in range(kh):
                        for bb in range(kw):
                            out[o, i, j] += xp[ci, i * stride + a, j * stride + bb] * w[o, ci, a, bb]
                out[o, i, j] += b[o]
    return out
