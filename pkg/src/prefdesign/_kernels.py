"""Compiled inner loops for long sequential runs under the logistic link.

A sequential run refreshes the fit and every confidence width after each
label. At small dimension the work per label is a few microseconds of
arithmetic, so these kernels fuse it into one call to keep interpreter
overhead from dominating.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _expit(u):
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


@njit(cache=True)
def _cholesky(a):
    """In-place lower Cholesky factor; returns False if not positive definite."""
    d = a.shape[0]
    for j in range(d):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if not s > 0.0:
            return False
        ljj = math.sqrt(s)
        a[j, j] = ljj
        for i in range(j + 1, d):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / ljj
        for i in range(j):
            a[i, j] = 0.0
    return True


@njit(cache=True)
def _forward(l, b, out):
    d = l.shape[0]
    for i in range(d):
        s = b[i]
        for k in range(i):
            s -= l[i, k] * out[k]
        out[i] = s / l[i, i]


@njit(cache=True)
def refresh(z, pulls, theta, jitter_scale, margins, inv_sq):
    """Fill margins and squared inverse norms under the jittered data Fisher
    matrix at theta. Returns the jitter, or -1.0 if the factorization fails."""
    n, d = z.shape
    h = np.zeros((d, d))
    for i in range(n):
        u = 0.0
        for k in range(d):
            u += z[i, k] * theta[k]
        margins[i] = u
        if pulls[i] > 0:
            s = _expit(u)
            w = pulls[i] * s * (1.0 - s)
            for a in range(d):
                wa = w * z[i, a]
                for b in range(a + 1):
                    h[a, b] += wa * z[i, b]
    tr = 0.0
    for a in range(d):
        tr += h[a, a]
    jitter = jitter_scale * (tr / d if tr > 0 else 1.0)
    for a in range(d):
        h[a, a] += jitter
    if not _cholesky(h):
        return -1.0
    y = np.empty(d)
    for i in range(n):
        _forward(h, z[i], y)
        acc = 0.0
        for k in range(d):
            acc += y[k] * y[k]
        inv_sq[i] = acc
    return jitter


@njit(cache=True)
def _gradient(z, pulls, wins, theta, ridge, g):
    n, d = z.shape
    for k in range(d):
        g[k] = -ridge * theta[k]
    for i in range(n):
        if pulls[i] > 0:
            u = 0.0
            for k in range(d):
                u += z[i, k] * theta[k]
            r = wins[i] - pulls[i] * _expit(u)
            for k in range(d):
                g[k] += r * z[i, k]
    acc = 0.0
    for k in range(d):
        acc += g[k] * g[k]
    return acc


@njit(cache=True)
def newton_step(z, pulls, wins, theta, ridge):
    """One Newton step on the ridge-penalized log-likelihood, in place.

    Returns False (leaving theta untouched) unless the step strictly
    reduces the gradient norm.
    """
    n, d = z.shape
    g = np.empty(d)
    g2 = _gradient(z, pulls, wins, theta, ridge, g)
    h = np.zeros((d, d))
    total = 0.0
    for i in range(n):
        if pulls[i] > 0:
            total += pulls[i]
            u = 0.0
            for k in range(d):
                u += z[i, k] * theta[k]
            s = _expit(u)
            w = pulls[i] * s * (1.0 - s)
            for a in range(d):
                wa = w * z[i, a]
                for b in range(a + 1):
                    h[a, b] += wa * z[i, b]
    floor = ridge + 1e-12 * max(1.0, total)
    for a in range(d):
        h[a, a] += floor
    if not _cholesky(h):
        return False
    y = np.empty(d)
    _forward(h, g, y)
    step = np.empty(d)
    for i in range(d - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, d):
            s -= h[k, i] * step[k]
        step[i] = s / h[i, i]
    cand = theta + step
    gc = np.empty(d)
    if not _gradient(z, pulls, wins, cand, ridge, gc) < g2:
        return False
    theta[:] = cand
    return True
