"""Numba-compiled inner loops for the tensor ops.

Everything here is single-pass and allocation-minimal; results are
bit-deterministic (no fastmath, fixed loop order).  Statistics
accumulate in float64 regardless of the storage dtype.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "im2col",
    "col2im",
    "group_norm_fwd",
    "group_norm_bwd",
    "maxpool_fwd",
    "maxpool_bwd",
]


@njit(cache=True)
def _valid_range(k_off, size_in, size_out, stride, pad):
    """Output positions p with 0 <= p*stride + k_off - pad < size_in."""
    lo = pad - k_off
    p0 = max(0, (lo + stride - 1) // stride) if lo > 0 else 0
    p1 = min(size_out, (size_in - 1 - k_off + pad) // stride + 1)
    return p0, p1


@njit(cache=True)
def im2col(x, kh, kw, stride, pad, ho, wo):
    """(N,C,H,W) -> patch matrix (C*kh*kw, N*ho*wo); zero padding fused in."""
    n, c, h, w = x.shape
    cols = np.zeros((c * kh * kw, n * ho * wo), dtype=x.dtype)
    for ci in range(c):
        for i in range(kh):
            y0, y1 = _valid_range(i, h, ho, stride, pad)
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                x0, x1 = _valid_range(j, w, wo, stride, pad)
                off = j - pad
                for ni in range(n):
                    base = ni * ho * wo
                    for y in range(y0, y1):
                        iy = y * stride + i - pad
                        for xx in range(x0, x1):
                            cols[row, base + y * wo + xx] = x[ni, ci, iy, xx * stride + off]
    return cols


@njit(cache=True)
def col2im(gcols, n, c, h, w, kh, kw, stride, pad, ho, wo):
    """Adjoint of im2col: scatter-add patch gradients back to (N,C,H,W)."""
    gx = np.zeros((n, c, h, w), dtype=gcols.dtype)
    for ci in range(c):
        for i in range(kh):
            y0, y1 = _valid_range(i, h, ho, stride, pad)
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                x0, x1 = _valid_range(j, w, wo, stride, pad)
                off = j - pad
                for ni in range(n):
                    base = ni * ho * wo
                    for y in range(y0, y1):
                        iy = y * stride + i - pad
                        for xx in range(x0, x1):
                            gx[ni, ci, iy, xx * stride + off] += gcols[row, base + y * wo + xx]
    return gx


@njit(cache=True)
def group_norm_fwd(x, gamma, beta, groups, eps):
    """Returns (out, mu, inv_std); mu/inv_std are float64 [N, groups]."""
    n, c, h, w = x.shape
    cpg = c // groups
    m = cpg * h * w
    out = np.empty_like(x)
    mu = np.empty((n, groups), dtype=np.float64)
    inv_std = np.empty((n, groups), dtype=np.float64)
    for ni in range(n):
        for g in range(groups):
            s = 0.0
            ss = 0.0
            for ci in range(g * cpg, (g + 1) * cpg):
                for y in range(h):
                    for xx in range(w):
                        v = np.float64(x[ni, ci, y, xx])
                        s += v
                        ss += v * v
            mean = s / m
            var = ss / m - mean * mean
            if var < 0.0:
                var = 0.0
            inv = 1.0 / np.sqrt(var + eps)
            mu[ni, g] = mean
            inv_std[ni, g] = inv
            for ci in range(g * cpg, (g + 1) * cpg):
                a = np.float64(gamma[ci]) * inv
                b = np.float64(beta[ci]) - mean * np.float64(gamma[ci]) * inv
                for y in range(h):
                    for xx in range(w):
                        out[ni, ci, y, xx] = np.float64(x[ni, ci, y, xx]) * a + b
    return out, mu, inv_std


@njit(cache=True)
def group_norm_bwd(x, go, gamma, mu, inv_std, groups):
    """Returns (dx, dgamma, dbeta); parameter grads in float64."""
    n, c, h, w = x.shape
    cpg = c // groups
    m = cpg * h * w
    dx = np.empty_like(x)
    dgamma = np.zeros(c, dtype=np.float64)
    dbeta = np.zeros(c, dtype=np.float64)
    t = np.empty(c, dtype=np.float64)  # per-channel sum of go
    u = np.empty(c, dtype=np.float64)  # per-channel sum of go*x
    for ni in range(n):
        for g in range(groups):
            mean = mu[ni, g]
            inv = inv_std[ni, g]
            mdx = 0.0  # group mean of gamma*go
            mdxx = 0.0  # group mean of gamma*go*xhat
            for ci in range(g * cpg, (g + 1) * cpg):
                st = 0.0
                su = 0.0
                for y in range(h):
                    for xx in range(w):
                        gv = np.float64(go[ni, ci, y, xx])
                        st += gv
                        su += gv * np.float64(x[ni, ci, y, xx])
                t[ci] = st
                u[ci] = su
                dbeta[ci] += st
                dgamma[ci] += inv * (su - mean * st)
                mdx += gamma[ci] * st
                mdxx += gamma[ci] * inv * (su - mean * st)
            mdx /= m
            mdxx /= m
            p = -inv * inv * mdxx  # coefficient on x
            q = -inv * mdx + inv * inv * mdxx * mean  # constant term
            for ci in range(g * cpg, (g + 1) * cpg):
                a = inv * np.float64(gamma[ci])
                for y in range(h):
                    for xx in range(w):
                        dx[ni, ci, y, xx] = (
                            a * np.float64(go[ni, ci, y, xx])
                            + p * np.float64(x[ni, ci, y, xx])
                            + q
                        )
    return dx, dgamma, dbeta


@njit(cache=True)
def maxpool_fwd(x, window, stride, ho, wo):
    """Returns (out, argmax); argmax stores the in-window row-major
    position of the first maximum, i.e. the lowest linear input index."""
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.uint8)
    if window == 2:
        for ni in range(n):
            for ci in range(c):
                for y in range(ho):
                    ys = y * stride
                    for xx in range(wo):
                        xs = xx * stride
                        best = x[ni, ci, ys, xs]
                        bk = 0
                        v = x[ni, ci, ys, xs + 1]
                        if v > best:
                            best, bk = v, 1
                        v = x[ni, ci, ys + 1, xs]
                        if v > best:
                            best, bk = v, 2
                        v = x[ni, ci, ys + 1, xs + 1]
                        if v > best:
                            best, bk = v, 3
                        out[ni, ci, y, xx] = best
                        arg[ni, ci, y, xx] = bk
        return out, arg
    for ni in range(n):
        for ci in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = x[ni, ci, y * stride, xx * stride]
                    bk = 0
                    for k in range(1, window * window):
                        i = k // window
                        j = k % window
                        v = x[ni, ci, y * stride + i, xx * stride + j]
                        if v > best:
                            best = v
                            bk = k
                    out[ni, ci, y, xx] = best
                    arg[ni, ci, y, xx] = bk
    return out, arg


@njit(cache=True)
def maxpool_bwd(go, arg, n, c, h, w, window, stride, ho, wo):
    gx = np.zeros((n, c, h, w), dtype=go.dtype)
    for ni in range(n):
        for ci in range(c):
            for y in range(ho):
                for xx in range(wo):
                    k = arg[ni, ci, y, xx]
                    i = k // window
                    j = k % window
                    gx[ni, ci, y * stride + i, xx * stride + j] += go[ni, ci, y, xx]
    return gx
