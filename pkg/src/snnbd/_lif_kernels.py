"""Compiled LIF time loops over ``(T, M)`` arrays (M = all neurons, flattened)."""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def lif_forward(x, lam, u_th, u0, alpha, smooth, h_out, s_out):
    T, M = x.shape
    k = math.pi * alpha / 2
    u = np.full(M, u0, dtype=x.dtype)
    for t in range(T):
        for m in range(M):
            h = lam * u[m] + x[t, m]
            v = h - u_th
            if smooth:
                s = math.atan(k * v) / math.pi + 0.5
            else:
                s = 1.0 if v >= 0 else 0.0
            u[m] = h - s * (h - u0)
            h_out[t, m] = h
            s_out[t, m] = s


@numba.njit(cache=True)
def lif_backward(h_all, s_all, grad_s, lam, u_th, u0, alpha, grad_x):
    T, M = h_all.shape
    k = math.pi * alpha / 2
    grad_u = np.zeros(M, dtype=h_all.dtype)
    for t in range(T - 1, -1, -1):
        for m in range(M):
            h = h_all[t, m]
            s = s_all[t, m]
            z = k * (h - u_th)
            g = alpha / (2 * (1 + z * z))
            gh = grad_s[t, m] * g + grad_u[m] * ((1 - s) - (h - u0) * g)
            grad_x[t, m] = gh
            grad_u[m] = lam * gh


@numba.njit(cache=True)
def maxpool2_forward(x, out, arg):
    """2x2 stride-2 max over (N, H, W); ``arg`` keeps the first maximum's offset (0..3)."""
    N, H, W = x.shape
    for n in range(N):
        for i in range(H // 2):
            for j in range(W // 2):
                best = x[n, 2 * i, 2 * j]
                k = 0
                for d in range(1, 4):
                    v = x[n, 2 * i + d // 2, 2 * j + d % 2]
                    if v > best:
                        best = v
                        k = d
                out[n, i, j] = best
                arg[n, i, j] = k


@numba.njit(cache=True)
def maxpool2_backward(grad_out, arg, grad_in):
    N, Ho, Wo = grad_out.shape
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                k = arg[n, i, j]
                for d in range(4):
                    grad_in[n, 2 * i + d // 2, 2 * j + d % 2] = grad_out[n, i, j] if d == k else 0.0
