"""Compiled loops for the planar layer's forward pass and its VJP."""

import math

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def planar_forward(u_hat, w, b, z):
    k_count, m_count, d = z.shape
    out = np.empty((k_count, m_count, d + 1))
    h_all = np.empty((k_count, m_count))
    det_all = np.empty((k_count, m_count))
    for k in range(k_count):
        c = 0.0
        for j in range(d):
            c += w[k, j] * u_hat[k, j]
        for m in range(m_count):
            act = b[k]
            for j in range(d):
                act += z[k, m, j] * w[k, j]
            h = math.tanh(act)
            det = 1.0 + (1.0 - h * h) * c
            for j in range(d):
                out[k, m, j] = z[k, m, j] + h * u_hat[k, j]
            out[k, m, d] = math.log(det) if det > 0.0 else -math.inf
            h_all[k, m] = h
            det_all[k, m] = det
    return out, h_all, det_all


@numba.njit(cache=True, fastmath=True)
def planar_backward(g, u_hat, w, z, h_all, det_all):
    k_count, m_count, d = z.shape
    g_uhat = np.zeros((k_count, d))
    g_w = np.zeros((k_count, d))
    g_b = np.zeros(k_count)
    g_z = np.empty((k_count, m_count, d))
    for k in range(k_count):
        c = 0.0
        for j in range(d):
            c += w[k, j] * u_hat[k, j]
        g_c = 0.0
        for m in range(m_count):
            h = h_all[k, m]
            s = 1.0 - h * h
            g_ldet = g[k, m, d] / det_all[k, m]
            g_h = -2.0 * h * c * g_ldet
            for j in range(d):
                g_h += g[k, m, j] * u_hat[k, j]
            g_act = g_h * s
            g_c += g_ldet * s
            g_b[k] += g_act
            for j in range(d):
                g_z[k, m, j] = g[k, m, j] + g_act * w[k, j]
                g_uhat[k, j] += g[k, m, j] * h
                g_w[k, j] += g_act * z[k, m, j]
        for j in range(d):
            g_uhat[k, j] += g_c * w[k, j]
            g_w[k, j] += g_c * u_hat[k, j]
    return g_uhat, g_w, g_b, g_z
