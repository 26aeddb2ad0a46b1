"""Numba-jitted implementations of the hot numeric kernels.

Scalar math mirrors kernels._numpy; loops replace vectorization. All
entry points keep the exact signatures of the numpy module so callers
can swap backends freely.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)

_C0, _C1, _C2 = 2.515517, 0.802853, 0.010328
_D1, _D2, _D3 = 1.432788, 0.189269, 0.001308

_TINY = np.finfo(np.float64).tiny


@njit(cache=True)
def _q_scalar(x):
    return 0.5 * math.erfc(x / _SQRT2)


@njit(cache=True)
def _inv_q_scalar(p):
    if not (0.0 < p < 1.0):
        return np.nan
    t = 1.0 - p if p > 0.5 else p
    if t < _TINY:
        t = _TINY
    u = math.sqrt(-2.0 * math.log(t))
    x = u - (_C0 + u * (_C1 + u * _C2)) / (1.0 + u * (_D1 + u * (_D2 + u * _D3)))
    if p > 0.5:
        x = -x
    for _ in range(8):
        qx = _q_scalar(x)
        phi = math.exp(-0.5 * x * x) * _INV_SQRT_2PI
        if phi > 0.0:
            x += (qx - p) / max(phi, _TINY)
    return x


@njit(cache=True)
def q_array(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape, dtype=np.float64)
    flat_in = x.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = _q_scalar(flat_in[i])
    return out


@njit(cache=True)
def inv_q_array(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.empty(p.shape, dtype=np.float64)
    flat_in = p.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = _inv_q_scalar(flat_in[i])
    return out


@njit(cache=True)
def _tx_power_scalar(m, p, c1, bits):
    return c1 * math.expm1(_inv_q_scalar(p) / math.sqrt(m) + _LN2 * bits / m)


@njit(cache=True)
def tx_power_array(m, p, c1, bits):
    m = np.asarray(m, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    out = np.empty(m.shape, dtype=np.float64)
    fm = m.ravel()
    fp = p.ravel()
    fo = out.ravel()
    for i in range(fm.size):
        fo[i] = _tx_power_scalar(fm[i], fp[i], c1, bits)
    return out


@njit(cache=True)
def _k_star_scalar(m, c1, w_max, bits, gamma_ln, k_max):
    # returns (k, ok); saturates at k_max with ok=False
    a = math.sqrt(m) * math.log(w_max / (m * c1) + 1.0) - _LN2 * bits / math.sqrt(m)
    if a >= 0.0:
        qa = _q_scalar(a)
        if qa <= 0.0:
            return 1, True
        lnq = math.log(qa)
    else:
        qm = _q_scalar(-a)
        if qm <= 1e-15:
            return k_max, False
        lnq = math.log1p(-qm)
    ratio = gamma_ln / lnq
    if not math.isfinite(ratio) or ratio > k_max:
        return k_max, False
    k = int(math.ceil(ratio))
    if k < 1:
        k = 1
    return k, True


@njit(cache=True)
def k_star_array(m, c1, w_max, bits, gamma_ln, k_max):
    m = np.asarray(m, dtype=np.float64)
    k = np.empty(m.shape, dtype=np.int64)
    ok = np.empty(m.shape, dtype=np.bool_)
    fm = m.ravel()
    fk = k.ravel()
    fo = ok.ravel()
    for i in range(fm.size):
        fk[i], fo[i] = _k_star_scalar(fm[i], c1, w_max, bits, gamma_ln, k_max)
    return k, ok


@njit(cache=True)
def node_profile(m_lo, m_hi, c1, bandwidth, omega, w_max, bits, w_c, gamma_ln, k_max):
    n = m_hi - m_lo + 1
    k = np.empty(n, dtype=np.int64)
    power = np.full(n, np.inf)
    feasible = np.zeros(n, dtype=np.bool_)
    slot_budget = bandwidth * omega * (1.0 + 1e-12)
    for i in range(n):
        m = float(m_lo + i)
        ki, ok = _k_star_scalar(m, c1, w_max, bits, gamma_ln, k_max)
        k[i] = ki
        if not ok or m * ki > slot_budget:
            continue
        feasible[i] = True
        p = math.exp(gamma_ln / ki)
        duty = m * ki / (bandwidth * omega)
        power[i] = duty * (_tx_power_scalar(m, p, c1, bits) + w_c)
    return k, power, feasible
