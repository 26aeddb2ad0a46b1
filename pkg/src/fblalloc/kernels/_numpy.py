"""Pure-numpy implementations of the hot numeric kernels.

Reference path used when numba is unavailable or disabled via
FBLALLOC_NO_NUMBA=1. Same contracts as kernels._numba.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LN2 = np.log(2.0)

# A&S 26.2.23 rational starting guess for the normal upper-tail quantile.
_C0, _C1, _C2 = 2.515517, 0.802853, 0.010328
_D1, _D2, _D3 = 1.432788, 0.189269, 0.001308


def q_array(x: np.ndarray) -> np.ndarray:
    """Standard normal upper-tail probability P(Z > x), elementwise."""
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / _SQRT2)


def _guess_upper(t: np.ndarray) -> np.ndarray:
    # valid for t in (0, 0.5]; returns x with q(x) ~= t to ~4.5e-4
    u = np.sqrt(-2.0 * np.log(t))
    num = _C0 + u * (_C1 + u * _C2)
    den = 1.0 + u * (_D1 + u * (_D2 + u * _D3))
    return u - num / den


def inv_q_array(p: np.ndarray) -> np.ndarray:
    """Inverse of q_array: Newton refinement of a rational first guess.

    Domain (0, 1); out-of-domain entries come back as nan.
    """
    p = np.asarray(p, dtype=np.float64)
    out = np.full(p.shape, np.nan)
    ok = (p > 0.0) & (p < 1.0)
    if not np.any(ok):
        return out
    pv = p[ok]
    lower = pv > 0.5
    t = np.where(lower, 1.0 - pv, pv)
    x = _guess_upper(np.maximum(t, np.finfo(np.float64).tiny))
    x = np.where(lower, -x, x)
    for _ in range(8):
        qx = 0.5 * erfc(x / _SQRT2)
        phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        step = np.where(phi > 0.0, (qx - pv) / np.maximum(phi, np.finfo(np.float64).tiny), 0.0)
        x = x + step
    out[ok] = x
    return out


def tx_power_array(m, p, c1, bits) -> np.ndarray:
    """Transmit power c1*(exp(invq(p)/sqrt(m) + ln2*bits/m) - 1), elementwise."""
    m = np.asarray(m, dtype=np.float64)
    expo = inv_q_array(p) / np.sqrt(m) + _LN2 * bits / m
    return c1 * np.expm1(expo)


def k_star_array(m, c1, w_max, bits, gamma_ln, k_max):
    """Minimum repetition count per blocklength, saturated at k_max.

    Returns (k int64, ok bool). ok=False marks entries the strict caller
    must treat as infeasible: tail probability within 1e-15 of 1, or a
    count above k_max.
    """
    m = np.asarray(m, dtype=np.float64)
    a = np.sqrt(m) * np.log(w_max / (m * c1) + 1.0) - _LN2 * bits / np.sqrt(m)
    k = np.empty(m.shape, dtype=np.int64)
    ok = np.ones(m.shape, dtype=np.bool_)

    neg = a < 0.0
    # upper side: q(a) <= 0.5, plain log is accurate (q==0 -> lnq=-inf -> k=1)
    qa_pos = 0.5 * erfc(np.where(neg, 0.0, a) / _SQRT2)
    with np.errstate(divide="ignore"):
        lnq_pos = np.log(qa_pos)
    # lower side: q(a) = 1 - q(-a); log via log1p keeps precision near 1
    qm = 0.5 * erfc(np.where(neg, -a, 0.0) / _SQRT2)
    sat = neg & (qm <= 1e-15)
    lnq_neg = np.log1p(-np.minimum(qm, 1.0 - 1e-300))
    lnq = np.where(neg, lnq_neg, lnq_pos)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = gamma_ln / lnq
    ratio = np.where(np.isfinite(ratio), ratio, np.inf)
    over = sat | (ratio > k_max)
    kv = np.maximum(1, np.ceil(np.where(over, 1.0, ratio))).astype(np.int64)
    k[:] = np.where(over, np.int64(k_max), kv)
    ok[:] = ~over
    return k, ok


def node_profile(m_lo, m_hi, c1, bandwidth, omega, w_max, bits, w_c, gamma_ln, k_max):
    """Per-blocklength profile over m = m_lo..m_hi for one link.

    Returns (k, power, feasible): repetition count, average power with the
    duty cycle applied, and whether the packet delay fits inside the
    induced sampling period. Infeasible entries carry power=inf.
    """
    m = np.arange(m_lo, m_hi + 1, dtype=np.int64)
    k, ok = k_star_array(m, c1, w_max, bits, gamma_ln, k_max)
    mf = m.astype(np.float64)
    # delay <= sampling period: m/B <= omega/k, fp-guarded
    fits = mf * k <= bandwidth * omega * (1.0 + 1e-12)
    feasible = ok & fits
    p = np.exp(gamma_ln / k)
    power = np.full(m.shape, np.inf)
    if np.any(feasible):
        sel = feasible
        duty = mf[sel] * k[sel] / (bandwidth * omega)
        tx = tx_power_array(mf[sel], p[sel], c1, bits)
        power[sel] = duty * (tx + w_c)
    return k, power, feasible
