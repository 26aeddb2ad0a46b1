"""Closed-form short-packet link math and the full-problem constraint check.

Per-link quantities for one transmission policy (blocklength m, repetition
count k per update interval, packet error probability p):

    p(k)      = (1 - delta)^(1/k), evaluated as exp(ln(1-delta)/k)
    h(k)      = omega / k                       (sampling period)
    tx(m, p)  = c1 * (exp(Qinv(p)/sqrt(m) + ln2*L/m) - 1)
    avg(m, k) = (m*k/(B*omega)) * (tx + w_c)    (duty cycle times power)

where c1 is noise power over channel gain. The minimum admissible k for a
given m follows from the largest error probability that keeps the link
inside the transmit-power budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import SystemConfig
from .errors import InfeasibleBlocklengthError, InfeasibleLinkError

_LN2 = math.log(2.0)
# relative guard on floor()/<= comparisons so by-construction equalities
# survive floating-point rounding
_FP_GUARD = 1e-9


@dataclass(frozen=True)
class NodeLink:
    """Channel state of one sensor link."""

    node_id: int
    distance_m: float
    large_scale_gain: float
    small_scale_coeff: complex
    composite_gain: float
    c1_w: float

    @staticmethod
    def from_gain(node_id: int, gain: float, cfg: SystemConfig,
                  distance_m: float = float("nan"),
                  large_scale_gain: float = float("nan"),
                  small_scale_coeff: complex = complex(float("nan"), 0.0)) -> "NodeLink":
        if gain <= 0:
            raise ValueError(f"composite gain must be positive, got {gain}")
        return NodeLink(node_id, distance_m, large_scale_gain, small_scale_coeff,
                        gain, cfg.noise_power_w / gain)


@dataclass(frozen=True)
class DerivedSchedule:
    """Sampling period and error probability induced by a repetition count."""

    k: int
    h_s: float
    p: float


def q_func(x):
    """Standard normal tail probability P(Z > x); scalar or array."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = kernels.q_array(arr)
    return float(out[0]) if np.isscalar(x) or np.ndim(x) == 0 else out


def inv_q(p):
    """Inverse of q_func on (0, 1); scalar or array."""
    arr = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("inv_q domain is the open interval (0, 1)")
    out = kernels.inv_q_array(arr)
    return float(out[0]) if np.isscalar(p) or np.ndim(p) == 0 else out


def tx_power(m, p, c1: float, bits: float):
    """Transmit power needed to push `bits` over m symbols at error prob p."""
    mb, pb = np.broadcast_arrays(np.asarray(m, dtype=np.float64),
                                 np.asarray(p, dtype=np.float64))
    if np.any(pb <= 0.0) or np.any(pb >= 1.0):
        raise ValueError("error probability must lie in (0, 1)")
    out = kernels.tx_power_array(np.atleast_1d(mb).copy(), np.atleast_1d(pb).copy(), c1, bits)
    scalar = np.ndim(m) == 0 and np.ndim(p) == 0
    return float(out[0]) if scalar else out.reshape(mb.shape)


def k_star_saturating(m: int, c1: float, cfg: SystemConfig) -> tuple[int, bool]:
    """Minimum admissible repetition count, clamped to cfg.k_max.

    The second element is False when the true count exceeds k_max or the
    required error probability is within 1e-15 of 1; strict callers must
    treat that as infeasible.
    """
    k, ok = kernels.k_star_array(np.array([float(m)]), c1, cfg.max_tx_power_w,
                                 cfg.packet_bits, cfg.log1m_confidence, cfg.k_max)
    return int(k[0]), bool(ok[0])


def k_star(m: int, c1: float, cfg: SystemConfig) -> int:
    """Minimum admissible repetition count for blocklength m; raises when none."""
    if m < 1:
        raise ValueError(f"blocklength must be >= 1, got {m}")
    k, ok = k_star_saturating(m, c1, cfg)
    if not ok:
        raise InfeasibleBlocklengthError(
            f"blocklength m={m} needs more than k_max={cfg.k_max} repetitions "
            f"(c1={c1:.3e} W)")
    return k


def schedule_from_k(k: int, cfg: SystemConfig) -> DerivedSchedule:
    """Sampling period and per-packet error probability for k repetitions."""
    if k < 1:
        raise ValueError(f"repetition count must be >= 1, got {k}")
    h = cfg.mati_s / k
    p = math.exp(cfg.log1m_confidence / k)
    return DerivedSchedule(k=int(k), h_s=h, p=p)


def avg_power_given_k(m: int, k: int, c1: float, cfg: SystemConfig) -> float:
    """Duty-cycled average power of one link at an explicit repetition count."""
    p = math.exp(cfg.log1m_confidence / k)
    duty = m * k / (cfg.bandwidth_hz * cfg.mati_s)
    return duty * (tx_power(m, p, c1, cfg.packet_bits) + cfg.circuit_power_w)


def node_avg_power(m: int, c1: float, cfg: SystemConfig) -> float:
    """Average power of one link with the minimum admissible repetition count."""
    return avg_power_given_k(m, k_star(m, c1, cfg), c1, cfg)


def schedule_usage(m_vec, k_vec, cfg: SystemConfig) -> float:
    """Fraction of schedule time consumed: sum of m*k/(B*omega)."""
    m = np.asarray(m_vec, dtype=np.float64)
    k = np.asarray(k_vec, dtype=np.float64)
    if m.shape != k.shape:
        raise ValueError("blocklength and repetition vectors differ in length")
    return float(np.sum(m * k) / (cfg.bandwidth_hz * cfg.mati_s))


def blocklength_upper_bound(cfg: SystemConfig) -> int:
    """Largest blocklength allowed by the cap and the delay budget."""
    return int(min(cfg.blocklength_cap_symbols,
                   math.floor(cfg.bandwidth_hz * cfg.mad_s * (1.0 + _FP_GUARD))))


@dataclass(frozen=True)
class NodeProfile:
    """Per-blocklength search table for one link over [m_lo, m_hi]."""

    m_lo: int
    m: np.ndarray
    k: np.ndarray
    power: np.ndarray
    feasible: np.ndarray


def node_power_profile(c1: float, cfg: SystemConfig) -> NodeProfile:
    if c1 <= 0:
        raise ValueError(f"c1 must be positive, got {c1}")
    m_hi = blocklength_upper_bound(cfg)
    if m_hi < 1:
        raise InfeasibleLinkError(
            "no integer blocklength fits the delay budget "
            f"(bandwidth*mad = {cfg.bandwidth_hz * cfg.mad_s:.3g} symbols)")
    k, power, feasible = kernels.node_profile(
        1, m_hi, c1, cfg.bandwidth_hz, cfg.mati_s, cfg.max_tx_power_w,
        cfg.packet_bits, cfg.circuit_power_w, cfg.log1m_confidence, cfg.k_max)
    return NodeProfile(m_lo=1, m=np.arange(1, m_hi + 1, dtype=np.int64),
                       k=k, power=power, feasible=feasible)


def feasible_m_range(c1: float, cfg: SystemConfig) -> tuple[int, int]:
    """Smallest and largest workable blocklength for a link, or an error."""
    profile = node_power_profile(c1, cfg)
    idx = np.nonzero(profile.feasible)[0]
    if idx.size == 0:
        raise InfeasibleLinkError(
            f"link with c1={c1:.3e} W supports no blocklength up to "
            f"{int(profile.m[-1])} symbols")
    return int(profile.m[idx[0]]), int(profile.m[-1])


@dataclass(frozen=True)
class ConstraintReport:
    """Pass flags and worst-case slacks for every constraint of the problem.

    Slacks are the smallest margins over nodes; a negative slack marks the
    violation size. Flags apply a relative guard of 1e-9 so equalities
    that hold by construction are not failed over rounding.
    """

    update_interval_ok: bool
    delay_ok: bool
    sampling_period_ok: bool
    error_prob_ok: bool
    blocklength_cap_ok: bool
    tx_power_ok: bool
    schedule_ok: bool
    update_interval_slack: float
    delay_slack: float
    sampling_period_slack: float
    error_prob_slack: float
    blocklength_cap_slack: float
    tx_power_slack: float
    schedule_slack: float
    node_violations: np.ndarray

    @property
    def feasible(self) -> bool:
        return (self.update_interval_ok and self.delay_ok and self.sampling_period_ok
                and self.error_prob_ok and self.blocklength_cap_ok
                and self.tx_power_ok and self.schedule_ok)

    def flags(self) -> dict:
        return {
            "update_interval": self.update_interval_ok,
            "delay": self.delay_ok,
            "sampling_period": self.sampling_period_ok,
            "error_prob": self.error_prob_ok,
            "blocklength_cap": self.blocklength_cap_ok,
            "tx_power": self.tx_power_ok,
            "schedule": self.schedule_ok,
        }

    def slacks(self) -> dict:
        return {
            "update_interval": self.update_interval_slack,
            "delay": self.delay_slack,
            "sampling_period": self.sampling_period_slack,
            "error_prob": self.error_prob_slack,
            "blocklength_cap": self.blocklength_cap_slack,
            "tx_power": self.tx_power_slack,
            "schedule": self.schedule_slack,
        }


def check_constraints(h_vec, m_vec, p_vec, cfg: SystemConfig, c1_vec) -> ConstraintReport:
    """Evaluate every constraint of the full allocation problem literally."""
    h = np.asarray(h_vec, dtype=np.float64)
    m = np.asarray(m_vec, dtype=np.float64)
    p = np.asarray(p_vec, dtype=np.float64)
    c1 = np.asarray(c1_vec, dtype=np.float64)
    if not (h.shape == m.shape == p.shape == c1.shape):
        raise ValueError("h, m, p and c1 vectors must have equal length")

    gamma = cfg.log1m_confidence
    guard = 1.0 + _FP_GUARD

    with np.errstate(divide="ignore", invalid="ignore"):
        slots = np.floor(cfg.mati_s / h * guard)
        interval_slack = gamma - slots * np.log(p)
    interval_slack = np.where(np.isfinite(interval_slack), interval_slack, -np.inf)
    interval_ok = bool(np.all(interval_slack >= -_FP_GUARD * abs(gamma)))

    delay = m / cfg.bandwidth_hz
    delay_margin = np.minimum(cfg.mad_s, h) * guard - delay
    delay_ok = bool(np.all((delay > 0) & (delay_margin >= 0)))

    period_margin = cfg.mati_s * guard - h
    period_ok = bool(np.all((h > 0) & (period_margin >= 0)))

    prob_margin = 1.0 - p
    prob_ok = bool(np.all((p > 0) & (p <= 1.0)))

    cap_margin = cfg.blocklength_cap_symbols - m
    cap_ok = bool(np.all(cap_margin >= 0))

    valid_p = (p > 0) & (p < 1)
    tx = np.full(m.shape, np.inf)
    if np.any(valid_p):
        tx[valid_p] = kernels.tx_power_array(
            m[valid_p].copy(), p[valid_p].copy(), 1.0, cfg.packet_bits) * c1[valid_p]
    tx[p == 1.0] = -c1[p == 1.0]  # formula limit at certain loss
    tx_margin = cfg.max_tx_power_w * guard - tx
    tx_ok = bool(np.all(tx_margin >= 0))

    with np.errstate(divide="ignore"):
        usage = float(np.sum(delay / h)) if h.size else 0.0
    schedule_slack = cfg.schedulability_budget * guard - usage
    schedule_ok = bool(schedule_slack >= 0)

    per_node_bad = ((interval_slack < -_FP_GUARD * abs(gamma))
                    | (delay <= 0) | (delay_margin < 0)
                    | (h <= 0) | (period_margin < 0)
                    | (p <= 0) | (p > 1.0)
                    | (cap_margin < 0) | (tx_margin < 0))

    def _min(x):
        return float(np.min(x)) if x.size else float("inf")

    return ConstraintReport(
        update_interval_ok=interval_ok, delay_ok=delay_ok,
        sampling_period_ok=period_ok, error_prob_ok=prob_ok,
        blocklength_cap_ok=cap_ok, tx_power_ok=tx_ok, schedule_ok=schedule_ok,
        update_interval_slack=_min(interval_slack), delay_slack=_min(delay_margin),
        sampling_period_slack=_min(period_margin), error_prob_slack=_min(prob_margin),
        blocklength_cap_slack=_min(cap_margin), tx_power_slack=_min(tx_margin),
        schedule_slack=float(schedule_slack), node_violations=per_node_bad,
    )
