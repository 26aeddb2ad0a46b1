"""Blocklength allocation: exact per-node search plus network-level repair.

The per-node stage minimizes duty-cycled average power over every integer
blocklength the link supports (exhaustive, so exact per node). When the
separable optima overshoot the schedulability budget, a greedy repair
loop walks single nodes down to their next-lower schedule-usage level,
always picking the node with the cheapest power increase per unit of
usage freed.

brute_force_network is the reference solution at small scale: it
enumerates (blocklength, repetition count) candidates per node with the
constraint set evaluated literally and independently of the solver path,
prunes dominated candidates, and finds the exact constrained minimum by
dynamic programming over the integer schedule-usage budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import fbl_core, kernels
from .config import SystemConfig
from .errors import InfeasibleLinkError, InfeasibleNetworkError

_LN2 = math.log(2.0)
_FP_GUARD = 1e-9


@dataclass(frozen=True)
class Allocation:
    """Joint assignment with every derived per-node quantity."""

    m: np.ndarray
    k: np.ndarray
    h_s: np.ndarray
    p: np.ndarray
    tx_power_w: np.ndarray
    avg_power_w: np.ndarray
    total_avg_power_w: float
    schedule_usage: float
    report: fbl_core.ConstraintReport


def build_allocation(m_vec, k_vec, gains, cfg: SystemConfig) -> Allocation:
    """Derive (h, p, powers, usage, constraint report) from explicit (m, k)."""
    m = np.asarray(m_vec, dtype=np.int64)
    k = np.asarray(k_vec, dtype=np.int64)
    gains = np.asarray(gains, dtype=np.float64)
    c1 = cfg.noise_power_w / gains
    h = cfg.mati_s / k
    p = np.exp(cfg.log1m_confidence / k)
    tx = kernels.tx_power_array(m.astype(np.float64), p.copy(), 1.0, cfg.packet_bits) * c1
    duty = m * k / (cfg.bandwidth_hz * cfg.mati_s)
    avg = duty * (tx + cfg.circuit_power_w)
    usage = fbl_core.schedule_usage(m, k, cfg)
    report = fbl_core.check_constraints(h, m, p, cfg, c1)
    return Allocation(m=m, k=k, h_s=h, p=p, tx_power_w=tx, avg_power_w=avg,
                      total_avg_power_w=float(np.sum(avg)), schedule_usage=usage,
                      report=report)


def complete_allocation(m_vec, gains, cfg: SystemConfig, saturate: bool = False) -> Allocation:
    """Complete a bare blocklength vector with the minimum repetition counts.

    With saturate=True an inadmissible link gets k clamped at cfg.k_max so
    the resulting (infeasible) allocation can still be scored and its
    constraint violations counted; otherwise the error propagates.
    """
    m = np.asarray(m_vec, dtype=np.int64)
    gains = np.asarray(gains, dtype=np.float64)
    c1 = cfg.noise_power_w / gains
    k = np.empty(m.shape, dtype=np.int64)
    for i in range(m.size):
        if saturate:
            k[i], _ = fbl_core.k_star_saturating(int(m[i]), float(c1[i]), cfg)
        else:
            k[i] = fbl_core.k_star(int(m[i]), float(c1[i]), cfg)
    return build_allocation(m, k, gains, cfg)


def solve_per_node(c1: float, cfg: SystemConfig) -> int:
    """Exact minimizer of per-link average power over all workable blocklengths."""
    profile = fbl_core.node_power_profile(c1, cfg)
    if not np.any(profile.feasible):
        raise InfeasibleLinkError(
            f"link with c1={c1:.3e} W supports no blocklength up to "
            f"{int(profile.m[-1])} symbols")
    # np.argmin returns the first minimum, which is the smallest m
    return int(profile.m[np.argmin(profile.power)])


@dataclass
class _NodeLevels:
    """Schedule-usage levels of one node: ascending units, best power each."""

    units: np.ndarray   # distinct m*k values, ascending
    power: np.ndarray   # min power at each level
    m: np.ndarray       # blocklength achieving it (smallest on ties)
    k: np.ndarray
    level: int = field(default=0)  # index of the current assignment


def _node_levels(profile: fbl_core.NodeProfile) -> _NodeLevels:
    feas = profile.feasible
    m = profile.m[feas]
    k = profile.k[feas]
    power = profile.power[feas]
    units = m * k
    order = np.lexsort((m, power, units))  # by units, then power, then m
    units, power, m, k = units[order], power[order], m[order], k[order]
    first = np.ones(units.size, dtype=bool)
    first[1:] = units[1:] != units[:-1]
    return _NodeLevels(units=units[first], power=power[first], m=m[first], k=k[first])


def solve_network(gains, cfg: SystemConfig) -> Allocation:
    """Per-node optima, then greedy usage repair until the budget holds."""
    gains = np.asarray(gains, dtype=np.float64)
    if gains.size < 1:
        raise ValueError("solve_network needs at least one node")
    c1 = cfg.noise_power_w / gains
    budget_units = cfg.schedulability_budget * cfg.bandwidth_hz * cfg.mati_s

    nodes = []
    for i in range(gains.size):
        profile = fbl_core.node_power_profile(float(c1[i]), cfg)
        if not np.any(profile.feasible):
            raise InfeasibleLinkError(
                f"node {i}: no feasible blocklength (c1={c1[i]:.3e} W)")
        levels = _node_levels(profile)
        feas = profile.feasible
        best = np.argmin(profile.power[feas])
        best_units = (profile.m[feas] * profile.k[feas])[best]
        levels.level = int(np.searchsorted(levels.units, best_units))
        nodes.append(levels)

    def total_units() -> float:
        return float(sum(n.units[n.level] for n in nodes))

    while total_units() > budget_units * (1.0 + 1e-12):
        best_ratio = np.inf
        best_node = -1
        for i, n in enumerate(nodes):
            if n.level == 0:
                continue
            d_power = n.power[n.level - 1] - n.power[n.level]
            d_units = n.units[n.level] - n.units[n.level - 1]
            ratio = d_power / d_units
            better = ratio < best_ratio
            same = ratio == best_ratio and best_node >= 0
            if same:  # ties: smaller candidate m, then smaller node id
                cur = nodes[best_node]
                better = n.m[n.level - 1] < cur.m[cur.level - 1]
            if better:
                best_ratio = ratio
                best_node = i
        if best_node < 0:
            raise InfeasibleNetworkError(
                f"minimal schedule usage {total_units() / (cfg.bandwidth_hz * cfg.mati_s):.4f} "
                f"exceeds budget {cfg.schedulability_budget}")
        nodes[best_node].level -= 1

    m = np.array([n.m[n.level] for n in nodes], dtype=np.int64)
    k = np.array([n.k[n.level] for n in nodes], dtype=np.int64)
    return build_allocation(m, k, gains, cfg)


@dataclass(frozen=True)
class BruteForceLimits:
    """Guard rails for the exhaustive reference solver."""

    m_lo: int | None = None
    m_hi: int | None = None
    k_cap: int = 64
    max_nodes: int = 5
    max_m_values: int = 64


def _brute_candidates(c1: float, cfg: SystemConfig, limits: BruteForceLimits):
    """Literal per-node candidate set (units, power, m, k), Pareto-pruned.

    Written directly from the problem statement and scipy's normal
    quantile, independent of the solver's reduction path.
    """
    m_hi_cap = fbl_core.blocklength_upper_bound(cfg)
    m_lo = limits.m_lo if limits.m_lo is not None else 1
    m_hi = limits.m_hi if limits.m_hi is not None else m_hi_cap
    m_hi = min(m_hi, m_hi_cap)
    if m_hi - m_lo + 1 > limits.max_m_values:
        raise ValueError(
            f"brute force limited to {limits.max_m_values} blocklength values, "
            f"got range [{m_lo}, {m_hi}]")

    m = np.arange(m_lo, m_hi + 1, dtype=np.int64)
    k = np.arange(1, limits.k_cap + 1, dtype=np.int64)
    mm, kk = np.meshgrid(m, k, indexing="ij")
    mm = mm.ravel()
    kk = kk.ravel()

    h = cfg.mati_s / kk
    p = np.exp(cfg.log1m_confidence / kk)
    delay = mm / cfg.bandwidth_hz
    tx = c1 * np.expm1(-ndtri(p) / np.sqrt(mm) + _LN2 * cfg.packet_bits / mm)
    ok = ((delay > 0)
          & (delay <= np.minimum(cfg.mad_s, h) * (1.0 + _FP_GUARD))
          & (h <= cfg.mati_s * (1.0 + _FP_GUARD))
          & (mm <= cfg.blocklength_cap_symbols)
          & (tx <= cfg.max_tx_power_w * (1.0 + _FP_GUARD)))
    if not np.any(ok):
        return None
    mm, kk, tx = mm[ok], kk[ok], tx[ok]
    units = mm * kk
    power = units / (cfg.bandwidth_hz * cfg.mati_s) * (tx + cfg.circuit_power_w)

    order = np.lexsort((mm, power, units))
    units, power, mm, kk = units[order], power[order], mm[order], kk[order]
    keep = []
    best = np.inf
    last_units = -1
    for j in range(units.size):
        if units[j] == last_units:
            continue  # same usage, higher or equal power
        if power[j] < best:
            keep.append(j)
            best = power[j]
            last_units = units[j]
    keep = np.array(keep, dtype=np.int64)
    return units[keep], power[keep], mm[keep], kk[keep]


def brute_force_network(gains, cfg: SystemConfig,
                        limits: BruteForceLimits | None = None) -> Allocation:
    """Exact constrained minimum over the pruned candidate lattice (small N)."""
    limits = limits or BruteForceLimits()
    gains = np.asarray(gains, dtype=np.float64)
    n = gains.size
    if n < 1:
        raise ValueError("brute_force_network needs at least one node")
    if n > limits.max_nodes:
        raise ValueError(f"brute force limited to {limits.max_nodes} nodes, got {n}")
    c1 = cfg.noise_power_w / gains

    per_node = []
    for i in range(n):
        cand = _brute_candidates(float(c1[i]), cfg, limits)
        if cand is None:
            raise InfeasibleLinkError(
                f"node {i}: empty feasible set in brute-force enumeration")
        per_node.append(cand)

    budget = int(math.floor(cfg.schedulability_budget * cfg.bandwidth_hz
                            * cfg.mati_s * (1.0 + 1e-12)))
    min_total = sum(int(c[0][0]) for c in per_node)
    if min_total > budget:
        raise InfeasibleNetworkError(
            f"minimal usage {min_total} slot-units exceeds budget {budget}")
    cap = min(budget, sum(int(c[0][-1]) for c in per_node))

    stages = [np.full(cap + 1, np.inf)]
    stages[0][0] = 0.0
    for units, power, _, _ in per_node:
        prev = stages[-1]
        cur = np.full(cap + 1, np.inf)
        for u, pw in zip(units, power):
            u = int(u)
            if u > cap:
                break
            np.minimum(cur[u:], prev[: cap + 1 - u] + pw, out=cur[u:])
        stages.append(cur)

    final = stages[-1]
    best_u = int(np.argmin(final))
    if not np.isfinite(final[best_u]):
        raise InfeasibleNetworkError("no joint assignment fits the budget")

    m_out = np.empty(n, dtype=np.int64)
    k_out = np.empty(n, dtype=np.int64)
    u = best_u
    for i in range(n - 1, -1, -1):
        units, power, mm, kk = per_node[i]
        prev = stages[i]
        target = stages[i + 1][u]
        for j in range(units.size):
            uj = int(units[j])
            if uj > u:
                break
            if power[j] + prev[u - uj] == target:
                m_out[i] = mm[j]
                k_out[i] = kk[j]
                u -= uj
                break
        else:  # pragma: no cover - would indicate a DP bookkeeping bug
            raise AssertionError("brute-force backtracking failed")

    return build_allocation(m_out, k_out, gains, cfg)
