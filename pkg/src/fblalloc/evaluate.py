"""Measurement suite: policy scoring, ECDF/Q-Q statistics, timing, reports.

All policies are scored by the same link formulas on the same simulated
gain trajectories (seeds shared across policies), and constraint checks
run on the raw policy output before any feasibility projection.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import channel, ddpm, fbl_core, solver
from .config import SystemConfig, with_nodes
from .errors import CheckpointError, FblError

CONSTRAINT_NAMES = ("update_interval", "delay", "sampling_period", "error_prob",
                    "blocklength_cap", "tx_power", "schedule")
# counted when a policy picks a blocklength admitting no repetition count at
# all; such episodes are violations with no scoreable power
NO_ADMISSIBLE_K = "no_admissible_k"


# ---------------------------------------------------------------------------
# policies

class SolverPolicy:
    name = "solver"

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg

    def decide(self, gains: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return solver.solve_network(gains, self.cfg).m


class RandomPolicy:
    name = "random"

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg

    def decide(self, gains: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return random_policy(self.cfg, rng)


class DdpmPolicy:
    name = "ddpm"

    def __init__(self, cfg: SystemConfig, checkpoint: ddpm.ModelCheckpoint,
                 deterministic: bool = False, use_ema: bool = True):
        if checkpoint.n != cfg.node_count:
            raise CheckpointError(
                f"checkpoint built for {checkpoint.n} nodes, config has "
                f"{cfg.node_count}")
        self.cfg = cfg
        self.ckpt = checkpoint
        self.deterministic = deterministic
        self.params = checkpoint.ema_params if use_ema else checkpoint.params

    def _normalize(self, gains: np.ndarray) -> np.ndarray:
        return ((10.0 * np.log10(gains) - self.ckpt.cond_mean_db)
                / self.ckpt.cond_std_db)

    def decide(self, gains: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x0 = ddpm.sample(self._normalize(gains), self.params, self.ckpt.schedule,
                         rng, deterministic=self.deterministic)
        return self._decode(x0)

    def decide_batch(self, gain_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = np.stack([self._normalize(g) for g in gain_rows])
        x0 = ddpm.sample(z, self.params, self.ckpt.schedule, rng,
                         deterministic=self.deterministic)
        return np.stack([self._decode(row) for row in x0])

    def _decode(self, x0: np.ndarray) -> np.ndarray:
        m = self.ckpt.m_lo + (x0 + 1.0) * (self.ckpt.m_hi - self.ckpt.m_lo) / 2.0
        return np.clip(np.floor(m + 0.5), self.ckpt.m_lo, self.ckpt.m_hi).astype(np.int64)


def random_policy(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform blocklengths over [1, cap], completed like every other policy."""
    return rng.integers(1, cfg.blocklength_cap_symbols + 1,
                        size=cfg.node_count).astype(np.int64)


# ---------------------------------------------------------------------------
# episode evaluation

@dataclass
class PolicyResult:
    policy: str
    n: int
    seeds: list[int]
    episodes_per_seed: int
    powers_w: np.ndarray          # nan where no allocation could be scored
    violated: np.ndarray          # any-constraint flag per episode
    constraint_violations: dict = field(default_factory=dict)
    infeasible_episodes: int = 0
    decision_times_s: np.ndarray = field(default_factory=lambda: np.empty(0))
    m_rows: np.ndarray = field(default_factory=lambda: np.empty((0, 0), dtype=np.int64))

    @property
    def mean_power_w(self) -> float:
        valid = self.powers_w[np.isfinite(self.powers_w)]
        return float(valid.mean()) if valid.size else float("nan")

    @property
    def violation_rate(self) -> float:
        return float(np.mean(self.violated)) if self.violated.size else 0.0

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "n": self.n,
            "episodes": int(self.violated.size),
            "mean_power_w": self.mean_power_w,
            "violation_rate": self.violation_rate,
            "constraint_violation_rates": {
                k: v / max(1, self.violated.size)
                for k, v in self.constraint_violations.items()},
            "infeasible_episodes": self.infeasible_episodes,
            "mean_decision_time_s": (float(self.decision_times_s.mean())
                                     if self.decision_times_s.size else float("nan")),
        }


def _policy_rng(policy_name: str, seed: int) -> np.random.Generator:
    entropy = [seed] + list(policy_name.encode())
    return np.random.default_rng(np.random.SeedSequence(entropy))


def evaluate_policy(policy, cfg: SystemConfig, seeds: list[int],
                    episodes: int) -> PolicyResult:
    """Score one policy over fresh deployments and fading trajectories.

    Each seed draws a new topology plus shadowing; fading then advances one
    step per episode. Channel randomness depends only on (cfg, seed), so
    passing the same seeds to different policies yields paired trajectories.
    """
    powers: list[float] = []
    violated: list[bool] = []
    times: list[float] = []
    m_rows: list[np.ndarray] = []
    per_constraint = {name: 0 for name in (*CONSTRAINT_NAMES, NO_ADMISSIBLE_K)}
    infeasible = 0

    for seed in seeds:
        topo_seed, fading_seed = np.random.SeedSequence(seed).spawn(2)
        topology = channel.init_topology(cfg, topo_seed)
        fading = channel.init_fading(cfg, fading_seed)
        prng = _policy_rng(policy.name, seed)
        for _ in range(episodes):
            channel.step_small_scale(fading)
            gains, _ = channel.composite_gain(topology, fading, cfg)
            start = time.perf_counter()
            try:
                m = policy.decide(gains, prng)
            except FblError:
                # the environment itself was unsolvable for this policy
                infeasible += 1
                powers.append(float("nan"))
                violated.append(False)
                m_rows.append(np.full(cfg.node_count, -1, dtype=np.int64))
                continue
            times.append(time.perf_counter() - start)
            p, v, flags = _score_one(m, gains, cfg)
            powers.append(p)
            violated.append(v)
            m_rows.append(np.asarray(m, dtype=np.int64))
            for name in flags:
                per_constraint[name] += 1

    return PolicyResult(
        policy=policy.name, n=cfg.node_count, seeds=list(seeds),
        episodes_per_seed=episodes, powers_w=np.array(powers),
        violated=np.array(violated, dtype=bool),
        constraint_violations=per_constraint, infeasible_episodes=infeasible,
        decision_times_s=np.array(times),
        m_rows=np.stack(m_rows) if m_rows else np.empty((0, cfg.node_count), dtype=np.int64),
    )


def _score_one(m, gains, cfg: SystemConfig) -> tuple[float, bool, list[str]]:
    """Score a raw blocklength vector: (total power, violated, failed flags).

    A blocklength whose minimum repetition count either does not exist or
    does not fit inside the update interval (per-node duty above 1) cannot
    be executed at all; the episode counts as a violation and its power is
    nan so a completion artifact cannot distort the mean.
    """
    try:
        alloc = solver.complete_allocation(m, gains, cfg, saturate=False)
    except FblError:
        return float("nan"), True, [NO_ADMISSIBLE_K]
    slot_budget = cfg.bandwidth_hz * cfg.mati_s * (1.0 + 1e-12)
    if np.any(alloc.m.astype(np.float64) * alloc.k > slot_budget):
        return float("nan"), True, [NO_ADMISSIBLE_K]
    failed = [name for name, ok in alloc.report.flags().items() if not ok]
    return alloc.total_avg_power_w, not alloc.report.feasible, failed


def score_m_rows(m_rows: np.ndarray, gain_rows: np.ndarray,
                 cfg: SystemConfig) -> tuple[np.ndarray, np.ndarray, dict]:
    """Power and violation flags for precomputed per-episode blocklengths."""
    powers = np.empty(m_rows.shape[0])
    violated = np.empty(m_rows.shape[0], dtype=bool)
    per_constraint = {name: 0 for name in (*CONSTRAINT_NAMES, NO_ADMISSIBLE_K)}
    for i in range(m_rows.shape[0]):
        powers[i], violated[i], flags = _score_one(m_rows[i], gain_rows[i], cfg)
        for name in flags:
            per_constraint[name] += 1
    return powers, violated, per_constraint


# ---------------------------------------------------------------------------
# distribution statistics

def ecdf_points(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique values with F(x) = P(X <= x); final value is 1."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("ecdf needs at least one sample")
    x = np.sort(arr)
    unique, counts = np.unique(x, return_counts=True)
    f = np.cumsum(counts) / arr.size
    return unique, f


def qq_points(samples) -> tuple[np.ndarray, np.ndarray]:
    """Standardized order statistics against standard-normal quantiles."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("qq needs at least two samples")
    std = arr.std()
    if std == 0.0:
        raise ValueError("qq is undefined for zero-variance samples")
    z = np.sort((arr - arr.mean()) / std)
    pos = (np.arange(1, arr.size + 1) - 0.5) / arr.size
    theoretical = fbl_core.inv_q(1.0 - pos)
    return theoretical, z


def qq_pair(true_samples, generated_samples) -> tuple[np.ndarray, np.ndarray, float]:
    """Paired standardized quantiles of two equal-size samples plus the
    least-squares slope of generated on true."""
    a = np.asarray(true_samples, dtype=np.float64)
    b = np.asarray(generated_samples, dtype=np.float64)
    if a.size != b.size or a.size < 2:
        raise ValueError("qq_pair needs two equal-size samples of >= 2 points")
    if a.std() == 0.0 or b.std() == 0.0:
        raise ValueError("qq_pair is undefined for zero-variance samples")
    za = np.sort((a - a.mean()) / a.std())
    zb = np.sort((b - b.mean()) / b.std())
    slope = float(np.dot(za, zb) / np.dot(za, za))
    return za, zb, slope


# ---------------------------------------------------------------------------
# timing

def timing_benchmark(policy_factory, n_values, cfg: SystemConfig,
                     repetitions: int = 20, seed: int = 0) -> dict:
    """Mean/std wall time per allocation decision for each network size.

    policy_factory(cfg_n) builds the policy under test; a warmup decision
    runs before measurement. Gains are drawn once per size and rejected
    until every link is solver-feasible so all policies face the same
    workable instance.
    """
    out = {}
    for n in n_values:
        cfg_n = with_nodes(cfg, int(n))
        gains = _feasible_gains(cfg_n, seed)
        policy = policy_factory(cfg_n)
        rng = _policy_rng(policy.name, seed)
        policy.decide(gains, rng)  # warmup: jit, allocations, caches
        times = np.empty(repetitions)
        for r in range(repetitions):
            start = time.perf_counter()
            policy.decide(gains, rng)
            times[r] = time.perf_counter() - start
        out[int(n)] = (float(times.mean()), float(times.std()))
    return out


def _feasible_gains(cfg: SystemConfig, seed: int, max_tries: int = 64) -> np.ndarray:
    for attempt in range(max_tries):
        topo_seed, fading_seed = np.random.SeedSequence([seed, attempt]).spawn(2)
        topology = channel.init_topology(cfg, topo_seed)
        fading = channel.step_small_scale(channel.init_fading(cfg, fading_seed))
        gains, c1 = channel.composite_gain(topology, fading, cfg)
        try:
            for v in c1:
                fbl_core.feasible_m_range(float(v), cfg)
        except FblError:
            continue
        return gains
    raise FblError(f"no fully feasible draw found in {max_tries} tries")


# ---------------------------------------------------------------------------
# report files

def report(results: list[PolicyResult], out_dir: str,
           qq: tuple[np.ndarray, np.ndarray] | None = None,
           timing: dict | None = None) -> list[str]:
    """Write the plot-ready CSV set and a JSON summary; returns paths."""
    if not results:
        raise ValueError("no policy results to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def _write(name: str, header: str, rows) -> None:
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(str(c) for c in row) + "\n")
        written.append(path)

    _write("avg_power_vs_n.csv", "policy,n,episodes,mean_total_power_w",
           [(r.policy, r.n, r.violated.size, repr(r.mean_power_w)) for r in results])

    for r in results:
        finite = r.powers_w[np.isfinite(r.powers_w)]
        if finite.size == 0:
            continue
        x, f = ecdf_points(finite)
        _write(f"ecdf_{r.policy}.csv", "n,total_power_w,cdf",
               [(r.n, repr(float(xv)), repr(float(fv))) for xv, fv in zip(x, f)])

    if qq is not None:
        za, zb = qq
        _write("qq_true_vs_generated.csv",
               "true_standardized_quantile,generated_standardized_quantile",
               [(repr(float(a)), repr(float(b))) for a, b in zip(za, zb)])

    _write("violations_vs_n.csv",
           "policy,n,episodes,any_violation_rate," + ",".join(
               f"{name}_rate" for name in CONSTRAINT_NAMES),
           [(r.policy, r.n, r.violated.size, repr(r.violation_rate),
             *[repr(r.constraint_violations.get(name, 0) / max(1, r.violated.size))
               for name in CONSTRAINT_NAMES]) for r in results])

    if timing is not None:
        rows = []
        for policy_name, per_n in timing.items():
            for n, (mean_s, std_s) in sorted(per_n.items()):
                rows.append((policy_name, n, repr(mean_s), repr(std_s)))
        _write("timing_vs_n.csv", "policy,n,mean_decision_time_s,std_decision_time_s", rows)

    summary = {"policies": [r.summary() for r in results]}
    if timing is not None:
        summary["timing_s"] = {p: {str(n): v for n, v in per_n.items()}
                               for p, per_n in timing.items()}
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written
