"""Fading channel simulator: static geometry plus time-correlated fading.

Nodes are scattered uniformly over a disc around the controller. Each
link carries a fixed large-scale gain (log-distance path loss with
log-normal shadowing, frozen per topology draw) and a complex small-scale
coefficient evolving as a first-order Gauss-Markov process with unit
stationary mean-square. The composite power gain is

    g_i = large_scale_i * |small_scale_i|^2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig
from .fbl_core import NodeLink


@dataclass(frozen=True)
class Topology:
    """Static geometry of one deployment: positions, distances, shadowing."""

    radius_m: float
    distance_m: np.ndarray
    angle_rad: np.ndarray
    shadow_db: np.ndarray
    large_scale_gain: np.ndarray

    @property
    def node_count(self) -> int:
        return self.distance_m.size


@dataclass
class FadingState:
    """Mutable small-scale fading state; advance from a single thread."""

    correlation: float
    coeff: np.ndarray  # complex, unit mean-square in stationarity
    rng: np.random.Generator


def large_scale_gain(d_m, shadow_z_db, cfg: SystemConfig):
    """Linear power gain at distance d with an explicit shadowing draw (dB)."""
    d = np.asarray(d_m, dtype=np.float64)
    pl_db = (cfg.pathloss_reference_db
             + 10.0 * cfg.pathloss_exponent * np.log10(d)
             + np.asarray(shadow_z_db, dtype=np.float64))
    out = 10.0 ** (-pl_db / 10.0)
    return float(out) if np.ndim(d_m) == 0 and np.ndim(shadow_z_db) == 0 else out


def init_topology(cfg: SystemConfig, seed: int) -> Topology:
    """Draw node positions uniformly over the disc and freeze shadowing.

    Distances below the 1 m pathloss reference are clamped to 1 m.
    Deterministic for a fixed (cfg, seed).
    """
    rng = np.random.default_rng(seed)
    n = cfg.node_count
    radius = cfg.radius_m * np.sqrt(rng.uniform(size=n))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    distance = np.maximum(radius, 1.0)
    shadow = rng.normal(0.0, cfg.shadowing_std_db, size=n)
    gain = large_scale_gain(distance, shadow, cfg) if n else np.empty(0)
    return Topology(radius_m=cfg.radius_m, distance_m=distance, angle_rad=angle,
                    shadow_db=shadow, large_scale_gain=np.asarray(gain, dtype=np.float64))


def _complex_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    # circularly symmetric, E|e|^2 = 1
    return (rng.normal(0.0, np.sqrt(0.5), size=n)
            + 1j * rng.normal(0.0, np.sqrt(0.5), size=n))


def init_fading(cfg: SystemConfig, seed: int) -> FadingState:
    """Start the small-scale process from its stationary distribution."""
    rng = np.random.default_rng(seed)
    return FadingState(correlation=cfg.fading_correlation,
                       coeff=_complex_normal(rng, cfg.node_count), rng=rng)


def step_small_scale(state: FadingState) -> FadingState:
    """Advance the Gauss-Markov process one frame, in place."""
    rho = state.correlation
    innovation = _complex_normal(state.rng, state.coeff.size)
    state.coeff = rho * state.coeff + np.sqrt(1.0 - rho * rho) * innovation
    return state


def composite_gain(topology: Topology, fading: FadingState,
                   cfg: SystemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-node composite power gain |g_i| and the derived c1 = noise/|g_i|."""
    if topology.node_count != fading.coeff.size:
        raise ValueError("topology and fading state disagree on node count")
    gains = topology.large_scale_gain * np.abs(fading.coeff) ** 2
    c1 = cfg.noise_power_w / gains
    return gains, c1


def make_links(gains: np.ndarray, cfg: SystemConfig,
               topology: Topology | None = None,
               fading: FadingState | None = None) -> list[NodeLink]:
    links = []
    for i, g in enumerate(np.asarray(gains, dtype=np.float64)):
        links.append(NodeLink(
            node_id=i,
            distance_m=float(topology.distance_m[i]) if topology is not None else float("nan"),
            large_scale_gain=float(topology.large_scale_gain[i]) if topology is not None else float("nan"),
            small_scale_coeff=complex(fading.coeff[i]) if fading is not None else complex(float("nan"), 0.0),
            composite_gain=float(g),
            c1_w=cfg.noise_power_w / float(g),
        ))
    return links
