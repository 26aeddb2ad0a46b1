"""System configuration: physical constants, protocol limits, solver knobs.

Defaults reproduce the reference simulation setup (100 kHz bandwidth,
100-bit packets, 1 ms delay budget, 100 ms update interval at 0.99
confidence, 250 mW transmit cap, 5 mW circuit power, 64 nodes in a 50 m
disc, -174 dBm/Hz noise floor, 200-symbol blocklength cap).

Config files are flat ``key = value`` lines; ``#`` starts a comment.
Stage-specific keys use a dotted prefix (``train.batch_size = 32``) and
are returned separately from the system keys. Every key can be
overridden through the environment as ``FBLALLOC_<KEY>`` with dots
spelled as double underscores (``FBLALLOC_TRAIN__BATCH_SIZE``).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

ENV_PREFIX = "FBLALLOC_"
# consumed elsewhere (kernel backend selection), not config overrides
_RESERVED_ENV_KEYS = {"no_numba"}


@dataclass(frozen=True)
class SystemConfig:
    bandwidth_hz: float = 100e3
    packet_bits: float = 100.0
    mad_s: float = 1e-3
    mati_s: float = 100e-3
    mati_confidence: float = 0.99
    max_tx_power_w: float = 0.25
    circuit_power_w: float = 5e-3
    node_count: int = 64
    noise_psd_dbm_hz: float = -174.0
    blocklength_cap_symbols: int = 200
    schedulability_budget: float = 1.0
    radius_m: float = 50.0
    pathloss_reference_db: float = 35.3
    pathloss_exponent: float = 3.76
    shadowing_std_db: float = 4.0
    fading_correlation: float = 0.99
    k_max: int = 1_000_000

    @property
    def noise_power_w(self) -> float:
        """Noise PSD (dBm/Hz) integrated over the bandwidth, in watts."""
        return 10.0 ** ((self.noise_psd_dbm_hz - 30.0) / 10.0) * self.bandwidth_hz

    @property
    def log1m_confidence(self) -> float:
        """ln(1 - delta), the log of the allowed update-miss probability."""
        return math.log1p(-self.mati_confidence)

    def validate(self) -> "SystemConfig":
        checks = [
            ("bandwidth_hz", self.bandwidth_hz > 0, "must be > 0"),
            ("packet_bits", self.packet_bits > 0, "must be > 0"),
            ("mad_s", 0 < self.mad_s <= self.mati_s, "must satisfy 0 < mad_s <= mati_s"),
            ("mati_s", self.mati_s > 0, "must be > 0"),
            ("mati_confidence", 0 < self.mati_confidence < 1, "must lie in (0, 1)"),
            ("max_tx_power_w", self.max_tx_power_w > 0, "must be > 0"),
            ("circuit_power_w", self.circuit_power_w >= 0, "must be >= 0"),
            ("node_count", self.node_count >= 0, "must be >= 0"),
            ("blocklength_cap_symbols", self.blocklength_cap_symbols >= 1, "must be >= 1"),
            ("schedulability_budget", 0 < self.schedulability_budget <= 1, "must lie in (0, 1]"),
            ("radius_m", self.radius_m > 1, "must be > 1 m (the pathloss reference distance)"),
            ("pathloss_exponent", self.pathloss_exponent > 0, "must be > 0"),
            ("shadowing_std_db", self.shadowing_std_db >= 0, "must be >= 0"),
            ("fading_correlation", 0 <= self.fading_correlation < 1, "must lie in [0, 1)"),
            ("k_max", self.k_max >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"config key '{key}' {msg} (got {getattr(self, key)!r})")
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(SystemConfig)}


def _coerce(key: str, raw: str, lineno: int, path: str):
    typ = _FIELD_TYPES[key]
    try:
        if typ == "int":
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: cannot parse value for '{key}': {raw!r}") from exc


def parse_kv_file(path: str) -> dict[str, str]:
    """Parse a flat key=value file; returns raw string values keyed by name.

    Raises ConfigError with the offending line number on malformed lines.
    """
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            out[key] = value
    return out


def _env_overrides() -> dict[str, str]:
    out = {}
    for name, value in os.environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            if key in _RESERVED_ENV_KEYS:
                continue
            out[key] = value
    return out


def load_config(path: str | None = None) -> tuple[SystemConfig, dict[str, str]]:
    """Load a SystemConfig plus stage-scoped extras from a file and the env.

    Returns (config, extras) where extras maps dotted keys like
    'train.batch_size' to their raw string values. Unknown undotted keys
    are rejected. A missing/None path yields pure defaults (plus env).
    """
    raw = parse_kv_file(path) if path is not None else {}
    raw.update(_env_overrides())

    system: dict = {}
    extras: dict[str, str] = {}
    for key, value in raw.items():
        if "." in key:
            extras[key] = value
        elif key in _FIELD_TYPES:
            system[key] = _coerce(key, value, 0, path or "<env>")
        else:
            raise ConfigError(f"unknown config key '{key}' (file {path or '<env>'})")
    cfg = SystemConfig(**system)
    return cfg.validate(), extras


def with_nodes(cfg: SystemConfig, n: int) -> SystemConfig:
    return replace(cfg, node_count=n).validate()
