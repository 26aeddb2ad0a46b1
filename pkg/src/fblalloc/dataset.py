"""Training-corpus generation and persistence.

A dataset pairs per-frame channel gain vectors with the optimal
blocklength vectors produced by the solver on the same gains. Rows are
CSV (`frame, g_1..g_N, m_1..m_N`); the sidecar JSON carries the format
version, config snapshot, seed, conditioning statistics (mean/std of the
gains in dB) and the blocklength encode range, so a model trained on the
file can never drift from it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import channel, fbl_core, solver
from .config import SystemConfig
from .errors import DatasetFormatError, FblError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetRecord:
    frame_index: int
    gains: np.ndarray
    m_opt: np.ndarray


@dataclass
class DatasetMeta:
    n: int
    frames: int
    seed: int
    cfg: dict
    cond_mean_db: np.ndarray
    cond_std_db: np.ndarray
    m_lo: int
    m_hi: int
    skipped_frames: list[int] = field(default_factory=list)
    format_version: int = FORMAT_VERSION


def conditioning_stats(gain_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std of the gains in dB (population std)."""
    db = 10.0 * np.log10(gain_rows)
    mean = db.mean(axis=0)
    std = db.std(axis=0)
    return mean, np.maximum(std, 1e-12)


def generate_dataset(cfg: SystemConfig, seed: int,
                     frames: int) -> tuple[list[DatasetRecord], DatasetMeta]:
    """Simulate `frames` fading steps and solve each one.

    Frames on which the solver reports infeasibility are skipped and their
    indices recorded in the meta. Deterministic for fixed (cfg, seed).
    """
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    topo_seed, fading_seed = np.random.SeedSequence(seed).spawn(2)
    topology = channel.init_topology(cfg, topo_seed)
    fading = channel.init_fading(cfg, fading_seed)

    records: list[DatasetRecord] = []
    skipped: list[int] = []
    for frame in range(frames):
        channel.step_small_scale(fading)
        gains, _ = channel.composite_gain(topology, fading, cfg)
        try:
            alloc = solver.solve_network(gains, cfg)
        except FblError:
            skipped.append(frame)
            continue
        records.append(DatasetRecord(frame_index=frame, gains=gains.copy(),
                                     m_opt=alloc.m.copy()))
    if not records:
        raise FblError(f"all {frames} frames were infeasible; no dataset produced")

    gain_rows = np.stack([r.gains for r in records])
    mean, std = conditioning_stats(gain_rows)
    meta = DatasetMeta(n=cfg.node_count, frames=frames, seed=seed,
                       cfg=cfg.as_dict(), cond_mean_db=mean, cond_std_db=std,
                       m_lo=1, m_hi=fbl_core.blocklength_upper_bound(cfg),
                       skipped_frames=skipped)
    return records, meta


def normalize_condition(gain_vec, meta: DatasetMeta) -> np.ndarray:
    """z-score of the gains in dB, per dimension."""
    g = np.asarray(gain_vec, dtype=np.float64)
    if np.any(g <= 0):
        raise ValueError("gains must be positive to normalize in dB")
    return (10.0 * np.log10(g) - meta.cond_mean_db) / meta.cond_std_db


def denormalize_condition(z_vec, meta: DatasetMeta) -> np.ndarray:
    z = np.asarray(z_vec, dtype=np.float64)
    return 10.0 ** ((z * meta.cond_std_db + meta.cond_mean_db) / 10.0)


def encode_blocklength(m, meta: DatasetMeta) -> np.ndarray:
    """Affine map [m_lo, m_hi] -> [-1, +1]."""
    m = np.asarray(m, dtype=np.float64)
    return 2.0 * (m - meta.m_lo) / (meta.m_hi - meta.m_lo) - 1.0


def decode_blocklength(y, meta: DatasetMeta) -> np.ndarray:
    """Inverse affine map with round-half-up, clamped to [m_lo, m_hi]."""
    y = np.asarray(y, dtype=np.float64)
    m = meta.m_lo + (y + 1.0) * (meta.m_hi - meta.m_lo) / 2.0
    return np.clip(np.floor(m + 0.5), meta.m_lo, meta.m_hi).astype(np.int64)


def _meta_path(path: str) -> str:
    return path + ".meta.json"


def write_dataset(records: list[DatasetRecord], meta: DatasetMeta, path: str) -> None:
    """CSV rows plus sidecar JSON; floats written with exact roundtrip repr."""
    n = meta.n
    header = (["frame"] + [f"g_{i + 1}" for i in range(n)]
              + [f"m_{i + 1}" for i in range(n)])
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for rec in records:
            if rec.gains.size != n or rec.m_opt.size != n:
                raise DatasetFormatError(
                    f"record {rec.frame_index}: expected {n} nodes, "
                    f"got {rec.gains.size}/{rec.m_opt.size}")
            cells = ([str(rec.frame_index)]
                     + [repr(float(g)) for g in rec.gains]
                     + [str(int(m)) for m in rec.m_opt])
            fh.write(",".join(cells) + "\n")
    os.replace(tmp, path)

    meta_doc = {
        "format_version": meta.format_version,
        "n": meta.n,
        "frames": meta.frames,
        "seed": meta.seed,
        "cfg": meta.cfg,
        "cond_mean_db": [float(x) for x in meta.cond_mean_db],
        "cond_std_db": [float(x) for x in meta.cond_std_db],
        "m_lo": meta.m_lo,
        "m_hi": meta.m_hi,
        "skipped_frames": meta.skipped_frames,
    }
    tmp = _meta_path(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(meta_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, _meta_path(path))


def read_dataset(path: str) -> tuple[list[DatasetRecord], DatasetMeta]:
    meta_path = _meta_path(path)
    if not os.path.exists(meta_path):
        raise DatasetFormatError(f"missing sidecar meta file: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{meta_path}: invalid JSON: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{meta_path}: format version {version} != supported {FORMAT_VERSION}")
    meta = DatasetMeta(n=int(doc["n"]), frames=int(doc["frames"]),
                       seed=int(doc["seed"]), cfg=dict(doc["cfg"]),
                       cond_mean_db=np.asarray(doc["cond_mean_db"], dtype=np.float64),
                       cond_std_db=np.asarray(doc["cond_std_db"], dtype=np.float64),
                       m_lo=int(doc["m_lo"]), m_hi=int(doc["m_hi"]),
                       skipped_frames=list(doc["skipped_frames"]),
                       format_version=int(version))

    n = meta.n
    width = 1 + 2 * n
    records: list[DatasetRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if len(header) != width:
            raise DatasetFormatError(
                f"{path}: header has {len(header)} columns, sidecar says n={n} "
                f"(expected {width})")
        for lineno, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != width:
                raise DatasetFormatError(
                    f"{path}:{lineno}: row has {len(cells)} cells, expected {width}")
            try:
                frame = int(cells[0])
                gains = np.array([float(c) for c in cells[1:1 + n]])
                m_opt = np.array([int(c) for c in cells[1 + n:]], dtype=np.int64)
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
            records.append(DatasetRecord(frame_index=frame, gains=gains, m_opt=m_opt))
    return records, meta
