"""Command-line pipeline: gen-dataset, solve, train, infer, eval, report.

Exit codes: 0 success, 1 domain or infeasibility error, 2 usage error.
Every run writes a manifest (config snapshot, seeds, paths, format
versions, wall clock) next to its outputs. All randomness is traceable
to --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, channel, dataset, ddpm, evaluate, fbl_core, kernels, solver
from .config import SystemConfig, load_config, with_nodes
from .errors import CheckpointError, ConfigError, FblError

_log = logging.getLogger(__name__)


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    config: dict
    extras: dict
    seeds: list[int]
    inputs: list[str]
    outputs: list[str]
    format_versions: dict = field(default_factory=lambda: {
        "package": __version__,
        "dataset": dataset.FORMAT_VERSION,
        "checkpoint": ddpm.CHECKPOINT_VERSION,
    })
    kernel_backend: str = kernels.BACKEND
    started_unix: float = 0.0
    wall_clock_s: float = 0.0


def _write_manifest(manifest: RunManifest, anchor: str) -> str:
    """Atomically place the manifest next to the output file or directory."""
    if os.path.isdir(anchor):
        path = os.path.join(anchor, "run_manifest.json")
    else:
        path = anchor + ".manifest.json"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def validate_config(path: str | None) -> tuple[SystemConfig, dict]:
    """Parse a config file (missing file -> error; None -> pure defaults)."""
    if path is not None and not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return load_config(path)


def _read_gain_rows(path: str) -> np.ndarray:
    """Gain rows from a CSV with g_1..g_N columns (dataset files work too)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        g_idx = [i for i, name in enumerate(header) if name.startswith("g_")]
        if not g_idx:
            raise FblError(f"{path}: no g_* columns in header")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != len(header):
                raise FblError(f"{path}:{lineno}: expected {len(header)} cells, "
                               f"got {len(cells)}")
            try:
                rows.append([float(cells[i]) for i in g_idx])
            except ValueError as exc:
                raise FblError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FblError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def _simulate_gain_rows(cfg: SystemConfig, seed: int, frames: int) -> np.ndarray:
    topo_seed, fading_seed = np.random.SeedSequence(seed).spawn(2)
    topology = channel.init_topology(cfg, topo_seed)
    fading = channel.init_fading(cfg, fading_seed)
    rows = []
    for _ in range(frames):
        channel.step_small_scale(fading)
        gains, _ = channel.composite_gain(topology, fading, cfg)
        rows.append(gains)
    return np.stack(rows)


def _train_config_from_extras(extras: dict, seed: int) -> ddpm.TrainConfig:
    tc = ddpm.TrainConfig(seed=seed)
    mapping = {
        "train.batch_size": ("batch_size", int),
        "train.epochs": ("epochs", int),
        "train.learning_rate": ("learning_rate", float),
        "train.learning_rate_min": ("learning_rate_min", float),
        "train.ema_weight": ("ema_weight", float),
        "train.ema_warm_frac": ("ema_warm_frac", float),
        "train.grad_clip": ("grad_clip", float),
        "train.weight_decay": ("weight_decay", float),
        "ddpm.hidden": ("hidden", lambda s: tuple(int(x) for x in s.split(";"))),
        "ddpm.d_t": ("d_t", int),
    }
    for key, (attr, conv) in mapping.items():
        if key in extras:
            try:
                setattr(tc, attr, conv(extras[key]))
            except ValueError as exc:
                raise ConfigError(f"config key '{key}': {exc}") from exc
    return tc.validate()


def _schedule_from_extras(extras: dict) -> ddpm.NoiseSchedule:
    steps = int(extras.get("ddpm.steps", 500))
    beta_1 = float(extras.get("ddpm.beta_1", 1e-4))
    beta_t = float(extras.get("ddpm.beta_t", 0.02))
    return ddpm.make_schedule(steps, beta_1, beta_t)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_dataset(args, cfg: SystemConfig, extras: dict) -> list[str]:
    records, meta = dataset.generate_dataset(cfg, args.seed, args.frames)
    dataset.write_dataset(records, meta, args.out)
    if meta.skipped_frames:
        _log.warning("skipped %d infeasible frames", len(meta.skipped_frames))
    print(f"wrote {len(records)} records ({len(meta.skipped_frames)} skipped) "
          f"to {args.out}")
    return [args.out]


def _write_allocation_csv(alloc: solver.Allocation, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node_id,m,k,h_s,p,tx_power_w,avg_power_w\n")
        for i in range(alloc.m.size):
            cells = [str(i), str(int(alloc.m[i])), str(int(alloc.k[i])),
                     repr(float(alloc.h_s[i])), repr(float(alloc.p[i])),
                     repr(float(alloc.tx_power_w[i])),
                     repr(float(alloc.avg_power_w[i]))]
            fh.write(",".join(cells) + "\n")


def _cmd_solve(args, cfg: SystemConfig, extras: dict) -> list[str]:
    if args.gains and args.gains != "simulate":
        rows = _read_gain_rows(args.gains)
        if args.row >= rows.shape[0]:
            raise FblError(f"--row {args.row} out of range ({rows.shape[0]} rows)")
        gains = rows[args.row]
        cfg = with_nodes(cfg, gains.size)
    else:
        gains = _simulate_gain_rows(cfg, args.seed, 1)[0]
    alloc = solver.solve_network(gains, cfg)
    _write_allocation_csv(alloc, args.out)
    summary = {
        "total_avg_power_w": alloc.total_avg_power_w,
        "schedule_usage": alloc.schedule_usage,
        "feasible": alloc.report.feasible,
        "constraint_flags": alloc.report.flags(),
    }
    summary_path = args.out + ".summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"total {alloc.total_avg_power_w * 1e3:.4f} mW over {alloc.m.size} nodes, "
          f"usage {alloc.schedule_usage:.4f}")
    return [args.out, summary_path]


def _cmd_train(args, cfg: SystemConfig, extras: dict) -> list[str]:
    records, meta = dataset.read_dataset(args.dataset)
    tcfg = _train_config_from_extras(extras, args.seed)
    sched = _schedule_from_extras(extras)
    x0 = np.stack([dataset.encode_blocklength(r.m_opt, meta) for r in records])
    cond = np.stack([dataset.normalize_condition(r.gains, meta) for r in records])
    params, ema, losses = ddpm.train(x0, cond, sched, tcfg)
    ckpt = ddpm.ModelCheckpoint(params=params, ema_params=ema, schedule=sched,
                                n=meta.n, cond_mean_db=meta.cond_mean_db,
                                cond_std_db=meta.cond_std_db,
                                m_lo=meta.m_lo, m_hi=meta.m_hi)
    ddpm.save_checkpoint(ckpt, args.out)
    loss_path = args.out + ".loss.csv"
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for i, loss in enumerate(losses, start=1):
            fh.write(f"{i},{loss!r}\n")
    print(f"trained {tcfg.epochs} epochs on {len(records)} records; "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return [args.out, loss_path]


def _cmd_infer(args, cfg: SystemConfig, extras: dict) -> list[str]:
    ckpt = ddpm.load_checkpoint(args.ckpt)
    if ckpt.n != cfg.node_count:
        raise CheckpointError(
            f"checkpoint built for {ckpt.n} nodes but config requests "
            f"{cfg.node_count}; refusing to pad or truncate")
    if args.gains and args.gains != "simulate":
        rows = _read_gain_rows(args.gains)
        if rows.shape[1] != ckpt.n:
            raise CheckpointError(
                f"gain rows have {rows.shape[1]} nodes, checkpoint has {ckpt.n}")
    else:
        rows = _simulate_gain_rows(cfg, args.seed, args.frames)
    policy = evaluate.DdpmPolicy(cfg, ckpt, deterministic=args.deterministic)
    rng = np.random.default_rng(args.seed)
    m_rows = policy.decide_batch(rows, rng)

    def _write_rows(path: str, data: np.ndarray) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("frame," + ",".join(f"m_{i + 1}" for i in range(ckpt.n)) + "\n")
            for frame, m in enumerate(data):
                fh.write(str(frame) + "," + ",".join(str(int(v)) for v in m) + "\n")

    _write_rows(args.out, m_rows)
    outputs = [args.out]
    if args.project_feasible:
        projected = m_rows.copy()
        c1_rows = cfg.noise_power_w / rows
        for i in range(projected.shape[0]):
            for j in range(projected.shape[1]):
                try:
                    lo, hi = fbl_core.feasible_m_range(float(c1_rows[i, j]), cfg)
                except FblError:
                    continue  # nothing to project onto; keep the raw value
                projected[i, j] = min(max(projected[i, j], lo), hi)
        proj_path = args.out + ".projected.csv"
        _write_rows(proj_path, projected)
        outputs.append(proj_path)
    print(f"inferred blocklengths for {m_rows.shape[0]} frames -> {args.out}")
    return outputs


def _cmd_eval(args, cfg: SystemConfig, extras: dict) -> list[str]:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise FblError("no policies requested")
    n_values = [int(v) for v in args.n.split(",")]
    seeds = list(range(args.seed, args.seed + args.seeds))
    ckpt = ddpm.load_checkpoint(args.ckpt) if args.ckpt else None
    if "ddpm" in policies and ckpt is None:
        raise CheckpointError("policy 'ddpm' requires --ckpt")

    os.makedirs(args.out, exist_ok=True)
    results: list[evaluate.PolicyResult] = []
    skipped: list[dict] = []
    for n in n_values:
        cfg_n = with_nodes(cfg, n)
        for name in policies:
            if name == "solver":
                policy = evaluate.SolverPolicy(cfg_n)
            elif name == "random":
                policy = evaluate.RandomPolicy(cfg_n)
            elif name == "ddpm":
                if ckpt.n != n:
                    skipped.append({"policy": "ddpm", "n": n,
                                    "reason": f"checkpoint is for n={ckpt.n}"})
                    continue
                policy = evaluate.DdpmPolicy(cfg_n, ckpt,
                                             deterministic=args.deterministic)
            else:
                raise FblError(f"unknown policy '{name}'")
            results.append(evaluate.evaluate_policy(policy, cfg_n, seeds,
                                                    args.episodes))

    qq = None
    true_res = next((r for r in results if r.policy == "solver"
                     and (ckpt is None or r.n == ckpt.n)), None)
    gen_res = next((r for r in results if r.policy == "ddpm"), None)
    if true_res is not None and gen_res is not None:
        mask = np.isfinite(true_res.powers_w)
        true_m = true_res.m_rows[mask].ravel()
        gen_m = gen_res.m_rows[mask].ravel()
        if true_m.size >= 2 and true_m.std() > 0 and gen_m.std() > 0:
            za, zb, slope = evaluate.qq_pair(true_m, gen_m)
            qq = (za, zb)
            _log.info("qq slope generated-vs-true: %.4f", slope)

    timing = None
    if args.timing_reps > 0:
        timing = {}
        for name in policies:
            factory = _timing_factory(name, ckpt, args.deterministic)
            timing[name] = evaluate.timing_benchmark(factory, n_values, cfg,
                                                     repetitions=args.timing_reps,
                                                     seed=args.seed)

    written = evaluate.report(results, args.out, qq=qq, timing=timing)
    raw_path = os.path.join(args.out, "results_raw.json")
    _dump_raw_results(results, skipped, raw_path)
    written.append(raw_path)
    for r in results:
        print(f"{r.policy} n={r.n}: mean power "
              f"{r.mean_power_w * 1e3:.4f} mW, violation rate {r.violation_rate:.4f}")
    return written


def _timing_factory(name: str, ckpt, deterministic: bool):
    def factory(cfg_n: SystemConfig):
        if name == "solver":
            return evaluate.SolverPolicy(cfg_n)
        if name == "random":
            return evaluate.RandomPolicy(cfg_n)
        if name == "ddpm":
            if ckpt is not None and ckpt.n == cfg_n.node_count:
                return evaluate.DdpmPolicy(cfg_n, ckpt, deterministic=deterministic)
            # latency depends on the architecture, not the weights: rebuild
            # the same network shape at this size with fresh parameters
            ref = ckpt.params if ckpt is not None else None
            hidden = ref.hidden if ref is not None else (256, 256, 256)
            d_t = ref.d_t if ref is not None else 32
            n = cfg_n.node_count
            params = ddpm.init_params(n, hidden, d_t, seed=0)
            sched = (ckpt.schedule if ckpt is not None
                     else ddpm.make_schedule(500))
            fresh = ddpm.ModelCheckpoint(
                params=params, ema_params=params, schedule=sched, n=n,
                cond_mean_db=np.zeros(n), cond_std_db=np.ones(n),
                m_lo=1, m_hi=100)
            return evaluate.DdpmPolicy(cfg_n, fresh, deterministic=deterministic)
        raise FblError(f"unknown policy '{name}'")
    return factory


def _dump_raw_results(results, skipped, path: str) -> None:
    doc = {"skipped": skipped, "results": []}
    for r in results:
        doc["results"].append({
            "policy": r.policy, "n": r.n, "seeds": r.seeds,
            "episodes_per_seed": r.episodes_per_seed,
            "powers_w": [None if not np.isfinite(v) else float(v) for v in r.powers_w],
            "violated": [bool(v) for v in r.violated],
            "constraint_violations": r.constraint_violations,
            "infeasible_episodes": r.infeasible_episodes,
            "decision_times_s": [float(v) for v in r.decision_times_s],
            "m_rows": [[int(v) for v in row] for row in r.m_rows],
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _cmd_report(args, cfg: SystemConfig, extras: dict) -> list[str]:
    with open(args.raw, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    results = []
    for entry in doc["results"]:
        powers = np.array([np.nan if v is None else v for v in entry["powers_w"]])
        m_rows = np.asarray(entry["m_rows"], dtype=np.int64)
        results.append(evaluate.PolicyResult(
            policy=entry["policy"], n=entry["n"], seeds=entry["seeds"],
            episodes_per_seed=entry["episodes_per_seed"], powers_w=powers,
            violated=np.asarray(entry["violated"], dtype=bool),
            constraint_violations=entry["constraint_violations"],
            infeasible_episodes=entry["infeasible_episodes"],
            decision_times_s=np.asarray(entry["decision_times_s"]),
            m_rows=m_rows if m_rows.size else np.empty((0, entry["n"]), dtype=np.int64),
        ))
    if not results:
        raise FblError(f"{args.raw}: no results to report")
    written = evaluate.report(results, args.out)
    print(f"re-emitted {len(written)} report files to {args.out}")
    return written


# ---------------------------------------------------------------------------
# wiring

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fblalloc",
        description="Power-minimal blocklength allocation pipeline")
    parser.add_argument("--version", action="store_true",
                        help="print artifact and file-format versions")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand")

    def common(p, seed_default=0):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--threads", type=int, default=0,
                       help="cap numba threads (0 = library default)")

    p = sub.add_parser("gen-dataset", help="simulate frames and solve each one")
    common(p)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("solve", help="allocate blocklengths for one gain vector")
    common(p)
    p.add_argument("--gains", default="simulate",
                   help="CSV with g_* columns, or 'simulate' (default)")
    p.add_argument("--row", type=int, default=0, help="row of --gains to solve")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fit the conditional denoiser on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="generate blocklengths from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--gains", default="simulate",
                   help="CSV with g_* columns, or 'simulate' (default)")
    p.add_argument("--frames", type=int, default=1,
                   help="frames to simulate when no --gains given")
    p.add_argument("--deterministic", action="store_true",
                   help="suppress per-step sampling noise")
    p.add_argument("--project-feasible", action="store_true",
                   help="also write blocklengths clamped to per-link feasible ranges")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score policies on shared trajectories")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--policies", default="solver,random")
    p.add_argument("--seeds", type=int, default=1, help="number of deployments")
    p.add_argument("--episodes", type=int, default=100, help="frames per deployment")
    p.add_argument("--n", default=None, help="comma list of network sizes")
    p.add_argument("--timing-reps", type=int, default=0,
                   help="decision-latency repetitions per size (0 = skip)")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="re-emit CSVs from saved raw results")
    common(p)
    p.add_argument("--raw", required=True, help="results_raw.json from eval")
    p.add_argument("--out", required=True)

    return parser


_COMMANDS = {
    "gen-dataset": _cmd_gen_dataset,
    "solve": _cmd_solve,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False)
                        else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.version:
        print(f"fblalloc {__version__} (dataset format {dataset.FORMAT_VERSION}, "
              f"checkpoint format {ddpm.CHECKPOINT_VERSION}, "
              f"kernels: {kernels.BACKEND})")
        return 0
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 2

    started = time.time()
    t0 = time.perf_counter()
    try:
        if getattr(args, "threads", 0) and kernels.BACKEND == "numba":
            import numba

            numba.set_num_threads(args.threads)
        cfg, extras = validate_config(args.config)
        if args.subcommand == "eval" and args.n is None:
            args.n = str(cfg.node_count)
        outputs = _COMMANDS[args.subcommand](args, cfg, extras)
    except FblError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    manifest = RunManifest(
        subcommand=args.subcommand, argv=list(argv), config=cfg.as_dict(),
        extras=extras, seeds=[args.seed],
        inputs=[p for p in (getattr(args, "dataset", None),
                            getattr(args, "gains", None),
                            getattr(args, "ckpt", None),
                            getattr(args, "raw", None),
                            args.config) if p],
        outputs=outputs, started_unix=started,
        wall_clock_s=time.perf_counter() - t0)
    anchor = getattr(args, "out", None)
    if anchor:
        _write_manifest(manifest, anchor)
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
