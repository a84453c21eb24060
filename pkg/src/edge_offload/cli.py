"""Command-line entry point: ``edge-offload {generate,train,eval,bench}``.

All commands share one output directory. ``generate`` writes the population,
metric map and per-seed training sequences; ``train`` writes one checkpoint
and loss curve per seed; ``eval`` writes the summary table, a key=value
summary and per-policy decision traces. Failures print a single line
``error kind=<Kind> message=<json string>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod, dqn, experiment as ex, metric_map as mm, sim_eval as se
from . import trace_gen as tg

log = logging.getLogger("edge_offload")

EXIT_CODES = {"ConfigError": 2, "MissingArtifact": 3, "OSError": 3, "DivergenceError": 4}


class MissingArtifact(FileNotFoundError):
    pass


# -- file layout ---------------------------------------------------------------

def population_path(out: Path) -> Path:
    return out / "population.csv"


def map_path(out: Path) -> Path:
    return out / "metric_map.csv"


def checkpoint_path(out: Path, seed: int) -> Path:
    return out / f"dqn_{seed}.ckpt"


def loss_path(out: Path, seed: int) -> Path:
    return out / f"loss_{seed}.csv"


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run the earlier pipeline step first")
    return path


# -- config handling -----------------------------------------------------------

def resolve_config(args) -> tuple[cfgmod.ScenarioConfig, dict]:
    if args.config:
        cfg, sweeps = cfgmod.load(args.config)
    else:
        cfg, sweeps = cfgmod.ScenarioConfig(), {}
    overrides = dict(cfgmod.PRESETS[args.scale]) if args.scale else {}
    if args.seed_override is not None:
        overrides["experiment.seeds"] = [args.seed_override]
    sweeps = {k: v for k, v in sweeps.items() if k not in overrides}
    return cfg.with_overrides(overrides).validate(), sweeps


def _single(args) -> cfgmod.ScenarioConfig:
    cfg, sweeps = resolve_config(args)
    if sweeps:
        raise cfgmod.ConfigError(f"{args.command} takes a single scenario; sweep keys {sorted(sweeps)}")
    return cfg


def _load_artifacts(cfg: cfgmod.ScenarioConfig, out: Path) -> ex.Artifacts:
    pop = tg.load_population(_require(population_path(out)))
    art = ex.prepare(cfg, population=pop)
    art.trace_dir = out
    return art


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg: cfgmod.ScenarioConfig, out: Path) -> dict:
    """Write population, metric map and one training sequence per seed; return statistics."""
    out.mkdir(parents=True, exist_ok=True)
    art = ex.prepare(cfg)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    tg.save_population(art.population, population_path(out))
    mm.save(art.mapping, map_path(out))
    stats = {"population": len(art.population),
             **{f"frac_{k}": v for k, v in art.population.fractions().items()},
             "population_mean_reward": float(art.population.reward.mean()),
             "kernel_lambda": art.mapping.lam}
    for s in cfg.experiment.seeds:
        trace = art.train_trace(s)
        tg.save_trace(trace, ex.train_trace_path(out, s))
        r = trace.reward.astype(float)
        stats[f"seed[{s}].length"] = len(trace)
        stats[f"seed[{s}].mean_gap"] = float(trace.gap.mean())
        stats[f"seed[{s}].mean_metric"] = float(trace.metric.mean())
        stats[f"seed[{s}].mean_reward"] = float(r.mean())
        stats[f"seed[{s}].mean_reward_se"] = float(r.std(ddof=1) / np.sqrt(r.size)) if r.size > 1 else 0.0
    return stats


def cmd_train(cfg: cfgmod.ScenarioConfig, out: Path, trace_path: Path | None = None) -> list[Path]:
    """Train one network per configured seed; returns the checkpoint paths."""
    params = cfg.bucket_params()
    written = []
    for s in cfg.experiment.seeds:
        trace = tg.load_trace(_require(trace_path or ex.train_trace_path(out, s)))
        tcfg = cfg.trainer_config(s)

        def progress(k, loss, s=s):
            log.info("seed %s sync %d/%d loss %.6g", s, k + 1, tcfg.sync_count, loss)

        net, losses = dqn.train(trace, params, tcfg, progress=progress)
        dqn.save_checkpoint(net, checkpoint_path(out, s))
        with loss_path(out, s).open("w") as fh:
            fh.write("sync,loss\n")
            for k, v in enumerate(losses):
                fh.write(f"{k},{v:.17g}\n")
        written.append(checkpoint_path(out, s))
    return written


def _networks(checkpoint, seeds):
    if checkpoint is None:
        return None
    path = Path(checkpoint)
    if path.is_dir():
        return {s: dqn.load_checkpoint(_require(checkpoint_path(path, s))) for s in seeds}
    return dqn.load_checkpoint(_require(path))


def cmd_eval(cfg: cfgmod.ScenarioConfig, out: Path, checkpoint=None, trace_rows: int | None = 10_000,
             sweeps: dict | None = None, train_dqn: bool = False) -> list[tuple[dict, se.Summary]]:
    """Compare the benchmark policies (plus DQN when available) on fresh test sequences.

    ``checkpoint`` is one checkpoint file shared by every seed or a directory
    of per-seed checkpoints. With ``train_dqn`` each scenario trains its own
    per-seed networks in process, which is what sweeps use.
    """
    points = cfgmod.expand(cfg, sweeps) if sweeps else [({}, cfg)]
    if checkpoint is not None and len(points) > 1:
        raise cfgmod.ConfigError("a checkpoint cannot be shared across sweep points; use --train-dqn")
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, (point, pcfg) in enumerate(points):
        seeds = pcfg.experiment.seeds
        if sweeps:
            art = ex.prepare(pcfg)
        else:
            art = _load_artifacts(pcfg, out)
        nets = _networks(checkpoint, seeds)
        if train_dqn:
            nets = {s: ex.train_dqn(art, s)[0] for s in seeds}
        summary = ex.evaluate(art, seeds, nets, workers=pcfg.experiment.workers)
        results.append((point, summary))
        target = out / f"point_{i:03d}" if sweeps else out
        target.mkdir(parents=True, exist_ok=True)
        (target / "summary.csv").write_text(summary.table())
        (target / "summary.txt").write_text(
            "".join(f"point.{k}={v!r}\n" for k, v in point.items()) + summary.key_values())
        traces = target / "traces"
        traces.mkdir(exist_ok=True)
        for name, per_seed in summary.results.items():
            for s, res in zip(seeds, per_seed):
                se.emit_trace(res, traces / f"{name}_{s}.csv", trace_rows)
    if sweeps:
        _write_sweep_table(out / "sweep.csv", sorted(sweeps), results)
    return results


def _write_sweep_table(path: Path, keys: list, results) -> None:
    with path.open("w") as fh:
        fh.write(",".join(keys + ["policy", "mean_loss", "std_loss", "seeds"]) + "\n")
        for point, summary in results:
            for r in summary.rows():
                vals = [repr(point[k]) for k in keys]
                fh.write(",".join(vals + [r["policy"], f"{r['mean_loss']:.17g}",
                                          f"{r['std_loss']:.17g}", str(r["seeds"])]) + "\n")


def latency(net: dqn.QNetwork, iterations: int, seed: int = 0) -> tuple[float, float]:
    """Mean and standard deviation, in milliseconds, of one forward pass."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    rng = np.random.default_rng(seed)
    window = dqn.HistoryWindow(rng.integers(1, 4, net.T - 1), rng.uniform(0, 1, net.T - 1))
    dqn.forward(net, window)  # warm caches
    times = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        dqn.forward(net, window)
        times[i] = time.perf_counter() - t0
    times *= 1e3
    return float(times.mean()), float(times.std(ddof=1)) if iterations > 1 else 0.0


def cmd_bench(checkpoint, iterations: int) -> dict:
    net = dqn.load_checkpoint(_require(Path(checkpoint)))
    mean, std = latency(net, iterations)
    return {"iterations": iterations, "mean_ms": mean, "std_ms": std,
            "layers": "x".join(str(w) for w in net.sizes)}


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario config file (INI)")
    common.add_argument("--out", default="runs/default", help="artifact directory")
    common.add_argument("--seed-override", type=int, help="run only this seed")
    scale = common.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="scale", action="store_const", const="desk",
                       help="desk-sized traces and training schedule")
    scale.add_argument("--paper-scale", dest="scale", action="store_const", const="paper",
                       help="full-sized traces and training schedule")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="edge-offload", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write population, metric map and training traces")
    p = sub.add_parser("train", parents=[common], help="train per-seed DQN checkpoints")
    p.add_argument("--trace", help="training trace (default: the generated one for each seed)")
    p = sub.add_parser("eval", parents=[common], help="compare policies on fresh test traces")
    p.add_argument("--checkpoint", help="checkpoint file, or directory of per-seed checkpoints")
    p.add_argument("--train-dqn", action="store_true", help="train DQNs in process (for sweeps)")
    p.add_argument("--trace-rows", type=int, default=10_000, help="rows per decision trace, 0 for all")
    p = sub.add_parser("bench", parents=[common], help="single-forward latency of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iterations", type=int, default=10_000)
    return ap


def _print_kv(d: dict) -> None:
    for k, v in d.items():
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    out = Path(args.out)
    try:
        if args.command == "generate":
            _print_kv(cmd_generate(_single(args), out))
        elif args.command == "train":
            for path in cmd_train(_single(args), out, Path(args.trace) if args.trace else None):
                print(f"checkpoint={path}")
        elif args.command == "eval":
            cfg, sweeps = resolve_config(args)
            rows = args.trace_rows or None
            for point, summary in cmd_eval(cfg, out, args.checkpoint, rows, sweeps, args.train_dqn):
                if point:
                    print("# " + " ".join(f"{k}={v!r}" for k, v in point.items()))
                sys.stdout.write(summary.table())
        elif args.command == "bench":
            _print_kv(cmd_bench(args.checkpoint, args.iterations))
    except (cfgmod.ConfigError, MissingArtifact, dqn.DivergenceError, OSError, ValueError) as e:
        kind = type(e).__name__
        print(f"error kind={kind} message={json.dumps(str(e))}", file=sys.stderr)
        return EXIT_CODES.get(kind, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
