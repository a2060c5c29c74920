"""Command-line entry points: seedling-learner, seedling-actor, seedling-bench."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config


def _log_setup(level: str):
    logging.basicConfig(level=getattr(logging, level.upper()),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _emit(records: list[dict], out=None):
    """JSON lines on stdout (and optionally a file)."""
    lines = [json.dumps(r, default=float) for r in records]
    for line in lines:
        print(line)
    if out:
        with open(out, "a") as fh:
            fh.write("\n".join(lines) + "\n")


def _table(rows: list[dict], columns: list[str]) -> str:
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    out = [fmt.format(*columns), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*row) for row in cells]
    return "\n".join(out)


# -- learner --------------------------------------------------------------------------


def learner_main(argv=None):
    p = argparse.ArgumentParser(prog="seedling-learner",
                                description="Run the central learner/inference service.")
    p.add_argument("--algo", choices=["vtrace", "r2d2"])
    p.add_argument("--env", choices=["catch", "chain", "grid"])
    p.add_argument("--listen", help="HOST:PORT (port 0 picks a free port)")
    p.add_argument("--unroll", type=int, dest="unroll_length")
    p.add_argument("--batch", type=int, dest="training_batch_size")
    p.add_argument("--inference-batch", type=int, dest="inference_batch_size")
    p.add_argument("--frames", type=int, dest="total_frames", help="frame budget, 0 = forever")
    p.add_argument("--config", help="key=value file with any RunConfig field")
    p.add_argument("--checkpoint", dest="checkpoint_path")
    p.add_argument("--metrics", dest="metrics_path", help="JSON-lines metrics file")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-epsilon", type=float,
                   help="serve every environment with this fixed epsilon (r2d2)")
    p.add_argument("--bench-mode", action="store_true", default=None,
                   help="inference only: no trajectories, no training")
    p.add_argument("--snapshot-retention", action="store_true", default=None)
    p.add_argument("--resume", help="start from this checkpoint")
    p.add_argument("--log-level", default="info")
    args = p.parse_args(argv)
    _log_setup(args.log_level)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("config", "resume", "log_level", "eval_epsilon") and v is not None}
    if args.eval_epsilon is not None:
        overrides.update(eval_epsilon=args.eval_epsilon, eval_epsilon_only=True)
    try:
        cfg = load_config(args.config, **overrides) if args.config else RunConfig(**overrides)
    except (ConfigError, TypeError, ValueError) as exc:
        p.error(str(exc))
    from .learner import Learner

    learner = Learner.from_checkpoint(cfg, args.resume) if args.resume else Learner(cfg)
    host, port = learner.start()
    print(json.dumps({"event": "listening", "host": host, "port": port}), flush=True)
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: learner.stop())
    try:
        while not learner.stop_event.wait(0.5):
            pass
    finally:
        learner.shutdown()
    rec = learner.metrics_record()
    rec["event"] = "finished"
    print(json.dumps(rec), flush=True)
    return 0


# -- actor -------------------------------------------------------------------------------


def actor_main(argv=None):
    p = argparse.ArgumentParser(prog="seedling-actor",
                                description="Step environments for a remote learner.")
    p.add_argument("--learner", required=True, help="HOST:PORT")
    p.add_argument("--id", type=int, default=0, dest="actor_id")
    p.add_argument("--num-envs", type=int, default=1)
    p.add_argument("--env", default="catch", choices=["catch", "chain", "grid"])
    p.add_argument("--frames", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-level", default="warning")
    args = p.parse_args(argv)
    _log_setup(args.log_level)
    from .actor import Actor
    from .envs import EnvSpec

    host, _, port = args.learner.rpartition(":")
    actor = Actor((host or "127.0.0.1", int(port)), args.actor_id, args.num_envs,
                  EnvSpec(kind=args.env), seed=args.seed, frames=args.frames)
    signal.signal(signal.SIGTERM, lambda *_: actor.stop())
    stats = actor.run()
    print(json.dumps({"event": "actor_exit", "id": args.actor_id, "steps": stats.steps,
                      "episodes": stats.episodes, "reconnects": stats.reconnects,
                      "reason": stats.exit_reason}), flush=True)
    return 0


# -- bench -------------------------------------------------------------------------------


_LAT_COLUMNS = ["mode", "fps", "p50_ms", "p95_ms", "p99_ms", "mean_batch", "fwd_us_frame"]


def _report_row(mode, rep) -> dict:
    return {"mode": mode, "fps": f"{rep.fps:,.0f}", "p50_ms": f"{rep.p50_ms:.3f}",
            "p95_ms": f"{rep.p95_ms:.3f}", "p99_ms": f"{rep.p99_ms:.3f}",
            "mean_batch": f"{rep.mean_batch_size:.1f}",
            "fwd_us_frame": f"{rep.forward_per_frame_us:.1f}"}


def _bench_run_args(p):
    p.add_argument("--actors", type=int, default=4)
    p.add_argument("--envs-per-actor", type=int, default=16)
    p.add_argument("--duration", type=float, default=20.0, help="seconds, including warmup")
    p.add_argument("--warmup", type=float, default=10.0)
    p.add_argument("--inference-batch", type=int, default=32)
    p.add_argument("--batch-timeout-ms", type=float, default=1.0)
    p.add_argument("--inference-workers", type=int, default=2)
    p.add_argument("--lstm-units", type=int, default=64)
    p.add_argument("--mlp-hidden", default="64", help="comma-separated sizes")
    p.add_argument("--env", default="catch", choices=["catch", "chain", "grid"])
    p.add_argument("--algo", default="vtrace", choices=["vtrace", "r2d2"])


def _bench_cfg(args) -> RunConfig:
    return RunConfig(algo=args.algo, env=args.env, lstm_units=args.lstm_units,
                     mlp_hidden_sizes=args.mlp_hidden,
                     inference_batch_size=args.inference_batch,
                     batch_timeout_ms=args.batch_timeout_ms,
                     inference_workers=args.inference_workers)


def bench_main(argv=None):
    p = argparse.ArgumentParser(
        prog="seedling-bench",
        description="Throughput, latency and cost reports.  Structured records go to "
                    "stdout as JSON lines; the readable table goes to stderr.")
    p.add_argument("--records", help="also append JSON lines to this file")
    p.add_argument("--plot-dir", help="write figures here")
    p.add_argument("--log-level", default="warning")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("throughput", help="fps and latency for one inference mode")
    _bench_run_args(t)
    t.add_argument("--mode", choices=["central", "local"], default="central")

    lat = sub.add_parser("latency", help="batched versus per-request inference")
    _bench_run_args(lat)

    c = sub.add_parser("cost", help="cost per billion frames")
    c.add_argument("--fps", type=float)
    c.add_argument("--cpus", type=float, default=0.0)
    c.add_argument("--accel", action="append", default=[], metavar="KIND:COUNT",
                   help="p100:N or tpu:N, repeatable")
    c.add_argument("--pricing", help="JSON or key=value file overriding hourly prices")

    args = p.parse_args(argv)
    _log_setup(args.log_level)
    from . import bench

    plot_dir = Path(args.plot_dir) if args.plot_dir else None
    if args.command == "cost":
        try:
            pricing = bench.ResourcePricing.load(args.pricing) if args.pricing else None
            accels = [bench.parse_accelerator(a) for a in args.accel]
        except (OSError, ValueError) as exc:
            p.error(str(exc))
        if args.fps is not None:
            try:
                cost = bench.cost_per_billion(args.fps, args.cpus, accels, pricing)
            except ValueError as exc:
                p.error(str(exc))
            rec = {"fps": args.fps, "cpus": args.cpus, "accelerators": accels,
                   "hours": 1e9 / args.fps / 3600, "cost": cost}
            _emit([rec], args.records)
            print(_table([{k: (f"{v:.2f}" if isinstance(v, float) else v)
                           for k, v in rec.items()}], list(rec)), file=sys.stderr)
            return 0
        rows = bench.cost_table(pricing=pricing)
        _emit(rows, args.records)
        print(_table(rows, ["table", "system", "size", "fps", "cpus", "cost", "reported",
                            "max_rel_error", "ok"]), file=sys.stderr)
        if plot_dir:
            from .plotting import plot_cost_table

            plot_cost_table(rows, plot_dir / "cost.png")
        return 0 if all(r["ok"] for r in rows) else 1

    if args.duration <= args.warmup:
        p.error("--duration must exceed --warmup")
    cfg = _bench_cfg(args)
    kw = dict(actors=args.actors, envs_per_actor=args.envs_per_actor,
              duration=args.duration, warmup=args.warmup, cfg=cfg)
    if args.command == "throughput":
        rep = bench.run_throughput_bench(mode=args.mode, **kw)
        _emit([dict(rep.to_record(), mode=args.mode)], args.records)
        print(_table([_report_row(args.mode, rep)], _LAT_COLUMNS), file=sys.stderr)
        print("stages (median ms): " + ", ".join(f"{k} {v:.3f}"
                                                 for k, v in rep.stages_ms.items()),
              file=sys.stderr)
        if plot_dir:
            from .plotting import plot_latency_report

            plot_latency_report(rep, plot_dir / f"latency_{args.mode}.png")
        return 0

    central = bench.run_throughput_bench(mode="central", **kw)
    local = bench.run_throughput_bench(mode="local", **kw)
    cmp = bench.compare_inference_modes(central, local)
    _emit([dict(central.to_record(), mode="central"), dict(local.to_record(), mode="local"),
           dict(cmp, kind="comparison")], args.records)
    print(_table([_report_row("central", central), _report_row("local", local)],
                 _LAT_COLUMNS), file=sys.stderr)
    print(f"fps ratio {cmp['fps_ratio']:.2f}, forward per-frame ratio "
          f"{cmp['forward_ratio']:.3f}", file=sys.stderr)
    if plot_dir:
        from .plotting import plot_latency_report, plot_mode_comparison

        plot_latency_report(central, plot_dir / "latency_central.png")
        plot_latency_report(local, plot_dir / "latency_local.png")
        plot_mode_comparison(central, local, plot_dir / "modes.png")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(bench_main())
