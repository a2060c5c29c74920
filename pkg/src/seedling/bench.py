"""Throughput and latency harness plus the cloud cost model."""

from __future__ import annotations

import dataclasses
import json
import logging
import multiprocessing as mp
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .nn import ConfigurationError, Network

log = logging.getLogger(__name__)


# -- cost model -----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ResourcePricing:
    """Hourly cloud prices in USD (Sep. 2019 list prices)."""

    cpu_core_per_hour: float = 0.0475
    p100_per_hour: float = 1.46
    tpu_core_per_hour: float = 1.00

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def accelerator_price(self, kind: str) -> float:
        kind = kind.lower()
        if kind in ("p100", "gpu"):
            return self.p100_per_hour
        if kind in ("tpu", "tpu_core", "tpuv3"):
            return self.tpu_core_per_hour
        raise ValueError(f"unknown accelerator kind {kind!r}")

    @classmethod
    def load(cls, path) -> "ResourcePricing":
        """Read overrides from JSON or from ``key=value`` lines."""
        text = Path(path).read_text()
        try:
            values = json.loads(text)
        except json.JSONDecodeError:
            values = {}
            for line in text.splitlines():
                line = line.split("#", 1)[0].strip()
                if line:
                    k, _, v = line.partition("=")
                    values[k.strip()] = v.strip()
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown pricing keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


def cost_per_hour(cpu_cores: float, accelerators: Sequence[tuple[str, float]] = (),
                  pricing: Optional[ResourcePricing] = None) -> float:
    pricing = pricing or ResourcePricing()
    accel = sum(count * pricing.accelerator_price(kind) for kind, count in accelerators)
    return cpu_cores * pricing.cpu_core_per_hour + accel


def cost_per_billion(fps: float, cpu_cores: float,
                     accelerators: Sequence[tuple[str, float]] = (),
                     pricing: Optional[ResourcePricing] = None) -> float:
    """USD to process 1e9 environment frames at ``fps``."""
    if not fps > 0:
        raise ValueError("fps must be > 0")
    hours = 1e9 / fps / 3600.0
    return hours * cost_per_hour(cpu_cores, accelerators, pricing)


def parse_accelerator(text: str) -> tuple[str, float]:
    kind, _, count = text.partition(":")
    ResourcePricing().accelerator_price(kind)
    return kind.lower(), float(count or 1)


@dataclasses.dataclass(frozen=True)
class CostRow:
    table: str
    system: str
    size: str
    fps: float
    cpus: int
    accelerators: tuple
    reported: tuple  # published cost(s) per 1e9 frames
    tolerance: float

    def cost(self, pricing=None) -> float:
        return cost_per_billion(self.fps, self.cpus, self.accelerators, pricing)

    def errors(self, pricing=None) -> list[float]:
        c = self.cost(pricing)
        return [abs(c - r) / r for r in self.reported]

    def ok(self, pricing=None) -> bool:
        return all(e <= self.tolerance for e in self.errors(pricing))


_P100, _TPU2 = (("p100", 1),), (("tpu", 2),)

# fps / CPU / accelerator columns and the reported cost per billion frames.
# The SEED DeepMind Lab default row is published as $25 in the cost table and
# $28 in the cost split; both must fall inside the tolerance.
COST_ROWS = (
    CostRow("dmlab", "IMPALA", "default", 30_000, 176, _P100, (90,), 0.05),
    CostRow("dmlab", "IMPALA", "medium", 16_500, 130, _P100, (128,), 0.05),
    CostRow("dmlab", "IMPALA", "large", 7_300, 100, _P100, (236,), 0.05),
    CostRow("dmlab", "SEED", "default", 74_000, 104, _TPU2, (25, 28), 0.15),
    CostRow("dmlab", "SEED", "medium", 34_000, 48, _TPU2, (35,), 0.15),
    CostRow("dmlab", "SEED", "large", 16_000, 24, _TPU2, (54,), 0.15),
    CostRow("football", "IMPALA", "default", 11_000, 400, (("p100", 2),), (553,), 0.05),
    CostRow("football", "IMPALA", "medium", 7_000, 300, (("p100", 2),), (681,), 0.05),
    CostRow("football", "IMPALA", "large", 5_300, 300, (("p100", 2),), (899,), 0.05),
    CostRow("football", "SEED", "default", 17_500, 416, _TPU2, (345,), 0.15),
    CostRow("football", "SEED", "medium", 10_500, 248, _TPU2, (365,), 0.15),
    CostRow("football", "SEED", "large", 7_500, 168, _TPU2, (369,), 0.15),
    CostRow("dmlab-p100", "SEED", "default", 19_000, 44, _P100, (51,), 0.05),
)


def cost_table(rows=COST_ROWS, pricing=None) -> list[dict]:
    out = []
    for r in rows:
        c = r.cost(pricing)
        out.append({"table": r.table, "system": r.system, "size": r.size, "fps": r.fps,
                    "cpus": r.cpus, "accelerators": [list(a) for a in r.accelerators],
                    "cost": round(c, 2), "reported": list(r.reported),
                    "max_rel_error": round(max(r.errors(pricing)), 4), "ok": r.ok(pricing)})
    return out


# -- latency report -------------------------------------------------------------


@dataclasses.dataclass
class LatencyReport:
    p50_ms: float
    p95_ms: float
    p99_ms: float
    fps: float
    frames: int = 0
    seconds: float = 0.0
    batch_histogram: dict = dataclasses.field(default_factory=dict)
    stages_ms: dict = dataclasses.field(default_factory=dict)
    forward_per_frame_us: float = 0.0
    config: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        pct = (self.p50_ms, self.p95_ms, self.p99_ms)
        if not np.isnan(pct).any() and not pct[0] <= pct[1] <= pct[2]:
            raise ValueError("latency percentiles out of order")
        if self.fps < 0:
            raise ValueError("fps must be >= 0")

    @classmethod
    def from_samples(cls, latencies_s, frames: int, seconds: float, **kw) -> "LatencyReport":
        lat = np.asarray(latencies_s, np.float64) * 1e3
        if lat.size:
            p50, p95, p99 = np.percentile(lat, [50, 95, 99])
        else:
            p50 = p95 = p99 = float("nan")
        fps = frames / seconds if seconds > 0 else 0.0
        return cls(float(p50), float(p95), float(p99), fps, frames, seconds, **kw)

    @property
    def mean_batch_size(self) -> float:
        n = sum(self.batch_histogram.values())
        return sum(int(k) * v for k, v in self.batch_histogram.items()) / n if n else 0.0

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["mean_batch_size"] = self.mean_batch_size
        return rec


# -- forward microbenchmark ---------------------------------------------------------


def forward_time_per_frame(cfg: RunConfig, batch_size: int, reps: int = 200,
                           seed: int = 0) -> float:
    """Seconds of network forward per frame when evaluating ``batch_size`` frames at once."""
    spec = cfg.network_spec()
    net = Network(spec)
    params = net.init_params(seed)
    rng = np.random.default_rng(seed)
    obs = rng.random((batch_size, spec.input_dim), dtype=np.float32)
    state = net.initial_state(batch_size)
    prev_a = np.zeros(batch_size, np.int64)
    prev_r = np.zeros(batch_size, np.float32)
    reset = np.zeros(batch_size, bool)
    for _ in range(5):
        net.forward(params, obs, state, prev_a, prev_r, reset)
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(reps):
            net.forward(params, obs, state, prev_a, prev_r, reset)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best / batch_size


_SAME_KEYS = ("env", "env_width", "env_height", "env_length", "mlp_hidden_sizes",
              "lstm_units", "dueling_hidden_units", "algo", "actors", "envs_per_actor")


def compare_inference_modes(central: LatencyReport, local: LatencyReport) -> dict:
    """Centralized batched inference versus per-request forward on the same host."""
    for k in _SAME_KEYS:
        if central.config.get(k) != local.config.get(k):
            raise ConfigurationError(f"reports differ in {k}: "
                                     f"{central.config.get(k)!r} vs {local.config.get(k)!r}")
    fwd_ratio = (central.forward_per_frame_us / local.forward_per_frame_us
                 if local.forward_per_frame_us else float("nan"))
    return {
        "fps_central": central.fps,
        "fps_local": local.fps,
        "fps_ratio": central.fps / local.fps if local.fps else float("inf"),
        "forward_us_per_frame_central": central.forward_per_frame_us,
        "forward_us_per_frame_local": local.forward_per_frame_us,
        "forward_ratio": fwd_ratio,
        "mean_batch_central": central.mean_batch_size,
        "mean_batch_local": local.mean_batch_size,
        "p50_ms_central": central.p50_ms,
        "p50_ms_local": local.p50_ms,
    }


# -- end-to-end harness -------------------------------------------------------------


def _actor_main(address, actor_id, num_envs, env_spec, seed, out_queue):
    logging.basicConfig(level=logging.WARNING)
    from .actor import Actor

    actor = Actor(tuple(address), actor_id, num_envs, env_spec, seed=seed,
                  record_latency=True, max_reconnects=3)
    try:
        stats = actor.run()
    except Exception as exc:  # pragma: no cover - reported to the parent
        out_queue.put((actor_id, None, None, repr(exc)))
        return
    out_queue.put((actor_id, np.asarray(stats.latencies, np.float32),
                   np.asarray(stats.latency_times, np.float64), stats.exit_reason))


def run_throughput_bench(actors: int = 4, envs_per_actor: int = 16, duration: float = 20.0,
                         warmup: float = 10.0, cfg: Optional[RunConfig] = None,
                         mode: str = "central", **overrides) -> LatencyReport:
    """Serve real forwards to ``actors`` processes and measure after ``warmup``.

    ``duration`` includes the warmup.  ``mode="local"`` answers every request
    with its own unbatched forward (batch size 1, no batching deadline).
    """
    from .learner import Learner

    if duration <= warmup:
        raise ValueError("duration must exceed warmup")
    if mode not in ("central", "local"):
        raise ValueError("mode must be 'central' or 'local'")
    cfg = cfg or RunConfig()
    changes = dict(bench_mode=True, total_frames=0, metrics_path=None, checkpoint_path=None,
                   listen="127.0.0.1:0", **overrides)
    if mode == "local":
        changes.update(inference_batch_size=1, batch_timeout_ms=0.0)
    cfg = cfg.replace(**changes)
    learner = Learner(cfg)
    address = learner.start()
    ctx = mp.get_context("spawn")
    out = ctx.Queue()
    procs = [ctx.Process(target=_actor_main,
                         args=(address, a, envs_per_actor, cfg.env_spec(), cfg.seed + a, out),
                         daemon=True)
             for a in range(actors)]
    try:
        for p in procs:
            p.start()
        time.sleep(warmup)
        t0 = time.perf_counter()
        a0 = learner.counters.answered
        learner.batch_sizes.clear()
        for q in learner.timings.values():
            q.clear()
        time.sleep(duration - warmup)
        a1 = learner.counters.answered
        t1 = time.perf_counter()
        hist = dict(sorted(learner.batch_sizes.items()))
        stage = {k: float(np.median(v) * 1e3) if v else 0.0
                 for k, v in ((k, list(q)) for k, q in learner.timings.items())}
    finally:
        learner.shutdown()
    lat, results = [], []
    for _ in procs:
        try:
            results.append(out.get(timeout=30))
        except Exception:
            break
    for p in procs:
        p.join(timeout=10)
        if p.is_alive():
            p.terminate()
    for actor_id, lats, times, reason in results:
        if lats is None:
            raise RuntimeError(f"actor {actor_id} failed: {reason}")
        lat.append(lats[(times >= t0) & (times <= t1)])
    lat = np.concatenate(lat) if lat else np.zeros(0)
    n_batches = sum(hist.values())
    mean_batch = sum(k * v for k, v in hist.items()) / n_batches if n_batches else 1.0
    e2e = float(np.median(lat) * 1e3) if lat.size else 0.0
    stage["wire"] = max(0.0, e2e - stage["batch_wait"] - stage["forward"] - stage["respond"])
    fwd = forward_time_per_frame(cfg, max(1, int(round(mean_batch))))
    config = {k: getattr(cfg, k) for k in _SAME_KEYS if hasattr(cfg, k)}
    config.update(actors=actors, envs_per_actor=envs_per_actor, mode=mode,
                  inference_batch_size=cfg.inference_batch_size,
                  batch_timeout_ms=cfg.batch_timeout_ms)
    config["mlp_hidden_sizes"] = list(cfg.mlp_hidden_sizes)
    return LatencyReport.from_samples(
        lat, a1 - a0, t1 - t0, batch_histogram={int(k): v for k, v in hist.items()},
        stages_ms=stage, forward_per_frame_us=fwd * 1e6, config=config)
