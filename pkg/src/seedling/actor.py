"""Actors: step environments and ask the learner for every action.

An actor holds no model.  It keeps one request in flight per environment
and batches the follow-up requests for all actions that arrive together.
"""

from __future__ import annotations

import dataclasses
import logging
import socket
import time
from typing import Optional

import numpy as np

from . import wire
from .envs import EnvSpec, make_vector_env

log = logging.getLogger(__name__)

BACKOFF_START = 0.1
BACKOFF_CAP = 5.0


def backoff_delays(start: float = BACKOFF_START, cap: float = BACKOFF_CAP):
    """100 ms doubling up to the cap, forever."""
    k = 0
    while True:
        yield min(start * 2 ** k, cap)
        k += 1


def env_seeds(seed: int, actor_id: int, num_envs: int) -> list[int]:
    return [seed * 100_003 + actor_id * 1009 + i for i in range(num_envs)]


@dataclasses.dataclass
class ActorStats:
    steps: int = 0
    episodes: int = 0
    reconnects: int = 0
    returns: list = dataclasses.field(default_factory=list)
    latencies: list = dataclasses.field(default_factory=list)  # seconds, request -> action
    latency_times: list = dataclasses.field(default_factory=list)  # perf_counter at receipt
    exit_reason: str = ""


class Actor:
    def __init__(self, address, actor_id: int, num_envs: int, env_spec: EnvSpec,
                 seed: int = 0, frames: int = 0, record_latency: bool = False,
                 max_reconnects: Optional[int] = None):
        self.address = address
        self.actor_id = actor_id
        self.num_envs = num_envs
        self.env_spec = env_spec
        self.frames = frames
        self.record_latency = record_latency
        self.max_reconnects = max_reconnects
        self.envs = make_vector_env(env_spec, env_seeds(seed, actor_id, num_envs))
        self.stats = ActorStats()
        self._sent_at = np.zeros(num_envs)
        self._returns = np.zeros(num_envs)
        self._stop = False

    def stop(self):
        self._stop = True

    def _connect(self) -> socket.socket:
        delays = backoff_delays()
        attempts = 0
        while True:
            try:
                sock = socket.create_connection(self.address, timeout=5)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(1.0)
                return sock
            except OSError as exc:
                attempts += 1
                if self.max_reconnects is not None and attempts > self.max_reconnects:
                    raise ConnectionError(f"could not reach learner: {exc}") from exc
                if self._stop:
                    raise
                time.sleep(next(delays))

    def _initial_block(self) -> bytes:
        obs = self.envs.reset_all()
        self._returns[:] = 0
        ids = np.arange(self.num_envs)
        self._sent_at[:] = time.perf_counter()
        return wire.encode_steps(ids, np.zeros(self.num_envs), np.ones(self.num_envs), obs)

    def _step_block(self, block: wire.ActionBlock) -> tuple[bytes, int]:
        ids = block.env_ids
        n = len(ids)
        if self.frames:
            n = min(n, self.frames - self.stats.steps)
            ids = ids[:n]
        obs, rewards, dones = self.envs.step(ids, block.actions[:n])
        self._returns[ids] += rewards
        ended = dones > 0
        if ended.any():
            self.stats.returns.extend(self._returns[ids[ended]].tolist())
            self.stats.episodes += int(ended.sum())
            self._returns[ids[ended]] = 0
        self.stats.steps += n
        now = time.perf_counter()
        if self.record_latency:
            self._sent_at[ids] = now
        return (wire.encode_steps(ids, rewards, dones, obs) if n else b""), n

    def run(self) -> ActorStats:
        """Act until the frame budget is spent or the learner shuts down."""
        while not self._stop:
            try:
                sock = self._connect()
            except ConnectionError as exc:
                log.info("actor %d giving up: %s", self.actor_id, exc)
                self.stats.exit_reason = "learner unreachable"
                return self.stats
            try:
                reason = self._session(sock)
            except (ConnectionError, OSError) as exc:
                reason = None
                log.info("actor %d lost connection: %s", self.actor_id, exc)
            finally:
                sock.close()
            if reason is not None:
                self.stats.exit_reason = reason
                return self.stats
            self.stats.reconnects += 1
            if self.max_reconnects is not None and self.stats.reconnects > self.max_reconnects:
                self.stats.exit_reason = "connection lost"
                return self.stats
        self.stats.exit_reason = "stopped"
        return self.stats

    def _session(self, sock: socket.socket) -> Optional[str]:
        """One connection's lifetime.  Returns an exit reason, or None to reconnect."""
        sock.sendall(wire.encode(wire.Hello(self.actor_id, self.num_envs))
                     + self._initial_block())
        dec = wire.FrameDecoder(blocks=True)
        while not self._stop:
            if self.frames and self.stats.steps >= self.frames:
                return "frame budget reached"
            try:
                data = sock.recv(1 << 20)
            except socket.timeout:
                continue
            if not data:
                return None
            now = time.perf_counter()
            out = []
            for item in dec.feed(data):
                if isinstance(item, wire.ActionBlock):
                    if self.record_latency:
                        lat = now - self._sent_at[item.env_ids]
                        self.stats.latencies.extend(lat.tolist())
                        self.stats.latency_times.extend([now] * len(item))
                    payload, _ = self._step_block(item)
                    if payload:
                        out.append(payload)
                elif isinstance(item, wire.ErrorMessage):
                    if item.code == wire.ErrorCode.SHUTDOWN:
                        return "shutdown"
                    if item.code == wire.ErrorCode.NOT_READY:
                        time.sleep(0.1)
                        return None
                    raise RuntimeError(f"learner error {item.code}: {item.message}")
                else:
                    raise wire.ProtocolError(f"unexpected {type(item).__name__} from learner")
            if out:
                sock.sendall(b"".join(out))
        return "stopped"


def run_actor(address, actor_id: int, num_envs: int, env_spec: EnvSpec, seed: int = 0,
              frames: int = 0, record_latency: bool = False) -> ActorStats:
    return Actor(address, actor_id, num_envs, env_spec, seed, frames, record_latency).run()


# -- in-process driver --------------------------------------------------------


def drive_local(learner, num_actors: int = 2, num_envs: int = 16, frames: int = 100_000,
                seed: int = 0, train: bool = True, callback=None) -> dict:
    """Run actors and learner synchronously in one thread, without sockets.

    Each round submits one step for every environment as a single inference
    batch, then trains as much as the data allows: every ready batch for
    V-trace, or up to the replay ratio for R2D2.  Deterministic for a
    fixed seed.
    """
    spec = learner.cfg.env_spec()
    conns = [learner.register(a, num_envs) for a in range(num_actors)]
    envs = [make_vector_env(spec, env_seeds(seed, a, num_envs)) for a in range(num_actors)]
    n = num_actors * num_envs
    obs = np.concatenate([v.reset_all() for v in envs])
    rewards = np.zeros(n, np.float32)
    dones = np.ones(n, np.uint8)
    conn_keys = [c.key for c in conns for _ in range(num_envs)]
    env_ids = np.tile(np.arange(num_envs), num_actors)
    steps = 0
    train_metrics = []
    while steps < frames:
        now = time.perf_counter()
        batch = wire.InferenceBatch(conns=conn_keys, env_ids=env_ids, obs=obs, rewards=rewards,
                                    dones=dones, tickets=np.arange(n), submitted_at=np.full(n, now),
                                    formed_at=now)
        actions = learner.serve_inference(batch)
        steps += n
        parts = [v.step(np.arange(num_envs), actions[a * num_envs:(a + 1) * num_envs])
                 for a, v in enumerate(envs)]
        obs, rewards, dones = (np.concatenate(x) for x in zip(*parts))
        if train:
            train_metrics.extend(_train_available(learner))
        if callback is not None and callback(learner, steps):
            break
    for c in conns:
        learner.disconnect(c.key)
    return {"frames": steps, "updates": learner.updates, "train": train_metrics}


def _train_available(learner) -> list:
    out = []
    if learner.queue is not None:
        while len(learner.queue) >= learner.cfg.training_batch_size:
            batch = learner.next_batch(timeout=0)
            if batch is None:
                break
            m = learner.train_step(batch)
            if m:
                out.append(m)
        return out
    ratio = learner.cfg.replay_ratio
    while (len(learner.replay) >= learner.replay.min_size
           and learner.scheduled_transitions < ratio * learner.counters.generated):
        batch = learner.next_batch(reserve=False)
        if batch is None:
            break
        m = learner.train_step(batch)
        if m:
            out.append(m)
    return out


# -- multi-process driver -----------------------------------------------------------


def _actor_process(address, actor_id, num_envs, env_spec, seed, out_queue):
    logging.basicConfig(level=logging.WARNING)
    try:
        stats = Actor(tuple(address), actor_id, num_envs, env_spec, seed=seed,
                      max_reconnects=3).run()
        out_queue.put((actor_id, stats.steps, stats.episodes, stats.exit_reason))
    except Exception as exc:  # reported to the parent
        out_queue.put((actor_id, 0, 0, repr(exc)))


def run_cluster(learner, num_actors: int = 2, num_envs: int = 8, seed: int = 0,
                timeout: Optional[float] = None, callback=None) -> list[tuple]:
    """Serve ``num_actors`` actor processes over loopback until the learner stops.

    The learner stops at its frame budget, when ``callback(learner)`` returns
    true (polled twice a second) or after ``timeout`` seconds.  Returns one
    ``(actor_id, steps, episodes, exit_reason)`` tuple per actor.
    """
    import multiprocessing as mp

    address = learner.start()
    ctx = mp.get_context("spawn")
    out = ctx.Queue()
    procs = [ctx.Process(target=_actor_process,
                         args=(address, a, num_envs, learner.cfg.env_spec(), seed, out),
                         daemon=True)
             for a in range(num_actors)]
    deadline = None if timeout is None else time.monotonic() + timeout
    try:
        for p in procs:
            p.start()
        while not learner.stop_event.wait(0.5):
            if callback is not None and callback(learner):
                break
            if deadline is not None and time.monotonic() > deadline:
                break
            if not any(p.is_alive() for p in procs):
                break
    finally:
        learner.shutdown()
    results = []
    for _ in procs:
        try:
            results.append(out.get(timeout=30))
        except Exception:
            break
    for p in procs:
        p.join(timeout=10)
        if p.is_alive():
            p.terminate()
    return sorted(results)
