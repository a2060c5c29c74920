"""The learner service.

Everything that touches the model lives here: batched inference for all
remote environments, the recurrent-state store, trajectory/sequence
accumulation with per-step behavior outputs, data prefetch, the training
loop and parameter publication.  Actors only ever see actions.

Thread layout when serving over sockets:

* one acceptor, plus one reader per connection feeding the shared batcher;
* ``inference_workers`` threads polling the batcher;
* ``prefetch_threads`` threads assembling training batches;
* one trainer thread;
* one metrics thread.
"""

from __future__ import annotations

import collections
import dataclasses
import json
import logging
import queue
import socket
import threading
import time
from typing import Callable, Optional

import numpy as np

from . import qlearn, vtrace, wire
from .config import RunConfig
from .nn import (Adam, Network, NumericError, ParamSnapshot, RecurrentState, SnapshotStore,
                 clip_global_norm, load_checkpoint, save_checkpoint)
from .replay import NotReady, PrioritizedBuffer, QueueClosed, TrajectoryQueue

log = logging.getLogger(__name__)


class ServiceNotReady(RuntimeError):
    pass


# -- data containers -------------------------------------------------------------


@dataclasses.dataclass
class StepRecord:
    obs: np.ndarray
    reward: float
    done: bool
    action: int
    behavior: np.ndarray  # logits (vtrace) or Q-values (r2d2)
    epsilon: float
    version: int
    h_in: np.ndarray  # state entering this step (after any reset)
    c_in: np.ndarray
    prev_action: int
    truncated: bool = False  # done came from an episode length cap
    batch_size: int = 1  # inference batch geometry, for bit-exact audits
    batch_row: int = 0


@dataclasses.dataclass
class Trajectory:
    """unroll_length steps plus the bootstrap step, as recorded at inference time."""

    key: tuple
    obs: np.ndarray  # [T+1, D]
    actions: np.ndarray  # [T+1]
    rewards: np.ndarray  # [T+1]  reward carried into step k
    dones: np.ndarray  # [T+1]  step k starts a new episode
    behavior: np.ndarray  # [T+1, A]
    epsilons: np.ndarray  # [T+1]
    versions: np.ndarray  # [T+1]
    initial_state: RecurrentState  # [1, U]
    initial_prev_action: int
    valid: Optional[np.ndarray] = None  # [T+1], padding mask (sequences only)
    batch_geometry: Optional[np.ndarray] = None  # [T+1, 2] inference (batch size, row)
    burn_in: int = 0
    trainable: int = 0

    def __len__(self):
        return len(self.actions)


def _records_to_trajectory(key, records, state, prev_action, length=None) -> Trajectory:
    n = len(records)
    length = length or n
    obs = np.zeros((length, records[0].obs.shape[0]), np.float32)
    behavior = np.zeros((length, records[0].behavior.shape[0]), np.float32)
    actions = np.zeros(length, np.int64)
    rewards = np.zeros(length, np.float32)
    dones = np.zeros(length, bool)
    eps = np.zeros(length, np.float32)
    versions = np.full(length, -1, np.int64)
    geometry = np.zeros((length, 2), np.int64)
    for k, r in enumerate(records):
        obs[k] = r.obs
        behavior[k] = r.behavior
        actions[k] = r.action
        rewards[k] = r.reward
        dones[k] = r.done
        eps[k] = r.epsilon
        versions[k] = r.version
        geometry[k] = r.batch_size, r.batch_row
    valid = np.zeros(length, bool)
    valid[:n] = True
    return Trajectory(key=key, obs=obs, actions=actions, rewards=rewards, dones=dones,
                      behavior=behavior, epsilons=eps, versions=versions,
                      initial_state=RecurrentState(state[0][None].copy(), state[1][None].copy()),
                      initial_prev_action=int(prev_action), valid=valid,
                      batch_geometry=geometry)


@dataclasses.dataclass
class TrajectoryBatch:
    """Time-major stack of trajectories, ready for an unroll."""

    obs: np.ndarray  # [T, B, D]
    actions: np.ndarray  # [T, B]
    prev_actions: np.ndarray  # [T, B]
    rewards: np.ndarray  # [T, B]
    dones: np.ndarray  # [T, B]
    behavior: np.ndarray  # [T, B, A]
    versions: np.ndarray  # [T, B]
    valid: np.ndarray  # [T, B]
    initial_state: RecurrentState
    burn_in: np.ndarray  # [B]
    lengths: np.ndarray  # [B]
    ids: Optional[list] = None
    weights: Optional[np.ndarray] = None
    trainable: int = 0

    @classmethod
    def stack(cls, trajs: list[Trajectory], ids=None, weights=None) -> "TrajectoryBatch":
        actions = np.stack([t.actions for t in trajs], 1)
        prev = np.empty_like(actions)
        prev[0] = [t.initial_prev_action for t in trajs]
        prev[1:] = actions[:-1]
        valid = np.stack([t.valid if t.valid is not None else np.ones(len(t), bool)
                          for t in trajs], 1)
        return cls(
            obs=np.stack([t.obs for t in trajs], 1),
            actions=actions, prev_actions=prev,
            rewards=np.stack([t.rewards for t in trajs], 1),
            dones=np.stack([t.dones for t in trajs], 1),
            behavior=np.stack([t.behavior for t in trajs], 1),
            versions=np.stack([t.versions for t in trajs], 1),
            valid=valid,
            initial_state=RecurrentState(
                np.concatenate([t.initial_state.hidden for t in trajs]),
                np.concatenate([t.initial_state.cell for t in trajs])),
            burn_in=np.array([t.burn_in for t in trajs], np.int64),
            lengths=valid.sum(0),
            ids=ids, weights=weights,
            trainable=int(sum(t.trainable for t in trajs)))


@dataclasses.dataclass
class EnvSlot:
    key: tuple  # (actor_id, env_id)
    index: int  # row in the slot table arrays
    epsilon: float = 0.0
    alive: bool = True
    records: list = dataclasses.field(default_factory=list)
    acc_state: Optional[tuple] = None
    acc_prev_action: int = 0
    acc_episode_start: bool = False


class SlotTable:
    """Per-(actor, env) recurrent state, last action, epsilon and episode
    tallies, stored as arrays indexed by slot number."""

    ARRAYS = {"hidden": np.float32, "cell": np.float32, "last_action": np.int64,
              "epsilon": np.float64, "ep_return": np.float64, "ep_steps": np.int64,
              "in_episode": bool}

    def __init__(self, units: int, capacity: int = 64):
        self.units = units
        for name, dtype in self.ARRAYS.items():
            shape = (capacity, units) if name in ("hidden", "cell") else (capacity,)
            setattr(self, name, np.zeros(shape, dtype))
        self.by_index: list[Optional[EnvSlot]] = [None] * capacity
        self._free = list(range(capacity - 1, -1, -1))
        self.slots: dict[tuple, EnvSlot] = {}
        self.lock = threading.Lock()

    def _grow(self):
        old = len(self.hidden)
        for name in self.ARRAYS:
            src = getattr(self, name)
            arr = np.zeros((2 * old,) + src.shape[1:], src.dtype)
            arr[:old] = src
            setattr(self, name, arr)
        self.by_index.extend([None] * old)
        self._free.extend(range(2 * old - 1, old - 1, -1))

    def add(self, key, epsilon: float = 0.0) -> EnvSlot:
        with self.lock:
            if key in self.slots:
                raise wire.ProtocolError(f"slot {key} already exists")
            if not self._free:
                self._grow()
            i = self._free.pop()
            for name in self.ARRAYS:
                getattr(self, name)[i] = 0
            self.epsilon[i] = epsilon
            slot = EnvSlot(key=key, index=i, epsilon=epsilon)
            self.slots[key] = slot
            self.by_index[i] = slot
            return slot

    def remove(self, key) -> Optional[EnvSlot]:
        with self.lock:
            slot = self.slots.pop(key, None)
            if slot is not None:
                slot.alive = False
                self.by_index[slot.index] = None
                self._free.append(slot.index)
            return slot


@dataclasses.dataclass
class Connection:
    key: int
    actor_id: int
    num_envs: int
    slots: list
    slot_index: np.ndarray
    sock: Optional[socket.socket] = None
    send_lock: threading.Lock = dataclasses.field(default_factory=threading.Lock)
    closed: bool = False

    def send(self, data: bytes) -> bool:
        if self.sock is None or self.closed:
            return False
        with self.send_lock:
            try:
                self.sock.sendall(data)
                return True
            except OSError:
                self.closed = True
                return False


class Counters:
    """Step accounting: generated == emitted + open + discarded - carried."""

    def __init__(self):
        self.lock = threading.Lock()
        self.generated = 0
        self.emitted_entries = 0
        self.carried = 0
        self.discarded = 0
        self.trajectories = 0
        self.submitted = 0
        self.answered = 0


# -- the service -------------------------------------------------------------------


class Learner:
    def __init__(self, cfg: RunConfig, initial: Optional[ParamSnapshot] = None):
        self.cfg = cfg
        self.spec = cfg.network_spec()
        self.net = Network(self.spec)
        if initial is None:
            initial = ParamSnapshot.create(0, self.net.init_params(cfg.seed))
        self.net.check_params(initial.params)
        self.params = SnapshotStore(initial, retain=cfg.snapshot_retention)
        self.target: Optional[ParamSnapshot] = initial if cfg.algo == "r2d2" else None
        self.optimizer = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
        self.vcfg = cfg.vtrace_config()
        self.qcfg = cfg.q_config() if cfg.algo == "r2d2" else None

        self.table = SlotTable(max(self.spec.lstm_units, 1))
        self.batcher = wire.Batcher(cfg.inference_batch_size, cfg.batch_timeout_ms / 1000.0)
        self.queue: Optional[TrajectoryQueue] = None
        self.replay: Optional[PrioritizedBuffer] = None
        if cfg.algo == "vtrace":
            self.queue = TrajectoryQueue(cfg.effective_queue_capacity, cfg.queue_drop_oldest)
        else:
            self.replay = PrioritizedBuffer(
                cfg.replay_buffer_size, cfg.minimum_replay_buffer_size,
                cfg.priority_exponent, cfg.importance_sampling_exponent,
                sequence_length=cfg.sequence_length, seed=cfg.seed)
        self.prefetched: queue.Queue = queue.Queue(maxsize=2)

        self.counters = Counters()
        self.updates = 0
        self.scheduled_transitions = 0  # r2d2: transitions handed to the trainer
        self._ratio_cond = threading.Condition()
        self._conns: dict[int, Connection] = {}
        self._conn_lock = threading.Lock()
        self._conn_ids = iter(range(1, 1 << 62))
        self._rng_local = threading.local()
        self._rng_seed = np.random.SeedSequence(cfg.seed)
        self._rng_lock = threading.Lock()
        self.stop_event = threading.Event()
        self.trajectory_hooks: list[Callable[[Trajectory], None]] = []
        self.episodes: list[tuple] = []  # (return, length, frames generated so far)
        self.episodes_total = 0
        self.last_train_metrics: dict = {}
        self.metrics_history: list[dict] = []
        self.batch_sizes: collections.Counter = collections.Counter()
        self.timings = {"batch_wait": collections.deque(maxlen=20_000),
                        "forward": collections.deque(maxlen=20_000),
                        "respond": collections.deque(maxlen=20_000)}
        self._threads: list[threading.Thread] = []
        self._sock: Optional[socket.socket] = None
        self.address: Optional[tuple] = None
        self._started_at = time.perf_counter()
        self._shutdown_done = False

    # -- connections and slots ------------------------------------------------

    def register(self, actor_id: int, num_envs: int, conn_key: Optional[int] = None,
                 sock=None) -> Connection:
        """Handle a Hello: allocate one slot per environment of the actor."""
        if num_envs < 1:
            raise wire.ProtocolError("num_envs must be >= 1")
        with self._conn_lock:
            for c in self._conns.values():
                if c.actor_id == actor_id and not c.closed:
                    raise wire.ProtocolError(f"actor {actor_id} already connected")
            key = next(self._conn_ids) if conn_key is None else conn_key
        slots = []
        for env_id in range(num_envs):
            eps = 0.0
            if self.qcfg is not None:
                n = max(self.cfg.epsilon_streams, 1)
                i = (actor_id * num_envs + env_id) % n
                eps = self.cfg.eval_epsilon if self.cfg.eval_epsilon_only else \
                    qlearn.epsilon_for_actor(i, n)
            slots.append(self.table.add((actor_id, env_id), eps))
        conn = Connection(key=key, actor_id=actor_id, num_envs=num_envs, slots=slots,
                          slot_index=np.array([s.index for s in slots], np.int64), sock=sock)
        with self._conn_lock:
            self._conns[key] = conn
        log.info("actor %d connected with %d envs", actor_id, num_envs)
        return conn

    def disconnect(self, conn_key: int):
        """Drop an actor: its slots and any partially built unrolls go away."""
        with self._conn_lock:
            conn = self._conns.pop(conn_key, None)
        if conn is None:
            return
        conn.closed = True
        self.batcher.close_connection(conn_key)
        for s in conn.slots:
            self.table.remove(s.key)
            with self.counters.lock:
                self.counters.discarded += len(s.records)
            s.records = []
        if conn.sock is not None:
            try:
                conn.sock.close()
            except OSError:
                pass
        log.info("actor %d disconnected", conn.actor_id)

    def connection(self, conn_key: int) -> Optional[Connection]:
        return self._conns.get(conn_key)

    def _rng(self) -> np.random.Generator:
        rng = getattr(self._rng_local, "rng", None)
        if rng is None:
            with self._rng_lock:
                child = self._rng_seed.spawn(1)[0]
            rng = self._rng_local.rng = np.random.default_rng(child)
        return rng

    # -- inference -------------------------------------------------------------

    def serve_inference(self, batch: wire.InferenceBatch) -> np.ndarray:
        """Actions for every entry of ``batch`` (-1 for entries whose actor left)."""
        snap = self.params.latest()
        if snap is None:
            raise ServiceNotReady("no parameters published")
        n = len(batch)
        t = self.table
        idx = np.empty(n, np.int64)
        ok = np.ones(n, bool)
        for conn_key, a, b in batch.segments:
            conn = self._conns.get(conn_key)
            if conn is None or conn.closed:
                ok[a:b] = False
                continue
            e = batch.env_ids[a:b]
            if e.min() < 0 or e.max() >= conn.num_envs:
                raise wire.ProtocolError("env_id out of range")
            idx[a:b] = conn.slot_index[e]
        actions = np.full(n, -1, np.int64)
        if ok.all():
            sel = slice(None)
        elif ok.any():
            sel = np.nonzero(ok)[0]
            idx = idx[sel]
        else:
            return actions
        obs = batch.obs[sel]
        rewards = batch.rewards[sel].astype(np.float32, copy=False)
        done_flags = batch.dones[sel]
        dones = done_flags.astype(bool)
        h_in, c_in = t.hidden[idx], t.cell[idx]
        if dones.any():
            keep = (~dones)[:, None].astype(np.float32)
            h_in *= keep
            c_in *= keep
        prev_a = t.last_action[idx]
        t0 = time.perf_counter()
        head, value, new_state = self.net.forward(
            snap.params, obs, RecurrentState(h_in, c_in), prev_a, rewards, reset=dones)
        chosen = self._select_actions(head, t.epsilon[idx])
        self.timings["forward"].append(time.perf_counter() - t0)
        if self.spec.lstm_units:
            t.hidden[idx] = new_state.hidden
            t.cell[idx] = new_state.cell
        t.last_action[idx] = chosen
        actions[sel] = chosen
        with self.counters.lock:
            self.counters.generated += len(idx)
        self._episode_stats(idx, rewards, dones)
        if not self.cfg.bench_mode:
            self._accumulate(idx, obs, rewards, done_flags, chosen, head, snap.version,
                             h_in, c_in, prev_a)
        return actions

    def _select_actions(self, head, epsilons):
        rng = self._rng()
        if self.cfg.algo == "vtrace":
            g = rng.gumbel(size=head.shape)
            return np.argmax(head + g, axis=1)
        greedy = np.argmax(head, axis=1)
        explore = rng.random(len(greedy)) < epsilons
        if explore.any():
            greedy = np.where(explore, rng.integers(0, head.shape[1], len(greedy)), greedy)
        return greedy

    def _episode_stats(self, idx, rewards, dones):
        t = self.table
        ret = t.ep_return[idx] + rewards
        steps = t.ep_steps[idx]
        finished = dones & t.in_episode[idx]
        if finished.any():
            for r, k in zip(ret[finished].tolist(), steps[finished].tolist()):
                self._finish_episode(r, k)
        t.ep_return[idx] = np.where(dones, 0.0, ret)
        t.ep_steps[idx] = np.where(dones, 0, steps + 1)
        t.in_episode[idx] = True

    def _accumulate(self, idx, obs, rewards, flags, actions, head, version, h_in, c_in, prev_a):
        slots = self.table.by_index
        rl = rewards.tolist()
        fl = flags.tolist()
        al = actions.tolist()
        pl = prev_a.tolist()
        eps = self.table.epsilon[idx].tolist()
        vtrace_mode = self.cfg.algo == "vtrace"
        n = len(idx)
        for j, i in enumerate(idx.tolist()):
            slot = slots[i]
            if slot is None:
                continue
            rec = StepRecord(obs=obs[j].copy(), reward=rl[j], done=bool(fl[j]), action=al[j],
                             behavior=head[j].copy(), epsilon=eps[j], version=version,
                             h_in=h_in[j], c_in=c_in[j], prev_action=pl[j],
                             truncated=fl[j] == wire.DONE_TRUNCATED, batch_size=n, batch_row=j)
            if vtrace_mode:
                self._append_unroll(slot, rec)
            else:
                self._append_sequence(slot, rec)

    def _finish_episode(self, ret: float, steps: int):
        self.episodes.append((ret, steps, self.counters.generated))
        self.episodes_total += 1

    def _append_unroll(self, slot: EnvSlot, rec: StepRecord):
        if not slot.records:
            slot.acc_state = (rec.h_in, rec.c_in)
            slot.acc_prev_action = rec.prev_action
        slot.records.append(rec)
        if len(slot.records) == self.cfg.unroll_length + 1:
            traj = _records_to_trajectory(slot.key, slot.records, slot.acc_state,
                                          slot.acc_prev_action)
            traj.trainable = self.cfg.unroll_length
            slot.records = [rec]
            slot.acc_state = (rec.h_in, rec.c_in)
            slot.acc_prev_action = rec.prev_action
            with self.counters.lock:
                self.counters.emitted_entries += len(traj)
                self.counters.carried += 1
                self.counters.trajectories += 1
            self._emit(traj)

    def _append_sequence(self, slot: EnvSlot, rec: StepRecord):
        L = self.cfg.sequence_length
        if rec.done and slot.records:
            slot.records.append(rec)
            self._emit_sequence(slot)
            self._start_sequence(slot, [rec], episode_start=True)
            with self.counters.lock:
                self.counters.carried += 1
        elif not slot.records:
            self._start_sequence(slot, [rec], episode_start=bool(rec.done))
        else:
            slot.records.append(rec)
            if len(slot.records) == L:
                self._emit_sequence(slot)
                carried = slot.records[L - 1 - self.cfg.sequence_overlap:]
                self._start_sequence(slot, carried, episode_start=False)
                with self.counters.lock:
                    self.counters.carried += len(carried)

    @staticmethod
    def _start_sequence(slot: EnvSlot, records, episode_start: bool):
        slot.records = list(records)
        slot.acc_state = (records[0].h_in, records[0].c_in)
        slot.acc_prev_action = records[0].prev_action
        slot.acc_episode_start = episode_start

    def _emit_sequence(self, slot: EnvSlot):
        records = slot.records
        burn = 0 if slot.acc_episode_start else self.cfg.burn_in
        # a truncated episode has no known successor: its boundary entry is
        # masked so no target crosses it
        cut = len(records) > 1 and records[-1].done and records[-1].truncated
        n_valid = len(records) - cut
        trainable = max(0, n_valid - 1 - burn)
        with self.counters.lock:
            if trainable == 0:
                self.counters.discarded += len(records)
                return
            self.counters.emitted_entries += len(records)
            self.counters.trajectories += 1
        seq = _records_to_trajectory(slot.key, records, slot.acc_state, slot.acc_prev_action,
                                     length=self.cfg.sequence_length)
        if cut:
            seq.valid[n_valid] = False
        seq.burn_in = burn
        seq.trainable = trainable
        self._emit(seq)

    def _emit(self, traj: Trajectory):
        for hook in self.trajectory_hooks:
            hook(traj)
        if self.queue is not None:
            try:
                while not self.queue.push(traj, timeout=0.1):
                    if self.stop_event.is_set():
                        return
            except QueueClosed:
                return
        else:
            self.replay.insert(traj)

    def open_entries(self) -> int:
        with self.table.lock:
            return sum(len(s.records) for s in self.table.slots.values())

    # -- replay-ratio throttle (r2d2) -----------------------------------------

    def _ratio_slack(self) -> int:
        return self.cfg.training_batch_size * (self.cfg.sequence_length - 1)

    def throttle_inference(self):
        """Pause inference while the trainer lags the replay ratio."""
        if self.replay is None or self.cfg.bench_mode:
            return
        with self._ratio_cond:
            while (not self.stop_event.is_set()
                   and len(self.replay) >= self.replay.min_size
                   and self.scheduled_transitions < self.cfg.replay_ratio
                   * self.counters.generated - self._ratio_slack()):
                self._ratio_cond.wait(0.05)

    def _reserve_transitions(self, n: int) -> bool:
        with self._ratio_cond:
            while self.scheduled_transitions + n > self.cfg.replay_ratio * self.counters.generated:
                if self.stop_event.is_set():
                    return False
                self._ratio_cond.wait(0.05)
            self.scheduled_transitions += n
            self._ratio_cond.notify_all()
            return True

    @property
    def replay_ratio_observed(self) -> float:
        g = self.counters.generated
        return self.scheduled_transitions / g if g else 0.0

    # -- prefetch and training ----------------------------------------------

    def next_batch(self, timeout: Optional[float] = None,
                   reserve: bool = True) -> Optional[TrajectoryBatch]:
        """Assemble one training batch directly from the queue or replay.

        For replay, ``reserve`` waits until the batch fits under the replay
        ratio; otherwise its transitions are simply counted.
        """
        B = self.cfg.training_batch_size
        if self.queue is not None:
            trajs = self.queue.pop_batch(B, timeout)
            return None if trajs is None else TrajectoryBatch.stack(trajs)
        try:
            seqs, ids, weights = self.replay.sample(B, self._rng())
        except NotReady:
            if timeout:
                self.stop_event.wait(min(timeout, 0.05))
            return None
        batch = TrajectoryBatch.stack(seqs, ids=ids, weights=weights)
        if not reserve:
            with self._ratio_cond:
                self.scheduled_transitions += batch.trainable
            return batch
        if not self._reserve_transitions(batch.trainable):
            return None
        return batch

    def _prefetch_loop(self):
        while not self.stop_event.is_set():
            try:
                batch = self.next_batch(timeout=0.1)
            except Exception:
                log.exception("prefetch failed")
                continue
            if batch is None:
                continue
            while not self.stop_event.is_set():
                try:
                    self.prefetched.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    pass

    def train_step(self, batch: Optional[TrajectoryBatch] = None,
                   timeout: Optional[float] = None) -> Optional[dict]:
        """One synchronous update.  Pulls a prefetched batch when none is given."""
        if batch is None:
            try:
                batch = self.prefetched.get(timeout=timeout)
            except queue.Empty:
                return None
        t0 = time.perf_counter()
        snap = self.params.latest()
        try:
            if self.cfg.algo == "vtrace":
                grads, metrics = self._vtrace_grads(snap, batch)
            else:
                grads, metrics = self._q_grads(snap, batch)
            if not np.isfinite(metrics["loss"]):
                raise NumericError("loss", "non-finite loss")
            grads, norm = clip_global_norm(grads, self.cfg.gradient_norm_clipping)
            new = self.optimizer.step(snap, grads)
        except (NumericError, FloatingPointError) as exc:
            log.warning("skipping update: %s", exc)
            return {"skipped": True, "error": str(exc), "version": snap.version}
        self.params.publish(new)
        self.updates += 1
        if self.qcfg is not None and self.updates % self.cfg.target_network_update_interval == 0:
            self.target = new
        metrics.update(grad_norm=norm, version=new.version, updates=self.updates,
                       train_time=time.perf_counter() - t0)
        self.last_train_metrics = metrics
        return metrics

    def _vtrace_grads(self, snap: ParamSnapshot, b: TrajectoryBatch):
        params = snap.params
        out, tape = self.net.unroll(params, b.obs, b.prev_actions, b.rewards, b.dones,
                                    b.initial_state)
        T = b.obs.shape[0] - 1
        B = b.obs.shape[1]
        logits = out.head
        values = out.value
        acts = b.actions[:T]
        inputs = vtrace.VTraceInputs(
            behavior_log_probs=vtrace.action_log_probs(b.behavior[:T], acts),
            target_log_probs=vtrace.action_log_probs(logits[:T], acts),
            rewards=b.rewards[1:], dones=b.dones[1:], values=values[:T],
            bootstrap_value=values[T])
        ret = vtrace.vtrace_targets(inputs, self.vcfg)
        loss = vtrace.vtrace_loss(logits[:T], values[:T], acts, ret.vs, ret.pg_advantages,
                                  self.vcfg, normalizer=B)
        d_head = np.zeros(logits.shape, np.float32)
        d_head[:T] = loss.d_logits
        d_value = np.zeros(values.shape, np.float32)
        d_value[:T] = loss.d_values
        grads = self.net.backward(params, tape, d_head, d_value)
        metrics = dict(loss=loss.total, pg=loss.pg, baseline=loss.baseline,
                       entropy=loss.entropy, rho_mean=float(ret.rhos.mean()))
        return grads, metrics

    def _q_grads(self, snap: ParamSnapshot, b: TrajectoryBatch):
        L, B = b.actions.shape
        stop = np.zeros((L, B), bool)
        for j, k in enumerate(b.burn_in.tolist()):
            if 0 < k < L:
                stop[k, j] = True
        out, tape = self.net.unroll(snap.params, b.obs, b.prev_actions, b.rewards, b.dones,
                                    b.initial_state, stop_grad=stop)
        tout, _ = self.net.unroll(self.target.params, b.obs, b.prev_actions, b.rewards,
                                  b.dones, b.initial_state, keep_tape=False)
        weights = b.weights if b.weights is not None else np.ones(B)
        ql = qlearn.q_sequence_loss(out.head, tout.head, b.actions, b.rewards, b.dones,
                                    b.valid, b.burn_in, weights, self.qcfg)
        grads = self.net.backward(snap.params, tape, ql.d_q.astype(np.float32))
        if b.ids is not None:
            prios = []
            for j in range(B):
                td = ql.abs_td[:, j][ql.trained[:, j]]
                prios.append(qlearn.sequence_priority(td, self.qcfg.priority_eta)
                             if td.size else 0.0)
            self.replay.update_priorities(b.ids, prios)
        metrics = dict(loss=ql.total, trained_transitions=int(ql.trained.sum()),
                       mean_abs_td=float(ql.abs_td.sum() / max(ql.trained.sum(), 1)))
        return grads, metrics

    def _trainer_loop(self):
        while not self.stop_event.is_set():
            try:
                self.train_step(timeout=0.1)
            except Exception:
                log.exception("training step failed")

    # -- metrics ------------------------------------------------------------------

    def recent_returns(self, n: int = 100) -> list[float]:
        return [e[0] for e in self.episodes[-n:]]

    def frames_to_reach(self, threshold: float, window: int = 100) -> Optional[int]:
        """Frames generated when the trailing ``window``-episode mean first hit ``threshold``."""
        return frames_to_reach(self.episodes, threshold, window)

    def metrics_record(self) -> dict:
        now = time.perf_counter()
        c = self.counters
        fw = list(self.timings["forward"])
        wait = list(self.timings["batch_wait"])
        rec = {
            "time": round(now - self._started_at, 3),
            "frames": c.generated,
            "answered": c.answered,
            "updates": self.updates,
            "version": self.params.latest().version,
            "episodes": self.episodes_total,
            "mean_return_100": float(np.mean(self.recent_returns())) if self.episodes else None,
            "queue_depth": len(self.queue) if self.queue is not None else None,
            "replay_size": len(self.replay) if self.replay is not None else None,
            "replay_ratio": round(self.replay_ratio_observed, 4) if self.replay else None,
            "batch_wait_p50_ms": float(np.percentile(wait, 50) * 1e3) if wait else None,
            "batch_wait_p99_ms": float(np.percentile(wait, 99) * 1e3) if wait else None,
            "forward_p50_ms": float(np.percentile(fw, 50) * 1e3) if fw else None,
        }
        rec.update({k: v for k, v in self.last_train_metrics.items()
                    if isinstance(v, (int, float))})
        return rec

    def _metrics_loop(self):
        fh = open(self.cfg.metrics_path, "a") if self.cfg.metrics_path else None
        last_t, last_frames, last_updates = time.perf_counter(), 0, 0
        try:
            while not self.stop_event.wait(self.cfg.metrics_interval):
                rec = self.metrics_record()
                now = time.perf_counter()
                dt = max(now - last_t, 1e-9)
                rec["fps"] = round((rec["frames"] - last_frames) / dt, 1)
                rec["updates_per_s"] = round((rec["updates"] - last_updates) / dt, 2)
                last_t, last_frames, last_updates = now, rec["frames"], rec["updates"]
                self.metrics_history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                log.debug("metrics %s", rec)
        finally:
            if fh:
                fh.close()

    # -- network service ------------------------------------------------------------

    def _inference_loop(self):
        while not self.stop_event.is_set():
            batch = self.batcher.poll(timeout=0.1)
            if batch is None:
                continue
            self.throttle_inference()
            try:
                actions = self.serve_inference(batch)
            except Exception as exc:
                log.exception("inference failed")
                self.batcher.complete(batch)
                for conn_key in set(batch.conns):
                    conn = self._conns.get(conn_key)
                    if conn is not None:
                        conn.send(wire.encode(wire.ErrorMessage(wire.ErrorCode.INTERNAL,
                                                                str(exc)[:200])))
                continue
            t0 = time.perf_counter()
            self.timings["batch_wait"].append(batch.formed_at - float(batch.submitted_at.mean()))
            self.batch_sizes[len(batch)] += 1
            # release the envs before answering so their next request is accepted
            self.batcher.complete(batch)
            out: dict = {}
            for conn_key, a, b in batch.segments:
                out.setdefault(conn_key, []).append(
                    wire.encode_actions(batch.env_ids[a:b], actions[a:b]))
            answered = 0
            for conn_key, parts in out.items():
                conn = self._conns.get(conn_key)
                if conn is not None and conn.send(b"".join(parts)):
                    answered += sum(len(p) for p in parts) // wire.ACTION_FRAME_SIZE
            self.timings["respond"].append(time.perf_counter() - t0)
            with self.counters.lock:
                self.counters.answered += answered
                done = self.cfg.total_frames and self.counters.answered >= self.cfg.total_frames
            if done:
                log.info("frame budget of %d reached", self.cfg.total_frames)
                self.stop_event.set()

    def _reader_loop(self, sock: socket.socket):
        dec = wire.FrameDecoder(blocks=True)
        conn: Optional[Connection] = None
        sock.settimeout(0.25)
        try:
            # registered connections stay open until shutdown() has said goodbye
            while True:
                try:
                    data = sock.recv(1 << 20)
                except socket.timeout:
                    if self.stop_event.is_set() and (conn is None or self._shutdown_done):
                        break
                    continue
                except OSError:
                    break
                if not data:
                    break
                for item in dec.feed(data):
                    if isinstance(item, wire.StepBlock):
                        if conn is None:
                            raise wire.ProtocolError("StepRequest before Hello")
                        self._submit_steps(conn, item)
                    elif isinstance(item, wire.Hello):
                        if conn is not None:
                            raise wire.ProtocolError("duplicate Hello")
                        conn = self.register(item.actor_id, item.num_envs, sock=sock)
                    elif isinstance(item, wire.ErrorMessage):
                        log.info("actor reported error %d: %s", item.code, item.message)
                        return
                    else:
                        raise wire.ProtocolError(f"unexpected {type(item).__name__}")
        except wire.ProtocolError as exc:
            log.warning("protocol error: %s", exc)
            try:
                sock.sendall(wire.encode(wire.ErrorMessage(exc.code, str(exc)[:200])))
            except OSError:
                pass
        finally:
            if conn is not None:
                self.disconnect(conn.key)
            else:
                try:
                    sock.close()
                except OSError:
                    pass

    def _submit_steps(self, conn: Connection, block: wire.StepBlock):
        n = len(block)
        if np.any(block.env_ids >= conn.num_envs):
            raise wire.ProtocolError("env_id out of range")
        if block.obs.shape[1] != self.spec.input_dim:
            raise wire.ProtocolError(
                f"observation size {block.obs.shape[1]} != {self.spec.input_dim}")
        if self.cfg.total_frames:
            with self.counters.lock:
                n = max(0, min(n, self.cfg.total_frames - self.counters.submitted))
                self.counters.submitted += n
            if n == 0:
                return
        else:
            with self.counters.lock:
                self.counters.submitted += n
        self.batcher.submit_many(conn.key, block.env_ids[:n], block.obs[:n],
                                 block.rewards[:n], block.dones[:n])

    def _accept_loop(self):
        while not self.stop_event.is_set():
            try:
                client, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            th = threading.Thread(target=self._reader_loop, args=(client,), daemon=True,
                                  name="reader")
            th.start()
            self._threads.append(th)

    def _spawn(self, target, name):
        th = threading.Thread(target=target, daemon=True, name=name)
        th.start()
        self._threads.append(th)

    def start(self):
        """Bind the listener and start all service threads."""
        host, port = self.cfg.host_port
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(128)
        sock.settimeout(0.2)
        self._sock = sock
        self.address = sock.getsockname()
        self._started_at = time.perf_counter()
        self._spawn(self._accept_loop, "acceptor")
        for i in range(self.cfg.inference_workers):
            self._spawn(self._inference_loop, f"inference-{i}")
        if not self.cfg.bench_mode:
            for i in range(self.cfg.prefetch_threads):
                self._spawn(self._prefetch_loop, f"prefetch-{i}")
            self._spawn(self._trainer_loop, "trainer")
        self._spawn(self._metrics_loop, "metrics")
        log.info("learner listening on %s:%d (%s)", *self.address, self.cfg.algo)
        return self.address

    def stop(self):
        self.stop_event.set()

    def shutdown(self):
        if self._shutdown_done:
            return
        self._shutdown_done = True
        self.stop_event.set()
        self.batcher.shutdown()
        if self.queue is not None:
            self.queue.close()
        with self._ratio_cond:
            self._ratio_cond.notify_all()
        if self._sock is not None:
            self._sock.close()
        bye = wire.encode(wire.ErrorMessage(wire.ErrorCode.SHUTDOWN, "learner shutting down"))
        for key in list(self._conns):
            conn = self._conns.get(key)
            if conn is not None:
                conn.send(bye)
                try:
                    conn.sock.shutdown(socket.SHUT_RDWR)
                except (OSError, AttributeError):
                    pass
        for th in self._threads:
            th.join(timeout=5)
        for key in list(self._conns):
            self.disconnect(key)
        if self.cfg.checkpoint_path:
            save_checkpoint(self.cfg.checkpoint_path, self.params.latest())

    def run(self, timeout: Optional[float] = None):
        """Serve until the frame budget is reached, ``stop()`` is called or
        ``timeout`` seconds pass."""
        self.start()
        try:
            self.stop_event.wait(timeout)
        finally:
            self.shutdown()

    @classmethod
    def from_checkpoint(cls, cfg: RunConfig, path) -> "Learner":
        return cls(cfg, load_checkpoint(path))


def frames_to_reach(episodes, threshold: float, window: int = 100) -> Optional[int]:
    if len(episodes) < window:
        return None
    returns = np.array([e[0] for e in episodes])
    means = np.convolve(returns, np.ones(window) / window, mode="valid")
    hit = np.nonzero(means >= threshold - 1e-12)[0]
    return int(episodes[hit[0] + window - 1][2]) if hit.size else None


def audit_behavior(net: Network, store: SnapshotStore, traj: Trajectory) -> float:
    """Re-run each recorded step under its recorded parameter version.

    Returns the max absolute difference to the recorded behavior outputs.
    Float32 BLAS results depend on the batch size and row position, so each
    step is replayed as a batch of the recorded size (the step copied into
    every row) and the recorded row is read back.
    """
    state = traj.initial_state
    prev = traj.initial_prev_action
    worst = 0.0
    n = int(traj.valid.sum()) if traj.valid is not None else len(traj)
    for k in range(n):
        snap = store.get(int(traj.versions[k]))
        size, row = (1, 0) if traj.batch_geometry is None else traj.batch_geometry[k]
        rep = np.zeros(size, np.int64)
        head, _, out = net.forward(
            snap.params, traj.obs[k][None][rep], RecurrentState(state.hidden[rep],
                                                                state.cell[rep]),
            np.full(size, prev), np.full(size, traj.rewards[k], np.float32),
            reset=np.full(size, bool(traj.dones[k])))
        state = RecurrentState(out.hidden[row:row + 1], out.cell[row:row + 1])
        worst = max(worst, float(np.abs(head[row] - traj.behavior[k]).max()))
        prev = int(traj.actions[k])
    return worst
