"""SEEDWire v1: length-prefixed little-endian frames between actors and
the learner, plus the server-side batcher that coalesces inference calls.

Frame layout: u32 length (type byte + payload), u8 type, payload.

=============== ==== ====================================================
message         type payload
=============== ==== ====================================================
Error           0x00 u16 code, u16 message length, UTF-8 message
Hello           0x01 u32 actor_id, u32 num_envs
StepRequest     0x02 u32 env_id, f32 reward, u8 done, u32 n, n x f32 obs
ActionResponse  0x03 u32 env_id, u32 action
=============== ==== ====================================================
"""

from __future__ import annotations

import collections
import dataclasses
import enum
import itertools
import logging
import struct
import threading
import time
from typing import Optional, Union

import numpy as np

log = logging.getLogger(__name__)

MAX_FRAME = 16 * 1024 * 1024

# values of the StepRequest done byte
DONE_NONE = 0  # mid-episode
DONE_TERMINAL = 1  # first step after a terminal state (or after connecting)
DONE_TRUNCATED = 2  # first step after the episode hit its length cap

_LEN = struct.Struct("<I")
_HELLO = struct.Struct("<IBII")
_STEP_HEAD = struct.Struct("<IBIfBI")
_ACTION = struct.Struct("<IBII")
_ERROR_HEAD = struct.Struct("<IBHH")


class MsgType(enum.IntEnum):
    ERROR = 0x00
    HELLO = 0x01
    STEP_REQUEST = 0x02
    ACTION_RESPONSE = 0x03


class ErrorCode(enum.IntEnum):
    PROTOCOL = 1
    NOT_READY = 2
    SHUTDOWN = 3
    INTERNAL = 4


class ProtocolError(Exception):
    def __init__(self, message: str, code: int = ErrorCode.PROTOCOL):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass(frozen=True)
class Hello:
    actor_id: int
    num_envs: int


@dataclasses.dataclass(frozen=True, eq=False)
class StepRequest:
    env_id: int
    reward: float
    done: int
    obs: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0, np.float32))

    def __eq__(self, other):
        if not isinstance(other, StepRequest):
            return NotImplemented
        return (self.env_id == other.env_id
                and np.float32(self.reward).tobytes() == np.float32(other.reward).tobytes()
                and int(self.done) == int(other.done)
                and np.asarray(self.obs, "<f4").tobytes() == np.asarray(other.obs, "<f4").tobytes())

    __hash__ = None


@dataclasses.dataclass(frozen=True)
class ActionResponse:
    env_id: int
    action: int


@dataclasses.dataclass(frozen=True)
class ErrorMessage:
    code: int
    message: str


WireMessage = Union[Hello, StepRequest, ActionResponse, ErrorMessage]


def encode(m: WireMessage) -> bytes:
    if isinstance(m, StepRequest):
        obs = np.ascontiguousarray(m.obs, "<f4").ravel()
        n = obs.size
        return _STEP_HEAD.pack(14 + 4 * n, MsgType.STEP_REQUEST, m.env_id, m.reward,
                               int(m.done), n) + obs.tobytes()
    if isinstance(m, ActionResponse):
        return _ACTION.pack(9, MsgType.ACTION_RESPONSE, m.env_id, m.action)
    if isinstance(m, Hello):
        return _HELLO.pack(9, MsgType.HELLO, m.actor_id, m.num_envs)
    if isinstance(m, ErrorMessage):
        raw = m.message.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ProtocolError("error message too long")
        return _ERROR_HEAD.pack(5 + len(raw), MsgType.ERROR, m.code, len(raw)) + raw
    raise TypeError(f"not a wire message: {type(m).__name__}")


def decode_payload(msg_type: int, payload) -> WireMessage:
    payload = bytes(payload)
    n = len(payload)
    if msg_type == MsgType.STEP_REQUEST:
        if n < 13:
            raise ProtocolError("short StepRequest")
        env_id, reward, done, count = struct.unpack_from("<IfBI", payload)
        if n != 13 + 4 * count:
            raise ProtocolError("StepRequest length does not match obs_count")
        obs = np.frombuffer(payload, "<f4", count, 13).astype(np.float32)
        return StepRequest(env_id, float(reward), done, obs)
    if msg_type == MsgType.ACTION_RESPONSE:
        if n != 8:
            raise ProtocolError("bad ActionResponse length")
        return ActionResponse(*struct.unpack("<II", payload))
    if msg_type == MsgType.HELLO:
        if n != 8:
            raise ProtocolError("bad Hello length")
        return Hello(*struct.unpack("<II", payload))
    if msg_type == MsgType.ERROR:
        if n < 4:
            raise ProtocolError("short Error")
        code, mlen = struct.unpack_from("<HH", payload)
        if n != 4 + mlen:
            raise ProtocolError("Error length does not match message length")
        return ErrorMessage(code, payload[4:].decode("utf-8"))
    raise ProtocolError(f"unknown message type 0x{msg_type:02x}")


def decode(data: bytes) -> WireMessage:
    """Decode exactly one complete frame."""
    if len(data) < 5:
        raise ProtocolError("truncated frame")
    (length,) = _LEN.unpack_from(data)
    _check_length(length)
    if len(data) != 4 + length:
        raise ProtocolError("frame length mismatch")
    return decode_payload(data[4], memoryview(data)[5:])


def _check_length(length: int):
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds 16 MiB")
    if length < 1:
        raise ProtocolError("empty frame")


def _step_dtype(n: int) -> np.dtype:
    return np.dtype([("len", "<u4"), ("type", "u1"), ("env", "<u4"), ("reward", "<f4"),
                     ("done", "u1"), ("n", "<u4"), ("obs", "<f4", (n,))])


_ACTION_DTYPE = np.dtype([("len", "<u4"), ("type", "u1"), ("env", "<u4"), ("action", "<u4")])
ACTION_FRAME_SIZE = _ACTION_DTYPE.itemsize


@dataclasses.dataclass
class StepBlock:
    """A run of consecutive StepRequests with the same observation size."""

    env_ids: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    obs: np.ndarray

    def __len__(self):
        return len(self.env_ids)

    def messages(self) -> list[StepRequest]:
        return [StepRequest(int(e), float(r), int(d), o)
                for e, r, d, o in zip(self.env_ids, self.rewards, self.dones, self.obs)]


@dataclasses.dataclass
class ActionBlock:
    env_ids: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return len(self.env_ids)

    def messages(self) -> list[ActionResponse]:
        return [ActionResponse(int(e), int(a)) for e, a in zip(self.env_ids, self.actions)]


def encode_steps(env_ids, rewards, dones, obs) -> bytes:
    """Vectorised encoding of many StepRequests with equal observation size."""
    obs = np.asarray(obs, np.float32)
    k, n = obs.shape
    arr = np.empty(k, _step_dtype(n))
    arr["len"] = 14 + 4 * n
    arr["type"] = MsgType.STEP_REQUEST
    arr["env"] = env_ids
    arr["reward"] = rewards
    arr["done"] = dones
    arr["n"] = n
    arr["obs"] = obs
    return arr.tobytes()


def encode_actions(env_ids, actions) -> bytes:
    arr = np.empty(len(env_ids), _ACTION_DTYPE)
    arr["len"] = 9
    arr["type"] = MsgType.ACTION_RESPONSE
    arr["env"] = env_ids
    arr["action"] = actions
    return arr.tobytes()


class FrameDecoder:
    """Incremental decoder tolerant of arbitrary fragmentation.

    ``feed`` returns decoded items in stream order.  Runs of StepRequests
    (or ActionResponses) come back as one :class:`StepBlock`
    (:class:`ActionBlock`) when ``blocks=True``, otherwise every frame is
    returned as its own message object.
    """

    def __init__(self, blocks: bool = False):
        self._buf = bytearray()
        self.blocks = blocks

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)

    def feed(self, data) -> list:
        self._buf += data
        out = []
        buf = self._buf
        pos = 0
        end = len(buf)
        try:
            while end - pos >= 5:
                (length,) = _LEN.unpack_from(buf, pos)
                _check_length(length)
                size = 4 + length
                if end - pos < size:
                    break
                mtype = buf[pos + 4]
                if mtype == MsgType.STEP_REQUEST and length >= 14:
                    (count,) = _LEN.unpack_from(buf, pos + 14)
                    if length != 14 + 4 * count:
                        raise ProtocolError("StepRequest length does not match obs_count")
                    k = (end - pos) // size
                    arr = np.frombuffer(buf, _step_dtype(count), k, pos)
                    good = (arr["len"] == length) & (arr["type"] == mtype) & (arr["n"] == count)
                    k = int(np.argmin(good)) if not good.all() else k
                    arr = arr[:k]
                    block = StepBlock(arr["env"].astype(np.int64), arr["reward"].astype(np.float32),
                                      arr["done"].astype(np.uint8), arr["obs"].astype(np.float32))
                    del arr
                    out.extend([block] if self.blocks else block.messages())
                    pos += k * size
                elif mtype == MsgType.ACTION_RESPONSE and length == 9:
                    k = (end - pos) // size
                    arr = np.frombuffer(buf, _ACTION_DTYPE, k, pos)
                    good = (arr["len"] == 9) & (arr["type"] == mtype)
                    k = int(np.argmin(good)) if not good.all() else k
                    block = ActionBlock(arr["env"][:k].astype(np.int64),
                                        arr["action"][:k].astype(np.int64))
                    del arr
                    out.extend([block] if self.blocks else block.messages())
                    pos += k * size
                else:
                    out.append(decode_payload(mtype, buf[pos + 5:pos + size]))
                    pos += size
        finally:
            del buf[:pos]
        return out


# -- batching ------------------------------------------------------------------


@dataclasses.dataclass
class InferenceBatch:
    conns: list
    env_ids: np.ndarray
    obs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    tickets: np.ndarray
    submitted_at: np.ndarray
    formed_at: float
    segments: Optional[list] = None  # [(conn, start, stop)] runs of one connection

    def __post_init__(self):
        if self.segments is None:
            self.segments = _segments(self.conns)

    def __len__(self):
        return len(self.conns)

    @property
    def entries(self):
        return list(zip(self.conns, self.env_ids.tolist(), self.obs, self.rewards.tolist(),
                        self.dones.tolist()))


def _segments(conns) -> list:
    out = []
    start = 0
    for i in range(1, len(conns) + 1):
        if i == len(conns) or conns[i] != conns[start]:
            out.append((conns[start], start, i))
            start = i
    return out


class _Chunk:
    """Requests from one submit_many call, consumed from the front."""

    __slots__ = ("conn", "env_ids", "obs", "rewards", "dones", "tickets", "at", "pos")

    def __init__(self, conn, env_ids, obs, rewards, dones, tickets, at):
        self.conn = conn
        self.env_ids = env_ids
        self.obs = obs
        self.rewards = rewards
        self.dones = dones
        self.tickets = tickets
        self.at = at
        self.pos = 0

    def __len__(self):
        return len(self.env_ids) - self.pos


class Batcher:
    """Coalesces single-step inference requests into batches.

    A batch is released when ``max_batch`` requests are pending or when the
    oldest pending request has waited ``max_wait`` seconds.  Each
    (connection, env_id) pair may have one request in flight; it stays in
    flight until :meth:`complete` is called for its batch.  Requests are
    served in submission order.
    """

    def __init__(self, max_batch: int = 32, max_wait: float = 0.001):
        if max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        self.max_batch = max_batch
        self.max_wait = max_wait
        self._pending: collections.deque = collections.deque()
        self._count = 0
        self._inflight: dict = {}  # conn -> bool array indexed by env_id
        self._closed_conns: set = set()
        self._cond = threading.Condition()
        self._next_ticket = 0
        self._shutdown = False
        self.batches_formed = 0
        self.deadline_batches = 0
        self.dropped = 0

    def __len__(self):
        return self._count

    def submit(self, conn, env_id: int, obs, reward: float, done: int) -> Optional[int]:
        tickets = self.submit_many(conn, np.array([env_id]), np.asarray(obs, np.float32)[None],
                                   np.array([reward], np.float32), np.array([done], np.uint8))
        return int(tickets[0]) if len(tickets) else None

    def submit_many(self, conn, env_ids, obs, rewards, dones) -> np.ndarray:
        """Queue a run of requests from one connection; returns their tickets."""
        env_ids = np.asarray(env_ids, np.int64)
        n = len(env_ids)
        now = time.perf_counter()
        with self._cond:
            if conn in self._closed_conns:
                self.dropped += n
                log.warning("dropping %d requests from closed connection %s", n, conn)
                return np.zeros(0, np.int64)
            if n == 0:
                return np.zeros(0, np.int64)
            if env_ids.min() < 0:
                raise ProtocolError("negative env_id")
            flags = self._inflight.get(conn)
            top = int(env_ids.max()) + 1
            if flags is None or len(flags) < top:
                grown = np.zeros(max(top, 2 * len(flags) if flags is not None else top), bool)
                if flags is not None:
                    grown[:len(flags)] = flags
                flags = self._inflight[conn] = grown
            busy = flags[env_ids]
            if busy.any():
                raise ProtocolError(f"env {int(env_ids[busy][0])} already has a request in flight")
            if n > 1 and np.unique(env_ids).size != n:
                raise ProtocolError("duplicate env_id within one submission")
            flags[env_ids] = True
            tickets = np.arange(self._next_ticket, self._next_ticket + n, dtype=np.int64)
            self._next_ticket += n
            was_empty = self._count == 0
            self._pending.append(_Chunk(conn, env_ids, np.asarray(obs, np.float32),
                                        np.asarray(rewards, np.float32),
                                        np.asarray(dones, np.uint8), tickets, now))
            self._count += n
            if was_empty or self._count >= self.max_batch:
                self._cond.notify()
            return tickets

    def _ready(self, now: float) -> bool:
        if not self._count:
            return False
        return self._count >= self.max_batch or now - self._pending[0].at >= self.max_wait

    def poll(self, timeout: Optional[float] = None) -> Optional[InferenceBatch]:
        """Block until a batch is due (or ``timeout`` passes / shutdown)."""
        give_up = None if timeout is None else time.perf_counter() + timeout
        with self._cond:
            while True:
                now = time.perf_counter()
                if self._ready(now):
                    break
                if self._shutdown:
                    return None
                waits = []
                if self._count:
                    waits.append(self._pending[0].at + self.max_wait - now)
                if give_up is not None:
                    if now >= give_up:
                        return None
                    waits.append(give_up - now)
                self._cond.wait(min(waits) if waits else None)
            n = min(self.max_batch, self._count)
            if n < self.max_batch:
                self.deadline_batches += 1
            parts = []
            need = n
            while need:
                ch = self._pending[0]
                take = min(need, len(ch))
                parts.append((ch, ch.pos, ch.pos + take))
                ch.pos += take
                need -= take
                if not len(ch):
                    self._pending.popleft()
            self._count -= n
            self.batches_formed += 1
            if self._count:
                self._cond.notify()
        conns, segments = [], []
        start = 0
        for ch, a, b in parts:
            conns.extend([ch.conn] * (b - a))
            segments.append((ch.conn, start, start + b - a))
            start += b - a
        if len(parts) == 1:
            ch, a, b = parts[0]
            cat = lambda name: getattr(ch, name)[a:b]  # noqa: E731
        else:
            cat = lambda name: np.concatenate([getattr(ch, name)[a:b] for ch, a, b in parts])  # noqa: E731,E501
        return InferenceBatch(
            conns=conns, env_ids=cat("env_ids"), obs=cat("obs"), rewards=cat("rewards"),
            dones=cat("dones"), tickets=cat("tickets"),
            submitted_at=np.concatenate([np.full(b - a, ch.at) for ch, a, b in parts]),
            formed_at=now, segments=segments)

    def complete(self, batch: InferenceBatch):
        with self._cond:
            for conn, a, b in batch.segments:
                flags = self._inflight.get(conn)
                if flags is not None:
                    flags[batch.env_ids[a:b]] = False

    def close_connection(self, conn):
        """Forget a connection: drop its pending requests and in-flight marks."""
        with self._cond:
            self._closed_conns.add(conn)
            kept = collections.deque(ch for ch in self._pending if ch.conn != conn)
            removed = sum(len(ch) for ch in self._pending if ch.conn == conn)
            self.dropped += removed
            self._count -= removed
            self._pending = kept
            self._inflight.pop(conn, None)

    def shutdown(self):
        with self._cond:
            self._shutdown = True
            self._cond.notify_all()
