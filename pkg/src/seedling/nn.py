"""Small numpy neural-network kernel.

The network is an MLP torso, an optional LSTM core fed with the torso
features plus the one-hot previous action and previous reward, and either a
policy/value head or a dueling Q head.  Gradients are computed by hand
(backpropagation through time over whole unrolls).

Parameters travel as immutable, versioned :class:`ParamSnapshot` objects.
Inference only ever reads snapshots; the trainer builds a new one per update
and publishes it through :class:`SnapshotStore`.
"""

from __future__ import annotations

import dataclasses
import struct
import threading
import types
from collections.abc import Mapping
from typing import Optional

import numpy as np

DTYPE = np.float32

POLICY_VALUE = "policy_value"
DUELING_Q = "dueling_q"


class ConfigurationError(ValueError):
    """Shapes or sizes that do not fit the network spec."""


class NumericError(FloatingPointError):
    """A NaN/Inf showed up in a forward or backward pass."""

    def __init__(self, layer: str, detail: str = "non-finite values"):
        super().__init__(f"{detail} in layer '{layer}'")
        self.layer = layer


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    num_actions: int
    mlp_hidden_sizes: tuple[int, ...] = (64,)
    lstm_units: int = 64
    head: str = POLICY_VALUE
    dueling_hidden_units: int = 64

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden_sizes", tuple(self.mlp_hidden_sizes))
        if self.num_actions < 2:
            raise ConfigurationError("num_actions must be >= 2")
        if self.input_dim < 1:
            raise ConfigurationError("input_dim must be >= 1")
        if any(h < 1 for h in self.mlp_hidden_sizes):
            raise ConfigurationError("mlp hidden sizes must be >= 1")
        if self.lstm_units < 0:
            raise ConfigurationError("lstm_units must be >= 0")
        if self.head not in (POLICY_VALUE, DUELING_Q):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.head == DUELING_Q and self.dueling_hidden_units < 1:
            raise ConfigurationError("dueling_hidden_units must be >= 1")

    @property
    def torso_dim(self) -> int:
        return self.mlp_hidden_sizes[-1] if self.mlp_hidden_sizes else self.input_dim

    @property
    def core_dim(self) -> int:
        return self.lstm_units if self.lstm_units else self.torso_dim

    @property
    def lstm_input_dim(self) -> int:
        return self.torso_dim + self.num_actions + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.input_dim
        for i, h in enumerate(self.mlp_hidden_sizes):
            shapes[f"mlp{i}/w"] = (fan_in, h)
            shapes[f"mlp{i}/b"] = (h,)
            fan_in = h
        if self.lstm_units:
            u = self.lstm_units
            shapes["lstm/w"] = (self.lstm_input_dim + u, 4 * u)
            shapes["lstm/b"] = (4 * u,)
        d = self.core_dim
        if self.head == POLICY_VALUE:
            shapes["policy/w"] = (d, self.num_actions)
            shapes["policy/b"] = (self.num_actions,)
            shapes["value/w"] = (d, 1)
            shapes["value/b"] = (1,)
        else:
            k = self.dueling_hidden_units
            shapes["adv_hidden/w"] = (d, k)
            shapes["adv_hidden/b"] = (k,)
            shapes["adv/w"] = (k, self.num_actions)
            shapes["adv/b"] = (self.num_actions,)
            shapes["val_hidden/w"] = (d, k)
            shapes["val_hidden/b"] = (k,)
            shapes["val/w"] = (k, 1)
            shapes["val/b"] = (1,)
        return shapes

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


@dataclasses.dataclass(frozen=True, eq=False)
class ParamSnapshot:
    """Immutable, versioned set of named parameter tensors."""

    version: int
    params: Mapping[str, np.ndarray]

    @classmethod
    def create(cls, version: int, params: Mapping[str, np.ndarray]) -> "ParamSnapshot":
        frozen = {}
        for name, value in params.items():
            arr = np.array(value, dtype=DTYPE, copy=True)
            arr.flags.writeable = False
            frozen[name] = arr
        return cls(version=int(version), params=types.MappingProxyType(frozen))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def mutable_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def equal(self, other: "ParamSnapshot") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self.params)


@dataclasses.dataclass
class RecurrentState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, batch: int, units: int) -> "RecurrentState":
        return cls(np.zeros((batch, units), DTYPE), np.zeros((batch, units), DTYPE))

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.hidden.copy(), self.cell.copy())


@dataclasses.dataclass
class Outputs:
    """Network outputs for an unroll, all with leading [T, B] axes."""

    head: np.ndarray  # policy logits or Q-values, [T, B, A]
    value: Optional[np.ndarray]  # [T, B], policy/value head only
    state: RecurrentState  # state after the last step
    features: np.ndarray  # torso output fed to the core, [T, B, F]
    states: Optional[tuple[np.ndarray, np.ndarray]] = None  # per-step entering (h, c)


@dataclasses.dataclass
class Tape:
    obs: np.ndarray
    mlp_in: list
    mlp_pre: list
    keep: np.ndarray
    lstm: Optional[dict]
    core: np.ndarray
    head_cache: dict
    stop_grad: Optional[np.ndarray]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _check_finite(layer: str, *arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(layer)


class Network:
    """Stateless forward/backward functions for a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self._shapes = spec.param_shapes()

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        """Glorot-uniform weights, zero biases (LSTM forget-gate bias 1)."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self._shapes.items():
            if name.endswith("/w"):
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape).astype(DTYPE)
            else:
                params[name] = np.zeros(shape, DTYPE)
        if self.spec.lstm_units:
            u = self.spec.lstm_units
            params["lstm/b"][u:2 * u] = 1.0
        return params

    def zero_params(self) -> dict[str, np.ndarray]:
        return {k: np.zeros(s, DTYPE) for k, s in self._shapes.items()}

    def initial_state(self, batch: int) -> RecurrentState:
        return RecurrentState.zeros(batch, max(self.spec.lstm_units, 1))

    def check_params(self, params: Mapping[str, np.ndarray]):
        if set(params) != set(self._shapes):
            missing = set(self._shapes) ^ set(params)
            raise ConfigurationError(f"parameter set mismatch: {sorted(missing)}")
        for k, s in self._shapes.items():
            if tuple(params[k].shape) != s:
                raise ConfigurationError(f"{k}: expected shape {s}, got {params[k].shape}")

    # -- forward ---------------------------------------------------------

    def forward(self, params, obs, prev_state, prev_action, prev_reward, reset=None):
        """One inference step for a batch.

        ``obs`` is [B, input_dim]; ``prev_action`` holds action indices;
        ``reset`` marks entries whose state (and previous action/reward)
        must be zeroed first because a new episode begins there.
        Returns (head [B, A], value [B] or None, next_state).

        This is the serving path: same math as :meth:`unroll` with T=1 but
        without tapes, and with a single finiteness check at the end.
        """
        spec = self.spec
        x = np.asarray(obs)
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ConfigurationError(f"obs must be [B, {spec.input_dim}], got {x.shape}")
        b = x.shape[0]
        dtype = params["policy/w" if spec.head == POLICY_VALUE else "adv/w"].dtype
        x = x.astype(dtype, copy=False)
        reset = np.zeros(b, bool) if reset is None else np.asarray(reset, bool)
        for i in range(len(spec.mlp_hidden_sizes)):
            x = np.maximum(x @ params[f"mlp{i}/w"] + params[f"mlp{i}/b"], 0)
        state = prev_state
        if spec.lstm_units:
            U = spec.lstm_units
            F = spec.torso_dim
            A = spec.num_actions
            if prev_state.hidden.shape != (b, U):
                raise ConfigurationError(
                    f"recurrent state must be [{b}, {U}], got {prev_state.hidden.shape}")
            W = params["lstm/w"]
            h = prev_state.hidden.astype(dtype, copy=False)
            c = prev_state.cell.astype(dtype, copy=False)
            act_rows = W[F:F + A][np.asarray(prev_action)]
            rew = np.asarray(prev_reward, dtype)[:, None]
            if reset.any():
                k = (~reset).astype(dtype)[:, None]
                h, c, act_rows, rew = h * k, c * k, act_rows * k, rew * k
            z = x @ W[:F] + h @ W[F + A + 1:] + act_rows + rew * W[F + A] + params["lstm/b"]
            gates = 1.0 / (1.0 + np.exp(-z))
            c = gates[:, U:2 * U] * c + gates[:, :U] * np.tanh(z[:, 2 * U:3 * U])
            h = gates[:, 3 * U:] * np.tanh(c)
            x = h
            state = RecurrentState(h, c)
        if spec.head == POLICY_VALUE:
            head = x @ params["policy/w"] + params["policy/b"]
            value = (x @ params["value/w"] + params["value/b"])[:, 0]
        else:
            adv = np.maximum(x @ params["adv_hidden/w"] + params["adv_hidden/b"], 0) \
                @ params["adv/w"] + params["adv/b"]
            val = np.maximum(x @ params["val_hidden/w"] + params["val_hidden/b"], 0) \
                @ params["val/w"] + params["val/b"]
            head = val + adv - adv.mean(axis=1, keepdims=True)
            value = None
        if not (np.isfinite(head).all() and np.isfinite(state.cell).all()):
            # rerun the checked path so the error names the offending layer
            self._forward_checked(params, obs, prev_state, prev_action, prev_reward, reset)
            raise NumericError("output")
        return head, value, state

    def _forward_checked(self, params, obs, prev_state, prev_action, prev_reward, reset):
        out, _ = self.unroll(
            params, np.asarray(obs)[None], np.asarray(prev_action)[None],
            np.asarray(prev_reward)[None], np.asarray(reset)[None], prev_state,
            keep_tape=False)
        value = None if out.value is None else out.value[0]
        return out.head[0], value, out.state

    def unroll(self, params, obs, prev_action, prev_reward, reset, state,
               stop_grad=None, keep_tape=True, keep_states=False):
        """Run the network over [T, B] inputs starting from ``state``.

        ``stop_grad[t, b]`` cuts the gradient flowing into the state that
        enters step ``t`` (used for burn-in).
        """
        spec = self.spec
        obs = np.asarray(obs)
        if obs.ndim != 3 or obs.shape[2] != spec.input_dim:
            raise ConfigurationError(
                f"obs must be [T, B, {spec.input_dim}], got {obs.shape}")
        T, B = obs.shape[:2]
        dtype = params[next(iter(params))].dtype
        prev_action = np.asarray(prev_action).astype(np.int64)
        reset = np.asarray(reset, dtype=bool)
        if prev_action.shape != (T, B) or reset.shape != (T, B):
            raise ConfigurationError("prev_action/reset must be [T, B]")
        prev_reward = np.asarray(prev_reward, dtype=dtype).reshape(T, B)
        if np.any((prev_action < 0) | (prev_action >= spec.num_actions)):
            raise ConfigurationError("prev_action out of range")

        x = obs.reshape(T * B, -1).astype(dtype, copy=False)
        mlp_in, mlp_pre = [], []
        for i in range(len(spec.mlp_hidden_sizes)):
            mlp_in.append(x)
            pre = x @ params[f"mlp{i}/w"] + params[f"mlp{i}/b"]
            mlp_pre.append(pre)
            x = np.maximum(pre, 0)
            _check_finite(f"mlp{i}", x)
        features = x.reshape(T, B, -1)
        keep = (~reset).astype(dtype)

        lstm_cache = None
        all_states = None
        if spec.lstm_units:
            core, new_state, lstm_cache, all_states = self._lstm_forward(
                params, features, prev_action, prev_reward, keep, state, dtype,
                keep_tape or keep_states)
        else:
            core = features
            new_state = state
        flat = core.reshape(T * B, -1)
        head, value, head_cache = self._head_forward(params, flat)
        A = spec.num_actions
        out = Outputs(
            head=head.reshape(T, B, A),
            value=None if value is None else value.reshape(T, B),
            state=new_state,
            features=features,
            states=all_states if keep_states else None,
        )
        if not keep_tape:
            return out, None
        tape = Tape(obs=obs, mlp_in=mlp_in, mlp_pre=mlp_pre, keep=keep,
                    lstm=lstm_cache, core=flat, head_cache=head_cache,
                    stop_grad=None if stop_grad is None else np.asarray(stop_grad, bool))
        return out, tape

    def _lstm_forward(self, params, features, prev_action, prev_reward, keep,
                      state, dtype, keep_cache):
        spec = self.spec
        T, B, F = features.shape
        U = spec.lstm_units
        A = spec.num_actions
        if state.hidden.shape != (B, U) or state.cell.shape != (B, U):
            raise ConfigurationError(
                f"recurrent state must be [{B}, {U}], got {state.hidden.shape}")
        W = params["lstm/w"]
        bias = params["lstm/b"]
        din = spec.lstm_input_dim
        onehot = np.zeros((T, B, A), dtype)
        np.put_along_axis(onehot, prev_action[..., None], 1.0, axis=2)
        xin = np.concatenate(
            [features, onehot * keep[..., None], (prev_reward * keep)[..., None]], axis=2)
        # Input projection for all steps at once; only the recurrent part loops.
        zx = xin.reshape(T * B, din) @ W[:din] + bias
        zx = zx.reshape(T, B, 4 * U)
        Wh = W[din:]
        h = state.hidden.astype(dtype, copy=False)
        c = state.cell.astype(dtype, copy=False)
        hs = np.empty((T, B, U), dtype)
        if keep_cache:
            h_in = np.empty((T, B, U), dtype)
            c_in = np.empty((T, B, U), dtype)
            gates = np.empty((T, B, 4 * U), dtype)
            cs = np.empty((T, B, U), dtype)
        for t in range(T):
            k = keep[t][:, None]
            h = h * k
            c = c * k
            z = zx[t] + h @ Wh
            g = np.empty_like(z)
            g[:, :U] = _sigmoid(z[:, :U])
            g[:, U:2 * U] = _sigmoid(z[:, U:2 * U])
            g[:, 2 * U:3 * U] = np.tanh(z[:, 2 * U:3 * U])
            g[:, 3 * U:] = _sigmoid(z[:, 3 * U:])
            if keep_cache:
                h_in[t] = h
                c_in[t] = c
                gates[t] = g
            c = g[:, U:2 * U] * c + g[:, :U] * g[:, 2 * U:3 * U]
            h = g[:, 3 * U:] * np.tanh(c)
            if keep_cache:
                cs[t] = c
            hs[t] = h
        _check_finite("lstm", h, c)
        new_state = RecurrentState(h, c)
        if not keep_cache:
            return hs, new_state, None, None
        cache = dict(xin=xin, h_in=h_in, c_in=c_in, gates=gates, cs=cs)
        return hs, new_state, cache, (h_in, c_in)

    def _head_forward(self, params, x):
        spec = self.spec
        if spec.head == POLICY_VALUE:
            logits = x @ params["policy/w"] + params["policy/b"]
            value = (x @ params["value/w"] + params["value/b"])[:, 0]
            _check_finite("policy_value", logits, value)
            return logits, value, {"x": x}
        ah_pre = x @ params["adv_hidden/w"] + params["adv_hidden/b"]
        ah = np.maximum(ah_pre, 0)
        adv = ah @ params["adv/w"] + params["adv/b"]
        vh_pre = x @ params["val_hidden/w"] + params["val_hidden/b"]
        vh = np.maximum(vh_pre, 0)
        val = vh @ params["val/w"] + params["val/b"]
        q = val + adv - adv.mean(axis=1, keepdims=True)
        _check_finite("dueling_q", q)
        return q, None, {"x": x, "ah_pre": ah_pre, "ah": ah, "vh_pre": vh_pre, "vh": vh}

    # -- backward --------------------------------------------------------

    def backward(self, params, tape: Tape, d_head, d_value=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradients w.r.t. the outputs.

        ``d_head`` is [T, B, A]; ``d_value`` is [T, B] (policy/value head).
        Returns a dict ordered like the parameters.
        """
        if tape is None:
            raise ConfigurationError("backward needs a tape from unroll(keep_tape=True)")
        self.check_params(params)
        spec = self.spec
        T, B = tape.obs.shape[:2]
        dtype = tape.core.dtype
        d_head = np.asarray(d_head, dtype).reshape(T * B, spec.num_actions)
        grads = {k: None for k in self._shapes}
        x = tape.head_cache["x"]
        if spec.head == POLICY_VALUE:
            dv = np.zeros((T * B, 1), dtype) if d_value is None else \
                np.asarray(d_value, dtype).reshape(T * B, 1)
            grads["policy/w"] = x.T @ d_head
            grads["policy/b"] = d_head.sum(0)
            grads["value/w"] = x.T @ dv
            grads["value/b"] = dv.sum(0)
            dx = d_head @ params["policy/w"].T + dv @ params["value/w"].T
        else:
            hc = tape.head_cache
            d_adv = d_head - d_head.mean(axis=1, keepdims=True)
            d_val = d_head.sum(axis=1, keepdims=True)
            grads["adv/w"] = hc["ah"].T @ d_adv
            grads["adv/b"] = d_adv.sum(0)
            d_ah = (d_adv @ params["adv/w"].T) * (hc["ah_pre"] > 0)
            grads["adv_hidden/w"] = x.T @ d_ah
            grads["adv_hidden/b"] = d_ah.sum(0)
            grads["val/w"] = hc["vh"].T @ d_val
            grads["val/b"] = d_val.sum(0)
            d_vh = (d_val @ params["val/w"].T) * (hc["vh_pre"] > 0)
            grads["val_hidden/w"] = x.T @ d_vh
            grads["val_hidden/b"] = d_vh.sum(0)
            dx = d_ah @ params["adv_hidden/w"].T + d_vh @ params["val_hidden/w"].T

        if spec.lstm_units:
            d_feat = self._lstm_backward(params, tape, dx.reshape(T, B, -1), grads)
        else:
            d_feat = dx.reshape(T, B, -1)

        d = d_feat.reshape(T * B, -1)
        for i in reversed(range(len(spec.mlp_hidden_sizes))):
            d = d * (tape.mlp_pre[i] > 0)
            grads[f"mlp{i}/w"] = tape.mlp_in[i].T @ d
            grads[f"mlp{i}/b"] = d.sum(0)
            if i:
                d = d @ params[f"mlp{i}/w"].T
        for k, g in grads.items():
            _check_finite(k, g)
        return {k: np.asarray(g, dtype).reshape(self._shapes[k]) for k, g in grads.items()}

    def _lstm_backward(self, params, tape, dh_out, grads):
        spec = self.spec
        U = spec.lstm_units
        din = spec.lstm_input_dim
        cache = tape.lstm
        T, B = dh_out.shape[:2]
        W = params["lstm/w"]
        Wx, Wh = W[:din], W[din:]
        gates, cs, h_in, c_in = cache["gates"], cache["cs"], cache["h_in"], cache["c_in"]
        dz_all = np.empty((T, B, 4 * U), dh_out.dtype)
        dh_next = np.zeros((B, U), dh_out.dtype)
        dc_next = np.zeros((B, U), dh_out.dtype)
        for t in reversed(range(T)):
            g = gates[t]
            i_g, f_g, c_g, o_g = g[:, :U], g[:, U:2 * U], g[:, 2 * U:3 * U], g[:, 3 * U:]
            dh = dh_out[t] + dh_next
            tc = np.tanh(cs[t])
            dc = dc_next + dh * o_g * (1 - tc * tc)
            dz = dz_all[t]
            dz[:, :U] = dc * c_g * i_g * (1 - i_g)
            dz[:, U:2 * U] = dc * c_in[t] * f_g * (1 - f_g)
            dz[:, 2 * U:3 * U] = dc * i_g * (1 - c_g * c_g)
            dz[:, 3 * U:] = dh * tc * o_g * (1 - o_g)
            keep = tape.keep[t][:, None]
            if tape.stop_grad is not None:
                keep = keep * (~tape.stop_grad[t])[:, None]
            dh_next = (dz @ Wh.T) * keep
            dc_next = dc * f_g * keep
        dz_flat = dz_all.reshape(T * B, 4 * U)
        xin = cache["xin"].reshape(T * B, din)
        dW = np.empty_like(W)
        dW[:din] = xin.T @ dz_flat
        dW[din:] = h_in.reshape(T * B, U).T @ dz_flat
        grads["lstm/w"] = dW
        grads["lstm/b"] = dz_flat.sum(0)
        d_xin = dz_flat @ Wx.T
        return d_xin[:, :spec.torso_dim].reshape(T, B, -1)


def clip_global_norm(gradients, max_norm: float):
    """Scale all gradients by max_norm/g when their global L2 norm g exceeds it.

    Accepts a dict or a sequence of arrays and returns the same kind, plus
    the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    items = list(gradients.values()) if isinstance(gradients, Mapping) else list(gradients)
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in items)))
    if norm <= max_norm:
        return gradients, norm
    scale = max_norm / norm
    if isinstance(gradients, Mapping):
        return {k: (v * scale).astype(v.dtype) for k, v in gradients.items()}, norm
    return [(np.asarray(v) * scale).astype(np.asarray(v).dtype) for v in items], norm


class Adam:
    """Adam with bias correction; moments are owned here and start at zero."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-3):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, snapshot: ParamSnapshot, gradients: Mapping[str, np.ndarray]) -> ParamSnapshot:
        for name, g in gradients.items():
            if not np.isfinite(g).all():
                raise NumericError(name, "non-finite gradient; update rejected")
        if set(gradients) != set(snapshot.params):
            raise ConfigurationError("gradient names do not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        new = {}
        for name, p in snapshot.params.items():
            g = np.asarray(gradients[name], np.float64)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros(p.shape)
                self._v[name] = np.zeros(p.shape)
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[name] = (p - update).astype(DTYPE)
        return ParamSnapshot.create(snapshot.version + 1, new)


def adam_step(params: ParamSnapshot, gradients, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, optimizer: Optional[Adam] = None):
    """Functional entry point; pass ``optimizer`` to keep moments across calls."""
    opt = optimizer or Adam(lr, beta1, beta2, eps)
    return opt.step(params, gradients)


class SnapshotStore:
    """Single-writer publication point for parameter snapshots.

    Readers call :meth:`latest` and get one whole snapshot; the swap is a
    single reference assignment under a lock, so no reader sees a mix.
    With ``retain=True`` every published version is kept for audits.
    """

    def __init__(self, initial: ParamSnapshot, retain: bool = False):
        self._lock = threading.Lock()
        self._latest = initial
        self._retain = retain
        self._history: dict[int, ParamSnapshot] = {initial.version: initial} if retain else {}
        self._cond = threading.Condition(self._lock)

    def latest(self) -> ParamSnapshot:
        return self._latest

    def publish(self, snapshot: ParamSnapshot):
        with self._lock:
            if snapshot.version <= self._latest.version:
                raise ValueError(
                    f"version must increase: {snapshot.version} <= {self._latest.version}")
            self._latest = snapshot
            if self._retain:
                self._history[snapshot.version] = snapshot
            self._cond.notify_all()

    def get(self, version: int) -> ParamSnapshot:
        if version == self._latest.version:
            return self._latest
        try:
            return self._history[version]
        except KeyError:
            raise KeyError(f"version {version} not retained") from None

    @property
    def retained_versions(self) -> list[int]:
        return sorted(self._history)


CHECKPOINT_MAGIC = b"SEEDCKPT"


def save_checkpoint(path, snapshot: ParamSnapshot):
    """Write ``snapshot`` in the SEEDCKPT little-endian format."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", snapshot.version)]
    for name, arr in snapshot.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> ParamSnapshot:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a SEEDCKPT file")
    (version,) = struct.unpack_from("<I", data, 8)
    pos = 12
    params = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if pos + 4 * count > len(data):
            raise ValueError(f"truncated tensor {name!r}")
        params[name] = np.frombuffer(data, "<f4", count, pos).reshape(dims).astype(DTYPE)
        pos += 4 * count
    return ParamSnapshot.create(version, params)
