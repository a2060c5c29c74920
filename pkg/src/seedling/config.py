"""Run configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Optional

from .envs import EnvSpec
from .nn import DUELING_Q, POLICY_VALUE, NetworkSpec
from .qlearn import QConfig
from .vtrace import VTraceConfig

ALGOS = ("vtrace", "r2d2")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    algo: str = "vtrace"
    env: str = "catch"
    env_width: int = 5
    env_height: int = 10
    env_length: int = 5
    seed: int = 0

    listen: str = "127.0.0.1:0"
    total_frames: int = 0  # 0 = run until stopped
    inference_batch_size: int = 32
    batch_timeout_ms: float = 1.0
    inference_workers: int = 2
    prefetch_threads: int = 2
    metrics_interval: float = 1.0
    metrics_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    snapshot_retention: bool = False
    bench_mode: bool = False  # serve inference only: no trajectories, no training
    eval_epsilon_only: bool = False

    # network
    mlp_hidden_sizes: tuple = (64,)
    lstm_units: int = 64
    dueling_hidden_units: int = 64

    # optimisation (shared)
    learning_rate: float = 1e-3
    adam_epsilon: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    gradient_norm_clipping: Optional[float] = None  # None -> 40 (vtrace) / 80 (r2d2)
    discount: Optional[float] = None  # None -> 0.99 (vtrace) / 0.997 (r2d2)
    training_batch_size: int = 8

    # V-trace
    unroll_length: int = 32
    entropy_coefficient: float = 0.01
    value_function_coefficient: float = 0.5
    vtrace_lambda: float = 1.0
    rho_bar: float = 1.0
    c_bar: float = 1.0
    queue_capacity: int = 0  # 0 -> 4 x training batch size
    queue_drop_oldest: bool = False

    # R2D2
    sequence_length: int = 120
    burn_in: int = 40
    sequence_overlap: Optional[int] = None  # None -> burn_in
    replay_buffer_size: int = 2000
    minimum_replay_buffer_size: int = 100
    priority_exponent: float = 0.9
    importance_sampling_exponent: float = 0.6
    target_network_update_interval: int = 2500
    n_steps: int = 5
    sequence_priority_eta: float = 0.9
    value_function_rescaling_epsilon: float = 1e-3
    replay_ratio: float = 0.75
    eval_epsilon: float = 1e-3
    epsilon_streams: int = 16

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}")
        if self.discount is None:
            self.discount = 0.99 if self.algo == "vtrace" else 0.997
        if self.gradient_norm_clipping is None:
            self.gradient_norm_clipping = 40.0 if self.algo == "vtrace" else 80.0
        if self.sequence_overlap is None:
            self.sequence_overlap = self.burn_in
        if isinstance(self.mlp_hidden_sizes, (int, str)):
            self.mlp_hidden_sizes = _parse_sizes(str(self.mlp_hidden_sizes))
        self.mlp_hidden_sizes = tuple(int(x) for x in self.mlp_hidden_sizes)
        self.validate()

    def validate(self):
        if self.burn_in >= self.sequence_length:
            raise ConfigError("burn_in must be < sequence_length")
        if not 0 <= self.sequence_overlap < self.sequence_length - 1:
            raise ConfigError("sequence_overlap must be in [0, sequence_length - 1)")
        if self.unroll_length < 1 or self.training_batch_size < 1:
            raise ConfigError("unroll_length and training_batch_size must be >= 1")
        if self.inference_batch_size < 1:
            raise ConfigError("inference_batch_size must be >= 1")
        if self.replay_buffer_size < self.minimum_replay_buffer_size:
            raise ConfigError("replay_buffer_size must be >= minimum_replay_buffer_size")
        if self.inference_workers < 1 or self.prefetch_threads < 1:
            raise ConfigError("need at least one inference worker and one prefetcher")
        self.vtrace_config()
        if self.algo == "r2d2":
            self.q_config()
        self.env_spec()

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    def env_spec(self) -> EnvSpec:
        return EnvSpec(kind=self.env, width=self.env_width, height=self.env_height,
                       length=self.env_length, seed=self.seed)

    def network_spec(self) -> NetworkSpec:
        env = self.env_spec()
        return NetworkSpec(
            input_dim=env.obs_dim, num_actions=env.num_actions,
            mlp_hidden_sizes=self.mlp_hidden_sizes, lstm_units=self.lstm_units,
            head=POLICY_VALUE if self.algo == "vtrace" else DUELING_Q,
            dueling_hidden_units=self.dueling_hidden_units)

    def vtrace_config(self) -> VTraceConfig:
        return VTraceConfig(
            discount=self.discount, lambda_=self.vtrace_lambda, rho_bar=self.rho_bar,
            c_bar=self.c_bar, entropy_coefficient=self.entropy_coefficient,
            value_function_coefficient=self.value_function_coefficient,
            learning_rate=self.learning_rate)

    def q_config(self) -> QConfig:
        return QConfig(
            discount=self.discount, n_steps=self.n_steps, burn_in=self.burn_in,
            sequence_length=self.sequence_length,
            target_update_interval=self.target_network_update_interval,
            priority_eta=self.sequence_priority_eta,
            priority_exponent=self.priority_exponent,
            importance_exponent=self.importance_sampling_exponent,
            rescale_epsilon=self.value_function_rescaling_epsilon,
            replay_ratio=self.replay_ratio, eval_epsilon=self.eval_epsilon)

    @property
    def effective_queue_capacity(self) -> int:
        return self.queue_capacity or 4 * self.training_batch_size

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


def _parse_sizes(text: str) -> tuple:
    text = text.strip().strip("[]()")
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _coerce(name: str, hint, raw: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if raw.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {raw!r}")
    if hint is tuple:
        return _parse_sizes(raw)
    try:
        return hint(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config_text(text: str) -> dict:
    hints = typing.get_type_hints(RunConfig)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, hints[key], value)
    return out


def load_config(path, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)
