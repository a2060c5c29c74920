"""Deterministic toy environments with exact oracles.

All observations are flat float32 vectors with values in [0, 1] and
rewards lie in [-1, 1].
"""

from __future__ import annotations

import dataclasses

import numpy as np

ENV_KINDS = ("catch", "chain", "grid")


@dataclasses.dataclass(frozen=True)
class EnvSpec:
    kind: str = "catch"
    width: int = 5  # catch columns / grid side
    height: int = 10  # catch rows
    length: int = 5  # chain states
    cap: int = 0  # 0 -> kind default
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")

    @property
    def obs_dim(self) -> int:
        if self.kind == "catch":
            return 2 * self.width * self.height
        if self.kind == "chain":
            return self.length
        return self.width * self.width

    @property
    def num_actions(self) -> int:
        return {"catch": 3, "chain": 2, "grid": 4}[self.kind]

    @property
    def episode_cap(self) -> int:
        if self.cap:
            return self.cap
        if self.kind == "catch":
            return self.height - 1
        if self.kind == "chain":
            return 2 * self.length
        return 50


class InvalidAction(ValueError):
    pass


class Catch:
    """Ball falls one row per step from a random column; the paddle on the
    bottom row moves left/stay/right.  +1 for a catch, -1 for a miss."""

    def __init__(self, width: int = 5, height: int = 10, seed: int = 0):
        self.width = width
        self.height = height
        self.num_actions = 3
        self.obs_dim = 2 * width * height
        self._rng = np.random.default_rng(seed)
        self.ball_row = self.ball_col = self.paddle = 0
        self.steps = 0
        self.truncated = False  # catch always ends naturally

    def reset(self, ball_col=None) -> np.ndarray:
        self.ball_row = 0
        self.ball_col = int(self._rng.integers(self.width)) if ball_col is None else ball_col
        self.paddle = self.width // 2
        self.steps = 0
        return self.observation()

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim, np.float32)
        obs[self.ball_row * self.width + self.ball_col] = 1.0
        obs[(2 * self.height - 1) * self.width + self.paddle] = 1.0
        return obs

    def step(self, action: int):
        if not 0 <= action < 3:
            raise InvalidAction(action)
        self.paddle = min(max(self.paddle + action - 1, 0), self.width - 1)
        self.ball_row += 1
        self.steps += 1
        if self.ball_row == self.height - 1:
            reward = 1.0 if self.paddle == self.ball_col else -1.0
            return self.observation(), reward, True
        return self.observation(), 0.0, False


class TabularEnv:
    """Shared plumbing for the chain and grid MDPs."""

    num_states: int
    num_actions: int
    cap: int

    def __init__(self):
        self.state = 0
        self.steps = 0
        self.truncated = False  # last episode end came from the cap, not a terminal state

    @property
    def obs_dim(self) -> int:
        return self.num_states

    def start_state(self) -> int:
        return 0

    def transition(self, s: int, a: int) -> tuple[int, float, bool]:
        raise NotImplementedError

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.num_states, np.float32)
        obs[self.state] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self.state = self.start_state()
        self.steps = 0
        self.truncated = False
        return self.observation()

    def step(self, action: int):
        if not 0 <= action < self.num_actions:
            raise InvalidAction(action)
        self.state, reward, terminal = self.transition(self.state, action)
        self.steps += 1
        self.truncated = not terminal and self.steps >= self.cap
        return self.observation(), reward, terminal or self.truncated

    def terminal_states(self) -> set[int]:
        return set()


class Chain(TabularEnv):
    """States 0..N-1, actions left/right, reward 1 on reaching N-1."""

    def __init__(self, length: int = 5, cap: int = 0):
        super().__init__()
        self.num_states = length
        self.num_actions = 2
        self.cap = cap or 2 * length

    def transition(self, s, a):
        s2 = max(s - 1, 0) if a == 0 else min(s + 1, self.num_states - 1)
        if s2 == self.num_states - 1:
            return s2, 1.0, True
        return s2, 0.0, False

    def terminal_states(self):
        return {self.num_states - 1}


class Grid(TabularEnv):
    """5x5 grid from the top-left corner to the goal in the opposite corner."""

    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right

    def __init__(self, side: int = 5, cap: int = 50, goal=None):
        super().__init__()
        self.side = side
        self.num_states = side * side
        self.num_actions = 4
        self.cap = cap
        self.goal = goal if goal is not None else (side - 1, side - 1)

    def transition(self, s, a):
        r, c = divmod(s, self.side)
        dr, dc = self.MOVES[a]
        r = min(max(r + dr, 0), self.side - 1)
        c = min(max(c + dc, 0), self.side - 1)
        s2 = r * self.side + c
        if (r, c) == tuple(self.goal):
            return s2, 1.0, True
        return s2, 0.0, False

    def terminal_states(self):
        return {self.goal[0] * self.side + self.goal[1]}


def make_env(spec: EnvSpec, seed=None):
    seed = spec.seed if seed is None else seed
    if spec.kind == "catch":
        return Catch(spec.width, spec.height, seed)
    if spec.kind == "chain":
        return Chain(spec.length, spec.cap)
    return Grid(spec.width, spec.cap or 50)


# done byte values, mirrored from the wire protocol
_DONE_TERMINAL, _DONE_TRUNCATED = 1, 2


class VectorEnv:
    """A row of environments stepped together; finished ones reset at once.

    ``step`` returns the observation to send next (the fresh reset
    observation for environments that just finished), the reward and a
    done flag: 0 running, 1 terminal, 2 cut by the length cap.
    """

    def __init__(self, envs):
        self.envs = list(envs)
        self.num_envs = len(self.envs)
        self.obs_dim = self.envs[0].obs_dim

    def reset_all(self) -> np.ndarray:
        return np.stack([e.reset() for e in self.envs])

    def step(self, ids, actions):
        n = len(ids)
        obs = np.empty((n, self.obs_dim), np.float32)
        rewards = np.empty(n, np.float32)
        flags = np.zeros(n, np.uint8)
        for j, (i, a) in enumerate(zip(np.asarray(ids).tolist(), np.asarray(actions).tolist())):
            env = self.envs[i]
            o, r, d = env.step(a)
            if d:
                flags[j] = _DONE_TRUNCATED if env.truncated else _DONE_TERMINAL
                o = env.reset()
            obs[j], rewards[j] = o, r
        return obs, rewards, flags


class VectorCatch(VectorEnv):
    """Array implementation of :class:`Catch` for many copies.

    Given the same seeds it produces exactly the observations and rewards of
    the scalar environments.
    """

    def __init__(self, width: int, height: int, seeds):
        self.width, self.height = width, height
        self.num_envs = len(seeds)
        self.obs_dim = 2 * width * height
        self._rngs = [np.random.default_rng(s) for s in seeds]
        self.ball_row = np.zeros(self.num_envs, np.int64)
        self.ball_col = np.zeros(self.num_envs, np.int64)
        self.paddle = np.zeros(self.num_envs, np.int64)
        self._paddle_base = (2 * height - 1) * width

    def _reset(self, ids):
        for i in ids.tolist():
            self.ball_col[i] = self._rngs[i].integers(self.width)
        self.ball_row[ids] = 0
        self.paddle[ids] = self.width // 2

    def observe(self, ids) -> np.ndarray:
        obs = np.zeros((len(ids), self.obs_dim), np.float32)
        rows = np.arange(len(ids))
        obs[rows, self.ball_row[ids] * self.width + self.ball_col[ids]] = 1.0
        obs[rows, self._paddle_base + self.paddle[ids]] = 1.0
        return obs

    def reset_all(self) -> np.ndarray:
        ids = np.arange(self.num_envs)
        self._reset(ids)
        return self.observe(ids)

    def step(self, ids, actions):
        ids = np.asarray(ids, np.int64)
        actions = np.asarray(actions, np.int64)
        if actions.size and (actions.min() < 0 or actions.max() > 2):
            raise InvalidAction(actions[(actions < 0) | (actions > 2)][0])
        paddle = np.clip(self.paddle[ids] + actions - 1, 0, self.width - 1)
        self.paddle[ids] = paddle
        row = self.ball_row[ids] + 1
        self.ball_row[ids] = row
        done = row == self.height - 1
        rewards = np.where(done, np.where(paddle == self.ball_col[ids], 1.0, -1.0), 0.0)
        if done.any():
            self._reset(ids[done])
        return self.observe(ids), rewards.astype(np.float32), done.astype(np.uint8)


def make_vector_env(spec: EnvSpec, seeds) -> VectorEnv:
    if spec.kind == "catch":
        return VectorCatch(spec.width, spec.height, seeds)
    return VectorEnv(make_env(spec, seed=s) for s in seeds)


def oracle_q(spec_or_env, gamma: float, tolerance: float = 1e-10,
             max_iters: int = 100_000) -> np.ndarray:
    """Value iteration to a sup-norm fixed point.  Returns Q[state, action].

    The episode cap is ignored: the oracle describes the untimed MDP.
    """
    env = make_env(spec_or_env) if isinstance(spec_or_env, EnvSpec) else spec_or_env
    if not isinstance(env, TabularEnv):
        raise ValueError("oracle_q needs a tabular environment (chain or grid)")
    S, A = env.num_states, env.num_actions
    terminal = env.terminal_states()
    nxt = np.zeros((S, A), np.int64)
    rew = np.zeros((S, A))
    end = np.zeros((S, A), bool)
    for s in range(S):
        for a in range(A):
            s2, r, t = env.transition(s, a)
            nxt[s, a], rew[s, a], end[s, a] = s2, r, t
    q = np.zeros((S, A))
    for _ in range(max_iters):
        v = q.max(axis=1)
        new = rew + gamma * np.where(end, 0.0, v[nxt])
        new[list(terminal)] = 0.0
        delta = np.abs(new - q).max()
        q = new
        if delta <= tolerance:
            break
    return q
