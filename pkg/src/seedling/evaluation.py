"""Offline policy evaluation against a parameter snapshot."""

from __future__ import annotations

import numpy as np

from .envs import EnvSpec, TabularEnv, make_env
from .nn import DUELING_Q, Network, ParamSnapshot
from .qlearn import rescale_inverse


def evaluate(net: Network, snap: ParamSnapshot, env_spec: EnvSpec, episodes: int = 100,
             epsilon: float = 0.0, seed: int = 1234) -> np.ndarray:
    """Returns of ``episodes`` episodes run in parallel, one env each.

    Q networks act greedily (with ``epsilon`` exploration); policy networks
    take the most likely action.
    """
    rng = np.random.default_rng(seed)
    envs = [make_env(env_spec, seed=seed + i) for i in range(episodes)]
    obs = np.stack([e.reset() for e in envs])
    state = net.initial_state(episodes)
    prev_a = np.zeros(episodes, np.int64)
    prev_r = np.zeros(episodes, np.float32)
    reset = np.ones(episodes, bool)
    returns = np.zeros(episodes)
    live = np.ones(episodes, bool)
    while live.any():
        head, _, state = net.forward(snap.params, obs, state, prev_a, prev_r, reset)
        actions = np.argmax(head, axis=1)
        if epsilon:
            explore = rng.random(episodes) < epsilon
            actions = np.where(explore, rng.integers(0, head.shape[1], episodes), actions)
        reset = np.zeros(episodes, bool)
        for i in np.nonzero(live)[0]:
            o, r, d = envs[i].step(int(actions[i]))
            obs[i], prev_r[i] = o, r
            returns[i] += r
            live[i] = not d
        prev_a = actions
    return returns


def greedy_path_q(net: Network, snap: ParamSnapshot, env: TabularEnv, gamma_eps: float = 1e-3,
                  max_steps: int = 1000) -> tuple[list[int], np.ndarray]:
    """Follow the greedy policy from reset; return visited states and their Q-values.

    Q-values are mapped back through the inverse value rescaling so they are
    comparable with the value-iteration oracle.
    """
    if net.spec.head != DUELING_Q:
        raise ValueError("greedy_path_q needs a Q network")
    obs = env.reset()[None]
    state = net.initial_state(1)
    prev_a = np.zeros(1, np.int64)
    prev_r = np.zeros(1, np.float32)
    reset = np.ones(1, bool)
    states, qs = [], []
    for _ in range(max_steps):
        head, _, state = net.forward(snap.params, obs, state, prev_a, prev_r, reset)
        states.append(env.state)
        qs.append(rescale_inverse(head[0].astype(np.float64), gamma_eps))
        a = int(np.argmax(head[0]))
        o, r, d = env.step(a)
        if d:
            break
        obs, prev_a, prev_r, reset = o[None], np.array([a]), np.array([r], np.float32), \
            np.zeros(1, bool)
    return states, np.array(qs)
