"""Recurrent Q-learning math: value rescaling, n-step double-Q targets,
sequence priorities, burn-in and the per-stream epsilon schedule."""

from __future__ import annotations

import dataclasses

import numpy as np

from .nn import Network, RecurrentState


@dataclasses.dataclass(frozen=True)
class QConfig:
    discount: float = 0.997
    n_steps: int = 5
    burn_in: int = 40
    sequence_length: int = 120
    target_update_interval: int = 2500
    priority_eta: float = 0.9
    priority_exponent: float = 0.9
    importance_exponent: float = 0.6
    rescale_epsilon: float = 1e-3
    replay_ratio: float = 0.75
    eval_epsilon: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if self.burn_in >= self.sequence_length:
            raise ValueError("burn_in must be < sequence_length")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        for name in ("priority_eta", "priority_exponent", "importance_exponent"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def rescale(x, eps: float = 1e-3):
    """h(x) = sign(x)(sqrt(|x| + 1) - 1) + eps*x"""
    x = np.asarray(x, np.float64)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + eps * x


def rescale_inverse(y, eps: float = 1e-3):
    y = np.asarray(y, np.float64)
    a = (np.sqrt(1.0 + 4.0 * eps * (np.abs(y) + 1.0 + eps)) - 1.0) / (2.0 * eps)
    return np.sign(y) * (a * a - 1.0)


def epsilon_for_actor(i: int, n: int) -> float:
    """Exploration epsilon of stream ``i`` out of ``n``: 0.4 ** (1 + 7i/(n-1))."""
    if n == 1:
        return 0.4
    if n < 1 or not 0 <= i < n:
        raise ValueError(f"need 0 <= i < n, got i={i}, n={n}")
    return 0.4 ** (1.0 + 7.0 * i / (n - 1))


def sequence_priority(td_errors, eta: float = 0.9) -> float:
    d = np.asarray(td_errors, np.float64).ravel()
    if d.size == 0:
        raise ValueError("empty TD-error list")
    if np.any(d < 0):
        raise ValueError("TD errors must be absolute values")
    return float(eta * d.max() + (1.0 - eta) * d.mean())


def nstep_double_q_targets(rewards, dones, q_online, q_target, valid, cfg: QConfig):
    """Rescaled n-step double-Q targets for each transition of a sequence batch.

    Layout (time-major, [L, B]): entry k holds the observation seen at k,
    ``rewards[k]``/``dones[k]`` describe the transition that *led into* k
    (a done at k means entry k is already the next episode's first step).
    Transition t therefore earns ``rewards[t+1]`` and terminates when
    ``dones[t+1]``.  The sum stops at the first termination (no bootstrap
    then) and at the last valid entry (bootstrap from there, shorter n).

    Returns (targets [L-1, B], has_target [L-1, B]).
    """
    rewards = np.asarray(rewards, np.float64)
    dones = np.asarray(dones, bool)
    valid = np.asarray(valid, bool)
    q_online = np.asarray(q_online, np.float64)
    q_target = np.asarray(q_target, np.float64)
    L = rewards.shape[0]
    eps = cfg.rescale_epsilon
    gamma = cfg.discount

    a_star = q_online.argmax(-1)
    boot_q = np.take_along_axis(q_target, a_star[..., None], -1)[..., 0]
    boot_v = rescale_inverse(boot_q, eps)

    targets = np.zeros((L - 1,) + rewards.shape[1:])
    has_target = np.zeros((L - 1,) + rewards.shape[1:], bool)
    for t in range(L - 1):
        ret = np.zeros(rewards.shape[1:])
        alive = valid[t] & valid[t + 1]
        has_target[t] = alive
        discount = np.ones(rewards.shape[1:])
        boot_at = np.full(rewards.shape[1:], -1)
        for k in range(cfg.n_steps):
            j = t + 1 + k
            if j >= L:
                break
            step_ok = alive & valid[j]
            ret += np.where(step_ok, discount * rewards[j], 0.0)
            discount = np.where(step_ok, discount * gamma, discount)
            ended = step_ok & dones[j]
            boot_at = np.where(step_ok & ~dones[j], j, boot_at)
            # the bootstrap index is the furthest valid, non-terminal entry reached
            alive = step_ok & ~dones[j]
            boot_at = np.where(ended, -1, boot_at)
            if not alive.any():
                break
        idx = np.maximum(boot_at, 0)
        bv = np.take_along_axis(boot_v, idx[None], 0)[0] if boot_v.ndim > 1 else boot_v[idx]
        ret += np.where(boot_at >= 0, discount * bv, 0.0)
        targets[t] = rescale(ret, eps)
    return targets, has_target


def burn_in_unroll(net: Network, params, obs, prev_action, prev_reward, reset,
                   state: RecurrentState, burn_in: int) -> RecurrentState:
    """Run the first ``burn_in`` entries without a tape and return the
    state entering the trained part of the sequence."""
    if state is None:
        raise ValueError("sequence has no stored recurrent state")
    if burn_in == 0:
        return state
    if np.shape(obs)[0] < burn_in + 1:
        raise ValueError("sequence shorter than burn_in + 1")
    out, _ = net.unroll(params, obs[:burn_in], prev_action[:burn_in],
                        prev_reward[:burn_in], reset[:burn_in], state, keep_tape=False)
    return out.state


@dataclasses.dataclass
class QLoss:
    total: float
    d_q: np.ndarray  # [L, B, A]
    abs_td: np.ndarray  # [L-1, B]
    trained: np.ndarray  # [L-1, B] mask of transitions in the loss
    targets: np.ndarray


def q_sequence_loss(q_online, q_target, actions, rewards, dones, valid, burn_in,
                    weights, cfg: QConfig) -> QLoss:
    """IS-weighted mean squared TD error over the trained (post burn-in) steps.

    ``burn_in`` is per sequence ([B]); ``weights`` are importance weights [B].
    """
    q_online = np.asarray(q_online, np.float64)
    L, B, A = q_online.shape
    targets, has_target = nstep_double_q_targets(rewards, dones, q_online, q_target, valid, cfg)
    steps = np.arange(L - 1)[:, None]
    trained = has_target & (steps >= np.asarray(burn_in)[None, :])
    actions = np.asarray(actions)
    q_sa = np.take_along_axis(q_online[:-1], actions[:-1, :, None], -1)[..., 0]
    td = targets - q_sa
    count = max(int(trained.sum()), 1)
    w = np.asarray(weights, np.float64)[None, :]
    loss = float(np.sum(w * td * td * trained)) / count
    d_q = np.zeros_like(q_online)
    g = -2.0 * w * td * trained / count
    np.put_along_axis(d_q[:-1], actions[:-1, :, None], g[..., None], -1)
    return QLoss(total=loss, d_q=d_q, abs_td=np.abs(td) * trained, trained=trained,
                 targets=targets)
