"""V-trace targets and the actor-critic loss built on them.

Arrays are time-major: leading axis T, any trailing batch axes.  Behavior
log-probabilities are per step, because the policy that acted can change
from one step to the next inside a single unroll.
"""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class VTraceConfig:
    discount: float = 0.99
    lambda_: float = 1.0
    rho_bar: float = 1.0
    c_bar: float = 1.0
    entropy_coefficient: float = 0.01
    value_function_coefficient: float = 0.5
    learning_rate: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not (self.rho_bar >= self.c_bar > 0.0):
            raise ValueError("need rho_bar >= c_bar > 0")


@dataclasses.dataclass
class VTraceInputs:
    behavior_log_probs: np.ndarray  # [T, ...]
    target_log_probs: np.ndarray  # [T, ...]
    rewards: np.ndarray  # [T, ...] reward for the transition leaving x_t
    dones: np.ndarray  # [T, ...] episode ended after step t
    values: np.ndarray  # [T, ...] V(x_t)
    bootstrap_value: np.ndarray  # [...] V(x_T)


@dataclasses.dataclass
class VTraceReturns:
    vs: np.ndarray
    pg_advantages: np.ndarray
    rhos: np.ndarray
    cs: np.ndarray


def vtrace_targets(inputs: VTraceInputs, cfg: VTraceConfig) -> VTraceReturns:
    """Backward recursion for the v_s targets and policy-gradient advantages.

    The results are plain arrays; callers treat them as constants.
    """
    f = np.float64
    log_rhos = np.asarray(inputs.target_log_probs, f) - np.asarray(inputs.behavior_log_probs, f)
    if log_rhos.ndim == 0 or log_rhos.shape[0] < 1:
        raise ValueError("need at least one step")
    if not np.isfinite(log_rhos).all():
        raise FloatingPointError("non-finite log-probability difference")
    ratios = np.exp(log_rhos)
    rhos = np.minimum(cfg.rho_bar, ratios)
    cs = cfg.lambda_ * np.minimum(cfg.c_bar, ratios)
    values = np.asarray(inputs.values, f)
    rewards = np.asarray(inputs.rewards, f)
    discounts = cfg.discount * (1.0 - np.asarray(inputs.dones, f))
    bootstrap = np.asarray(inputs.bootstrap_value, f)
    next_values = np.concatenate([values[1:], bootstrap[None]], axis=0)

    deltas = rhos * (rewards + discounts * next_values - values)
    T = values.shape[0]
    vs_minus_v = np.zeros_like(values)
    acc = np.zeros_like(bootstrap)
    for t in reversed(range(T)):
        acc = deltas[t] + discounts[t] * cs[t] * acc
        vs_minus_v[t] = acc
    vs = values + vs_minus_v
    next_vs = np.concatenate([vs[1:], bootstrap[None]], axis=0)
    pg_adv = rhos * (rewards + discounts * next_vs - values)
    return VTraceReturns(vs=vs, pg_advantages=pg_adv, rhos=rhos, cs=cs)


def log_softmax(logits):
    logits = np.asarray(logits, np.float64)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_log_probs(logits, actions):
    lp = log_softmax(logits)
    return np.take_along_axis(lp, np.asarray(actions)[..., None], axis=-1)[..., 0]


@dataclasses.dataclass
class VTraceLoss:
    total: float
    pg: float
    baseline: float
    entropy: float
    d_logits: np.ndarray
    d_values: np.ndarray


def vtrace_loss(logits, values, actions, vs, pg_advantages, cfg: VTraceConfig,
                mask=None, normalizer: float = 1.0) -> VTraceLoss:
    """Loss and its gradients w.r.t. ``logits`` [T, ..., A] and ``values`` [T, ...].

    loss = sum_t -log pi(a_t) * adv_t
         + 0.5 * vf_coef * sum_t (vs_t - V_t)^2
         - ent_coef * sum_t H(pi_t)

    everything divided by ``normalizer`` (the batch size when training).
    ``vs`` and ``pg_advantages`` are constants.
    """
    logits = np.asarray(logits, np.float64)
    values = np.asarray(values, np.float64)
    if logits.shape[:-1] != values.shape or values.shape != np.shape(vs):
        raise ValueError(
            f"shape mismatch: logits {logits.shape}, values {values.shape}, vs {np.shape(vs)}")
    if np.shape(actions) != values.shape or np.shape(pg_advantages) != values.shape:
        raise ValueError("actions/pg_advantages must match values' shape")
    m = np.ones(values.shape) if mask is None else np.asarray(mask, np.float64)
    lp = log_softmax(logits)
    probs = np.exp(lp)
    actions = np.asarray(actions)
    a_lp = np.take_along_axis(lp, actions[..., None], axis=-1)[..., 0]
    adv = np.asarray(pg_advantages, np.float64)
    err = np.asarray(vs, np.float64) - values
    ent = -(probs * lp).sum(-1)

    pg = float(np.sum(-a_lp * adv * m)) / normalizer
    baseline = float(0.5 * cfg.value_function_coefficient * np.sum(err * err * m)) / normalizer
    entropy = float(-cfg.entropy_coefficient * np.sum(ent * m)) / normalizer

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    d_pg = (probs - onehot) * (adv * m)[..., None]
    # dH/dz_j = -p_j (log p_j + H)
    d_ent = -cfg.entropy_coefficient * (-(probs * (lp + ent[..., None]))) * m[..., None]
    d_logits = (d_pg + d_ent) / normalizer
    d_values = -cfg.value_function_coefficient * err * m / normalizer
    return VTraceLoss(total=pg + baseline + entropy, pg=pg, baseline=baseline,
                      entropy=entropy, d_logits=d_logits, d_values=d_values)
