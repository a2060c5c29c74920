import math

import numpy as np
import pytest

import oracles
from seedling.vtrace import (VTraceConfig, VTraceInputs, action_log_probs, log_softmax,
                             vtrace_loss, vtrace_targets)


def _random_instance(rng, T=None, on_policy=False):
    T = T or int(rng.integers(1, 11))
    behavior = np.log(rng.uniform(0.05, 1.0, T))
    target = behavior.copy() if on_policy else np.log(rng.uniform(0.05, 1.0, T))
    return VTraceInputs(behavior_log_probs=behavior, target_log_probs=target,
                        rewards=rng.normal(size=T), dones=rng.random(T) < 0.2,
                        values=rng.normal(size=T), bootstrap_value=np.array(rng.normal()))


def test_hand_worked_two_step_example():
    inp = VTraceInputs(np.zeros(2), np.zeros(2), np.array([0.5, 1.0]), np.zeros(2),
                       np.array([1.0, 2.0]), np.array(0.0))
    out = vtrace_targets(inp, VTraceConfig(discount=0.9, lambda_=1.0))
    np.testing.assert_allclose(out.vs, [1.4, 1.0], atol=1e-12)


def test_fully_clipped_ratios_give_values_back():
    inp = VTraceInputs(np.zeros(3), np.full(3, -50.0), np.ones(3), np.zeros(3),
                       np.array([0.3, -0.2, 0.9]), np.array(1.0))
    cfg = VTraceConfig(discount=0.9)
    out = vtrace_targets(inp, cfg)
    np.testing.assert_allclose(out.vs, inp.values, atol=1e-20)
    assert np.all(out.rhos < 1e-20)


def test_done_at_first_step_isolates_it(rng):
    inp = _random_instance(rng, T=5)
    inp.dones[:] = False
    inp.dones[0] = True
    cfg = VTraceConfig(discount=0.95)
    v0 = vtrace_targets(inp, cfg).vs[0]
    rho0 = min(1.0, math.exp(inp.target_log_probs[0] - inp.behavior_log_probs[0]))
    assert v0 == pytest.approx(inp.values[0] + rho0 * (inp.rewards[0] - inp.values[0]))
    inp.rewards[1:] += 10
    inp.values[1:] -= 3
    inp.bootstrap_value = np.array(99.0)
    assert vtrace_targets(inp, cfg).vs[0] == pytest.approx(v0, abs=1e-12)


@pytest.mark.parametrize("lam", [1.0, 0.95, 0.9, 0.0])
def test_on_policy_equals_lambda_return(lam, rng):
    cfg = VTraceConfig(discount=0.97, lambda_=lam)
    for _ in range(200):
        inp = _random_instance(rng, on_policy=True)
        disc = cfg.discount * (1 - inp.dones.astype(float))
        ref = oracles.lambda_returns(list(inp.rewards), list(disc), list(inp.values),
                                     float(inp.bootstrap_value), lam)
        np.testing.assert_allclose(vtrace_targets(inp, cfg).vs, ref, atol=1e-5)


@pytest.mark.parametrize("rho_bar,c_bar,lam", [(1.0, 1.0, 1.0), (2.0, 0.5, 0.9),
                                               (1.0, 1.0, 0.95)])
def test_off_policy_matches_direct_sum(rho_bar, c_bar, lam, rng):
    cfg = VTraceConfig(discount=0.99, lambda_=lam, rho_bar=rho_bar, c_bar=c_bar)
    for _ in range(200):
        inp = _random_instance(rng)
        disc = cfg.discount * (1 - inp.dones.astype(float))
        vs, adv = oracles.vtrace_by_definition(
            list(inp.target_log_probs - inp.behavior_log_probs), list(inp.rewards), list(disc),
            list(inp.values), float(inp.bootstrap_value), rho_bar, c_bar, lam)
        out = vtrace_targets(inp, cfg)
        np.testing.assert_allclose(out.vs, vs, atol=1e-6)
        np.testing.assert_allclose(out.pg_advantages, adv, atol=1e-6)


def test_lower_rho_bar_only_changes_through_clipped_ratios(rng):
    inp = _random_instance(rng, T=8)
    hi = vtrace_targets(inp, VTraceConfig(rho_bar=2.0, c_bar=1.0))
    lo = vtrace_targets(inp, VTraceConfig(rho_bar=1.0, c_bar=1.0))
    np.testing.assert_allclose(lo.rhos, np.minimum(hi.rhos, 1.0))
    np.testing.assert_allclose(lo.cs, hi.cs)


def test_episode_isolation_under_perturbation(rng):
    cfg = VTraceConfig(discount=0.99)
    for _ in range(50):
        inp = _random_instance(rng, T=8)
        t = int(rng.integers(0, 7))
        inp.dones[t] = True
        before = vtrace_targets(inp, cfg).vs[:t + 1].copy()
        inp.rewards[t + 1:] = rng.normal(size=7 - t)
        inp.values[t + 1:] = rng.normal(size=7 - t)
        inp.target_log_probs[t + 1:] = np.log(rng.uniform(0.05, 1, 7 - t))
        inp.bootstrap_value = np.array(rng.normal())
        np.testing.assert_allclose(vtrace_targets(inp, cfg).vs[:t + 1], before, atol=1e-12)


def test_batched_inputs_match_per_column(rng):
    cfg = VTraceConfig(discount=0.9, lambda_=0.95)
    cols = [_random_instance(rng, T=6) for _ in range(4)]
    stacked = VTraceInputs(*(np.stack([getattr(c, f) for c in cols], 1)
                             for f in ("behavior_log_probs", "target_log_probs", "rewards",
                                       "dones", "values")),
                           bootstrap_value=np.array([c.bootstrap_value for c in cols]))
    out = vtrace_targets(stacked, cfg)
    for j, c in enumerate(cols):
        np.testing.assert_allclose(out.vs[:, j], vtrace_targets(c, cfg).vs)


def test_non_finite_log_probs_rejected():
    inp = VTraceInputs(np.array([-np.inf]), np.array([0.0]), np.zeros(1), np.zeros(1),
                       np.zeros(1), np.array(0.0))
    with pytest.raises(FloatingPointError):
        vtrace_targets(inp, VTraceConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        VTraceConfig(discount=0.0)
    with pytest.raises(ValueError):
        VTraceConfig(rho_bar=0.5, c_bar=1.0)
    with pytest.raises(ValueError):
        VTraceConfig(lambda_=1.5)


# -- loss ----------------------------------------------------------------------------


def test_loss_is_zero_in_the_degenerate_case():
    cfg = VTraceConfig(entropy_coefficient=0.0)
    logits = np.zeros((3, 2, 4))
    values = np.ones((3, 2))
    loss = vtrace_loss(logits, values, np.zeros((3, 2), int), values, np.zeros((3, 2)), cfg)
    assert loss.total == 0.0


def test_policy_gradient_term_closed_form():
    cfg = VTraceConfig(entropy_coefficient=0.0)
    loss = vtrace_loss(np.zeros((1, 2)), np.zeros(1), np.array([0]), np.zeros(1), np.ones(1), cfg)
    assert loss.pg == pytest.approx(math.log(2), abs=1e-12)


def test_entropy_term_of_uniform_policy():
    cfg = VTraceConfig(entropy_coefficient=0.01)
    loss = vtrace_loss(np.zeros((1, 4)), np.zeros(1), np.array([2]), np.zeros(1), np.zeros(1), cfg)
    assert loss.entropy == pytest.approx(-0.01 * math.log(4), abs=1e-12)
    assert loss.entropy == pytest.approx(-0.013863, abs=1e-6)


def test_components_add_up_and_normalizer_divides(rng):
    cfg = VTraceConfig(entropy_coefficient=0.05, value_function_coefficient=0.5)
    args = (rng.normal(size=(5, 3, 4)), rng.normal(size=(5, 3)), rng.integers(0, 4, (5, 3)),
            rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
    a = vtrace_loss(*args, cfg)
    b = vtrace_loss(*args, cfg, normalizer=3.0)
    assert a.total == pytest.approx(a.pg + a.baseline + a.entropy)
    assert b.total == pytest.approx(a.total / 3)
    err = args[3] - args[1]
    assert a.baseline == pytest.approx(0.25 * np.sum(err ** 2))


def test_loss_gradients_match_finite_differences(rng):
    cfg = VTraceConfig(entropy_coefficient=0.03)
    logits = rng.normal(size=(4, 2, 3))
    values = rng.normal(size=(4, 2))
    acts = rng.integers(0, 3, (4, 2))
    vs, adv = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    mask = rng.random((4, 2)) < 0.8
    out = vtrace_loss(logits, values, acts, vs, adv, cfg, mask=mask, normalizer=2.0)
    h = 1e-6
    for arr, grad in ((logits, out.d_logits), (values, out.d_values)):
        flat, g = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = vtrace_loss(logits, values, acts, vs, adv, cfg, mask=mask, normalizer=2.0).total
            flat[i] = old - h
            down = vtrace_loss(logits, values, acts, vs, adv, cfg, mask=mask,
                               normalizer=2.0).total
            flat[i] = old
            assert (up - down) / (2 * h) == pytest.approx(g[i], abs=1e-6)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        vtrace_loss(np.zeros((3, 2)), np.zeros(4), np.zeros(3, int), np.zeros(3), np.zeros(3),
                    VTraceConfig())


def test_log_softmax_helpers():
    lp = log_softmax(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(lp, np.log([[0.5, 0.5]]))
    assert action_log_probs(np.array([[0.0, 0.0, 0.0]]), np.array([1]))[0] == \
        pytest.approx(-math.log(3))
