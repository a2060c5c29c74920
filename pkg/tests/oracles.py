"""Independent reference computations used as test oracles.

Everything here is written as plain loops over scalars so it shares no
code (and no vectorisation tricks) with the package under test.
"""

import math

import numpy as np


# -- network ------------------------------------------------------------------


def _relu(x):
    return x if x > 0 else 0.0


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _dense(W, b, x, act=None):
    rows, cols = len(W), len(W[0])
    out = []
    for j in range(cols):
        s = float(b[j])
        for i in range(rows):
            s += float(x[i]) * float(W[i][j])
        out.append(act(s) if act else s)
    return out


def scalar_forward(spec, params, obs, h, c, prev_action, prev_reward, reset):
    """One step for a single example.  Returns (head, value, h, c) as lists."""
    p = {k: np.asarray(v, np.float64).tolist() for k, v in params.items()}
    x = [float(v) for v in obs]
    for i in range(len(spec.mlp_hidden_sizes)):
        x = _dense(p[f"mlp{i}/w"], p[f"mlp{i}/b"], x, _relu)
    h = [float(v) for v in h]
    c = [float(v) for v in c]
    if spec.lstm_units:
        U = spec.lstm_units
        if reset:
            h, c = [0.0] * U, [0.0] * U
            onehot = [0.0] * spec.num_actions
            r = 0.0
        else:
            onehot = [1.0 if a == prev_action else 0.0 for a in range(spec.num_actions)]
            r = float(prev_reward)
        z = _dense(p["lstm/w"], p["lstm/b"], x + onehot + [r] + h)
        i_g = [_sig(v) for v in z[:U]]
        f_g = [_sig(v) for v in z[U:2 * U]]
        g_g = [math.tanh(v) for v in z[2 * U:3 * U]]
        o_g = [_sig(v) for v in z[3 * U:]]
        c = [f_g[k] * c[k] + i_g[k] * g_g[k] for k in range(U)]
        h = [o_g[k] * math.tanh(c[k]) for k in range(U)]
        x = h
    if spec.head == "policy_value":
        head = _dense(p["policy/w"], p["policy/b"], x)
        value = _dense(p["value/w"], p["value/b"], x)[0]
        return head, value, h, c
    adv = _dense(p["adv/w"], p["adv/b"], _dense(p["adv_hidden/w"], p["adv_hidden/b"], x, _relu))
    val = _dense(p["val/w"], p["val/b"], _dense(p["val_hidden/w"], p["val_hidden/b"], x, _relu))[0]
    mean = sum(adv) / len(adv)
    return [val + a - mean for a in adv], None, h, c


# -- V-trace --------------------------------------------------------------------


def lambda_returns(rewards, discounts, values, bootstrap, lam):
    """On-policy lambda-returns by mixing forward-summed n-step returns.

    G^(n)_s = sum_{k<n} (prod of discounts) r_{s+k} + (prod) V(x_{s+n})
    G^lam_s = (1-lam) sum_{n<N} lam^(n-1) G^(n)_s + lam^(N-1) G^(N)_s,
    where N = T - s reaches the end of the unroll.
    """
    T = len(rewards)
    vals = list(values) + [bootstrap]
    out = []
    for s in range(T):
        N = T - s
        nstep = []
        ret, disc = 0.0, 1.0
        for n in range(1, N + 1):
            t = s + n - 1
            ret += disc * rewards[t]
            disc *= discounts[t]
            nstep.append(ret + disc * vals[s + n])
        g = lam ** (N - 1) * nstep[N - 1]
        for n in range(1, N):
            g += (1 - lam) * lam ** (n - 1) * nstep[n - 1]
        out.append(g)
    return out


def vtrace_by_definition(log_rhos, rewards, discounts, values, bootstrap, rho_bar, c_bar, lam):
    """v_s = V(x_s) + sum_t (prod_{i<t} gamma_i c_i) rho_t delta_t, summed directly."""
    T = len(rewards)
    vals = list(values) + [bootstrap]
    rho = [min(rho_bar, math.exp(l)) for l in log_rhos]
    cs = [lam * min(c_bar, math.exp(l)) for l in log_rhos]
    vs = []
    for s in range(T):
        total = vals[s]
        coef = 1.0
        for t in range(s, T):
            delta = rho[t] * (rewards[t] + discounts[t] * vals[t + 1] - vals[t])
            total += coef * delta
            coef *= discounts[t] * cs[t]
        vs.append(total)
    adv = []
    for s in range(T):
        nxt = vs[s + 1] if s + 1 < T else bootstrap
        adv.append(rho[s] * (rewards[s] + discounts[s] * nxt - vals[s]))
    return vs, adv


# -- Q-learning ------------------------------------------------------------------


def h_scalar(x, eps=1e-3):
    s = 1.0 if x > 0 else (-1.0 if x < 0 else 0.0)
    return s * (math.sqrt(abs(x) + 1) - 1) + eps * x


def h_inv_bisect(y, eps=1e-3):
    """Invert h by bisection (h is strictly increasing)."""
    lo, hi = -1e9, 1e9
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h_scalar(mid, eps) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def nstep_target(t, rewards, dones, valid, q_online, q_target, gamma, n, eps=1e-3):
    """Scalar n-step double-Q target for transition t of one sequence, or None.

    Entry k carries the reward/done of the transition leading into k.
    """
    L = len(rewards)
    if not (valid[t] and t + 1 < L and valid[t + 1]):
        return None
    ret, disc = 0.0, 1.0
    boot = None
    for k in range(n):
        j = t + 1 + k
        if j >= L or not valid[j]:
            break
        ret += disc * rewards[j]
        disc *= gamma
        if dones[j]:
            boot = None
            break
        boot = j
    if boot is not None:
        a_star = int(np.argmax(q_online[boot]))
        ret += disc * h_inv_bisect(float(q_target[boot][a_star]), eps)
    return h_scalar(ret, eps)


# -- finite differences ------------------------------------------------------------


def random_tiny_spec(rng, head=None):
    from seedling.nn import DUELING_Q, POLICY_VALUE, NetworkSpec

    head = head or (POLICY_VALUE, DUELING_Q)[rng.integers(2)]
    return NetworkSpec(input_dim=int(rng.integers(2, 5)), num_actions=int(rng.integers(2, 4)),
                       mlp_hidden_sizes=(int(rng.integers(2, 5)),),
                       lstm_units=int(rng.integers(0, 4)), head=head,
                       dueling_hidden_units=int(rng.integers(2, 4)))


def gradcheck(net, rng, T=3, B=2, h=1e-3):
    """Max relative error of backward against central differences.

    Uses float64 parameters so the differences measure the gradient code,
    not rounding.  The loss is a random linear functional of all outputs.
    """
    spec = net.spec
    params = {k: v.astype(np.float64) for k, v in net.init_params(int(rng.integers(1 << 30))).items()}
    for k in params:  # non-zero biases so every path carries gradient
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    obs = rng.normal(size=(T, B, spec.input_dim))
    prev_a = rng.integers(0, spec.num_actions, (T, B))
    prev_r = rng.normal(size=(T, B))
    reset = rng.random((T, B)) < 0.2
    state0 = net.initial_state(B)
    units = state0.hidden.shape[1]
    state0.hidden = rng.normal(0, 0.5, (B, units))
    state0.cell = rng.normal(0, 0.5, (B, units))
    w_head = rng.normal(size=(T, B, spec.num_actions))
    w_val = rng.normal(size=(T, B))

    def loss(p):
        out, tape = net.unroll(p, obs, prev_a, prev_r, reset, state0)
        total = float(np.sum(w_head * out.head))
        if out.value is not None:
            total += float(np.sum(w_val * out.value))
        pre = list(tape.mlp_pre) + [tape.head_cache[k] for k in ("ah_pre", "vh_pre")
                                    if k in tape.head_cache]
        return total, [a > 0 for a in pre]

    def central(flat, i, step):
        old = flat[i]
        flat[i] = old + step
        up, up_signs = loss(params)
        flat[i] = old - step
        down, down_signs = loss(params)
        flat[i] = old
        same = all(np.array_equal(a, b) for a, b in zip(up_signs, down_signs))
        return (up - down) / (2 * step), same

    out, tape = net.unroll(params, obs, prev_a, prev_r, reset, state0)
    grads = net.backward(params, tape, w_head, w_val if out.value is not None else None)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            step = h
            num, smooth = central(flat, i, step)
            # a ReLU switching inside [-step, step] makes the difference
            # quotient meaningless there; shrink the step until none does
            while not smooth and step > 1e-9:
                step /= 10
                num, smooth = central(flat, i, step)
            err = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-2)
            worst = max(worst, err)
    return worst
