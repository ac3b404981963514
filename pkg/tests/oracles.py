"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from pipecomp.optim import MitigationSpec, OptimizerConfig, OptState, gsc_from_lwp, predict_weights, step


def impulse_displacement(m, eta, D, steps=500):
    """Total weight movement caused by one unit gradient arriving after ``D`` steps, under SC_D."""
    cfg = OptimizerConfig(eta, m, MitigationSpec("gsc"))
    a, b = cfg.mitigation.coefficients(m, D)
    st = OptState(np.zeros(1))
    for t in range(steps):
        step(st, np.array([1.0 if t == D else 0.0]), cfg, a, b)
    return -st.w[0]


def gsc_lwp_trajectories(m, T, D, eta_lambda, warmup=None, steps=100, w0=1.0):
    """Weights of GSC(gsc_from_lwp(m, T)) and of weight-form LWP(T) on ``f(w) = lambda w^2 / 2``.

    Both use delay ``D``. The two rules only coincide once the weight
    differences are generated by the same recurrence, so GSC runs ``warmup``
    steps first and LWP is started from its weight history with the velocity
    that reproduces the last weight difference.
    """
    eta, lam = 1.0, eta_lambda
    a, b = gsc_from_lwp(m, T)
    cfg = OptimizerConfig(eta, m)
    K = D + 2 if warmup is None else warmup
    gsc = OptState.for_delay(np.array([w0]), D)
    for _ in range(K):
        step(gsc, lam * gsc.w_at(D), cfg, a, b)
    lwp = OptState.for_delay(gsc.w.copy(), D, v=(gsc.w_at(1) - gsc.w) / eta)
    lwp.history_w.clear()
    lwp.history_w.extend(w.copy() for w in gsc.history_w)
    lwp.step_count = gsc.step_count
    ws_g, ws_l = [], []
    for _ in range(steps):
        step(gsc, lam * gsc.w_at(D), cfg, a, b)
        step(lwp, lam * predict_weights(lwp, D, T, "weight_difference", eta), cfg)
        ws_g.append(gsc.w[0])
        ws_l.append(lwp.w[0])
    return np.array(ws_g), np.array(ws_l)


def hand_delayed_quadratic(w0, eta, lam, D, steps):
    """``w_{t+1} = w_t - eta * lam * w_{t-D}`` with the start clamped to ``w0`` (m = 0)."""
    ws = [w0]
    for t in range(steps):
        ws.append(ws[-1] - eta * lam * ws[max(t - D, 0)])
    return ws
