import numpy as np


def rk4_step(rhs, y, h):
    """One classical four-stage Runge-Kutta step for an autonomous system."""
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_schedule(tau_end, d_tau):
    """Split ``[0, tau_end]`` into equal steps no longer than ``d_tau``."""
    if tau_end <= 0:
        return 0, 0.0
    n = int(np.ceil(tau_end / d_tau - 1e-12))
    return n, tau_end / n


def integrate(rhs, y0, tau_end, d_tau, record_every=1):
    """Fixed-step RK4 from 0 to ``tau_end``; returns (taus, states)."""
    y = np.array(y0, dtype=np.float64)
    n, h = step_schedule(tau_end, d_tau)
    taus = [0.0]
    states = [y.copy()]
    for k in range(1, n + 1):
        y = rk4_step(rhs, y, h)
        if k % record_every == 0 or k == n:
            taus.append(k * h)
            states.append(y.copy())
    return np.asarray(taus), np.asarray(states)
