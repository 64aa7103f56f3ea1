"""Independent reference computations used by the tests.

Nothing here imports the package under test except for plain data types.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import signal
from scipy.integrate import solve_ivp


def rk4_tf(num, den, u_of_t, t_end: float, h: float):
    """Integrate a continuous transfer function (ascending coefficients) with classical RK4.

    Returns (t, y) on the fine grid.
    """
    A, B, C, D = signal.tf2ss(np.asarray(num, float)[::-1], np.asarray(den, float)[::-1])
    n = A.shape[0]
    x = np.zeros(n)
    steps = int(round(t_end / h))
    t = np.arange(steps + 1) * h
    y = np.empty(steps + 1)

    def f(tt, xx):
        return A @ xx + B[:, 0] * u_of_t(tt)

    y[0] = (C @ x)[0] + D[0, 0] * u_of_t(0.0) if n else D[0, 0] * u_of_t(0.0)
    for k in range(steps):
        tk = t[k]
        if n:
            k1 = f(tk, x)
            k2 = f(tk + h / 2, x + h / 2 * k1)
            k3 = f(tk + h / 2, x + h / 2 * k2)
            k4 = f(tk + h, x + h * k3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        y[k + 1] = ((C @ x)[0] if n else 0.0) + D[0, 0] * u_of_t(t[k + 1])
    return t, y


def fine_response(num, den, u_fine: np.ndarray, h: float) -> np.ndarray:
    """Zero-state response to an input sampled on a fine grid of step ``h``.

    The continuous system (ascending coefficients) is discretized exactly
    for a piecewise-linear input (first-order hold) and filtered in one pass.
    """
    nd, dd, _ = signal.cont2discrete((np.asarray(num, float)[::-1], np.asarray(den, float)[::-1]), h,
                                     method="foh")
    return signal.lfilter(np.ravel(nd), np.ravel(dd), u_fine)


def linear_hold(samples: np.ndarray, ts: float):
    """Piecewise-linear interpolation of a sampled signal (what the trapezoid rule sees)."""
    tk = np.arange(len(samples)) * ts

    def u(t):
        return float(np.interp(t, tk, samples))

    return u


def pi_continuous(kp: float, ki: float, e_of_t, t_end: float, h: float):
    """Continuous PI g = kp e + ki int e, integrated with RK4 on the integral state."""
    steps = int(round(t_end / h))
    t = np.arange(steps + 1) * h
    integ = 0.0
    g = np.empty(steps + 1)
    g[0] = kp * e_of_t(0.0)
    for k in range(steps):
        tk = t[k]
        k1 = e_of_t(tk)
        k2 = e_of_t(tk + h / 2)
        k4 = e_of_t(tk + h)
        integ += h / 6 * (k1 + 4 * k2 + k4)
        g[k + 1] = kp * e_of_t(t[k + 1]) + ki * integ
    return t, g


def swing_continuous(h: float, d: float, t_err_of_t, omega_s_of_t, t_end: float, delta0: float = 0.0,
                     omega0: float = 1.0, max_step: float = 1e-4):
    """Angle = integral of reference speed plus the damped inertial response to torque.

    States (delta, dw) with delta in pu-seconds:
        d(delta)/dt = omega_s + dw,   2H d(dw)/dt = T_err - D dw.
    ``omega0`` is the initial rotor speed, so dw(0) = omega0 - omega_s(0).
    """

    def rhs(t, x):
        return [omega_s_of_t(t) + x[1], (t_err_of_t(t) - d * x[1]) / (2.0 * h)]

    return solve_ivp(rhs, (0.0, t_end), [delta0, omega0 - omega_s_of_t(0.0)], method="DOP853",
                     rtol=1e-11, atol=1e-12, max_step=max_step, dense_output=True)


def droop_equilibrium(v_ref: float, q_ref: float, mq: list, v_bus: float) -> list:
    """Reactive output of parallel droop units that all see the same bus voltage."""
    return [q_ref + (v_ref - v_bus) / m for m in mq]


def lc_filter_fine(l_f, r_f, c_f, r_d, l_t, r_t, z_net, v_inv, v_grid, omega_b, t_end, h=5e-6, x0=None):
    """Single converter, LC(+damping) filter and coupling inductance to a stiff source.

    Complex dq states (i_cv, v_cap, i_o) in the grid-synchronous frame,
    integrated with RK4 at ``h``.  The network behind the coupling
    inductance is a quasi-static series impedance ``z_net``.
    Returns (t, states).
    """
    def f(x):
        i1, vc, i3 = x
        vf = vc + r_d * (i1 - i3)
        di1 = omega_b / l_f * (v_inv - r_f * i1 - vf) - 1j * omega_b * i1
        dvc = omega_b / c_f * (i1 - i3) - 1j * omega_b * vc
        di3 = omega_b / l_t * (vf - (r_t + z_net) * i3 - v_grid) - 1j * omega_b * i3
        return np.array([di1, dvc, di3])

    steps = int(round(t_end / h))
    x = np.zeros(3, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex)
    out = np.empty((steps + 1, 3), dtype=complex)
    out[0] = x
    for k in range(steps):
        k1 = f(x)
        k2 = f(x + h / 2 * k1)
        k3 = f(x + h / 2 * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return np.arange(steps + 1) * h, out


def complex_current(e: float, v: complex, r: float, x: float) -> complex:
    return (e - v) / complex(r, x)


def thevenin_from_scr(scr: float, rx: float) -> complex:
    z = 1.0 / scr
    xx = z / math.sqrt(1 + rx * rx)
    return complex(rx * xx, xx)
