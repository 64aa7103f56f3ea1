"""Per-turbine virtual synchronous condenser controller.

Execution order inside one sample: inertia emulation, AVR (+ supplementary
damping), quasi-stationary electrical model, circular current limiter,
inner current loop, machine-side control.  The grid-following P/Q mode used
before a turbine is switched to ViSC shares the inner loop and machine side.

Vectors arrive from the plant in the common frame (rotating at nominal
speed); the controller rotates them into its own dq frame, whose angle is
``omega_b * (delta - t)``.
"""
from __future__ import annotations

import cmath
import copy
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dsp import (
    DiscreteBlock,
    InertiaHistory,
    InertiaParams,
    PiParams,
    RationalTF,
    StatePerturbation,
    inertia_coefficients,
    make_pi,
    tustin_discretize,
)

__all__ = [
    "Mode",
    "ModeDisabled",
    "ZeroImpedance",
    "AvrParams",
    "ElecParams",
    "SupplementaryParams",
    "InnerParams",
    "MachineParams",
    "GflParams",
    "ViscParams",
    "Measurements",
    "ControlOutput",
    "ViscState",
    "avr_step",
    "electrical_model",
    "limit_current",
    "supplementary_step",
    "inner_loop_step",
    "machine_side_step",
    "visc_step",
    "gfl_step",
    "controller_step",
    "switch_mode",
    "new_state",
]


class ModeDisabled(RuntimeError):
    """ViSC mode requested for a turbine whose enable bit is 0."""


class ZeroImpedance(ValueError):
    pass


class Mode(enum.Enum):
    GRID_FOLLOWING_PQ = "gfl"
    VISC = "visc"


@dataclass
class AvrParams:
    kpv: float = 0.5
    kiv: float = 20.0
    mq: float = 0.05
    v_ref: float = 1.0
    q_ref: float = 0.0
    e_ref: float = 1.0
    e_max: float = 3.0


@dataclass
class ElecParams:
    r_vir: float = 0.02
    l_vir: float = 0.3
    omega_s: float = 1.0


@dataclass
class SupplementaryParams:
    enabled: bool = False
    t_lpf: float = 0.01
    t_v1: float = 0.05
    t_v2: float = 0.2
    t_1: float = 0.05
    t_2: float = 0.02
    k_f1: float = 1.0
    k_f2: float = 1.0


@dataclass
class InnerParams:
    kpc: float = 0.15
    kic: float = 10.0
    k_ffv: float = 1.0
    k_ad: float = 0.3
    l_f: float = 0.1
    r_f: float = 0.005
    v_max: float = 1.6


@dataclass
class MachineParams:
    kp_dc: float = 2.0
    ki_dc: float = 30.0
    v_dc_ref: float = 1.0
    i_sd_max: float = 1.5
    kp_pitch: float = 2.0
    ki_pitch: float = 20.0
    pitch_rate: float = 10.0  # deg/s
    pitch_max: float = 90.0


@dataclass
class GflParams:
    kp_p: float = 0.2
    ki_p: float = 20.0
    kp_q: float = 0.2
    ki_q: float = 20.0
    p_ref: float = 0.0
    q_ref: float = 0.0
    i_max: float = 1.2


@dataclass
class ViscParams:
    """Every tunable of the controller stack, in per unit of turbine rating."""

    h: float = 3.0
    d: float = 40.0
    w_path: str = "centered"
    avr: AvrParams = field(default_factory=AvrParams)
    elec: ElecParams = field(default_factory=ElecParams)
    i_max: float = 1.5
    supplementary: SupplementaryParams = field(default_factory=SupplementaryParams)
    inner: InnerParams = field(default_factory=InnerParams)
    machine: MachineParams = field(default_factory=MachineParams)
    gfl: GflParams = field(default_factory=GflParams)
    ts: float = 0.00065
    f_base: float = 50.0
    discretizer: str = "tustin"
    anti_windup: bool = True
    perturbation_eps: float = 0.0
    perturbation_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.avr.mq <= 0:
            raise ValueError("avr.mq must be positive")
        if self.i_max <= 0:
            raise ValueError("i_max must be positive")
        if self.elec.r_vir ** 2 + self.elec.l_vir ** 2 <= 0:
            raise ValueError("virtual impedance must be nonzero")
        if self.ts <= 0:
            raise ValueError("ts must be positive")
        if self.discretizer not in ("tustin", "trapezoidal"):
            raise ValueError(f"discretizer must be tustin or trapezoidal, got {self.discretizer!r}")
        sp = self.supplementary
        if sp.enabled and min(sp.t_lpf, sp.t_v1, sp.t_v2, sp.t_1, sp.t_2) <= 0:
            raise ValueError("supplementary time constants must be positive when enabled")
        InertiaParams.for_ts(self.h, self.d, self.ts, self.w_path)

    @property
    def omega_b(self) -> float:
        return 2.0 * math.pi * self.f_base

    @property
    def inertia(self) -> InertiaParams:
        return InertiaParams.for_ts(self.h, self.d, self.ts, self.w_path)


@dataclass
class Measurements:
    """One sample of turbine quantities.

    Vector quantities are (d, q) pairs in whatever frame the producer chose;
    ``frame`` records that frame's angle in the common frame so consumers
    can re-rotate.  ``v_mag``/``q_out``/``p_out`` are taken at the turbine's
    grid connection point and feed the AVR and the inertia emulation.
    """

    v_od: float = 1.0
    v_oq: float = 0.0
    i_cvd: float = 0.0
    i_cvq: float = 0.0
    i_od: float = 0.0
    i_oq: float = 0.0
    q_out: float = 0.0
    p_out: float = 0.0
    t_e: float = 0.0
    v_dc: float = 1.0
    omega_r: float = 1.0
    p_mppt: float = 0.0
    p_me: float = 0.0
    v_mag: float | None = None
    t: float = 0.0
    frame: float = 0.0

    def __post_init__(self):
        if self.v_mag is None:
            self.v_mag = math.hypot(self.v_od, self.v_oq)

    def rotated(self, angle: float) -> "Measurements":
        """Express the vectors in a frame at ``angle`` (common-frame radians)."""
        rot = cmath.exp(-1j * (angle - self.frame))
        v = complex(self.v_od, self.v_oq) * rot
        icv = complex(self.i_cvd, self.i_cvq) * rot
        io = complex(self.i_od, self.i_oq) * rot
        return replace(
            self,
            v_od=v.real, v_oq=v.imag,
            i_cvd=icv.real, i_cvq=icv.imag,
            i_od=io.real, i_oq=io.imag,
            frame=angle,
        )


@dataclass
class ControlOutput:
    v_invd: float = 0.0
    v_invq: float = 0.0
    i_sd: float = 0.0
    i_sq: float = 0.0
    pitch: float = 0.0
    delta: float = 0.0
    omega: float = 1.0
    frame: float = 0.0
    t: float = 0.0
    i_refd: float = 0.0
    i_refq: float = 0.0
    e: float = 0.0
    v_f: float = 0.0

    def v_common(self) -> complex:
        """Modulation reference expressed in the common frame."""
        return complex(self.v_invd, self.v_invq) * cmath.exp(1j * self.frame)


class ViscState:
    """Mutable controller state for one turbine (both modes)."""

    def __init__(self, params: ViscParams, mode: Mode = Mode.GRID_FOLLOWING_PQ):
        p = params
        ts = p.ts
        self.mode = mode
        self.master_alive = True
        self.k = 0
        self.inertia = InertiaHistory()
        self.coef = inertia_coefficients(p.inertia)
        kind = p.discretizer
        self.avr_pi = make_pi(kind, PiParams(p.avr.kpv, p.avr.kiv), ts, -p.avr.e_max, p.avr.e_max)
        self.avr_err_prev = 0.0
        self.e_avr = 0.0
        self.supp_blocks = _build_supplementary(p.supplementary, ts)
        inner = PiParams(p.inner.kpc, p.inner.kic)
        self.inner_d = make_pi(kind, inner, ts)
        self.inner_q = make_pi(kind, inner, ts)
        self.v_sat = False
        self.i_sat = False
        self.dc_pi = make_pi(kind, PiParams(p.machine.kp_dc, p.machine.ki_dc), ts,
                             -p.machine.i_sd_max, p.machine.i_sd_max)
        self.pitch_pi = make_pi(kind, PiParams(p.machine.kp_pitch, p.machine.ki_pitch), ts,
                                0.0, p.machine.pitch_max)
        self.pitch = 0.0
        self.gfl_p = make_pi(kind, PiParams(p.gfl.kp_p, p.gfl.ki_p), ts, -p.gfl.i_max, p.gfl.i_max)
        self.gfl_q = make_pi(kind, PiParams(p.gfl.kp_q, p.gfl.ki_q), ts, -p.gfl.i_max, p.gfl.i_max)
        self.delta = 0.0
        self.omega = 1.0
        self.last = ControlOutput()
        self.perturb = StatePerturbation(p.perturbation_eps, p.perturbation_seed) if p.perturbation_eps else None

    def copy(self) -> "ViscState":
        return copy.deepcopy(self)


def _build_supplementary(sp: SupplementaryParams, ts: float) -> dict:
    if not sp.enabled:
        return {}
    return {
        "lpf": tustin_discretize(RationalTF((1.0,), (1.0, sp.t_lpf), "lpf"), ts),
        "w1": tustin_discretize(RationalTF((0.0, sp.k_f1), (1.0, sp.t_v1), "washout1"), ts),
        "w2": tustin_discretize(RationalTF((0.0, sp.k_f2), (1.0, sp.t_v2), "washout2"), ts),
        "ll1": tustin_discretize(RationalTF((1.0, sp.t_1), (1.0, sp.t_2), "leadlag1"), ts),
        "ll2": tustin_discretize(RationalTF((1.0, sp.t_1), (1.0, sp.t_2), "leadlag2"), ts),
    }


# --------------------------------------------------------------------------
# building blocks


def avr_step(params: ViscParams, state: ViscState, v_meas: float, q_meas: float, v_f: float,
             freeze: bool = False) -> float:
    """Voltage regulator with reactive droop.

    The PI acts on ``(V* - V) + mq (Q* - Q)``; the supplementary signal is
    added outside the carried integrator state.  Returns ``E(k)`` excluding
    the ``E*`` bias.
    """
    a = params.avr
    err = (a.v_ref - v_meas) + a.mq * (a.q_ref - q_meas)
    e_pi = state.avr_pi.step(err, freeze=freeze, perturb=state.perturb)
    state.avr_err_prev = err
    state.e_avr = e_pi + v_f
    return state.e_avr


def electrical_model(params: ViscParams, e_total: float, omega: float, v_od: float, v_oq: float) -> tuple[float, float]:
    """Current reference ``(E - v) / (R_vir + j omega L_vir / omega_s)`` with E on the d-axis."""
    el = params.elec
    x = omega * el.l_vir / el.omega_s
    r = el.r_vir
    den = x * x + r * r
    if den == 0.0:
        raise ZeroImpedance("virtual impedance evaluates to zero")
    de = e_total - v_od
    i_d = (r * de - x * v_oq) / den
    i_q = (-x * de - r * v_oq) / den
    return i_d, i_q


def limit_current(i_d: float, i_q: float, i_max: float) -> tuple[float, float]:
    """Circular limiter: scale onto the ``i_max`` circle, angle unchanged."""
    mag = math.hypot(i_d, i_q)
    if mag <= i_max:
        return i_d, i_q
    s = i_max / mag
    # rounding can leave the scaled vector a hair outside the circle
    while math.hypot(i_d * s, i_q * s) > i_max:
        s = math.nextafter(s, 0.0)
    return i_d * s, i_q * s


def supplementary_step(params: ViscParams, state: ViscState, omega_s: float, omega: float) -> float:
    if not params.supplementary.enabled or not state.supp_blocks:
        return 0.0
    b = state.supp_blocks
    x = b["lpf"].step(omega_s - omega)
    y = b["w1"].step(x) + b["w2"].step(x)
    return b["ll2"].step(b["ll1"].step(y))


def _inner_coupling(p: InnerParams, i_cvd, i_cvq, v_od, v_oq, i_od, i_oq) -> tuple[float, float]:
    cd = p.l_f * p.r_f * i_cvd - p.l_f * i_cvq + p.k_ffv * v_od + p.k_ad * (i_od - i_cvd)
    cq = p.l_f * p.r_f * i_cvq + p.l_f * i_cvd + p.k_ffv * v_oq + p.k_ad * (i_oq - i_cvq)
    return cd, cq


def inner_loop_step(params: ViscParams, state: ViscState, refs: tuple[float, float],
                    meas: Measurements) -> tuple[float, float]:
    """Decoupled current PI with voltage feed-forward and active damping.

    The recursion carries the PI component; decoupling, feed-forward and
    damping terms are re-evaluated from the present sample.
    """
    p = params.inner
    dd = refs[0] - meas.i_cvd
    dq = refs[1] - meas.i_cvq
    freeze = params.anti_windup and state.v_sat
    ud = state.inner_d.step(dd, freeze=freeze, perturb=state.perturb)
    uq = state.inner_q.step(dq, freeze=freeze, perturb=state.perturb)
    cd, cq = _inner_coupling(p, meas.i_cvd, meas.i_cvq, meas.v_od, meas.v_oq, meas.i_od, meas.i_oq)
    vd, vq = ud + cd, uq + cq
    mag = math.hypot(vd, vq)
    state.v_sat = mag > p.v_max
    if state.v_sat:
        s = p.v_max / mag
        vd, vq = vd * s, vq * s
    return vd, vq


def machine_side_step(params: ViscParams, state: ViscState, meas: Measurements) -> tuple[float, float, float]:
    """DC-link voltage PI, zero q-axis stator current and the pitch loop.

    The pitch PI acts on the surplus ``P_MPPT - P_Me`` so that unused wind
    power raises the blade angle; its output is clamped to [0, pitch_max]
    and rate limited.
    """
    m = params.machine
    i_sd = state.dc_pi.step(m.v_dc_ref - meas.v_dc, perturb=state.perturb)
    raw = state.pitch_pi.step(meas.p_mppt - meas.p_me)
    step = m.pitch_rate * params.ts
    pitch = min(max(raw, state.pitch - step), state.pitch + step)
    state.pitch = min(max(pitch, 0.0), m.pitch_max)
    return i_sd, 0.0, state.pitch


# --------------------------------------------------------------------------
# composed steps


def _frame_angle(params: ViscParams, delta: float, t: float) -> float:
    return params.omega_b * (delta - t)


def visc_step(params: ViscParams, state: ViscState, meas: Measurements) -> ControlOutput:
    """One controller sample in ViSC mode (meas may be in any frame)."""
    ts = params.ts
    t_err = -meas.t_e
    c = state.coef
    h = state.inertia
    omega_s = params.elec.omega_s
    delta = (c["c1"] * h.delta1 - c["c2"] * h.delta2 + c["gt"] * (t_err + 2.0 * h.t1 + h.t2)
             + c["w0"] * omega_s + c["w1"] * h.w1 + c["w2"] * h.w2)
    omega = (delta - h.delta1) / ts
    state.inertia = InertiaHistory(delta, h.delta1, t_err, h.t1, omega_s, h.w1)
    state.delta, state.omega = delta, omega

    frame = _frame_angle(params, delta, meas.t)
    m = meas.rotated(frame)

    v_f = supplementary_step(params, state, omega_s, omega)
    freeze = False
    if params.anti_windup and state.i_sat:
        err = (params.avr.v_ref - m.v_mag) + params.avr.mq * (params.avr.q_ref - m.q_out)
        freeze = err * (state.avr_pi.output + params.avr.e_ref - m.v_od) > 0.0
    e_k = avr_step(params, state, m.v_mag, m.q_out, v_f, freeze=freeze)
    e_total = e_k + params.avr.e_ref
    i_d, i_q = electrical_model(params, e_total, omega, m.v_od, m.v_oq)
    ird, irq = limit_current(i_d, i_q, params.i_max)
    state.i_sat = (ird, irq) != (i_d, i_q)
    vd, vq = inner_loop_step(params, state, (ird, irq), m)
    i_sd, i_sq, pitch = machine_side_step(params, state, m)
    state.k += 1
    out = ControlOutput(vd, vq, i_sd, i_sq, pitch, delta, omega, frame, meas.t, ird, irq, e_total, v_f)
    state.last = out
    return out


def gfl_step(params: ViscParams, state: ViscState, meas: Measurements) -> ControlOutput:
    """Grid-following P/Q mode with the frame locked to the terminal voltage."""
    g = params.gfl
    frame = meas.frame + math.atan2(meas.v_oq, meas.v_od)
    m = meas.rotated(frame)
    p_err = g.p_ref - m.p_out
    q_err = g.q_ref - m.q_out
    freeze = params.anti_windup and state.i_sat
    i_d = state.gfl_p.step(p_err, freeze=freeze and p_err * state.gfl_p.output > 0)
    i_q = -state.gfl_q.step(q_err, freeze=freeze and q_err * state.gfl_q.output > 0)
    ird, irq = limit_current(i_d, i_q, g.i_max)
    state.i_sat = (ird, irq) != (i_d, i_q)
    vd, vq = inner_loop_step(params, state, (ird, irq), m)
    i_sd, i_sq, pitch = machine_side_step(params, state, m)
    state.k += 1
    state.delta = meas.t + frame / params.omega_b
    state.omega = 1.0
    out = ControlOutput(vd, vq, i_sd, i_sq, pitch, state.delta, 1.0, frame, meas.t, ird, irq, 0.0, 0.0)
    state.last = out
    return out


def controller_step(params: ViscParams, state: ViscState, meas: Measurements) -> ControlOutput:
    if state.mode is Mode.VISC:
        return visc_step(params, state, meas)
    return gfl_step(params, state, meas)


# --------------------------------------------------------------------------
# mode management


def _seed_common(params: ViscParams, state: ViscState, m: Measurements, last: ControlOutput | None,
                 i_ref: tuple[float, float]) -> None:
    """Seed the inner loop and machine side so the next output repeats ``last``."""
    p = params.inner
    if last is not None:
        v_prev = last.v_common() * cmath.exp(-1j * m.frame)
        vd, vq = v_prev.real, v_prev.imag
    else:
        vd, vq = m.v_od, m.v_oq
    cd, cq = _inner_coupling(p, m.i_cvd, m.i_cvq, m.v_od, m.v_oq, m.i_od, m.i_oq)
    state.inner_d.reset(i_ref[0] - m.i_cvd, vd - cd)
    state.inner_q.reset(i_ref[1] - m.i_cvq, vq - cq)
    state.v_sat = False
    i_sd = last.i_sd if last is not None else m.p_me
    state.dc_pi.reset(params.machine.v_dc_ref - m.v_dc, i_sd)
    state.pitch = last.pitch if last is not None else 0.0
    state.pitch_pi.reset(m.p_mppt - m.p_me, state.pitch)


def new_state(params: ViscParams, mode: Mode, meas: Measurements, last: ControlOutput | None = None) -> ViscState:
    """Fresh controller state seeded at the operating point in ``meas``.

    ``meas`` must be in the common frame (``frame`` may be nonzero).  The
    seeded controller reproduces the present converter current and, when
    ``last`` is given, the present modulation voltage.
    """
    state = ViscState(params, mode)
    ts = params.ts
    t_prev = meas.t - ts
    if mode is Mode.VISC:
        mc = meas.rotated(0.0)
        v = complex(mc.v_od, mc.v_oq)
        icv = complex(mc.i_cvd, mc.i_cvq)
        z = complex(params.elec.r_vir, params.elec.l_vir)
        emf = v + z * icv
        frame = cmath.phase(emf)
        m = mc.rotated(frame)
        e_total = abs(emf)
        delta1 = t_prev + frame / params.omega_b
        state.inertia = InertiaHistory.steady(delta1, 1.0, ts, -meas.t_e)
        state.delta, state.omega = delta1, 1.0
        a = params.avr
        err = (a.v_ref - m.v_mag) + a.mq * (a.q_ref - m.q_out)
        state.avr_pi.reset(err, e_total - a.e_ref)
        state.avr_err_prev = err
        state.e_avr = e_total - a.e_ref
        i_ref = electrical_model(params, e_total, 1.0, m.v_od, m.v_oq)
        i_ref = limit_current(*i_ref, params.i_max)
        _seed_common(params, state, m, last, i_ref)
        for blk in state.supp_blocks.values():
            blk.reset(0.0, 0.0)
    else:
        frame = meas.frame + math.atan2(meas.v_oq, meas.v_od)
        m = meas.rotated(frame)
        g = params.gfl
        i_ref = (m.i_cvd, m.i_cvq)
        state.gfl_p.reset(g.p_ref - m.p_out, m.i_cvd)
        state.gfl_q.reset(g.q_ref - m.q_out, -m.i_cvq)
        state.delta, state.omega = t_prev + frame / params.omega_b, 1.0
        _seed_common(params, state, m, last, i_ref)
    state.last = last if last is not None else ControlOutput(frame=frame, t=t_prev)
    return state


def switch_mode(params: ViscParams, state: ViscState, target: Mode, meas: Measurements,
                visc_enabled: bool = True) -> ViscState:
    """Bumpless transfer to ``target``; a no-op if already there.

    All discrete histories are re-seeded from ``meas`` and the last applied
    output, so the first sample in the new mode continues the old one.
    """
    if target is Mode.VISC and not visc_enabled:
        raise ModeDisabled("ViSC mode is not enabled for this turbine")
    if state.mode is target:
        return state
    return new_state(params, target, meas, state.last)
