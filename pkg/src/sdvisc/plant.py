"""Averaged dq-frame wind-farm model.

All phasors live in one common frame rotating at nominal speed.  Each
turbine carries an LC filter and a step-up transformer as dynamic states
(converter-side current, capacitor voltage, grid-side current) in per unit
of its own rating.  Cluster cables, the export cable, the PCC load and the
Thevenin grid form an algebraic network on the farm base.  Because the
whole electrical part is linear for given converter voltages and grid EMF,
it is stepped with a precomputed trapezoidal transition matrix.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .visc import ControlOutput, Measurements

__all__ = [
    "Diverged",
    "ClearWithoutFault",
    "UnknownTurbine",
    "GridParams",
    "TurbineSpec",
    "TurbineElec",
    "Cluster",
    "FarmTopology",
    "PlantState",
    "Plant",
    "Fault",
    "ClearFault",
    "SetScr",
    "LoadStep",
    "SetWind",
    "SetGridVoltage",
]


class Diverged(RuntimeError):
    """A plant quantity left its sanity bounds."""

    def __init__(self, t: float, reason: str):
        super().__init__(f"diverged at t={t:.6f} s: {reason}")
        self.t = t
        self.reason = reason


class ClearWithoutFault(RuntimeError):
    pass


class UnknownTurbine(KeyError):
    pass


@dataclass
class GridParams:
    """Thevenin equivalent of the onshore grid on the farm base.

    ``h_grid = inf`` freezes the grid frequency at nominal.
    """

    scr: float = 7.14
    rx_ratio: float = 0.1
    v_grid: float = 1.0
    h_grid: float = math.inf
    d_grid: float = 1.0
    f_base: float = 50.0

    def __post_init__(self):
        if self.scr <= 0:
            raise ValueError("scr must be positive")
        if self.rx_ratio < 0:
            raise ValueError("rx_ratio must be non-negative")

    @property
    def z_th(self) -> complex:
        """``|Z| = 1/scr`` with the configured R/X ratio."""
        mag = 1.0 / self.scr
        x = mag / math.sqrt(1.0 + self.rx_ratio ** 2)
        return complex(self.rx_ratio * x, x)


@dataclass
class TurbineSpec:
    """Static electrical data of one turbine (own-rating per unit)."""

    rating: float = 0.1  # share of the farm base
    l_f: float = 0.1
    r_f: float = 0.005
    c_f: float = 0.1
    r_d: float = 0.3  # passive damping resistor in series with c_f
    z_tr: complex = complex(0.002, 0.06)
    c_dc: float = 0.04
    tau_machine: float = 0.02

    def __post_init__(self):
        if self.c_f <= 0:
            raise ValueError("c_f must be positive")
        if self.r_d < 0:
            raise ValueError("r_d must be non-negative")
        if self.rating <= 0:
            raise ValueError("rating must be positive")


@dataclass
class Cluster:
    cable_z: complex
    turbine_ids: list


@dataclass
class FarmTopology:
    clusters: list
    pcc_cable_z: complex = complex(0.002, 0.02)

    def __post_init__(self):
        seen = []
        for c in self.clusters:
            if c.cable_z == 0:
                raise ValueError("cluster cable impedance must be nonzero")
            seen.extend(c.turbine_ids)
        if len(seen) != len(set(seen)):
            raise ValueError("a turbine belongs to more than one cluster")
        if self.pcc_cable_z == 0:
            raise ValueError("export cable impedance must be nonzero")

    @property
    def turbine_ids(self) -> list:
        return [t for c in self.clusters for t in c.turbine_ids]

    def cluster_of(self, tid) -> int:
        for k, c in enumerate(self.clusters):
            if tid in c.turbine_ids:
                return k
        raise UnknownTurbine(tid)


@dataclass
class TurbineElec:
    """Snapshot of one turbine's electrical state."""

    i_cv: complex
    v_c: complex
    i_o: complex
    v_dc: float
    p_machine: float
    frame_angle: float
    v_node: complex


@dataclass
class PlantState:
    t: float
    x: np.ndarray  # [i_cv..., v_cap..., i_o...] complex
    v_dc: np.ndarray
    p_machine: np.ndarray
    grid_freq: float = 1.0
    grid_angle: float = 0.0
    load_pu: float = 0.0
    fault: float | None = None
    pitch: np.ndarray | None = None

    def copy(self) -> "PlantState":
        return PlantState(self.t, self.x.copy(), self.v_dc.copy(), self.p_machine.copy(),
                          self.grid_freq, self.grid_angle, self.load_pu, self.fault,
                          None if self.pitch is None else self.pitch.copy())


# events -------------------------------------------------------------------


@dataclass(frozen=True)
class Fault:
    retained_v: float = 0.4


@dataclass(frozen=True)
class ClearFault:
    pass


@dataclass(frozen=True)
class SetScr:
    scr: float


@dataclass(frozen=True)
class LoadStep:
    dp: float


@dataclass(frozen=True)
class SetWind:
    p: float
    turbine: object = None


@dataclass(frozen=True)
class SetGridVoltage:
    v: float


class Plant:
    """Fixed-step averaged model; ``step`` advances one plant step ``dt``."""

    V_MAX = 3.0
    I_MAX = 10.0

    def __init__(self, topology: FarmTopology, grid: GridParams, turbines: dict, dt: float = 50e-6,
                 p_avail: dict | None = None, load_pu: float = 0.0):
        self.topology = topology
        self.grid = grid
        self.dt = dt
        self.ids = topology.turbine_ids
        missing = [t for t in self.ids if t not in turbines]
        if missing:
            raise UnknownTurbine(missing[0])
        self.specs = [turbines[t] for t in self.ids]
        self.index = {t: k for k, t in enumerate(self.ids)}
        n = len(self.ids)
        self.n = n
        self.omega_b = 2.0 * math.pi * grid.f_base
        self.rating = np.array([s.rating for s in self.specs])
        self.c_dc = np.array([s.c_dc for s in self.specs])
        self.tau_m = np.array([s.tau_machine for s in self.specs])
        self.node_of = np.array([topology.cluster_of(t) for t in self.ids])
        self.p_avail = np.array([(p_avail or {}).get(t, 1.0) for t in self.ids], dtype=float)
        self.scr = grid.scr
        self.v_grid = grid.v_grid
        # held converter commands
        self.v_dq = np.zeros(n, dtype=complex)
        self.frame0 = np.zeros(n)
        self.omega_cmd = np.ones(n)
        self.t_cmd = np.zeros(n)
        self.i_sd_cmd = np.zeros(n)
        self.state = PlantState(0.0, np.zeros(3 * n, dtype=complex), np.ones(n), np.zeros(n),
                                load_pu=load_pu, pitch=np.zeros(n))
        self.p_sched = 0.0
        self._build()

    # ---------------------------------------------------------------- model
    def _network(self):
        """Bus impedance matrix for nodes [clusters..., collector, pcc]."""
        nc = len(self.topology.clusters)
        col, pcc = nc, nc + 1
        y = np.zeros((nc + 2, nc + 2), dtype=complex)

        def branch(a, b, z):
            yy = 1.0 / z
            y[a, a] += yy
            y[b, b] += yy
            y[a, b] -= yy
            y[b, a] -= yy

        for k, c in enumerate(self.topology.clusters):
            branch(k, col, c.cable_z)
        branch(col, pcc, self.topology.pcc_cable_z)
        z_th = GridParams(self.scr, self.grid.rx_ratio).z_th
        y_th = 1.0 / z_th
        y[pcc, pcc] += y_th + self.state.load_pu
        zbus = np.linalg.inv(y)
        return zbus, y_th, pcc

    def _build(self) -> None:
        n = self.n
        wb = self.omega_b
        zbus, y_th, pcc = self._network()
        self.zbus, self.y_th, self.pcc = zbus, y_th, pcc
        nodes = self.node_of
        # node voltage of each turbine: v_n = Mx i_o + me * E
        mx = zbus[np.ix_(nodes, nodes)] * self.rating[None, :]
        me = zbus[nodes, pcc] * y_th
        self.mx, self.me = mx, me
        lf = np.array([s.l_f for s in self.specs])
        rf = np.array([s.r_f for s in self.specs])
        cf = np.array([s.c_f for s in self.specs])
        rd = np.array([s.r_d for s in self.specs])
        self.r_d = rd
        zt = np.array([s.z_tr for s in self.specs])
        lt, rt = zt.imag, zt.real
        a = np.zeros((3 * n, 3 * n), dtype=complex)
        b = np.zeros((3 * n, n), dtype=complex)
        be = np.zeros(3 * n, dtype=complex)
        i1, i2, i3 = np.arange(n), np.arange(n, 2 * n), np.arange(2 * n, 3 * n)
        # filter node voltage v_f = v_cap + r_d (i_cv - i_o)
        a[i1, i1] = -wb * (rf + rd + 1j * lf) / lf
        a[i1, i2] = -wb / lf
        a[i1, i3] = wb * rd / lf
        b[i1, i1] = wb / lf
        a[i2, i1] = wb / cf
        a[i2, i3] = -wb / cf
        a[i2, i2] = -1j * wb
        a[i3, i2] = wb / lt
        a[i3, i1] = wb * rd / lt
        a[i3, i3] = -wb * (rt + rd + 1j * lt) / lt
        a[np.ix_(i3, i3)] -= (wb / lt)[:, None] * mx
        be[i3] = -(wb / lt) * me
        self.a, self.b, self.be = a, b, be
        h = self.dt
        eye = np.eye(3 * n)
        lhs = np.linalg.inv(eye - 0.5 * h * a)
        self.phi = lhs @ (eye + 0.5 * h * a)
        self.gam = lhs @ b * h
        self.gam_e = lhs @ be * h

    def grid_emf(self) -> complex:
        st = self.state
        mag = self.v_grid if st.fault is None else st.fault
        return mag * cmath.exp(1j * st.grid_angle)

    def node_voltages(self, x: np.ndarray | None = None, emf: complex | None = None) -> np.ndarray:
        """Voltages of all network nodes [clusters..., collector, pcc]."""
        x = self.state.x if x is None else x
        emf = self.grid_emf() if emf is None else emf
        n = self.n
        inj = np.zeros(self.zbus.shape[0], dtype=complex)
        np.add.at(inj, self.node_of, self.rating * x[2 * n:])
        inj[self.pcc] += self.y_th * emf
        return self.zbus @ inj

    def turbine_node_voltage(self, x=None, emf=None) -> np.ndarray:
        x = self.state.x if x is None else x
        emf = self.grid_emf() if emf is None else emf
        return self.mx @ x[2 * self.n:] + self.me * emf

    def filter_voltage(self, x: np.ndarray | None = None) -> np.ndarray:
        """Voltage at the filter node (capacitor plus damping resistor)."""
        x = self.state.x if x is None else x
        n = self.n
        return x[n:2 * n] + self.r_d * (x[:n] - x[2 * n:])

    def v_pcc(self) -> complex:
        return self.node_voltages()[self.pcc]

    def converter_voltage(self, t: float | None = None) -> np.ndarray:
        t = self.state.t if t is None else t
        ang = self.frame0 + self.omega_b * (self.omega_cmd - 1.0) * (t - self.t_cmd)
        return self.v_dq * np.exp(1j * ang)

    def frame_angles(self, t: float | None = None) -> np.ndarray:
        t = self.state.t if t is None else t
        return self.frame0 + self.omega_b * (self.omega_cmd - 1.0) * (t - self.t_cmd)

    def derivatives(self, x=None, u=None, emf=None) -> np.ndarray:
        """Continuous-time electrical state derivative (pu/s)."""
        x = self.state.x if x is None else x
        u = self.converter_voltage() if u is None else u
        emf = self.grid_emf() if emf is None else emf
        return self.a @ x + self.b @ u + self.be * emf

    # ------------------------------------------------------------ commands
    def apply(self, k: int, out: ControlOutput) -> None:
        """Zero-order hold the command ``out`` on turbine index ``k``."""
        self.v_dq[k] = complex(out.v_invd, out.v_invq)
        self.frame0[k] = out.frame
        self.omega_cmd[k] = out.omega
        self.t_cmd[k] = out.t
        self.i_sd_cmd[k] = out.i_sd
        self.state.pitch[k] = out.pitch

    # -------------------------------------------------------------- events
    def inject_event(self, event) -> None:
        st = self.state
        if isinstance(event, Fault):
            st.fault = event.retained_v
        elif isinstance(event, ClearFault):
            if st.fault is None:
                raise ClearWithoutFault(f"ClearFault at t={st.t} with no active fault")
            st.fault = None
        elif isinstance(event, SetScr):
            if event.scr <= 0:
                raise ValueError("scr must be positive")
            self.scr = event.scr
            self._build()
        elif isinstance(event, LoadStep):
            st.load_pu += event.dp
            self._build()
        elif isinstance(event, SetWind):
            if event.turbine is None:
                self.p_avail[:] = event.p
            else:
                if event.turbine not in self.index:
                    raise UnknownTurbine(event.turbine)
                self.p_avail[self.index[event.turbine]] = event.p
        elif isinstance(event, SetGridVoltage):
            self.v_grid = event.v
        else:
            raise TypeError(f"unsupported plant event {event!r}")

    # ---------------------------------------------------------------- step
    def grid_power(self, x=None, emf=None) -> complex:
        """Complex power delivered by the Thevenin source (farm base)."""
        emf = self.grid_emf() if emf is None else emf
        v = self.node_voltages(x, emf)[self.pcc]
        i_src = (emf - v) * self.y_th
        return emf * np.conj(i_src)

    def dispatch(self) -> None:
        """Schedule the grid source at its present output (frequency at rest)."""
        self.p_sched = float(self.grid_power().real)

    def step(self) -> None:
        st = self.state
        n = self.n
        dt = self.dt
        t_mid = st.t + 0.5 * dt
        u = self.v_dq * np.exp(1j * (self.frame0 + self.omega_b * (self.omega_cmd - 1.0) * (t_mid - self.t_cmd)))
        emf = self.grid_emf()
        x_old = st.x
        x = self.phi @ x_old + self.gam @ u + self.gam_e * emf
        # DC link and machine lag (explicit, slow relative to dt)
        i_cv = 0.5 * (x_old[:n] + x[:n])
        p_conv = (u * np.conj(i_cv)).real
        v_dc = st.v_dc
        st.v_dc = v_dc + dt * (st.p_machine - p_conv) / (self.c_dc * v_dc)
        # the rotor may absorb power (speeding up) down to the rating
        target = np.clip(self.i_sd_cmd, -1.0, self.p_avail)
        st.p_machine = st.p_machine + dt * (target - st.p_machine) / self.tau_m
        st.x = x
        if math.isfinite(self.grid.h_grid):
            p_src = self.grid_power(x, emf).real
            dw = st.grid_freq - 1.0
            dw += dt * (self.p_sched - p_src - self.grid.d_grid * dw) / (2.0 * self.grid.h_grid)
            st.grid_freq = 1.0 + dw
            st.grid_angle += dt * self.omega_b * dw
        st.t += dt
        self._check()

    def _check(self) -> None:
        st = self.state
        n = self.n
        x = st.x
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(st.v_dc)):
            raise Diverged(st.t, "non-finite state")
        if np.max(np.abs(self.filter_voltage(x))) > self.V_MAX:
            raise Diverged(st.t, "filter voltage above 3 pu")
        i = np.abs(x)
        if max(np.max(i[:n]), np.max(i[2 * n:])) > self.I_MAX:
            raise Diverged(st.t, "current above 10 pu")
        if not 0.9 <= st.grid_freq <= 1.1:
            raise Diverged(st.t, "grid frequency outside [0.9, 1.1] pu")
        if np.any(st.v_dc <= 0.0):
            raise Diverged(st.t, "DC-link voltage collapsed")

    # --------------------------------------------------------- measurement
    def measure(self, turbine_id, angle: float = 0.0) -> Measurements:
        """Terminal quantities of one turbine expressed in a frame at ``angle``."""
        if turbine_id not in self.index:
            raise UnknownTurbine(turbine_id)
        k = self.index[turbine_id]
        return self._measure_k(k, self.turbine_node_voltage(), angle)

    def measure_all(self) -> list:
        vn = self.turbine_node_voltage()
        return [self._measure_k(k, vn, 0.0) for k in range(self.n)]

    def _measure_k(self, k: int, vn: np.ndarray, angle: float) -> Measurements:
        st = self.state
        n = self.n
        rot = cmath.exp(-1j * angle)
        icv = complex(st.x[k]) * rot
        vc = complex(st.x[n + k] + self.r_d[k] * (st.x[k] - st.x[2 * n + k])) * rot
        io = complex(st.x[2 * n + k]) * rot
        v_node = complex(vn[k])
        s = v_node * complex(st.x[2 * n + k]).conjugate()
        omega = self.omega_cmd[k] if self.omega_cmd[k] > 0 else 1.0
        return Measurements(
            v_od=vc.real, v_oq=vc.imag,
            i_cvd=icv.real, i_cvq=icv.imag,
            i_od=io.real, i_oq=io.imag,
            q_out=s.imag, p_out=s.real, t_e=s.real / omega,
            v_dc=float(st.v_dc[k]), omega_r=1.0,
            p_mppt=float(self.p_avail[k]), p_me=float(st.p_machine[k]),
            v_mag=abs(v_node), t=st.t, frame=angle,
        )

    def turbine(self, turbine_id) -> TurbineElec:
        k = self.index[turbine_id]
        n = self.n
        st = self.state
        return TurbineElec(complex(st.x[k]), complex(st.x[n + k]), complex(st.x[2 * n + k]),
                           float(st.v_dc[k]), float(st.p_machine[k]), float(self.frame_angles()[k]),
                           complex(self.turbine_node_voltage()[k]))

    # ------------------------------------------------------------- balance
    def power_balance_residual(self) -> float:
        """Injected power minus cable losses, load and grid export (farm base)."""
        n = self.n
        st = self.state
        v = self.node_voltages()
        vn = v[self.node_of]
        s_inj = np.sum(self.rating * (vn * np.conj(st.x[2 * n:])).real)
        losses = 0.0
        nc = len(self.topology.clusters)
        col, pcc = nc, nc + 1
        for k, c in enumerate(self.topology.clusters):
            i = (v[k] - v[col]) / c.cable_z
            losses += (abs(i) ** 2 * c.cable_z).real
        i = (v[col] - v[pcc]) / self.topology.pcc_cable_z
        losses += (abs(i) ** 2 * self.topology.pcc_cable_z).real
        load = st.load_pu * abs(v[pcc]) ** 2
        emf = self.grid_emf()
        i_to_grid = (v[pcc] - emf) * self.y_th
        export = (v[pcc] * np.conj(i_to_grid)).real
        return float(s_inj - losses - load - export)

    # -------------------------------------------------------------- steady
    def steady_state(self, u: np.ndarray, emf: complex | None = None) -> np.ndarray:
        """Electrical equilibrium for fixed converter voltages ``u``."""
        emf = self.grid_emf() if emf is None else emf
        return np.linalg.solve(self.a, -(self.b @ u + self.be * emf))
