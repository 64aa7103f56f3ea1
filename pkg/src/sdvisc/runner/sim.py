"""Master co-simulation loop: plant steps, controller samples, packets, events.

Turbines in grid-following mode are controlled locally and apply their
command at the sample instant.  Turbines in ViSC mode are controlled by a
software-defined controller (SDC) unit: each sample the turbine sends its
measurements, the SDC steps the controller when the packet arrives and
sends the command back, and the turbine holds the newest command it has
received.
"""
from __future__ import annotations

import cmath
import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import root

from .. import netsim
from ..netsim import (
    CommTables,
    DetectorState,
    EventLog,
    FailoverReason,
    LinkGraph,
    PacketKind,
    PacketQueue,
)
from ..plant import (
    ClearFault,
    Diverged,
    Fault,
    LoadStep,
    Plant,
    SetGridVoltage,
    SetScr,
    SetWind,
)
from ..visc import ControlOutput, Measurements, Mode, ViscParams, controller_step, new_state
from .config import ConfigError, Scenario

log = logging.getLogger(__name__)

__all__ = ["CoSim", "RunResult", "run", "steady_operating_point"]

OMEGA_BOUNDS = (0.9, 1.1)


@dataclass
class RunResult:
    csv: str
    events: str
    metrics: object
    diverged: bool
    diverged_at: float | None
    switch_jumps: list = field(default_factory=list)
    max_iref: float = 0.0


@dataclass
class _Turbine:
    tid: str
    k: int
    params: ViscParams  # used by software-defined instances (SDC or backup)
    local_params: ViscParams
    host: str = "local"  # local | sdc | sdc_backup | local_backup
    pending: bool = False  # flows set up, still under local control
    mode: Mode = Mode.GRID_FOLLOWING_PQ
    local_state: object = None
    applied: ControlOutput | None = None
    det: DetectorState = field(default_factory=DetectorState)
    last_meas: Measurements | None = None


class _SdcUnit:
    """One SDC instance hosting ViSC controllers for several turbines."""

    def __init__(self, name: str):
        self.name = name
        self.alive = True
        self.states: dict = {}
        self.params: dict = {}
        self.next_k: dict = {}
        self.held: dict = {}
        self._params_pending: dict = {}

    def adopt(self, tid: str, params: ViscParams, meas: Measurements, last: ControlOutput | None, k: int):
        self.params[tid] = params
        self.states[tid] = new_state(params, Mode.VISC, meas, last)
        self.next_k[tid] = k
        self.held[tid] = meas

    def on_measurement(self, tid: str, k: int, meas: Measurements, last: ControlOutput | None,
                       ts: float) -> ControlOutput | None:
        if tid not in self.states:
            # first packet of a newly set-up flow: bumpless start
            self.adopt(tid, self._params_pending[tid], meas, last, k)
        if k < self.next_k[tid]:
            return None
        st, p = self.states[tid], self.params[tid]
        # samples whose packets never arrived are run on the held values
        while self.next_k[tid] < k:
            kk = self.next_k[tid]
            stale = dataclasses.replace(self.held[tid], t=kk * ts)
            controller_step(p, st, stale)
            self.next_k[tid] = kk + 1
        out = controller_step(p, st, meas)
        self.next_k[tid] = k + 1
        self.held[tid] = meas
        return out

    def expect(self, tid: str, params: ViscParams) -> None:
        """Prepare to adopt ``tid`` on its first measurement packet."""
        self._params_pending[tid] = params
        self.states.pop(tid, None)


def steady_operating_point(plant: Plant, params: list, modes: list) -> np.ndarray:
    """Converter voltages (common frame) that hold every controller at rest.

    Grid-following turbines meet their P/Q references; ViSC turbines carry
    no active power and a zero AVR error.
    """
    n = plant.n

    def resid(z):
        u = z[:n] + 1j * z[n:]
        x = plant.steady_state(u)
        vn = plant.turbine_node_voltage(x)
        s = vn * np.conj(x[2 * n:])
        r = np.empty(2 * n)
        for k in range(n):
            if modes[k] is Mode.VISC:
                a = params[k].avr
                r[2 * k] = s[k].real
                r[2 * k + 1] = (a.v_ref - abs(vn[k])) + a.mq * (a.q_ref - s[k].imag)
            else:
                r[2 * k] = s[k].real - params[k].gfl.p_ref
                r[2 * k + 1] = s[k].imag - params[k].gfl.q_ref
        return r

    z0 = np.r_[np.ones(n), np.zeros(n)]
    sol = root(resid, z0, method="hybr", tol=1e-12)
    if np.max(np.abs(resid(sol.x))) > 1e-9:
        raise ConfigError(f"no steady operating point found: {sol.message}")
    return sol.x[:n] + 1j * sol.x[n:]


class CoSim:
    """One scenario run; construct, then call :meth:`run`."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        self.log = EventLog()
        ids = sc.turbine_ids
        specs = {t: sc.turbines[t].spec for t in ids}
        self.plant = Plant(sc.topology, sc.grid, specs, sc.plant_dt,
                           p_avail={t: sc.turbines[t].p_avail for t in ids}, load_pu=sc.load_pu)
        self.ids = ids
        self.ts = sc.controller_ts
        self.ratio = sc.ratio
        self.turb: dict = {}
        for k, tid in enumerate(ids):
            tc = sc.turbines[tid]
            sdc_params = dataclasses.replace(tc.params, discretizer=sc.comm.discretizer,
                                             perturbation_eps=sc.perturbation_eps)
            tr = _Turbine(tid, k, sdc_params, tc.params)
            tr.mode = Mode.VISC if tc.mode == "visc" else Mode.GRID_FOLLOWING_PQ
            self.turb[tid] = tr
        self.tables = CommTables.build(ids, {t: sc.turbines[t].visc_enabled for t in ids},
                                       {t: sc.turbines[t].link_available for t in ids})
        self.graph = LinkGraph.default(ids, sc.comm.latency, backup=sc.comm.backup_controller)
        for t in ids:
            if not sc.turbines[t].link_available:
                for nb in list(self.graph.g.neighbors(t)):
                    self.graph.set_up(t, nb, False)
        self.queue = PacketQueue()
        self.sdc = {"sdc": _SdcUnit("sdc")}
        if sc.comm.backup_controller:
            self.sdc["sdc_backup"] = _SdcUnit("sdc_backup")
        for name in self.sdc:
            path = self.graph.shortest_path("wfcc", name)
            if path is not None:
                self.graph.install(("wfcc", name), path)
        self.failover_active: set = set()
        self.dr_count = 0
        self.failover_count = 0
        self.switch_jumps: list = []
        self.max_iref = 0.0
        self.diverged_at: float | None = None
        self.rows: list = []
        self._cols: list | None = None
        for note in sc.notes:
            self.log.emit(0.0, "config_note", None, note=note)
        self._initialize()

    # ------------------------------------------------------------ startup
    def _initialize(self) -> None:
        plant = self.plant
        n = plant.n
        modes = [self.turb[t].mode for t in self.ids]
        params = [self.turb[t].params for t in self.ids]
        u = steady_operating_point(plant, params, modes)
        x = plant.steady_state(u)
        plant.state.x = x
        plant.dispatch()
        p_conv = (u * np.conj(x[:n])).real
        if np.any(p_conv > plant.p_avail + 1e-9):
            raise ConfigError("initial active power exceeds the available wind power")
        plant.state.p_machine = p_conv.copy()
        plant.state.v_dc[:] = 1.0
        plant.v_dq = u.copy()
        plant.i_sd_cmd = p_conv.copy()
        t_prev = -self.ts
        for tid in self.ids:
            tr = self.turb[tid]
            k = tr.k
            last = ControlOutput(u[k].real, u[k].imag, p_conv[k], 0.0, 0.0, 0.0, 1.0, 0.0, t_prev)
            m = plant.measure(tid)
            tr.applied = last
            if tr.mode is Mode.VISC:
                netsim.request_visc(self.tables, self.graph, tid, "sdc", self.log, 0.0)
                tr.host = "sdc"
                self.sdc["sdc"].expect(tid, tr.params)
                self.sdc["sdc"].adopt(tid, tr.params, m, last, 0)
                tr.det = DetectorState(next_k=0)
            else:
                tr.local_state = new_state(tr.local_params, Mode.GRID_FOLLOWING_PQ, m, last)

    # ---------------------------------------------------------- helpers
    def _rtt(self, tid: str, host: str) -> float:
        r = self.graph.routes
        up, down = r.get((tid, host)), r.get((host, tid))
        if up is None or down is None:
            return math.inf
        return self.graph.latency(up) + self.graph.latency(down)

    def _apply(self, tr: _Turbine, out: ControlOutput, now: float, switching: bool = False) -> None:
        before = self.plant.converter_voltage(now)[tr.k]
        self.plant.apply(tr.k, out)
        tr.applied = out
        self.max_iref = max(self.max_iref, math.hypot(out.i_refd, out.i_refq))
        if switching:
            after = self.plant.converter_voltage(now)[tr.k]
            jump = abs(after - before)
            self.switch_jumps.append((now, tr.tid, jump))
            self.log.emit(now, "mode_switch", tr.tid, to="visc", host=tr.host, jump=float(f"{jump:.6g}"))

    # ----------------------------------------------------------- events
    def _event(self, ev, now: float, k_next: int) -> None:
        a = ev.args
        kind = ev.kind
        p = self.plant
        if kind == "fault":
            p.inject_event(Fault(a["retained_v"]))
        elif kind == "clear_fault":
            p.inject_event(ClearFault())
        elif kind == "set_scr":
            p.inject_event(SetScr(a["scr"]))
        elif kind == "load_step":
            p.inject_event(LoadStep(a["dp"]))
        elif kind == "set_wind":
            p.inject_event(SetWind(a["p"], a["turbine"] or None))
        elif kind == "set_grid_voltage":
            p.inject_event(SetGridVoltage(a["v"]))
        elif kind == "plug_visc":
            self._plug(a["turbine"], now, k_next)
            return
        elif kind in ("link_fail", "link_restore"):
            self.graph.set_up(a["a"], a["b"], kind == "link_restore")
            if kind == "link_fail":
                dropped = netsim.drop_on_failure(self.graph, self.queue)
                self.log.emit(now, kind, None, edge=[a["a"], a["b"]], dropped_in_flight=dropped)
                return
        elif kind == "controller_fail":
            name = a["controller"]
            if name not in self.sdc:
                raise ConfigError(f"controller_fail: unknown controller {name!r}")
            self.sdc[name].alive = False
        elif kind == "set_param":
            self._set_param(a["turbine"], a["key"], a["value"], now)
            return
        self.log.emit(now, kind, a.get("turbine") or None, **{k: v for k, v in a.items() if k != "turbine"})

    def _plug(self, tid: str, now: float, k_next: int) -> None:
        tr = self.turb[tid]
        try:
            netsim.request_visc(self.tables, self.graph, tid, "sdc", self.log, now)
        except (netsim.ViscDisabled, netsim.NoLink, netsim.UnknownTurbine) as exc:
            self.log.emit(now, "request_rejected", tid, reason=type(exc).__name__, detail=str(exc))
            return
        tr.host = "sdc"
        tr.pending = True
        tr.det = DetectorState(next_k=k_next)
        self.sdc["sdc"].expect(tid, tr.params)
        self.log.emit(now, "plug_visc", tid)

    def _set_param(self, tid: str, key: str, value, now: float) -> None:
        tr = self.turb[tid]
        if tr.host in self.sdc and not tr.pending:
            self.queue.send(self.graph, "wfcc", tr.host, PacketKind.WFCC_COMMAND, now, (tid, key, value))
        else:
            tr.local_params = _with_param(tr.local_params, key, value)
            tr.params = _with_param(tr.params, key, value)
        self.log.emit(now, "set_param", tid, key=key, value=value)

    # ------------------------------------------------------------ sample
    def _sample(self, k: int, now: float) -> list:
        plant = self.plant
        ms = plant.measure_all()
        for tid in self.ids:
            tr = self.turb[tid]
            if tr.host in self.sdc and not tr.pending:
                self._poll(tr, now, k, ms[tr.k])
        for tid in self.ids:
            tr = self.turb[tid]
            m = ms[tr.k]
            tr.last_meas = m
            if tr.host in ("local", "local_backup") or tr.pending:
                out = controller_step(tr.local_params if tr.host == "local" else tr.params, tr.local_state, m)
                self._apply(tr, out, now)
            if tr.host in self.sdc:
                self.queue.send(self.graph, tid, tr.host, PacketKind.MEASUREMENT, now, (k, m, tr.applied))
        for tid in self.ids:
            st = self._ctrl_state(self.turb[tid])
            if st is not None and st.mode is Mode.VISC and not OMEGA_BOUNDS[0] <= st.omega <= OMEGA_BOUNDS[1]:
                raise Diverged(now, f"{tid} controller frequency {st.omega:.4f} pu outside [0.9, 1.1]")
        return ms

    def _ctrl_state(self, tr: _Turbine):
        if tr.host in self.sdc:
            return self.sdc[tr.host].states.get(tr.tid)
        return tr.local_state

    def _poll(self, tr: _Turbine, now: float, k: int, m: Measurements) -> None:
        sc = self.sc
        host = tr.host
        res = netsim.detect_and_reroute(self.tables, self.graph, tr.det, tr.tid, now, self.ts,
                                        self._rtt(tr.tid, host), host, sc.comm.sdn_enabled, self.log)
        if res is None:
            return
        self.dr_count += 1
        if res == "no_path":
            if sc.comm.failover_enabled:
                netsim.failover(tr.tid, self.tables, FailoverReason.NO_PATH, active=self.failover_active,
                                log_=self.log, now=now)
                self.failover_count += 1
                tr.host = "local_backup"
                tr.local_state = new_state(tr.params, Mode.VISC, m, tr.applied)
                self.tables.set_t2(tr.tid, 1, 1)
            return
        if not self.sdc[host].alive and sc.comm.failover_enabled:
            backup = "sdc_backup" if "sdc_backup" in self.sdc and host != "sdc_backup" else None
            try:
                netsim.failover(tr.tid, self.tables, FailoverReason.MASTER_CONTROLLER_FAILURE, self.graph,
                                backup, self.failover_active, self.log, now, master=host)
            except (netsim.NoBackupConfigured, netsim.NoLink) as exc:
                self.log.emit(now, "failover_failed", tr.tid, reason=str(exc))
                return
            self.failover_count += 1
            tr.host = backup
            self.sdc[backup].expect(tr.tid, tr.params)
            tr.det = DetectorState(next_k=k)

    def _deliver(self, now: float) -> None:
        for pkt in netsim.transport_step(self.graph, self.queue, now):
            if pkt.kind is PacketKind.MEASUREMENT:
                unit = self.sdc.get(pkt.dst)
                if unit is None or not unit.alive:
                    continue
                k, m, last = pkt.payload
                out = unit.on_measurement(pkt.src, k, m, last, self.ts)
                if out is not None:
                    self.queue.send(self.graph, pkt.dst, pkt.src, PacketKind.CONTROL_COMMAND,
                                    pkt.deliver_at, (k, out))
            elif pkt.kind is PacketKind.CONTROL_COMMAND:
                tr = self.turb[pkt.dst]
                if tr.host != pkt.src:
                    continue
                k, out = pkt.payload
                tr.det.received(k, now)
                switching = tr.pending
                if switching:
                    tr.pending = False
                    tr.mode = Mode.VISC
                    tr.local_state = None
                self._apply(tr, out, now, switching)
            elif pkt.kind is PacketKind.WFCC_COMMAND:
                unit = self.sdc.get(pkt.dst)
                tid, key, value = pkt.payload
                if unit is not None and tid in unit.params:
                    unit.params[tid] = _with_param(unit.params[tid], key, value)
                tr = self.turb[tid]
                tr.params = _with_param(tr.params, key, value)

    # ------------------------------------------------------------ output
    def _record(self, now: float, ms: list, diverged: bool = False) -> None:
        plant = self.plant
        sig = self.sc.outputs
        vcv = plant.converter_voltage(now)
        row = [now, abs(plant.v_pcc()), plant.state.grid_freq, self.queue.sent, self.queue.delivered,
               self.queue.dropped, self.dr_count, self.failover_count, 1 if diverged else 0]
        cols = None
        if self._cols is None:
            cols = ["t_s", "pcc.v", "grid.freq", "comm.sent", "comm.delivered", "comm.dropped",
                    "comm.dr_count", "comm.failover_count", "run.diverged"]
        for tid in self.ids:
            tr = self.turb[tid]
            m = ms[tr.k]
            st = self._ctrl_state(tr)
            a = tr.applied
            vals = {
                "mode": 1.0 if tr.mode is Mode.VISC and not tr.pending else 0.0,
                "p": m.p_out,
                "q": m.q_out,
                "v": m.v_mag,
                "i": math.hypot(m.i_cvd, m.i_cvq),
                "iref": math.hypot(a.i_refd, a.i_refq),
                "vcv_d": vcv[tr.k].real,
                "vcv_q": vcv[tr.k].imag,
                "omega": a.omega,
                "e": a.e,
                "mq": tr.params.avr.mq,
                "v_dc": m.v_dc,
                "pitch": a.pitch,
            }
            for s in sig:
                row.append(vals[s])
                if cols is not None:
                    cols.append(f"{tid}.{s}")
        if cols is not None:
            self._cols = cols
        self.rows.append(row)

    def csv_text(self) -> str:
        lines = [",".join(self._cols)]
        for r in self.rows:
            lines.append(",".join(format(float(v), ".9g") for v in r))
        return "\n".join(lines) + "\n"

    # -------------------------------------------------------------- run
    def run(self) -> RunResult:
        from .metrics import compute_metrics, parse_csv

        sc = self.sc
        dt = sc.plant_dt
        nsteps = int(round(sc.duration / dt))
        ev_steps = [(int(round(e.t / dt)), e) for e in sc.events]
        ei = 0
        ms = None
        diverged = False
        try:
            for s in range(nsteps + 1):
                now = s * dt
                k_next = -(-s // self.ratio)
                while ei < len(ev_steps) and ev_steps[ei][0] <= s:
                    self._event(ev_steps[ei][1], now, k_next)
                    ei += 1
                sample = s % self.ratio == 0
                if sample:
                    ms = self._sample(s // self.ratio, now)
                self._deliver(now)
                if sample and (s // self.ratio) % sc.every == 0:
                    self._record(now, ms)
                if s < nsteps:
                    self.plant.step()
        except Diverged as exc:
            diverged = True
            self.diverged_at = exc.t
            self.log.emit(exc.t, "diverged", None, reason=exc.reason)
            ms = self.plant.measure_all() if _finite(self.plant) else ms
            self._record(exc.t, ms, diverged=True)
        csv = self.csv_text()
        metrics = compute_metrics(parse_csv(csv))
        return RunResult(csv, self.log.to_ndjson(), metrics, diverged, self.diverged_at,
                         list(self.switch_jumps), self.max_iref)


def _finite(plant: Plant) -> bool:
    return bool(np.all(np.isfinite(plant.state.x)))


def _with_param(params: ViscParams, key: str, value) -> ViscParams:
    """Copy of ``params`` with a dotted key such as ``avr.v_ref`` replaced."""
    parts = key.split(".")
    if len(parts) == 1:
        if not hasattr(params, key):
            raise ConfigError(f"set_param: unknown key {key!r}")
        return dataclasses.replace(params, **{key: value})
    if len(parts) != 2 or not hasattr(params, parts[0]):
        raise ConfigError(f"set_param: unknown key {key!r}")
    sub = getattr(params, parts[0])
    if not hasattr(sub, parts[1]):
        raise ConfigError(f"set_param: unknown key {key!r}")
    return dataclasses.replace(params, **{parts[0]: dataclasses.replace(sub, **{parts[1]: value})})


def run(sc: Scenario) -> RunResult:
    return CoSim(sc).run()
