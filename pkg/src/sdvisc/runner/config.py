"""Scenario files: TOML text with unit-suffixed keys, merged over defaults.

Every key a scenario may set appears in :data:`DEFAULTS` (or, for the
per-turbine tables, in the ``visc`` section plus :data:`TURBINE_KEYS`).
Unknown keys are parse errors; semantically bad values are validation
errors carrying the dotted key path.
"""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..plant import Cluster, FarmTopology, GridParams, TurbineSpec
from ..visc import ViscParams

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ParseError",
    "ValidationError",
    "DEFAULTS",
    "Event",
    "TurbineConfig",
    "CommConfig",
    "Scenario",
    "load_scenario",
    "load_scenario_file",
    "parse_override",
    "apply_override",
    "scenario_path",
    "shipped_scenarios",
]


class ConfigError(Exception):
    """Any problem with a scenario file."""


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _visc_defaults() -> dict:
    d = dataclasses.asdict(ViscParams())
    for k in ("ts", "f_base", "discretizer", "perturbation_eps", "perturbation_seed"):
        d.pop(k)
    return d


ALL_SIGNALS = ["mode", "p", "q", "v", "i", "iref", "vcv_d", "vcv_q", "omega", "e", "mq", "v_dc", "pitch"]

DEFAULTS: dict = {
    "name": "scenario",
    "description": "",
    "duration_s": 1.0,
    "seed": 0,
    "plant": {"dt_s": 5e-5},
    "controller": {"ts_s": 0.00065, "perturbation_eps": 0.0},
    "grid": {
        "scr": 7.14,
        "rx_ratio": 0.1,
        "v_grid": 1.0,
        "h_grid_s": math.inf,
        "d_grid": 1.0,
        "f_base_hz": 50.0,
        "load_pu": 0.0,
    },
    "farm": {
        "n_turbines": 10,
        "cluster_size": 2,
        "cable_r": 0.001,
        "cable_x": 0.01,
        "pcc_cable_r": 0.002,
        "pcc_cable_x": 0.02,
        "l_f": 0.1,
        "r_f": 0.005,
        "c_f": 0.1,
        "r_d": 0.3,
        "tr_r": 0.002,
        "tr_x": 0.06,
        "c_dc": 0.04,
        "tau_machine_s": 0.02,
        "p_avail": 1.0,
    },
    "visc": _visc_defaults(),
    "turbine": {},
    "comm": {
        "sdn_enabled": True,
        "failover_enabled": True,
        "discretizer": "tustin",
        "latency_s": 1e-4,
        "backup_controller": True,
    },
    "events": [],
    "outputs": {"signals": list(ALL_SIGNALS), "every": 1},
}

TURBINE_KEYS = {"mode": "gfl", "visc_enabled": True, "link_available": True, "p_avail": None}

# shorthand accepted on the command line and in files
ALIASES = {
    "controller.ts": "controller.ts_s",
    "plant.dt": "plant.dt_s",
    "duration": "duration_s",
    "grid.h_grid": "grid.h_grid_s",
}

EVENT_KINDS: dict = {
    "fault": {"retained_v": 0.4},
    "clear_fault": {},
    "set_scr": {"scr": None},
    "load_step": {"dp": None},
    "set_wind": {"p": None, "turbine": ""},
    "set_grid_voltage": {"v": None},
    "plug_visc": {"turbine": None},
    "link_fail": {"a": None, "b": None},
    "link_restore": {"a": None, "b": None},
    "controller_fail": {"controller": "sdc"},
    "set_param": {"turbine": None, "key": None, "value": None},
}


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    args: dict = field(default_factory=dict)


@dataclass
class TurbineConfig:
    tid: str
    params: ViscParams
    mode: str = "gfl"
    visc_enabled: bool = True
    link_available: bool = True
    p_avail: float = 1.0
    spec: TurbineSpec = field(default_factory=TurbineSpec)


@dataclass
class CommConfig:
    sdn_enabled: bool = True
    failover_enabled: bool = True
    discretizer: str = "tustin"
    latency: float = 1e-4
    backup_controller: bool = True


@dataclass
class Scenario:
    name: str
    duration: float
    plant_dt: float
    controller_ts: float
    ratio: int
    topology: FarmTopology
    grid: GridParams
    load_pu: float
    turbines: dict
    comm: CommConfig
    events: list
    outputs: list
    every: int
    seed: int
    perturbation_eps: float
    raw: dict
    notes: list = field(default_factory=list)

    @property
    def turbine_ids(self) -> list:
        return self.topology.turbine_ids


# ---------------------------------------------------------------- merging


def _merge(base: dict, over: dict, path: str, strict: bool = True) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}.{k}" if path else k
        if k not in base:
            if strict:
                raise ParseError(f"unknown key {key!r}")
            out[k] = copy.deepcopy(v)
            continue
        if isinstance(base[k], dict) and k != "turbine":
            if not isinstance(v, dict):
                raise ValidationError(key, "expected a table")
            out[k] = _merge(base[k], v, key, strict)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ParseError(f"override {dotted!r}: {p!r} is not a table")
        cur = nxt
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with the value read as a TOML literal (bare words are strings)."""
    if "=" not in text:
        raise ParseError(f"override {text!r} is not key=value")
    key, val = text.split("=", 1)
    key = key.strip()
    key = ALIASES.get(key, key)
    try:
        value = tomllib.loads(f"v = {val.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = val.strip()
    return key, value


def apply_override(raw: dict, text: str) -> dict:
    out = copy.deepcopy(raw)
    key, value = parse_override(text)
    _set_path(out, key, value)
    return out


def _canonical(raw: dict) -> dict:
    """Rewrite aliased keys in a parsed file."""
    out = copy.deepcopy(raw)
    for alias, canon in ALIASES.items():
        parts = alias.split(".")
        cur = out
        for p in parts[:-1]:
            cur = cur.get(p) if isinstance(cur, dict) else None
            if cur is None:
                break
        if isinstance(cur, dict) and parts[-1] in cur:
            val = cur.pop(parts[-1])
            _set_path(out, canon, val)
    return out


# ------------------------------------------------------------- validation


def _num(d: dict, key: str, path: str, lo: float | None = None, hi: float | None = None,
         strict_lo: bool = False, integer: bool = False) -> float:
    v = d[key]
    full = f"{path}.{key}" if path else key
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(full, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ValidationError(full, f"expected an integer, got {v!r}")
    if math.isnan(v):
        raise ValidationError(full, "NaN is not allowed")
    if lo is not None and (v <= lo if strict_lo else v < lo):
        raise ValidationError(full, f"must be {'>' if strict_lo else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ValidationError(full, f"must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


def _build_visc(tree: dict, path: str) -> ViscParams:
    kw = {}
    nested = {"avr", "elec", "supplementary", "inner", "machine", "gfl"}
    proto = ViscParams()
    for k, v in tree.items():
        if k in nested:
            sub = getattr(proto, k)
            kw[k] = type(sub)(**v)
        else:
            kw[k] = v
    try:
        return ViscParams(**kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(path, str(exc)) from None


def _turbine_tree(visc: dict, over: dict, tid: str) -> tuple[dict, dict]:
    extra = dict(TURBINE_KEYS)
    vtree = copy.deepcopy(visc)
    for k, v in over.items():
        key = f"turbine.{tid}.{k}"
        if k in TURBINE_KEYS:
            extra[k] = v
        elif k in vtree:
            if isinstance(vtree[k], dict):
                if not isinstance(v, dict):
                    raise ValidationError(key, "expected a table")
                vtree[k] = _merge(vtree[k], v, key)
            else:
                vtree[k] = v
        else:
            raise ParseError(f"unknown key {key!r}")
    return vtree, extra


def _events(raw: list, duration: float) -> list:
    out = []
    for i, ev in enumerate(raw):
        path = f"events[{i}]"
        if not isinstance(ev, dict):
            raise ValidationError(path, "expected a table")
        ev = dict(ev)
        kind = ev.pop("kind", None)
        if kind not in EVENT_KINDS:
            raise ValidationError(f"{path}.kind", f"unknown event kind {kind!r}")
        if "t_s" not in ev:
            raise ValidationError(f"{path}.t_s", "missing event time")
        t = _num(ev, "t_s", path, lo=0.0)
        ev.pop("t_s")
        args = {}
        for k, default in EVENT_KINDS[kind].items():
            if k in ev:
                args[k] = ev.pop(k)
            elif default is None:
                raise ValidationError(f"{path}.{k}", f"required for {kind}")
            else:
                args[k] = default
        if ev:
            raise ParseError(f"unknown key {path}.{sorted(ev)[0]!r}")
        out.append(Event(t, kind, args))
    times = [e.t for e in out]
    if times != sorted(times):
        raise ValidationError("events", "events must be sorted by time")
    if times and times[-1] > duration:
        raise ValidationError("duration_s", f"duration {duration} s is shorter than the last event at {times[-1]} s")
    return out


def load_scenario(text: str, overrides: list | tuple = ()) -> Scenario:
    """Parse, merge over defaults, apply ``key=value`` overrides and validate."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"invalid TOML: {exc}") from None
    raw = _canonical(raw)
    for ov in overrides:
        raw = apply_override(raw, ov)
    cfg = _merge(DEFAULTS, raw, "")
    return _validate(cfg)


def _validate(cfg: dict) -> Scenario:
    notes = []
    duration = _num(cfg, "duration_s", "", lo=0.0, strict_lo=True)
    seed = _num(cfg, "seed", "", lo=0, integer=True)
    dt = _num(cfg["plant"], "dt_s", "plant", lo=0.0, strict_lo=True)
    ts_req = _num(cfg["controller"], "ts_s", "controller", lo=0.0, strict_lo=True)
    eps = _num(cfg["controller"], "perturbation_eps", "controller", lo=0.0)
    raw_ratio = ts_req / dt
    ratio = max(1, math.ceil(raw_ratio - 1e-9))
    ts = ratio * dt
    if abs(ts - ts_req) > 1e-12 * max(1.0, ts_req):
        notes.append(f"controller.ts_s {ts_req:g} s is not a multiple of plant.dt_s; using {ts:g} s ({ratio} steps)")
        log.warning(notes[-1])

    g = cfg["grid"]
    try:
        grid = GridParams(
            scr=_num(g, "scr", "grid", lo=0.0, strict_lo=True),
            rx_ratio=_num(g, "rx_ratio", "grid", lo=0.0),
            v_grid=_num(g, "v_grid", "grid", lo=0.0),
            h_grid=_num(g, "h_grid_s", "grid", lo=0.0, strict_lo=True),
            d_grid=_num(g, "d_grid", "grid", lo=0.0),
            f_base=_num(g, "f_base_hz", "grid", lo=0.0, strict_lo=True),
        )
    except ValueError as exc:
        raise ValidationError("grid", str(exc)) from None
    load_pu = _num(g, "load_pu", "grid", lo=0.0)

    f = cfg["farm"]
    n = _num(f, "n_turbines", "farm", lo=1, integer=True)
    size = _num(f, "cluster_size", "farm", lo=1, integer=True)
    ids = [f"wt{i + 1}" for i in range(n)]
    cable = complex(_num(f, "cable_r", "farm", lo=0.0), _num(f, "cable_x", "farm", lo=0.0))
    pcc_cable = complex(_num(f, "pcc_cable_r", "farm", lo=0.0), _num(f, "pcc_cable_x", "farm", lo=0.0))
    if cable == 0:
        raise ValidationError("farm.cable_x", "cluster cable impedance must be nonzero")
    if pcc_cable == 0:
        raise ValidationError("farm.pcc_cable_x", "export cable impedance must be nonzero")
    clusters = [Cluster(cable, ids[i:i + size]) for i in range(0, n, size)]
    topology = FarmTopology(clusters, pcc_cable)
    spec_kw = dict(
        rating=1.0 / n,
        l_f=_num(f, "l_f", "farm", lo=0.0, strict_lo=True),
        r_f=_num(f, "r_f", "farm", lo=0.0),
        c_f=_num(f, "c_f", "farm", lo=0.0, strict_lo=True),
        r_d=_num(f, "r_d", "farm", lo=0.0),
        z_tr=complex(_num(f, "tr_r", "farm", lo=0.0), _num(f, "tr_x", "farm", lo=0.0, strict_lo=True)),
        c_dc=_num(f, "c_dc", "farm", lo=0.0, strict_lo=True),
        tau_machine=_num(f, "tau_machine_s", "farm", lo=0.0, strict_lo=True),
    )
    p_avail_farm = _num(f, "p_avail", "farm", lo=0.0)

    c = cfg["comm"]
    disc = c["discretizer"]
    if disc not in ("tustin", "trapezoidal"):
        raise ValidationError("comm.discretizer", f"must be tustin or trapezoidal, got {disc!r}")
    for k in ("sdn_enabled", "failover_enabled", "backup_controller"):
        if not isinstance(c[k], bool):
            raise ValidationError(f"comm.{k}", "expected true or false")
    comm = CommConfig(c["sdn_enabled"], c["failover_enabled"], disc,
                      _num(c, "latency_s", "comm", lo=0.0, strict_lo=True), c["backup_controller"])

    turb_over = cfg["turbine"]
    if not isinstance(turb_over, dict):
        raise ValidationError("turbine", "expected a table of turbine tables")
    for tid in turb_over:
        if tid not in ids:
            raise ValidationError(f"turbine.{tid}", f"no such turbine (have wt1..wt{n})")
    turbines = {}
    for i, tid in enumerate(ids):
        vtree, extra = _turbine_tree(cfg["visc"], turb_over.get(tid, {}), tid)
        vtree.update(ts=ts, f_base=grid.f_base, discretizer="tustin",
                     perturbation_eps=0.0, perturbation_seed=seed * 1009 + i)
        params = _build_visc(vtree, f"turbine.{tid}" if tid in turb_over else "visc")
        if params.w_path == "centered" and params.d != 0.0 and not any("w_path" in x for x in notes):
            # the (1 - z^-2)/K speed path has zero DC gain once D > 0
            notes.append("visc.w_path = 'centered' with d > 0 does not track the reference speed in closed loop; "
                         "use 'exact' for co-simulation")
            log.warning(notes[-1])
        mode = extra["mode"]
        if mode not in ("gfl", "visc"):
            raise ValidationError(f"turbine.{tid}.mode", f"must be gfl or visc, got {mode!r}")
        pav = p_avail_farm if extra["p_avail"] is None else float(extra["p_avail"])
        if mode == "visc" and not extra["visc_enabled"]:
            raise ValidationError(f"turbine.{tid}.visc_enabled", "a turbine starting in ViSC mode must be ViSC-enabled")
        turbines[tid] = TurbineConfig(tid, params, mode, bool(extra["visc_enabled"]),
                                      bool(extra["link_available"]), pav, TurbineSpec(**spec_kw))

    events = _events(cfg["events"], duration)
    for i, ev in enumerate(events):
        tid = ev.args.get("turbine")
        if tid and tid not in ids:
            raise ValidationError(f"events[{i}].turbine", f"no such turbine {tid!r}")

    o = cfg["outputs"]
    sig = o["signals"]
    bad = [s for s in sig if s not in ALL_SIGNALS]
    if bad:
        raise ValidationError("outputs.signals", f"unknown signal {bad[0]!r}")
    every = _num(o, "every", "outputs", lo=1, integer=True)

    name = cfg["name"]
    if not isinstance(name, str) or not name:
        raise ValidationError("name", "expected a non-empty string")
    return Scenario(name, duration, dt, ts, ratio, topology, grid, load_pu, turbines, comm, events,
                    list(sig), every, seed, eps, cfg, notes)


def load_scenario_file(path: str | Path, overrides: list | tuple = ()) -> Scenario:
    p = Path(path)
    if not p.exists():
        alt = scenario_path(str(path))
        if alt is None:
            raise ConfigError(f"no such scenario file: {path}")
        p = alt
    return load_scenario(p.read_text(), overrides)


def _scenario_dir() -> Path:
    return Path(__file__).resolve().parent / "scenarios"


def shipped_scenarios() -> list:
    return sorted(p.stem for p in _scenario_dir().glob("*.toml"))


def scenario_path(name: str) -> Path | None:
    p = _scenario_dir() / f"{Path(name).stem}.toml"
    return p if p.exists() else None
