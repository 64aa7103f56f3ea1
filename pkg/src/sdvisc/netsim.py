"""Discrete-event model of the software-defined communication plane.

The SDN controller, the wind-farm central controller (WFCC) and the SDC
unit are co-simulated inside one event queue.  Packets travel along
installed routes with per-edge latency; a packet whose path loses an edge
while it is in flight is dropped.  Acknowledge flags are derived from
command deliveries, and dynamic rerouting fires once a turbine in ViSC mode
has been without commands for the detection guard.
"""
from __future__ import annotations

import enum
import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import networkx as nx

log = logging.getLogger(__name__)

__all__ = [
    "ViscDisabled",
    "NoLink",
    "UnknownTurbine",
    "NoBackupConfigured",
    "IllegalCode",
    "CommTables",
    "LinkGraph",
    "PacketKind",
    "Packet",
    "PacketQueue",
    "DetectorState",
    "FailoverReason",
    "EventLog",
    "request_visc",
    "teardown",
    "transport_step",
    "detect_and_reroute",
    "failover",
    "apply_command_hold",
    "GUARD_S",
]

GUARD_S = 0.04
LEGAL_CODES = ("0/0", "0/1", "1/1")


class ViscDisabled(RuntimeError):
    pass


class NoLink(RuntimeError):
    pass


class UnknownTurbine(KeyError):
    pass


class NoBackupConfigured(RuntimeError):
    pass


class IllegalCode(ValueError):
    pass


def _code(a: int, b: int) -> str:
    return f"{a}/{b}"


def parse_code(code: str) -> tuple[int, int]:
    if code not in LEGAL_CODES:
        raise IllegalCode(f"illegal table code {code!r}")
    a, b = code.split("/")
    return int(a), int(b)


@dataclass
class CommTables:
    """T1 addresses, T2 mode/enable bits, T3 communication bits.

    T2 entries are ``[current_mode, visc_enabled]``; T3 entries are
    ``[comm_on, link_available]``.  Writes go through :meth:`set_t2` and
    :meth:`set_t3`, which reject the illegal ``1/0`` code.
    """

    t1: dict = field(default_factory=dict)
    t2: dict = field(default_factory=dict)
    t3: dict = field(default_factory=dict)

    @classmethod
    def build(cls, turbines: Iterable, visc_enabled: dict | None = None,
              link_available: dict | None = None) -> "CommTables":
        tb = cls()
        for tid in turbines:
            tb.t1[tid] = f"10.0.0.{len(tb.t1) + 10}"
            en = 1 if (visc_enabled or {}).get(tid, True) else 0
            la = 1 if (link_available or {}).get(tid, True) else 0
            tb.t2[tid] = [0, en]
            tb.t3[tid] = [0, la]
        return tb

    def set_t2(self, tid, current_mode: int, visc_enabled: int) -> None:
        parse_code(_code(current_mode, visc_enabled))
        self.t2[tid] = [current_mode, visc_enabled]

    def set_t3(self, tid, comm_on: int, link_available: int) -> None:
        parse_code(_code(comm_on, link_available))
        self.t3[tid] = [comm_on, link_available]

    def code(self, table: str, tid) -> str:
        return _code(*getattr(self, table)[tid])

    def legal(self) -> bool:
        return all(_code(*v) in LEGAL_CODES for v in list(self.t2.values()) + list(self.t3.values()))


class LinkGraph:
    """Undirected communication graph with per-edge latency and up flags."""

    def __init__(self):
        self.g = nx.Graph()
        self.routes: dict = {}

    def add_edge(self, a: str, b: str, latency: float = 1e-4) -> None:
        if not latency > 0:
            raise ValueError(f"edge {a}-{b}: latency must be positive")
        self.g.add_edge(a, b, latency=float(latency), up=True)

    def edge_key(self, a: str, b: str) -> tuple:
        return tuple(sorted((a, b)))

    def set_up(self, a: str, b: str, up: bool) -> None:
        if not self.g.has_edge(a, b):
            raise KeyError(f"no edge {a}-{b}")
        self.g[a][b]["up"] = up

    def is_up(self, a: str, b: str) -> bool:
        return self.g.has_edge(a, b) and self.g[a][b]["up"]

    def shortest_path(self, src: str, dst: str) -> list | None:
        """Lowest-latency path over up edges, ties broken by node name."""
        if src not in self.g or dst not in self.g:
            return None
        up = nx.subgraph_view(self.g, filter_edge=lambda a, b: self.g[a][b]["up"])
        try:
            paths = list(nx.all_shortest_paths(up, src, dst, weight="latency"))
        except nx.NetworkXNoPath:
            return None
        return min(paths)

    def latency(self, path: list) -> float:
        return sum(self.g[a][b]["latency"] for a, b in zip(path, path[1:]))

    def path_up(self, path: list) -> bool:
        return all(self.is_up(a, b) for a, b in zip(path, path[1:]))

    def install(self, flow: tuple, path: list) -> None:
        if not self.path_up(path):
            raise NoLink(f"route for {flow} uses a failed edge")
        self.routes[flow] = list(path)

    def remove(self, flow: tuple) -> list | None:
        return self.routes.pop(flow, None)

    @classmethod
    def default(cls, turbines: Iterable, latency: float = 1e-4, backup: bool = True) -> "LinkGraph":
        """Four-switch mesh with dual-homed turbines.

        The SDC unit hangs off ``sw1`` and ``sw2``; every turbine has a
        primary uplink to ``sw1`` and a slower one to ``sw2``, so a single
        failed turbine link or switch link leaves a detour.  The WFCC and the
        backup SDC unit sit behind ``sw3`` and ``sw4``.
        """
        gr = cls()
        gr.add_edge("sdc", "sw1", latency)
        gr.add_edge("sdc", "sw2", latency)
        gr.add_edge("sw1", "sw2", latency)
        gr.add_edge("sw1", "sw3", latency)
        gr.add_edge("sw2", "sw4", latency)
        gr.add_edge("sw3", "sw4", latency)
        gr.add_edge("wfcc", "sw3", latency)
        if backup:
            gr.add_edge("sdc_backup", "sw4", latency)
        for tid in turbines:
            gr.add_edge("sw1", str(tid), latency)
            gr.add_edge("sw2", str(tid), 1.5 * latency)
        return gr


class PacketKind(enum.Enum):
    MEASUREMENT = "measurement"
    CONTROL_COMMAND = "control_command"
    WFCC_COMMAND = "wfcc_command"
    AK = "ak"


@dataclass
class Packet:
    src: str
    dst: str
    kind: PacketKind
    seq: int
    sent_at: float
    payload: Any = None
    path: list = field(default_factory=list)
    deliver_at: float = math.inf

    @property
    def flow(self) -> tuple:
        return (self.src, self.dst)


class PacketQueue:
    """In-flight packets ordered by (delivery time, seq, destination)."""

    def __init__(self):
        self.heap: list = []
        self.seq = 0
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self._flow_seq: dict = {}

    def send(self, graph: LinkGraph, src: str, dst: str, kind: PacketKind, now: float,
             payload: Any = None) -> Packet | None:
        """Route a packet over the installed flow; returns None if unroutable."""
        self.seq += 1
        self.sent += 1
        flow = (src, dst)
        path = graph.routes.get(flow)
        pkt = Packet(src, dst, kind, self.seq, now, payload)
        if path is None or not graph.path_up(path):
            self.dropped += 1
            return None
        pkt.path = path
        pkt.deliver_at = now + graph.latency(path)
        heapq.heappush(self.heap, (pkt.deliver_at, pkt.seq, dst, pkt))
        return pkt

    def __len__(self) -> int:
        return len(self.heap)


def transport_step(graph: LinkGraph, queue: PacketQueue, now: float) -> list:
    """Deliver every packet due by ``now``; drop those whose path failed."""
    out = []
    while queue.heap and queue.heap[0][0] <= now + 1e-12:
        _, _, _, pkt = heapq.heappop(queue.heap)
        if graph.path_up(pkt.path):
            queue.delivered += 1
            out.append(pkt)
        else:
            queue.dropped += 1
    return out


def drop_on_failure(graph: LinkGraph, queue: PacketQueue) -> int:
    """Discard in-flight packets whose path lost an edge (called on failures)."""
    keep, n = [], 0
    for item in queue.heap:
        if graph.path_up(item[3].path):
            keep.append(item)
        else:
            n += 1
    heapq.heapify(keep)
    queue.heap = keep
    queue.dropped += n
    return n


class EventLog:
    """Newline-delimited JSON event records."""

    def __init__(self):
        self.records: list = []

    def emit(self, t: float, kind: str, turbine=None, **detail) -> None:
        rec = {"t": float(f"{t:.9g}"), "kind": kind, "turbine": turbine, "detail": detail}
        self.records.append(rec)
        log.debug("%.6f %s %s %s", t, kind, turbine, detail)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _flows(tid: str, controller: str, shared: bool = True) -> list:
    return [(tid, controller), (controller, tid)]


def request_visc(tables: CommTables, graph: LinkGraph, turbine_id, controller: str = "sdc",
                 log_: EventLog | None = None, now: float = 0.0) -> list:
    """Set up the measurement and command flows for ``turbine_id``.

    Checks T1 for the address, T2 for the enable bit and T3 for link
    availability, installs both routes, then marks T2 and T3 as active.
    Returns the installed flows.
    """
    if turbine_id not in tables.t1:
        raise UnknownTurbine(turbine_id)
    if tables.t2[turbine_id][1] != 1:
        raise ViscDisabled(f"turbine {turbine_id}: ViSC not enabled (T2={tables.code('t2', turbine_id)})")
    if tables.t3[turbine_id][1] != 1:
        raise NoLink(f"turbine {turbine_id}: no link available (T3={tables.code('t3', turbine_id)})")
    tid = str(turbine_id)
    installed = []
    for flow in _flows(tid, controller):
        path = graph.shortest_path(*flow)
        if path is None:
            raise NoLink(f"no path {flow[0]} -> {flow[1]}")
        installed.append((flow, path))
    for flow, path in installed:
        graph.install(flow, path)
    tables.set_t2(turbine_id, 1, 1)
    tables.set_t3(turbine_id, 1, 1)
    if log_ is not None:
        log_.emit(now, "flow_setup", turbine_id, controller=controller,
                  path=installed[1][1], latency=graph.latency(installed[1][1]))
    return [f for f, _ in installed]


def teardown(graph: LinkGraph, turbine_id, controller: str) -> int:
    """Remove both flows of ``turbine_id``; returns how many were present."""
    tid = str(turbine_id)
    return sum(graph.remove(f) is not None for f in _flows(tid, controller))


@dataclass
class DetectorState:
    """Per-turbine acknowledge tracking.

    ``next_k`` is the controller sample whose command is awaited next;
    ``max_rx_k`` the newest sample index whose command arrived.
    """

    ak: bool = True
    last_rx: float = -math.inf
    dr_armed_at: float | None = None
    guard: float = GUARD_S
    next_k: int = 0
    max_rx_k: int = -1
    fired: list = field(default_factory=list)
    held: bool = False

    def received(self, k: int, now: float) -> None:
        self.last_rx = now
        self.max_rx_k = max(self.max_rx_k, k)


def detect_and_reroute(tables: CommTables, graph: LinkGraph, det: DetectorState, turbine_id, now: float,
                       ts: float, rtt: float, controller: str = "sdc", sdn_enabled: bool = True,
                       log_: EventLog | None = None) -> str | None:
    """Poll the acknowledge flag of one turbine; fire dynamic routing if due.

    The command for sample ``k`` is expected at ``k*ts + rtt``.  AK drops to
    0 at the first expected delivery that did not happen and the guard is
    measured from that instant.  Returns ``"rerouted"``, ``"no_path"`` or
    None.
    """
    in_visc = tables.t2.get(turbine_id, [0, 0])[0] == 1
    while det.next_k * ts + rtt <= now + 1e-12:
        if det.max_rx_k >= det.next_k:
            det.ak = True
            det.dr_armed_at = None
            det.held = False
        else:
            if det.ak or det.dr_armed_at is None:
                det.dr_armed_at = det.next_k * ts + rtt
            det.ak = False
        det.next_k += 1
    if not in_visc or det.ak or det.dr_armed_at is None:
        return None
    if now - det.dr_armed_at < det.guard - 1e-12:
        return None
    if not sdn_enabled:
        # nobody reroutes: the turbine keeps applying its last command
        if not det.held:
            det.held = True
            if log_ is not None:
                log_.emit(now, "command_held", turbine_id, since=det.dr_armed_at)
        return None
    # DR_i = SDViSC_WT_i and not AK_i, held over the guard
    det.fired.append(now)
    det.dr_armed_at = now  # re-arm so a persisting outage fires once per guard
    tid = str(turbine_id)
    new_paths = {}
    for flow in _flows(tid, controller):
        path = graph.shortest_path(*flow)
        if path is None:
            break
        new_paths[flow] = path
    if len(new_paths) < 2:
        teardown(graph, turbine_id, controller)
        tables.set_t3(turbine_id, 0, 0)
        if log_ is not None:
            log_.emit(now, "dr_fire", turbine_id, result="no_path")
        return "no_path"
    for flow, path in new_paths.items():
        graph.install(flow, path)
    tables.set_t3(turbine_id, 1, 1)
    if log_ is not None:
        log_.emit(now, "dr_fire", turbine_id, result="rerouted", path=new_paths[(controller, tid)])
    return "rerouted"


class FailoverReason(enum.Enum):
    MASTER_CONTROLLER_FAILURE = "master_controller_failure"
    NO_PATH = "no_path"


def failover(turbine_id, tables: CommTables, reason: FailoverReason, graph: LinkGraph | None = None,
             backup: str | None = "sdc_backup", active: set | None = None, log_: EventLog | None = None,
             now: float = 0.0, master: str = "sdc") -> str:
    """Hand a ViSC turbine over to a backup controller.

    For a master failure the flows are moved to ``backup`` via
    :func:`request_visc`; with no path the turbine's local controller takes
    over.  Returns the name of the controller now in charge; a no-op when
    a backup is already active for the turbine.
    """
    if active is not None and turbine_id in active:
        return backup if reason is FailoverReason.MASTER_CONTROLLER_FAILURE else "local"
    if reason is FailoverReason.MASTER_CONTROLLER_FAILURE:
        if backup is None or graph is None or backup not in graph.g:
            raise NoBackupConfigured(f"turbine {turbine_id}: no backup controller configured")
        teardown(graph, turbine_id, master)
        request_visc(tables, graph, turbine_id, controller=backup, log_=log_, now=now)
        who = backup
    else:
        who = "local"
    if active is not None:
        active.add(turbine_id)
    if log_ is not None:
        log_.emit(now, "failover", turbine_id, reason=reason.value, controller=who)
    return who


def apply_command_hold(held, delivered=None, safe_default=None):
    """Zero-order hold: the newest delivered command, else the held one, else the safe default."""
    if delivered is not None:
        return delivered
    if held is not None:
        return held
    return safe_default
