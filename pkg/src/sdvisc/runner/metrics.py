"""Run metrics computed purely from the emitted CSV series."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = ["SeriesTooShort", "RunMetrics", "parse_csv", "compute_metrics", "SHARING_WINDOW_S"]

SHARING_WINDOW_S = 0.5
SETTLING_BAND = 0.01


class SeriesTooShort(ValueError):
    pass


@dataclass
class RunMetrics:
    freq_nadir: float
    v_pcc_min: float
    v_pcc_final: float
    settling_time: float
    q_sharing_error: float | None
    packets_sent: int
    packets_delivered: int
    packets_dropped: int
    dr_fire_times: list = field(default_factory=list)
    failover_times: list = field(default_factory=list)
    diverged: bool = False
    diverged_at: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def parse_csv(text: str) -> dict:
    """Column name -> float array."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SeriesTooShort("empty series")
    head, body = rows[0], rows[1:]
    data = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), len(head))
    return {h: data[:, i] for i, h in enumerate(head)}


def _step_times(t: np.ndarray, counter: np.ndarray) -> list:
    """Instants at which a cumulative counter increased (one entry per increment)."""
    out = []
    prev = 0.0
    for ti, c in zip(t, counter):
        while c > prev:
            out.append(float(ti))
            prev += 1
    return out


def q_sharing_error(series: dict, window: float = SHARING_WINDOW_S) -> float | None:
    """Max relative deviation of ``Q_i * m_qi`` from their mean over the final window.

    Only turbines in ViSC mode for the whole window take part; None when
    fewer than two do.
    """
    t = series["t_s"]
    sel = t >= t[-1] - window
    vals = []
    for name in series:
        if not name.endswith(".mode"):
            continue
        tid = name[: -len(".mode")]
        if f"{tid}.q" not in series or f"{tid}.mq" not in series:
            continue
        if not np.all(series[name][sel] == 1.0):
            continue
        vals.append(np.mean(series[f"{tid}.q"][sel] * series[f"{tid}.mq"][sel]))
    if len(vals) < 2:
        return None
    vals = np.array(vals)
    ref = np.mean(vals)
    if ref == 0.0:
        return float(np.max(np.abs(vals)))
    return float(np.max(np.abs(vals - ref)) / abs(ref))


def compute_metrics(series: dict) -> RunMetrics:
    t = series.get("t_s")
    if t is None or len(t) < 2:
        raise SeriesTooShort("need at least two samples")
    v = series["pcc.v"]
    f = series["grid.freq"]
    final = float(v[-1])
    outside = np.nonzero(np.abs(v - final) > SETTLING_BAND)[0]
    settling = float(t[outside[-1] + 1]) if outside.size and outside[-1] + 1 < len(t) else (
        float(t[0]) if not outside.size else math.inf)
    div = series["run.diverged"]
    diverged = bool(div[-1] == 1.0)
    return RunMetrics(
        freq_nadir=float(np.min(f)),
        v_pcc_min=float(np.min(v)),
        v_pcc_final=final,
        settling_time=settling,
        q_sharing_error=q_sharing_error(series) if t[-1] - t[0] >= SHARING_WINDOW_S else None,
        packets_sent=int(series["comm.sent"][-1]),
        packets_delivered=int(series["comm.delivered"][-1]),
        packets_dropped=int(series["comm.dropped"][-1]),
        dr_fire_times=_step_times(t, series["comm.dr_count"]),
        failover_times=_step_times(t, series["comm.failover_count"]),
        diverged=diverged,
        diverged_at=float(t[-1]) if diverged else None,
    )
