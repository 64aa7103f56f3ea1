"""Command line entry point: run, validate, sweep and metrics."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, load_scenario_file, parse_override
from .metrics import SeriesTooShort, compute_metrics, parse_csv
from .sim import run

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2


def _write(out: Path, res) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "series.csv").write_text(res.csv)
    (out / "events.ndjson").write_text(res.events)
    (out / "metrics.json").write_text(json.dumps(res.metrics.as_dict(), indent=2, sort_keys=True) + "\n")


def _summary(name: str, res) -> str:
    m = res.metrics
    status = f"diverged at {res.diverged_at:.4f} s" if res.diverged else "ok"
    return (f"{name}: {status}; v_pcc min {m.v_pcc_min:.4f} final {m.v_pcc_final:.4f}; "
            f"freq nadir {m.freq_nadir:.5f}; packets {m.packets_sent}/{m.packets_delivered}/{m.packets_dropped}")


def _overrides(ns) -> list:
    ov = list(ns.override or [])
    if getattr(ns, "seed", None) is not None:
        ov.append(f"seed={ns.seed}")
    return ov


def cmd_run(ns) -> int:
    sc = load_scenario_file(ns.config, _overrides(ns))
    for note in sc.notes:
        print(f"note: {note}", file=sys.stderr)
    res = run(sc)
    out = Path(ns.out) if ns.out else Path("runs") / sc.name
    _write(out, res)
    print(_summary(sc.name, res))
    print(f"wrote {out}")
    if res.diverged and ns.fail_on_divergence:
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_validate(ns) -> int:
    sc = load_scenario_file(ns.config, _overrides(ns))
    for note in sc.notes:
        print(f"note: {note}", file=sys.stderr)
    print(f"{sc.name}: ok ({len(sc.turbine_ids)} turbines, {len(sc.events)} events, "
          f"ts {sc.controller_ts:g} s, dt {sc.plant_dt:g} s)")
    return EXIT_OK


def _sweep_one(job):
    config, overrides, out = job
    sc = load_scenario_file(config, overrides)
    res = run(sc)
    _write(Path(out), res)
    return res


def cmd_sweep(ns) -> int:
    values = [v.strip() for v in ns.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values: need at least one value")
    base = _overrides(ns)
    root = Path(ns.out) if ns.out else Path("runs") / "sweep"
    jobs = []
    for v in values:
        ov = base + [f"{ns.param}={v}"]
        parse_override(ov[-1])
        # validate up front so a bad value fails before anything runs
        load_scenario_file(ns.config, ov)
        jobs.append((ns.config, ov, str(root / f"{ns.param}={v}")))
    if ns.jobs > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    any_div = False
    for v, res in zip(values, results):
        print(_summary(f"{ns.param}={v}", res))
        any_div |= res.diverged
    print(f"wrote {root}")
    if any_div and ns.fail_on_divergence:
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_metrics(ns) -> int:
    text = Path(ns.csv).read_text()
    m = compute_metrics(parse_csv(text))
    print(json.dumps(m.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdvisc", description="Software-defined virtual synchronous condenser co-simulation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("config")
        p.add_argument("--override", action="append", metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("run", help="run one scenario")
    common(p)
    p.add_argument("--out")
    p.add_argument("--fail-on-divergence", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("validate", help="parse and validate a scenario")
    common(p)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("sweep", help="run a scenario over several values of one key")
    common(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--fail-on-divergence", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("metrics", help="recompute metrics from a series CSV")
    p.add_argument("csv")
    p.set_defaults(fn=cmd_metrics)
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.fn(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SeriesTooShort as exc:
        print(f"metrics error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
