"""Switching running turbines into condenser mode.

wt1 joins at 1.2 s and wt7 at 4.8 s.  The switch seeds the new controller
from the present operating point, so the current reference does not jump.
"""
import numpy as np

from sdvisc.runner import load_scenario_file, parse_csv, run

res = run(load_scenario_file("plug_and_play"))
s = parse_csv(res.csv)
t = s["t_s"]
for t_sw, tid, jump in res.switch_jumps:
    print(f"{tid} switched at {t_sw:.4f} s, current-reference jump {jump:.1e} pu")
    for dt in (0.0, 0.05, 0.1, 0.2):
        k = np.searchsorted(t, t_sw + dt)
        print(f"   +{dt:4.2f} s  q {s[f'{tid}.q'][k]:7.4f}  v {s[f'{tid}.v'][k]:.4f}")
