"""Four condensers with different droop slopes share reactive power.

Runs the shipped droop_sharing scenario and prints each unit's steady
reactive output next to Q*m_q, which should be the same for every unit.
"""
import numpy as np

from sdvisc.runner import load_scenario_file, parse_csv, run

res = run(load_scenario_file("droop_sharing"))
s = parse_csv(res.csv)
t = s["t_s"]
end = t >= t[-1] - 0.5

print(f"PCC before activation {np.mean(s['pcc.v'][(t > 0.8) & (t < 1.0)]):.4f} pu, "
      f"after {np.mean(s['pcc.v'][end]):.4f} pu")
print("unit   m_q    Q [pu]   Q*m_q")
for tid in ("wt1", "wt2", "wt3", "wt4"):
    q, mq = np.mean(s[f"{tid}.q"][end]), np.mean(s[f"{tid}.mq"][end])
    print(f"{tid:5s} {mq:5.2f}  {q:7.4f}  {q * mq:.5f}")
print(f"max relative spread of Q*m_q: {res.metrics.q_sharing_error:.4f}")
