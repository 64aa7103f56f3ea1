"""Why the controller is discretized with Tustin rather than a running sum.

Two copies of each PI see the same 5 Hz error signal; one of them also gets
a seeded 1e-6 disturbance on its stored state every step.  Both forms
integrate, so both drift.  The Tustin form only carries its last output and
stays well below 1e-3; the cumulative-sum form keeps every disturbance in
its history and drifts about 40x from step 1e3 to step 1e5.
"""
import numpy as np

from sdvisc.dsp import PiParams, StatePerturbation, TrapezoidalPI, TustinPI

TS = 0.00067
N = 100_000  # about 67 s of controller time
pi = PiParams(kp=0.5, ki=20.0)
err = np.sin(2 * np.pi * 5 * np.arange(N) * TS)

for cls in (TustinPI, TrapezoidalPI):
    clean, noisy = cls(pi, TS), cls(pi, TS)
    eps = StatePerturbation(1e-6, seed=0)
    gap = np.array([abs(noisy.step(e, perturb=eps) - clean.step(e)) for e in err])
    marks = ", ".join(f"{np.max(gap[:n]):.1e} by step {n}" for n in (1_000, 10_000, N))
    print(f"{cls.__name__:14s} worst output error {marks}")
