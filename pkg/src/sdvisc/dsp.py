"""Transfer-function algebra, Tustin/trapezoidal discretization and the
difference-equation runtime shared by every software-defined controller.

Polynomials in ``s`` are stored with ascending powers (``num[i]`` multiplies
``s**i``).  Discrete polynomials are stored in powers of ``z**-1`` with the
same convention, so ``b[i]`` multiplies ``u(k-i)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ImproperTF",
    "DegenerateDenominator",
    "RootFindingFailed",
    "InconsistentK",
    "RationalTF",
    "DiscreteBlock",
    "PiParams",
    "InertiaParams",
    "InertiaHistory",
    "TrapezoidalState",
    "Stability",
    "tustin_discretize",
    "step_block",
    "check_stability",
    "pi_tustin_step",
    "trapezoidal_pi_step",
    "inertia_coefficients",
    "inertia_step",
    "TustinPI",
    "TrapezoidalPI",
    "make_pi",
]


class ImproperTF(ValueError):
    """Numerator degree exceeds denominator degree."""


class DegenerateDenominator(ValueError):
    """The bilinear image of the denominator cannot be normalized."""


class RootFindingFailed(RuntimeError):
    pass


class InconsistentK(ValueError):
    """``InertiaParams.k`` does not equal ``2 / ts``."""


def _trim(coeffs: Sequence[float]) -> np.ndarray:
    c = np.asarray(coeffs, dtype=float)
    nz = np.flatnonzero(c)
    if nz.size == 0:
        return np.zeros(1)
    return c[: nz[-1] + 1]


@dataclass(frozen=True)
class RationalTF:
    """Continuous transfer function ``num(s) / den(s)``, ascending powers."""

    num: tuple
    den: tuple
    label: str = ""

    def __post_init__(self):
        num = tuple(float(x) for x in _trim(self.num))
        den = tuple(float(x) for x in _trim(self.den))
        if not any(den):
            raise DegenerateDenominator(f"{self.label or 'tf'}: denominator is identically zero")
        if any(num) and len(num) > len(den):
            raise ImproperTF(
                f"{self.label or 'tf'}: numerator degree {len(num) - 1} > "
                f"denominator degree {len(den) - 1}"
            )
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @property
    def order(self) -> int:
        return len(self.den) - 1

    def __call__(self, s: complex) -> complex:
        n = sum(c * s**i for i, c in enumerate(self.num))
        d = sum(c * s**i for i, c in enumerate(self.den))
        return n / d

    def dc_gain(self) -> float:
        if self.den[0] == 0.0:
            return math.inf
        return self.num[0] / self.den[0]

    def poles(self) -> np.ndarray:
        return np.roots(self.den[::-1]) if self.order > 0 else np.empty(0)

    # small algebra used to assemble cascades
    def __mul__(self, other: "RationalTF") -> "RationalTF":
        return RationalTF(
            np.polynomial.polynomial.polymul(self.num, other.num),
            np.polynomial.polynomial.polymul(self.den, other.den),
            label=f"{self.label}*{other.label}".strip("*"),
        )

    def __add__(self, other: "RationalTF") -> "RationalTF":
        P = np.polynomial.polynomial
        num = P.polyadd(P.polymul(self.num, other.den), P.polymul(other.num, self.den))
        return RationalTF(num, P.polymul(self.den, other.den), label=f"{self.label}+{other.label}".strip("+"))


class DiscreteBlock:
    """Normalized recursive difference equation

        y(k) = sum_i b[i] u(k-i) - sum_{j>=1} a[j] y(k-j),   a[0] = 1.

    ``u_hist[0]`` is ``u(k-1)``, ``y_hist[0]`` is ``y(k-1)``.
    """

    __slots__ = ("b", "a", "ts", "label", "u_hist", "y_hist")

    def __init__(self, b, a, ts: float, label: str = "", u0: float = 0.0, y0: float | None = None):
        if ts <= 0:
            raise ValueError(f"sampling period must be positive, got {ts}")
        a = [float(x) for x in a]
        b = [float(x) for x in b]
        if a[0] == 0.0:
            raise DegenerateDenominator(f"{label or 'block'}: a[0] == 0")
        a0 = a[0]
        self.a = tuple(x / a0 for x in a)
        self.b = tuple(x / a0 for x in b)
        self.ts = float(ts)
        self.label = label
        self.u_hist: list[float] = []
        self.y_hist: list[float] = []
        self.reset(u0, y0)

    def dc_gain(self) -> float:
        # compensated sums: at fast sampling sum(a) is a small difference of O(1) terms
        den = math.fsum(self.a)
        if abs(den) < 1e-300:
            return math.inf
        return math.fsum(self.b) / den

    def __call__(self, z: complex) -> complex:
        """Evaluate the pulse transfer function at ``z``."""
        if z == 1:
            return self.dc_gain()
        zi = 1.0 / z
        num = sum(c * zi**i for i, c in enumerate(self.b))
        den = sum(c * zi**i for i, c in enumerate(self.a))
        return num / den

    def dc_condition(self) -> float:
        """Relative sensitivity of the z = 1 value to coefficient rounding."""
        sa, sb = abs(math.fsum(self.a)), abs(math.fsum(self.b))
        ca = sum(abs(x) for x in self.a) / sa if sa else math.inf
        cb = sum(abs(x) for x in self.b) / sb if sb else 0.0
        return ca + cb

    def reset(self, u0: float = 0.0, y0: float | None = None) -> None:
        """Replicate an operating point ``(u0, y0)`` across the histories.

        With ``y0`` omitted the steady-state output ``dc_gain * u0`` is used
        (zero when the gain is infinite, i.e. integrators must be given y0).
        """
        if y0 is None:
            g = self.dc_gain()
            y0 = g * u0 if math.isfinite(g) else 0.0
        self.u_hist = [float(u0)] * (len(self.b) - 1)
        self.y_hist = [float(y0)] * (len(self.a) - 1)

    def step(self, u: float) -> float:
        b, a, uh, yh = self.b, self.a, self.u_hist, self.y_hist
        y = b[0] * u
        for i in range(1, len(b)):
            y += b[i] * uh[i - 1]
        for j in range(1, len(a)):
            y -= a[j] * yh[j - 1]
        if uh:
            uh.insert(0, u)
            uh.pop()
        if yh:
            yh.insert(0, y)
            yh.pop()
        return y

    @property
    def output(self) -> float:
        return self.y_hist[0] if self.y_hist else 0.0

    def copy(self) -> "DiscreteBlock":
        new = DiscreteBlock.__new__(DiscreteBlock)
        new.b, new.a, new.ts, new.label = self.b, self.a, self.ts, self.label
        new.u_hist = list(self.u_hist)
        new.y_hist = list(self.y_hist)
        return new

    def __repr__(self) -> str:
        return f"DiscreteBlock({self.label!r}, b={self.b}, a={self.a}, ts={self.ts})"


def step_block(block: DiscreteBlock, u: float) -> float:
    return block.step(u)


def tustin_discretize(tf: RationalTF, ts: float, u0: float = 0.0, y0: float | None = None) -> DiscreteBlock:
    """Map ``tf`` to a difference equation with ``s = (2/ts)(1 - z^-1)/(1 + z^-1)``.

    Numerator and denominator are both multiplied by ``(1 + z^-1)^n`` with
    ``n`` the denominator degree, then normalized so that ``a[0] = 1``.
    """
    if ts <= 0:
        raise ValueError(f"sampling period must be positive, got {ts}")
    P = np.polynomial.polynomial
    k = 2.0 / ts
    n = tf.order
    minus = np.array([1.0, -1.0])  # 1 - z^-1
    plus = np.array([1.0, 1.0])  # 1 + z^-1

    def mapped(coeffs):
        out = np.zeros(n + 1)
        for i, c in enumerate(coeffs):
            if c == 0.0:
                continue
            term = P.polymul(P.polypow(minus, i), P.polypow(plus, n - i)) * (c * k**i)
            out[: term.size] += term
        return out

    a = mapped(tf.den)
    b = mapped(tf.num)
    if not np.any(a) or a[0] == 0.0:
        raise DegenerateDenominator(f"{tf.label or 'tf'}: bilinear image of denominator has a[0] = 0")
    return DiscreteBlock(b, a, ts, label=tf.label, u0=u0, y0=y0)


class Stability(enum.Enum):
    STABLE = "stable"
    MARGINAL = "marginal"
    UNSTABLE = "unstable"

    def __bool__(self) -> bool:
        return self is Stability.STABLE


def check_stability(block: DiscreteBlock, tol: float = 1e-9) -> Stability:
    """Classify the poles of ``block`` against the unit circle.

    Truthy only when every root of the ``a`` polynomial lies strictly inside
    the circle; roots on the circle (pure integrators) give ``MARGINAL``.
    """
    if len(block.a) == 1:
        return Stability.STABLE
    try:
        roots = np.roots(block.a)
    except np.linalg.LinAlgError as exc:
        raise RootFindingFailed(str(exc)) from exc
    if not np.all(np.isfinite(roots)):
        raise RootFindingFailed(f"non-finite roots for {block!r}")
    radius = np.abs(roots)
    if np.any(radius > 1.0 + tol):
        return Stability.UNSTABLE
    if np.any(radius > 1.0 - tol):
        return Stability.MARGINAL
    return Stability.STABLE


# --------------------------------------------------------------------------
# PI controllers


@dataclass(frozen=True)
class PiParams:
    kp: float
    ki: float

    def __post_init__(self):
        if self.ki < 0:
            raise ValueError(f"integral gain must be non-negative, got {self.ki}")


def pi_tustin_step(params: PiParams, e_now: float, e_prev: float, g_prev: float, ts: float) -> float:
    """One sample of the bilinear PI recursion; reads no accumulated sum."""
    return g_prev + 0.5 * ts * params.ki * (e_now + e_prev) + params.kp * (e_now - e_prev)


@dataclass
class TrapezoidalState:
    """Cumulative-sum state of the trapezoidal-rule PI.

    ``running_sum`` holds ``e(1) + ... + e(n-1)`` once sample ``n`` has been
    taken; ``offset`` is an integral initial value so a controller can start
    from a nonzero output.
    """

    e0: float = 0.0
    running_sum: float = 0.0
    e_last: float = 0.0
    n: int = 0
    offset: float = 0.0


def trapezoidal_pi_step(
    params: PiParams,
    e_now: float,
    state: TrapezoidalState,
    ts: float,
    perturbation: float = 0.0,
) -> tuple[float, TrapezoidalState]:
    """Evaluate ``g(n) = Kp e(n) + Ts Ki ((e(0)+e(n))/2 + sum_{k=1}^{n-1} e(k))``.

    ``perturbation`` is added to the stored running sum when the previous
    sample is appended to it; it is the aggregate drift of the stored
    history over this step.
    At ``n = 0`` the integral covers an empty interval and only the offset
    and proportional terms remain.
    """
    if state.n == 0:
        new = TrapezoidalState(e0=e_now, running_sum=0.0, e_last=e_now, n=1, offset=state.offset)
        return params.kp * e_now + state.offset, new
    running = state.running_sum
    if state.n >= 2:
        running += state.e_last + perturbation
    integral = ts * params.ki * (0.5 * (state.e0 + e_now) + running)
    g = params.kp * e_now + integral + state.offset
    return g, TrapezoidalState(state.e0, running, e_now, state.n + 1, state.offset)


class StatePerturbation:
    """Seeded zero-mean perturbation of the numbers a controller carries.

    Every stored number receives an independent ``U(-eps, eps)`` offset per
    step.  :meth:`many` returns the aggregate offset of ``n`` such numbers;
    above 16 it is drawn from the normal law with the same variance, which
    keeps long cumulative histories affordable.
    """

    __slots__ = ("eps", "rng")

    def __init__(self, eps: float, seed: int = 0):
        if eps < 0:
            raise ValueError("perturbation magnitude must be non-negative")
        self.eps = float(eps)
        self.rng = np.random.default_rng(seed)

    def one(self) -> float:
        return self.eps * (2.0 * float(self.rng.random()) - 1.0)

    def many(self, n: int) -> float:
        if n <= 0:
            return 0.0
        if n <= 16:
            return self.eps * float(np.sum(2.0 * self.rng.random(n) - 1.0))
        return float(self.rng.normal(0.0, self.eps * math.sqrt(n / 3.0)))


class TustinPI:
    """Stateful wrapper around :func:`pi_tustin_step` with clamping.

    Conditional integration: when ``freeze`` is requested the integral
    increment is skipped for that sample.  Output limits are written back
    into the carried output, which is what keeps the recursion wind-up free.
    """

    __slots__ = ("kp", "ki", "ts", "e_prev", "g_prev", "lo", "hi")

    def __init__(self, params: PiParams, ts: float, lo: float = -math.inf, hi: float = math.inf):
        self.kp, self.ki, self.ts = params.kp, params.ki, ts
        self.lo, self.hi = lo, hi
        self.e_prev = 0.0
        self.g_prev = 0.0

    def reset(self, e0: float = 0.0, g0: float = 0.0) -> None:
        self.e_prev = e0
        self.g_prev = g0

    def step(self, e: float, freeze: bool = False, perturb: StatePerturbation | None = None) -> float:
        if freeze:
            g = self.g_prev + self.kp * (e - self.e_prev)
        else:
            g = self.g_prev + 0.5 * self.ts * self.ki * (e + self.e_prev) + self.kp * (e - self.e_prev)
        if g > self.hi:
            g = self.hi
        elif g < self.lo:
            g = self.lo
        self.e_prev = e
        self.g_prev = g
        if perturb is not None and perturb.eps:
            self.g_prev += perturb.one()
            self.e_prev += perturb.one()
        return g

    @property
    def output(self) -> float:
        return self.g_prev


class TrapezoidalPI:
    """Stateful wrapper around :func:`trapezoidal_pi_step`.

    The output is recomputed from the full error history every sample, so a
    clamp on the output does not feed back into the carried sum.  Freezing
    skips appending the current error to the sum.
    """

    __slots__ = ("params", "ts", "state", "lo", "hi", "_frozen")

    def __init__(self, params: PiParams, ts: float, lo: float = -math.inf, hi: float = math.inf):
        self.params, self.ts = params, ts
        self.lo, self.hi = lo, hi
        self.state = TrapezoidalState()
        self._frozen = 0.0

    def reset(self, e0: float = 0.0, g0: float = 0.0) -> None:
        # g(0) = Kp e0 + offset must equal g0
        self.state = TrapezoidalState(offset=g0 - self.params.kp * e0)
        self.state = trapezoidal_pi_step(self.params, e0, self.state, self.ts)[1]

    def step(self, e: float, freeze: bool = False, perturb: StatePerturbation | None = None) -> float:
        st = self.state
        if freeze and st.n >= 1:
            # hold the integral: drop this sample from the accumulated history
            p = self.params
            integral = self.ts * p.ki * (0.5 * (st.e0 + st.e_last) + st.running_sum)
            g = p.kp * e + integral + st.offset
        else:
            # every stored history sample drifts independently
            dp = perturb.many(st.n) if perturb is not None and perturb.eps else 0.0
            g, self.state = trapezoidal_pi_step(self.params, e, st, self.ts, dp)
        return min(max(g, self.lo), self.hi)

    @property
    def output(self) -> float:
        st = self.state
        p = self.params
        return p.kp * st.e_last + self.ts * p.ki * (0.5 * (st.e0 + st.e_last) + st.running_sum) + st.offset


def make_pi(kind: str, params: PiParams, ts: float, lo: float = -math.inf, hi: float = math.inf):
    if kind == "tustin":
        return TustinPI(params, ts, lo, hi)
    if kind == "trapezoidal":
        return TrapezoidalPI(params, ts, lo, hi)
    raise ValueError(f"unknown discretizer {kind!r}")


# --------------------------------------------------------------------------
# inertia emulation


@dataclass(frozen=True)
class InertiaParams:
    """Emulated inertia ``h`` (s), damping ``d`` (pu/pu) and ``k = 2/ts``."""

    h: float
    d: float
    k: float
    w_path: str = "centered"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError(f"inertia constant must be positive, got {self.h}")
        if self.d < 0:
            raise ValueError(f"damping must be non-negative, got {self.d}")
        if self.w_path not in ("centered", "exact"):
            raise ValueError(f"w_path must be 'centered' or 'exact', got {self.w_path!r}")

    @classmethod
    def for_ts(cls, h: float, d: float, ts: float, w_path: str = "centered") -> "InertiaParams":
        return cls(h, d, 2.0 / ts, w_path)


def inertia_coefficients(params: InertiaParams) -> dict:
    """Coefficients of the angle recursion.

    Returns ``c1, c2`` (angle feedback), ``gt`` (torque-path gain) and the
    three speed-reference weights ``w0, w1, w2`` for the selected W-path.
    """
    h, d, k = params.h, params.d, params.k
    den = 2.0 * h * k * k + d * k
    c1 = 4.0 * h * k * k / den
    c2 = (2.0 * h * k * k - d * k) / den
    if params.w_path == "centered":
        w = (1.0 / k, 0.0, -1.0 / k)
    else:
        # (1 + z^-1) (2HK^2 (1 - z^-1) + DK (1 + z^-1)) / (K den)
        p0 = 2.0 * h * k * k + d * k
        p1 = -2.0 * h * k * k + d * k
        # (1 + z^-1)(p0 + p1 z^-1) = p0 + (p0 + p1) z^-1 + p1 z^-2
        w = (p0 / (k * den), (p0 + p1) / (k * den), p1 / (k * den))
    return {"c1": c1, "c2": c2, "gt": 1.0 / den, "w0": w[0], "w1": w[1], "w2": w[2]}


@dataclass
class InertiaHistory:
    """Two-sample histories of the angle recursion inputs and output."""

    delta1: float = 0.0
    delta2: float = 0.0
    t1: float = 0.0
    t2: float = 0.0
    w1: float = 0.0
    w2: float = 0.0

    @classmethod
    def steady(cls, delta: float, omega: float, ts: float, torque: float = 0.0) -> "InertiaHistory":
        """History of a rotor turning at constant ``omega`` with ``delta(k-1) = delta``."""
        return cls(delta, delta - omega * ts, torque, torque, omega, omega)


def inertia_step(
    params: InertiaParams,
    t_err: float,
    omega_s: float,
    hist: InertiaHistory,
    ts: float,
) -> tuple[float, float, InertiaHistory]:
    """Advance the discretized swing dynamics by one sample.

    ``t_err`` is the torque error ``T_m - T_e`` (``T_m = 0`` for the condenser,
    so callers pass ``-T_e``).  Returns ``(delta, omega, hist')`` with delta the
    time integral of per-unit speed and ``omega = (delta(k) - delta(k-1))/ts``.
    """
    if not math.isclose(params.k, 2.0 / ts, rel_tol=1e-12):
        raise InconsistentK(f"k = {params.k} but 2/ts = {2.0 / ts}")
    c = inertia_coefficients(params)
    delta = (
        c["c1"] * hist.delta1
        - c["c2"] * hist.delta2
        + c["gt"] * (t_err + 2.0 * hist.t1 + hist.t2)
        + c["w0"] * omega_s
        + c["w1"] * hist.w1
        + c["w2"] * hist.w2
    )
    omega = (delta - hist.delta1) / ts
    new = InertiaHistory(delta, hist.delta1, t_err, hist.t1, omega_s, hist.w1)
    return delta, omega, new
