"""Initial-value-problem integrators: fixed-step RK4 and adaptive Dormand-Prince 5(4).

States are anything supporting ``+`` and scalar ``*`` for RK4 (so tape
``Array`` values differentiate straight through the unrolled steps). The
adaptive solver works on numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

__all__ = ["SolverConfig", "SolverError", "integrate", "rk4", "dopri5", "order_check",
           "Trace"]


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: str = "rk4"
    rk4_steps_per_unit: int = 4
    rtol: float = 1e-3
    atol: float = 1e-4
    max_steps: int = 10000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.rk4_steps_per_unit < 1 or self.max_steps < 1:
            raise ValueError("solver step counts must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class Trace:
    """Bookkeeping from one solve (accepted/rejected steps, derivative calls)."""
    accepted: int = 0
    rejected: int = 0
    nfev: int = 0


def _check_finite(k, t):
    data = getattr(k, "data", k)
    if not np.all(np.isfinite(data)):
        raise SolverError(f"non-finite derivative at t={t}")


def rk4(f: Callable, x0, t0: float, t1: float, steps_per_unit: int = 4,
        t_eval: Sequence[float] = (), trace: Trace | None = None):
    """Classical RK4. Requested interior times become segment boundaries.

    Each segment [a, b] takes ceil((b - a) * steps_per_unit) equal steps.
    Returns ``(x(t1), [x(t) for t in t_eval])``.
    """
    if t1 < t0:
        raise ValueError("rk4 requires t1 >= t0")
    marks = sorted(set(float(t) for t in t_eval if t0 < t < t1))
    bounds = [t0] + marks + [t1]
    x = x0
    saved = {t0: x0}
    for a, b in zip(bounds[:-1], bounds[1:]):
        x = _rk4_fixed(f, x, a, b, math.ceil((b - a) * steps_per_unit), trace)
        saved[b] = x
    return x, [saved[float(t)] if float(t) in saved else _missing(t) for t in t_eval]


def _rk4_fixed(f, x, a, b, n, trace=None):
    if n <= 0:
        return x
    h = (b - a) / n
    for i in range(n):
        t = a + i * h
        k1 = f(x, t)
        _check_finite(k1, t)
        k2 = f(x + (0.5 * h) * k1, t + 0.5 * h)
        k3 = f(x + (0.5 * h) * k2, t + 0.5 * h)
        k4 = f(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if trace is not None:
            trace.accepted += 1
            trace.nfev += 4
    return x


def _missing(t):
    raise ValueError(f"requested time {t} lies outside the integration span")


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B4
# 4th-order continuous extension: y(t0 + s h) = y0 + h * sum_i k_i * (P[i] . [s, s^2, s^3, s^4])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


def _rms(x):
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _initial_step(f, t0, x0, f0, rtol, atol, span):
    scale = atol + rtol * np.abs(x0)
    d0, d1 = _rms(x0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    x1 = x0 + h0 * f0
    f1 = f(x1, t0 + h0)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def dopri5(f: Callable, x0: np.ndarray, t0: float, t1: float, rtol: float = 1e-3,
           atol: float = 1e-4, max_steps: int = 10000, t_eval: Sequence[float] = (),
           trace: Trace | None = None):
    """Adaptive Dormand-Prince 5(4) with dense output at interior ``t_eval``.

    Step acceptance uses the RMS of err / (atol + rtol * max(|x|, |x_new|)).
    The step-size factor is clamped to [0.2, 5].
    """
    if t1 < t0:
        raise ValueError("dopri5 requires t1 >= t0")
    trace = trace if trace is not None else Trace()
    x0 = np.array(x0, dtype=np.float64)
    x = x0.copy()
    disp = np.zeros_like(x0)
    queries = sorted((float(t), i) for i, t in enumerate(t_eval))
    for t, _ in queries:
        if t < t0 or t > t1:
            raise ValueError(f"requested time {t} lies outside [{t0}, {t1}]")
    dense: list = [None] * len(queries)
    qi = 0
    while qi < len(queries) and queries[qi][0] == t0:
        dense[queries[qi][1]] = x.copy()
        qi += 1
    if t1 == t0:
        for k in range(qi, len(queries)):
            dense[queries[k][1]] = x.copy()
        return x, dense

    k1 = np.asarray(f(x, t0), dtype=np.float64)
    trace.nfev += 1
    _check_finite(k1, t0)
    h = _initial_step(f, t0, x, k1, rtol, atol, t1 - t0)
    trace.nfev += 1
    t = t0
    steps = 0
    while t < t1:
        if steps >= max_steps:
            raise SolverError(f"dopri5 exceeded max_steps={max_steps} at t={t}")
        steps += 1
        h = min(h, t1 - t)
        last = t + h >= t1
        K = [k1]
        for s in range(1, 6):
            xs = x + h * sum(a * K[j] for j, a in enumerate(_A[s]))
            ks = np.asarray(f(xs, t + _C[s] * h), dtype=np.float64)
            _check_finite(ks, t + _C[s] * h)
            K.append(ks)
        # weights sum to 1, so writing the update relative to k1 makes a
        # constant field's increment exactly h * c
        # the displacement from x0 is accumulated like t, so a constant field
        # ends at exactly x0 + c * (t1 - t0) even over several steps
        d_new = disp + h * (k1 + sum(b * (K[j] - k1) for j, b in enumerate(_B[:6]) if j and b != 0.0))
        x_new = x0 + d_new
        t_new = t1 if last else t + h
        k7 = np.asarray(f(x_new, t_new), dtype=np.float64)
        _check_finite(k7, t_new)
        K.append(k7)
        trace.nfev += 6
        err = h * sum(e * K[j] for j, e in enumerate(_E) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = _rms(err / scale)
        if err_norm <= 1.0:
            while qi < len(queries) and queries[qi][0] <= t_new:
                s_frac = (queries[qi][0] - t) / h
                powers = np.cumprod(np.full(4, s_frac))
                coef = _P @ powers
                dense[queries[qi][1]] = x + h * sum(c * K[j] for j, c in enumerate(coef) if c != 0.0)
                qi += 1
            t, x, disp, k1 = t_new, x_new, d_new, k7
            trace.accepted += 1
            factor = _MAX_FACTOR if err_norm == 0 else _SAFETY * err_norm ** -0.2
            h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        else:
            trace.rejected += 1
            h *= max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)
    return x, dense


def integrate(f: Callable, x0, t0: float, t1: float, cfg: SolverConfig | None = None,
              t_eval: Sequence[float] = (), trace: Trace | None = None):
    """Solve dx/dt = f(x, t) from t0 to t1; returns ``(x(t1), interior states)``."""
    cfg = cfg or SolverConfig()
    if cfg.method == "rk4":
        return rk4(f, x0, t0, t1, cfg.rk4_steps_per_unit, t_eval=t_eval, trace=trace)
    return dopri5(f, x0, t0, t1, rtol=cfg.rtol, atol=cfg.atol, max_steps=cfg.max_steps,
                  t_eval=t_eval, trace=trace)


def order_check(f: Callable, x0, span: tuple[float, float], exact, n: int = 4) -> float | None:
    """Empirical RK4 order from step counts n and 2n against an exact solution.

    Returns None when both errors sit at round-off level (polynomial-exact cases).
    """
    t0, t1 = span
    ref = np.asarray(exact, dtype=np.float64)
    e1 = np.max(np.abs(_rk4_fixed(f, x0, t0, t1, n) - ref))
    e2 = np.max(np.abs(_rk4_fixed(f, x0, t0, t1, 2 * n) - ref))
    floor = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(ref))))
    if e1 <= floor and e2 <= floor:
        return None
    return math.log2(e1 / e2)
