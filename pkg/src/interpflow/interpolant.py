"""Interpolation schedules between a base point and a target point.

A schedule is the coefficient pair (a_t, b_t) of the linear two-endpoint
path ``a_t * x0 + b_t * x1`` on t in [0, 1], together with the time
derivatives (a_dot, b_dot). Valid schedules satisfy a(0)=1, a(1)=0,
b(0)=0, b(1)=1, with a non-increasing and b non-decreasing.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError

KIND_TRIG = "trig"
KIND_LINEAR = "linear"
KIND_CUSTOM = "custom"

#: grid density used by validate_schedule; dense enough to catch sign flips
#: of smooth C^1 coefficient functions (heuristic, not a proof).
VALIDATION_GRID = 1001


@dataclass(frozen=True)
class InterpolantSchedule:
    """Coefficient pair of a linear interpolation path and its derivatives.

    Instances are immutable; every operation on them is pure and safe to
    call concurrently. All evaluation happens in double precision.
    """

    name: str
    kind: str
    a: Callable
    b: Callable
    a_dot: Callable
    b_dot: Callable


def trig_schedule():
    """Quarter-period trigonometric schedule a=cos(pi t/2), b=sin(pi t/2).

    Satisfies a^2 + b^2 = 1, which keeps the path covariance constant when
    both endpoints share the same covariance.
    """
    half_pi = 0.5 * np.pi
    return InterpolantSchedule(
        name="trig",
        kind=KIND_TRIG,
        a=lambda t: np.cos(half_pi * t),
        b=lambda t: np.sin(half_pi * t),
        a_dot=lambda t: -half_pi * np.sin(half_pi * t),
        b_dot=lambda t: half_pi * np.cos(half_pi * t),
    )


def linear_schedule():
    """Straight-line schedule a = 1 - t, b = t."""
    return InterpolantSchedule(
        name="linear",
        kind=KIND_LINEAR,
        a=lambda t: 1.0 - np.asarray(t, dtype=float),
        b=lambda t: np.asarray(t, dtype=float) + 0.0,
        a_dot=lambda t: np.full_like(np.asarray(t, dtype=float), -1.0),
        b_dot=lambda t: np.full_like(np.asarray(t, dtype=float), 1.0),
    )


def custom_schedule(name, a, b, a_dot=None, b_dot=None, fd_step=1e-6):
    """Wrap user-supplied coefficient functions as a custom schedule.

    Missing derivatives fall back to central finite differences with step
    ``fd_step`` (one-sided at the interval ends).
    """

    def _fd(f):
        def deriv(t):
            t = np.asarray(t, dtype=float)
            lo = np.maximum(t - fd_step, 0.0)
            hi = np.minimum(t + fd_step, 1.0)
            return (np.asarray(f(hi), dtype=float) - np.asarray(f(lo), dtype=float)) / (hi - lo)

        return deriv

    return InterpolantSchedule(
        name=name,
        kind=KIND_CUSTOM,
        a=a,
        b=b,
        a_dot=a_dot if a_dot is not None else _fd(a),
        b_dot=b_dot if b_dot is not None else _fd(b),
    )


def schedule_from_table(t_knots, a_knots, b_knots, name="custom"):
    """Cubic-spline schedule through tabulated (t, a, b) triples.

    The t column must be strictly increasing and span [0, 1].
    """
    from scipy.interpolate import CubicSpline

    t_knots = np.asarray(t_knots, dtype=float)
    a_knots = np.asarray(a_knots, dtype=float)
    b_knots = np.asarray(b_knots, dtype=float)
    if t_knots.ndim != 1 or t_knots.size < 2:
        raise ContractError("schedule table needs at least two rows")
    if not (t_knots.shape == a_knots.shape == b_knots.shape):
        raise ContractError("schedule table columns have mismatched lengths")
    if np.any(np.diff(t_knots) <= 0):
        raise ContractError("schedule table t column must be strictly increasing")
    if abs(t_knots[0]) > 1e-12 or abs(t_knots[-1] - 1.0) > 1e-12:
        raise ContractError("schedule table t column must span [0, 1]")
    spline_a = CubicSpline(t_knots, a_knots)
    spline_b = CubicSpline(t_knots, b_knots)
    return InterpolantSchedule(
        name=name,
        kind=KIND_CUSTOM,
        a=lambda t: spline_a(t),
        b=lambda t: spline_b(t),
        a_dot=spline_a.derivative(),
        b_dot=spline_b.derivative(),
    )


def schedule_from_csv(path, name=None):
    """Load a tabulated custom schedule from a CSV file with columns t,a,b."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != 3:
        raise ContractError(f"schedule CSV must have 3 columns (t,a,b), got {rows.shape[1]}")
    return schedule_from_table(rows[:, 0], rows[:, 1], rows[:, 2], name=name or str(path))


_REGISTRY = {"trig": trig_schedule, "linear": linear_schedule}


def get_schedule(name):
    """Look up a built-in schedule by name ("trig" or "linear")."""
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ContractError(f"unknown schedule {name!r}; known: {sorted(_REGISTRY)}") from None


def _check_times(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise DomainError("interpolation time must lie in [0, 1]")
    return t


def _check_endpoints(x0, x1):
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape[-1] != x1.shape[-1]:
        raise ContractError(f"endpoint dimension mismatch: {x0.shape[-1]} vs {x1.shape[-1]}")
    return x0, x1


def _combine(coef0, coef1, t_ndim, x0, x1):
    if t_ndim == 0:
        return coef0 * x0 + coef1 * x1
    return np.expand_dims(coef0, -1) * x0 + np.expand_dims(coef1, -1) * x1


def interpolate(sched, t, x0, x1):
    """Point on the path, ``a(t) x0 + b(t) x1``.

    ``t`` may be a scalar or an array broadcastable against the leading
    axes of ``x0``/``x1``.
    """
    t = _check_times(t)
    x0, x1 = _check_endpoints(x0, x1)
    return _combine(np.asarray(sched.a(t), dtype=float), np.asarray(sched.b(t), dtype=float), t.ndim, x0, x1)


def path_velocity(sched, t, x0, x1):
    """Time derivative of the path, ``a_dot(t) x0 + b_dot(t) x1``."""
    t = _check_times(t)
    x0, x1 = _check_endpoints(x0, x1)
    return _combine(np.asarray(sched.a_dot(t), dtype=float), np.asarray(sched.b_dot(t), dtype=float), t.ndim, x0, x1)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst_t: float
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    schedule: str
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def lines(self):
        out = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            out.append(f"{status:4s}  {c.name:28s} worst t={c.worst_t:.6f}  {c.detail}")
        return out


def validate_schedule(sched, grid_points=VALIDATION_GRID):
    """Check schedule invariants on a uniform grid and report each one.

    Reported checks: boundary values, derivative signs, coefficient
    positivity on the half-open ends, and agreement of the supplied
    derivatives with central finite differences of a/b. This is a
    reporting operation; it never raises on a failed check.
    """
    t = np.linspace(0.0, 1.0, grid_points)
    a = np.asarray(sched.a(t), dtype=float)
    b = np.asarray(sched.b(t), dtype=float)
    a_dot = np.asarray(sched.a_dot(t), dtype=float)
    b_dot = np.asarray(sched.b_dot(t), dtype=float)
    checks = []

    def add(name, errs, tol, where=t, fmt="max err {0:.3e} (tol {1:.0e})"):
        worst = int(np.argmax(errs))
        checks.append(
            CheckResult(name, bool(np.max(errs) <= tol), float(np.asarray(where)[worst]), fmt.format(float(np.max(errs)), tol))
        )

    boundary_errs = np.array([abs(a[0] - 1.0), abs(a[-1]), abs(b[0]), abs(b[-1] - 1.0)])
    add("boundary a(0),a(1),b(0),b(1)", boundary_errs, 1e-12, where=[0.0, 1.0, 0.0, 1.0])
    add("monotone a_dot <= 0", np.maximum(a_dot, 0.0), 1e-12)
    add("monotone b_dot >= 0", np.maximum(-b_dot, 0.0), 1e-12)
    add("a > 0 on [0,1)", np.maximum(-a[:-1], 0.0) + (a[:-1] == 0.0), 0.0, where=t[:-1], fmt="min a {0:.3e}")
    add("b > 0 on (0,1]", np.maximum(-b[1:], 0.0) + (b[1:] == 0.0), 0.0, where=t[1:], fmt="min b {0:.3e}")

    # derivative consistency vs central differences at interior grid points
    h = 1e-5
    ti = t[1:-1]
    fd_a = (np.asarray(sched.a(ti + h), dtype=float) - np.asarray(sched.a(ti - h), dtype=float)) / (2 * h)
    fd_b = (np.asarray(sched.b(ti + h), dtype=float) - np.asarray(sched.b(ti - h), dtype=float)) / (2 * h)
    scale_a = np.maximum(np.abs(fd_a), 1e-8)
    scale_b = np.maximum(np.abs(fd_b), 1e-8)
    add("a_dot matches finite diff", np.abs(a_dot[1:-1] - fd_a) / scale_a, 1e-6, where=ti, fmt="max rel err {0:.3e}")
    add("b_dot matches finite diff", np.abs(b_dot[1:-1] - fd_b) / scale_b, 1e-6, where=ti, fmt="max rel err {0:.3e}")

    return ValidationReport(schedule=sched.name, checks=tuple(checks))
