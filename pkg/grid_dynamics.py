#!/usr/bin/env python3
# grid_dynamics.py -- node vector fields, generator adjoint, extremal disturbances
# and the fixed-step RK4 integrator with event localization

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from grid_model import GENERATOR, LOAD, DecoupledNode

HALF_PI = 0.5 * math.pi
ADJOINT_COLLAPSE_NORM = 1e-12
EVENT_MAX_BISECTIONS = 200


class SetKind(str, enum.Enum):
    MRPI = "mrpi"
    ADMISSIBLE = "admissible"

    @classmethod
    def parse(cls, value) -> "SetKind":
        if isinstance(value, SetKind):
            return value
        text = str(value or "").strip().lower()
        for kind in cls:
            if kind.value == text:
                return kind
        raise ValueError(f"unknown set kind {value!r} (expected mrpi or admissible)")


@dataclass(frozen=True)
class GenState:
    delta: float
    omega: float


@dataclass(frozen=True)
class Adjoint:
    l1: float
    l2: float


@dataclass(frozen=True)
class IntegratorOptions:
    step: float = 1e-3
    t_back_max: float = 50.0
    omega_cap: float = 10.0
    box_margin: float = 1e-9
    event_tol: float = 1e-10

    def __post_init__(self):
        for name in ("step", "t_back_max", "omega_cap", "box_margin", "event_tol"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"integrator option {name} must be a number")
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"integrator option {name} must be positive, got {value!r}")

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "t_back_max": self.t_back_max,
            "omega_cap": self.omega_cap,
            "box_margin": self.box_margin,
            "event_tol": self.event_tol,
        }


class NumericalFailure(RuntimeError):
    """Raised when integration produces a non-finite state or a collapsed adjoint."""

    def __init__(self, msg: str, t: float, state, partial_t=None, partial_x=None, hits=()):
        super().__init__(msg)
        self.t = t
        self.state = state
        self.partial_t = partial_t
        self.partial_x = partial_x
        # events recorded before the failure
        self.hits = tuple(hits)


# --------------------------------------------------------
# VECTOR FIELDS
# --------------------------------------------------------
def sat(x, hi, lo):
    return np.clip(x, lo, hi)


def _disturbance(node: DecoupledNode, d) -> np.ndarray:
    arr = np.asarray(d, dtype=float).reshape(-1)
    if arr.shape[0] != len(node.variable_neighbors):
        raise ValueError(
            f"node {node.id!r}: disturbance has {arr.shape[0]} entries, "
            f"expected {len(node.variable_neighbors)}"
        )
    return arr


def coupling_sum(node: DecoupledNode, delta: float, d) -> float:
    """Sum of a*sin(delta - neighbor) over variable and fixed neighbors."""
    arr = _disturbance(node, d)
    total = float(np.dot(node.a_var, np.sin(delta - arr))) if arr.size else 0.0
    if node.fixed_neighbors:
        total += float(np.dot(node.a_fix, np.sin(delta - node.delta_fix)))
    return total


def generator_rhs(node: DecoupledNode, s, d) -> Tuple[float, float]:
    if node.kind != GENERATOR:
        raise ValueError(f"node {node.id!r} is not a generator")
    delta, omega = _unpack_state(s)
    spec = node.node
    omega_dot = (-spec.k * omega - coupling_sum(node, delta, d) + spec.p_m) / spec.m
    return omega, omega_dot


def load_rhs(node: DecoupledNode, delta: float, d) -> float:
    if node.kind != LOAD:
        raise ValueError(f"node {node.id!r} is not a load")
    spec = node.node
    return (-coupling_sum(node, float(delta), d) - spec.p_d) / spec.k


def adjoint_rhs(node: DecoupledNode, s, d, lam) -> Adjoint:
    if node.kind != GENERATOR:
        raise ValueError(f"adjoint system is defined for generators only, not {node.id!r}")
    delta, _ = _unpack_state(s)
    l1, l2 = _unpack_adjoint(lam)
    arr = _disturbance(node, d)
    spec = node.node
    gain = float(np.dot(node.a_var, np.cos(delta - arr))) if arr.size else 0.0
    if node.fixed_neighbors:
        gain += float(np.dot(node.a_fix, np.cos(delta - node.delta_fix)))
    return Adjoint(l1=(gain / spec.m) * l2, l2=-l1 + (spec.k / spec.m) * l2)


def extremal_disturbance(kind, delta: float, l2: float, d_lo, d_hi) -> np.ndarray:
    """
    Disturbance realization maximizing (MRPI) or minimizing (admissible) the
    Hamiltonian. Ties at l2 == 0 take the l2 >= 0 branch.
    """
    kind = SetKind.parse(kind)
    upper_branch = l2 >= 0
    if kind is SetKind.ADMISSIBLE:
        upper_branch = not upper_branch
    shift = HALF_PI if upper_branch else -HALF_PI
    return sat(delta + shift, np.asarray(d_hi, dtype=float), np.asarray(d_lo, dtype=float))


def hamiltonian(lam, f) -> float:
    l1, l2 = _unpack_adjoint(lam)
    return l1 * float(f[0]) + l2 * float(f[1])


def _unpack_state(s) -> Tuple[float, float]:
    if isinstance(s, GenState):
        return float(s.delta), float(s.omega)
    return float(s[0]), float(s[1])


def _unpack_adjoint(lam) -> Tuple[float, float]:
    if isinstance(lam, Adjoint):
        return float(lam.l1), float(lam.l2)
    return float(lam[0]), float(lam[1])


# --------------------------------------------------------
# INTEGRATOR
# --------------------------------------------------------
@dataclass(frozen=True)
class Event:
    name: str
    fn: Callable[[float, np.ndarray], float]
    terminal: bool = True
    # optional veto on a localized crossing; False means "not this time"
    confirm: Optional[Callable[[float, np.ndarray], bool]] = None
    # non-terminal mode switch: the step is cut at the crossing, this is
    # called with the crossing point, and RK4 restarts from there
    on_switch: Optional[Callable[[float, np.ndarray], None]] = None


@dataclass(frozen=True)
class EventHit:
    name: str
    t: float
    x: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class Termination:
    reason: str
    t: float
    x: np.ndarray = field(compare=False)


@dataclass(frozen=True, eq=False)
class IntegrationResult:
    t: np.ndarray
    x: np.ndarray
    termination: Termination
    hits: Tuple[EventHit, ...] = ()


def rk4_step(rhs, t: float, h: float, x: np.ndarray) -> np.ndarray:
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = rhs(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _locate(rhs, project, ev: Event, t0: float, x0: np.ndarray, h: float, g0: float, tol: float):
    """Bisect the step fraction until the event function is within tol of zero."""
    lo, hi = 0.0, 1.0
    best_t, best_x = t0 + h, None
    for _ in range(EVENT_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        x_mid = rk4_step(rhs, t0, mid * h, x0)
        if project is not None:
            x_mid = project(x_mid)
        g_mid = ev.fn(t0 + mid * h, x_mid)
        best_t, best_x = t0 + mid * h, x_mid
        if abs(g_mid) <= tol or (hi - lo) * abs(h) <= 1e-15:
            break
        if (g_mid > 0) == (g0 > 0):
            lo = mid
        else:
            hi = mid
    return best_t, best_x


def integrate(
    rhs,
    x0,
    direction: str = "forward",
    opts: Optional[IntegratorOptions] = None,
    events: Sequence[Event] = (),
    *,
    horizon: Optional[float] = None,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    t0: float = 0.0,
) -> IntegrationResult:
    """
    Fixed-step classical RK4 from x0, forward or backward in time.

    rhs(t, x) -> dx/dt. Each event's sign change inside a step is localized by
    bisection to opts.event_tol; the first terminal event ends the run. An
    event with `on_switch` cuts the step at its crossing and the next step
    starts there, so a field that changes branch at the crossing is never
    stepped across. The horizon defaults to opts.t_back_max. `project` is
    applied after every accepted step (used to renormalize adjoints).
    """
    opts = opts or IntegratorOptions()
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    sign = 1.0 if direction == "forward" else -1.0
    span = opts.t_back_max if horizon is None else float(horizon)
    if span < 0:
        raise ValueError("integration horizon must be nonnegative")
    cap_reason = "TimeCap" if direction == "backward" else "Horizon"

    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("initial state is not finite", t0, x)
    t = float(t0)
    ts: List[float] = [t]
    xs: List[np.ndarray] = [x.copy()]
    hits: List[EventHit] = []
    g_prev = [ev.fn(t, x) for ev in events]
    t_stop = t + sign * span
    # remainders below this are rounding left over from summing steps
    slack = 1e-6 * opts.step

    while sign * (t_stop - t) > slack:
        h = sign * min(opts.step, sign * (t_stop - t))
        x_new = rk4_step(rhs, t, h, x)
        if project is not None:
            x_new = project(x_new)
        if not np.all(np.isfinite(x_new)):
            raise NumericalFailure(
                f"non-finite state after t={t:.6g}", t, x.copy(),
                partial_t=np.array(ts), partial_x=np.array(xs), hits=hits,
            )
        t_new = t + h

        g_new = [ev.fn(t_new, x_new) for ev in events]
        crossings = []
        for idx, ev in enumerate(events):
            gp, gn = g_prev[idx], g_new[idx]
            # a step landing exactly on zero counts; one starting there does not
            if gp == 0 or (gn != 0 and (gp > 0) == (gn > 0)):
                continue
            t_e, x_e = _locate(rhs, project, ev, t, x, h, gp, opts.event_tol)
            if ev.confirm is not None and not ev.confirm(t_e, x_e):
                continue
            crossings.append((abs(t_e - t), idx, t_e, x_e))

        terminal = None
        switched = None
        for _, idx, t_e, x_e in sorted(crossings, key=lambda c: (c[0], c[1])):
            ev = events[idx]
            if ev.terminal:
                terminal = (ev, t_e, x_e)
                break
            hits.append(EventHit(name=ev.name, t=t_e, x=x_e.copy()))
            if ev.on_switch is not None:
                switched = (ev, t_e, x_e)
                break

        if terminal is not None:
            ev, t_e, x_e = terminal
            ts.append(t_e)
            xs.append(x_e.copy())
            hits.append(EventHit(name=ev.name, t=t_e, x=x_e.copy()))
            return IntegrationResult(
                t=np.array(ts), x=np.array(xs),
                termination=Termination(reason=ev.name, t=t_e, x=x_e.copy()),
                hits=tuple(hits),
            )

        if switched is not None:
            ev, t_new, x_new = switched
            ev.on_switch(t_new, x_new)
            # the crossing is now the start of a step: whatever sits on zero
            # there must not fire again on the next step
            g_new = [ev.fn(t_new, x_new) for ev in events]
            g_new = [0.0 if abs(g) <= opts.event_tol else g for g in g_new]

        t, x = t_new, x_new.copy()
        g_prev = g_new
        ts.append(t)
        xs.append(x.copy())

    return IntegrationResult(
        t=np.array(ts), x=np.array(xs),
        termination=Termination(reason=cap_reason, t=t, x=x.copy()),
        hits=tuple(hits),
    )


def normalize_adjoint(x: np.ndarray, start: int = 2) -> np.ndarray:
    """Rescale the adjoint block x[start:start+2] to unit norm."""
    norm = math.hypot(x[start], x[start + 1])
    if norm < ADJOINT_COLLAPSE_NORM:
        raise NumericalFailure(f"adjoint collapsed (norm {norm:.3g})", float("nan"), x.copy())
    out = x.copy()
    out[start:start + 2] /= norm
    return out


# --------------------------------------------------------
# EXPORT
# --------------------------------------------------------
def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(path, t, x, columns: Sequence[str]):
    """Write `t,<columns...>` rows; one row per accepted step."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] != t.shape[0]:
        raise ValueError("trajectory times and states differ in length")
    if x.shape[1] < len(columns):
        raise ValueError("fewer state components than CSV columns")
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", *columns])
        for ti, row in zip(t, x):
            w.writerow([_fmt(ti), *(_fmt(v) for v in row[: len(columns)])])
