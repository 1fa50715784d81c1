#!/usr/bin/env python3
# grid_barrier.py -- MRPI / admissible regions for generator nodes
#
# Pipeline per (node, kind): tangency points -> existence test -> backward
# barrier trace (state + adjoint, extremal disturbance feedback) -> region
# assembly inside the constraint box -> membership queries.

from __future__ import annotations

import csv
import enum
import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LineString, Point, Polygon, box
from shapely.geometry.polygon import orient
from shapely.ops import split

from grid_dynamics import (
    Adjoint,
    Event,
    GenState,
    IntegratorOptions,
    SetKind,
    adjoint_rhs,
    coupling_sum,
    extremal_disturbance,
    generator_rhs,
    hamiltonian,
    integrate,
    normalize_adjoint,
    write_trajectory_csv,
)
from grid_model import GENERATOR, DecoupledNode

UPPER = "upper"
LOWER = "lower"

# cut lines are pushed this far outside the box so shapely sees a clean crossing
CUT_EXTENSION = 1.0
# probe offset used to pick the inner side of a cut near its tangency point
SIDE_PROBE = 1e-6
MIN_AREA = 1e-12
DEFAULT_MEMBERSHIP_TOL = 1e-6

# ---------------------------------------------------------
# REGION DIAGNOSIS (reason code -> explanation)
# ---------------------------------------------------------
REGION_HINTS = {
    "OK": "Region assembled from both barrier curves and the constraint box.",
    "MISSING_UPPER": "No candidate barrier ends at the upper tangency point (existence test failed).",
    "MISSING_LOWER": "No candidate barrier ends at the lower tangency point (existence test failed).",
    "BOUNCE_UPPER": "Upper barrier bounced after crossing the delta axis; no usable segment remains.",
    "BOUNCE_LOWER": "Lower barrier bounced after crossing the delta axis; no usable segment remains.",
    "OPEN_UPPER": "Upper barrier never reached the constraint box boundary within the backward horizon.",
    "OPEN_LOWER": "Lower barrier never reached the constraint box boundary within the backward horizon.",
    "DISCONNECTED": "The barrier cuts leave no region attached to a tangency point.",
    "DEGENERATE": "The assembled boundary encloses no positive area.",
    "SELF_INTERSECTING": "The assembled boundary is not a simple polygon.",
}

# Priority order for selecting the primary reason
REASON_PRIORITY = [
    "MISSING_UPPER",
    "MISSING_LOWER",
    "BOUNCE_UPPER",
    "BOUNCE_LOWER",
    "OPEN_UPPER",
    "OPEN_LOWER",
    "DISCONNECTED",
    "SELF_INTERSECTING",
    "DEGENERATE",
]


def _pick_primary_reason(codes: Sequence[str]) -> str:
    for code in REASON_PRIORITY:
        if code in codes:
            return code
    return "OK"


class Membership(str, enum.Enum):
    INSIDE = "Inside"
    BOUNDARY = "Boundary"
    OUTSIDE = "Outside"


@dataclass(frozen=True)
class TangencyPoint:
    point: GenState
    side: str
    final_adjoint: Adjoint


@dataclass(frozen=True)
class ExistenceCheck:
    side: str
    kind: SetKind
    ok: bool
    margin: float


@dataclass(frozen=True, eq=False)
class BarrierCurve:
    node_id: str
    kind: SetKind
    side: str
    t: np.ndarray  # backward times, t[0] == 0 at the tangency point
    x: np.ndarray  # rows (delta, omega, l1, l2)
    termination: str
    hamiltonian_residual_max: float
    # backward times of the adjoint switches along the curve
    switches: Tuple[float, ...] = ()

    @property
    def states(self) -> np.ndarray:
        return self.x[:, :2]

    @property
    def adjoints(self) -> np.ndarray:
        return self.x[:, 2:4]


@dataclass(frozen=True, eq=False)
class Region:
    node_id: str
    kind: SetKind
    polygon: Optional[Polygon]
    reason: str
    box: Tuple[float, float, float]  # (delta_min, delta_max, omega_cap)
    curves: Tuple[BarrierCurve, ...] = ()
    checks: Tuple[ExistenceCheck, ...] = ()
    provenance: Dict[str, object] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.polygon is None

    @property
    def area(self) -> float:
        return 0.0 if self.polygon is None else float(self.polygon.area)

    @property
    def boundary(self) -> np.ndarray:
        """Closed (delta, omega) polyline; last row repeats the first."""
        if self.polygon is None:
            return np.zeros((0, 2))
        return np.asarray(self.polygon.exterior.coords, dtype=float)


def _require_generator(node: DecoupledNode):
    if node.kind != GENERATOR:
        raise ValueError(f"node {node.id!r} is not a generator")


# --------------------------------------------------------
# TANGENCY + EXISTENCE
# --------------------------------------------------------
def tangency_points(node: DecoupledNode) -> List[TangencyPoint]:
    _require_generator(node)
    spec = node.node
    return [
        TangencyPoint(GenState(spec.delta_max, 0.0), UPPER, Adjoint(1.0, 0.0)),
        TangencyPoint(GenState(spec.delta_min, 0.0), LOWER, Adjoint(-1.0, 0.0)),
    ]


def existence_check(node: DecoupledNode, tp: TangencyPoint, kind) -> ExistenceCheck:
    """
    A candidate barrier leaves the tangency point into the box iff
    omega_dot there points back inside: the coupling sum minus p_m is
    positive at the upper point and negative at the lower one.
    """
    _require_generator(node)
    kind = SetKind.parse(kind)
    delta = tp.point.delta
    # backward from the upper point l2 turns positive, from the lower point negative
    branch = 0.0 if tp.side == UPPER else -1.0
    d = extremal_disturbance(kind, delta, branch, node.d_lo, node.d_hi)
    margin = coupling_sum(node, delta, d) - node.node.p_m
    ok = margin > 0 if tp.side == UPPER else margin < 0
    return ExistenceCheck(side=tp.side, kind=kind, ok=bool(ok), margin=float(margin))


# --------------------------------------------------------
# BARRIER TRACING
# --------------------------------------------------------
def _barrier_field(node: DecoupledNode, kind: SetKind, branch):
    """State + adjoint field with the disturbance branch held in branch[0]."""

    def rhs(t, x):
        delta, omega, l1, l2 = x
        d = extremal_disturbance(kind, delta, branch[0], node.d_lo, node.d_hi)
        f1, f2 = generator_rhs(node, (delta, omega), d)
        lam_dot = adjoint_rhs(node, (delta, omega), d, (l1, l2))
        return np.array([f1, f2, lam_dot.l1, lam_dot.l2])

    return rhs


def _omega_dot_branches(node: DecoupledNode, kind: SetKind, delta: float, omega: float):
    out = []
    for l2 in (1.0, -1.0):
        d = extremal_disturbance(kind, delta, l2, node.d_lo, node.d_hi)
        out.append(generator_rhs(node, (delta, omega), d)[1])
    return out


def is_bounce(node: DecoupledNode, kind, delta: float, omega: float) -> bool:
    """
    At an adjoint switch, omega_dot flips sign between the two disturbance
    branches. Along an extremal H = 0, so l2 = 0 already puts the curve on
    the delta axis and only the flip is tested.
    """
    kind = SetKind.parse(kind)
    up, down = _omega_dot_branches(node, kind, delta, omega)
    return up * down < 0


def hamiltonian_residual(node: DecoupledNode, kind, x: np.ndarray) -> float:
    """Largest |H| over rows (delta, omega, l1, l2), branch taken from the sign of l2."""
    kind = SetKind.parse(kind)
    worst = 0.0
    for delta, omega, l1, l2 in np.asarray(x, dtype=float):
        d = extremal_disturbance(kind, delta, l2, node.d_lo, node.d_hi)
        f = generator_rhs(node, (delta, omega), d)
        worst = max(worst, abs(hamiltonian((l1, l2), f)))
    return worst


def trace_barrier(node: DecoupledNode, tp: TangencyPoint, kind, opts: Optional[IntegratorOptions] = None) -> BarrierCurve:
    """
    Integrate state and adjoint backward from the tangency point with the
    extremal disturbance as feedback, until the curve leaves the constraint
    box, exceeds omega_cap, bounces, or runs out of backward horizon.
    Every l2 sign change is a switch: the step is cut there and the
    disturbance branch flips before integration resumes.
    """
    _require_generator(node)
    kind = SetKind.parse(kind)
    opts = opts or IntegratorOptions()
    spec = node.node
    lo, hi = spec.delta_min, spec.delta_max
    # backward from the upper point l2 turns positive, from the lower point negative
    branch = [1.0 if tp.side == UPPER else -1.0]
    rhs = _barrier_field(node, kind, branch)

    def flip(t, x):
        branch[0] = -branch[0]

    events = [
        Event("BoxExit", lambda t, x: min(x[0] - (lo - opts.box_margin), (hi + opts.box_margin) - x[0])),
        Event("OmegaCap", lambda t, x: opts.omega_cap - abs(x[1])),
        Event("Bounce", lambda t, x: x[3], confirm=lambda t, x: is_bounce(node, kind, x[0], x[1])),
        Event("Switch", lambda t, x: x[3], terminal=False, on_switch=flip),
    ]
    x0 = [tp.point.delta, tp.point.omega, tp.final_adjoint.l1, tp.final_adjoint.l2]
    result = integrate(rhs, x0, "backward", opts, events, project=normalize_adjoint)

    termination = result.termination.reason
    if termination == "BoxExit":
        end_delta = result.x[-1, 0]
        crossed_other = end_delta < lo if tp.side == UPPER else end_delta > hi
        if crossed_other:
            termination = "ClosedOnOtherConstraint"

    return BarrierCurve(
        node_id=node.id,
        kind=kind,
        side=tp.side,
        t=result.t,
        x=result.x,
        termination=termination,
        hamiltonian_residual_max=hamiltonian_residual(node, kind, result.x),
        switches=tuple(h.t for h in result.hits if h.name == "Switch"),
    )


# --------------------------------------------------------
# REGION ASSEMBLY
# --------------------------------------------------------
def _stays_on_side(curve: BarrierCurve, tol: float) -> bool:
    omega = curve.x[1:-1, 1]
    if omega.size == 0:
        return True
    if curve.side == UPPER:
        return bool(np.all(omega >= -tol))
    return bool(np.all(omega <= tol))


def _cut_line(curve: BarrierCurve, lo: float, hi: float, cap: float, tol: float):
    """Polyline splitting the box along this barrier, or (None, reason)."""
    side_tag = curve.side.upper()
    pts = [tuple(p) for p in curve.states]
    start = (hi + CUT_EXTENSION, 0.0) if curve.side == UPPER else (lo - CUT_EXTENSION, 0.0)

    if curve.termination in ("BoxExit", "ClosedOnOtherConstraint", "OmegaCap"):
        d_end, w_end = pts[-1]
        if d_end >= hi:
            tail = (hi + CUT_EXTENSION, w_end)
        elif d_end <= lo:
            tail = (lo - CUT_EXTENSION, w_end)
        elif w_end >= 0:
            tail = (d_end, cap + CUT_EXTENSION)
        else:
            tail = (d_end, -cap - CUT_EXTENSION)
        return LineString([start, *pts, tail]), None

    if curve.termination == "Bounce":
        if not _stays_on_side(curve, tol):
            return None, f"BOUNCE_{side_tag}"
        # close along the delta axis from the bounce point to the far box side
        tail = (lo - CUT_EXTENSION, 0.0) if curve.side == UPPER else (hi + CUT_EXTENSION, 0.0)
        d_end, w_end = pts[-1]
        if w_end != 0.0:
            pts.append((d_end, 0.0))
        return LineString([start, *pts, tail]), None

    return None, f"OPEN_{side_tag}"


def _piece(frame: Polygon, cut: LineString, probe: Tuple[float, float]) -> Optional[Polygon]:
    here = Point(probe)
    for geom in split(frame, cut).geoms:
        if isinstance(geom, Polygon) and geom.covers(here):
            return geom
    return None


def _polygons(geom) -> List[Polygon]:
    if geom is None or geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        return [geom]
    return [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon) and not g.is_empty]


def _empty(node, kind, frame_box, reason, curves, checks, provenance) -> Region:
    prov = dict(provenance)
    prov["hint"] = REGION_HINTS.get(reason, "")
    return Region(
        node_id=node.id, kind=kind, polygon=None, reason=reason, box=frame_box,
        curves=tuple(curves), checks=tuple(checks), provenance=prov,
    )


def assemble_region(
    node: DecoupledNode,
    curves: Sequence[BarrierCurve],
    kind,
    opts: Optional[IntegratorOptions] = None,
    checks: Sequence[ExistenceCheck] = (),
) -> Region:
    """
    Cut the constraint box along each barrier and keep the side facing the
    equilibrium (below the upper barrier near (delta_max, 0), above the lower
    barrier near (delta_min, 0)). The region is the overlap of both sides;
    crossing curves are thereby truncated at their intersection.
    """
    _require_generator(node)
    kind = SetKind.parse(kind)
    opts = opts or IntegratorOptions()
    spec = node.node
    lo, hi, cap = spec.delta_min, spec.delta_max, opts.omega_cap
    frame_box = (lo, hi, cap)
    frame = box(lo, -cap, hi, cap)
    # switch rows sit on the delta axis up to the Hamiltonian drift
    tol = max(10.0 * opts.event_tol, DEFAULT_MEMBERSHIP_TOL)

    by_side = {c.side: c for c in curves if SetKind.parse(c.kind) is kind}
    provenance: Dict[str, object] = {
        "terminations": {s: c.termination for s, c in sorted(by_side.items())},
        "omega_window": cap,
    }

    codes: List[str] = []
    cuts: Dict[str, LineString] = {}
    for side in (UPPER, LOWER):
        curve = by_side.get(side)
        if curve is None:
            codes.append(f"MISSING_{side.upper()}")
            continue
        cut, why = _cut_line(curve, lo, hi, cap, tol)
        if cut is None:
            codes.append(why)
            continue
        cuts[side] = cut
    if codes:
        return _empty(node, kind, frame_box, _pick_primary_reason(codes), by_side.values(), checks, provenance)

    upper_curve = LineString(by_side[UPPER].states)
    lower_curve = LineString(by_side[LOWER].states)
    provenance["curves_cross"] = bool(upper_curve.intersects(lower_curve))
    provenance["curve_gap"] = float(upper_curve.distance(lower_curve))

    below_upper = _piece(frame, cuts[UPPER], (hi - SIDE_PROBE, -SIDE_PROBE))
    above_lower = _piece(frame, cuts[LOWER], (lo + SIDE_PROBE, SIDE_PROBE))
    if below_upper is None or above_lower is None:
        return _empty(node, kind, frame_box, "DISCONNECTED", by_side.values(), checks, provenance)

    anchors = [Point(hi, 0.0), Point(lo, 0.0)]
    candidates = [
        p for p in _polygons(below_upper.intersection(above_lower))
        if any(p.distance(a) <= 10.0 * opts.step for a in anchors)
    ]
    if not candidates:
        return _empty(node, kind, frame_box, "DISCONNECTED", by_side.values(), checks, provenance)

    polygon = max(candidates, key=lambda p: p.area)
    if not polygon.exterior.is_simple:
        return _empty(node, kind, frame_box, "SELF_INTERSECTING", by_side.values(), checks, provenance)
    if not polygon.is_valid or polygon.area <= MIN_AREA:
        return _empty(node, kind, frame_box, "DEGENERATE", by_side.values(), checks, provenance)

    provenance["hint"] = REGION_HINTS["OK"]
    provenance["closure"] = "box" if all(
        c.termination != "Bounce" for c in by_side.values()
    ) else "box+axis"
    return Region(
        node_id=node.id,
        kind=kind,
        polygon=orient(polygon, 1.0),
        reason="OK",
        box=frame_box,
        curves=tuple(by_side[s] for s in (UPPER, LOWER)),
        checks=tuple(checks),
        provenance=provenance,
    )


def compute_region(node: DecoupledNode, kind, opts: Optional[IntegratorOptions] = None, log_fn=None) -> Region:
    """Tangency points, existence filter, backward traces and assembly for one kind."""
    kind = SetKind.parse(kind)
    opts = opts or IntegratorOptions()

    def _log(level, msg):
        if log_fn:
            try:
                log_fn(level, msg)
            except Exception:
                pass

    curves = []
    checks = []
    for tp in tangency_points(node):
        check = existence_check(node, tp, kind)
        checks.append(check)
        if not check.ok:
            _log("INFO", f"node={node.id} kind={kind.value} side={tp.side}: no candidate barrier (margin={check.margin:.6g})")
            continue
        curve = trace_barrier(node, tp, kind, opts)
        _log(
            "INFO",
            f"node={node.id} kind={kind.value} side={tp.side}: traced {len(curve.t)} points, "
            f"termination={curve.termination} residual={curve.hamiltonian_residual_max:.3g}",
        )
        curves.append(curve)

    region = assemble_region(node, curves, kind, opts, checks)
    if region.empty:
        _log("INFO", f"node={node.id} kind={kind.value}: EMPTY ({region.reason})")
    else:
        _log("INFO", f"node={node.id} kind={kind.value}: area={region.area:.6g}")
    return region


# --------------------------------------------------------
# MEMBERSHIP
# --------------------------------------------------------
def membership(region: Region, s, tol: float = DEFAULT_MEMBERSHIP_TOL) -> Membership:
    if region.polygon is None:
        return Membership.OUTSIDE
    delta, omega = (s.delta, s.omega) if isinstance(s, GenState) else (float(s[0]), float(s[1]))
    pt = Point(delta, omega)
    if region.polygon.boundary.distance(pt) <= tol:
        return Membership.BOUNDARY
    if region.polygon.contains(pt):
        return Membership.INSIDE
    return Membership.OUTSIDE


def membership_grid(region: Region, deltas, omegas, tol: float = DEFAULT_MEMBERSHIP_TOL) -> np.ndarray:
    """Vectorised membership: array of Membership values, same shape as the inputs."""
    deltas = np.asarray(deltas, dtype=float)
    omegas = np.asarray(omegas, dtype=float)
    # np.full would coerce the str-valued members into a truncated string array
    labels = np.empty(3, dtype=object)
    labels[0], labels[1], labels[2] = Membership.OUTSIDE, Membership.INSIDE, Membership.BOUNDARY
    codes = np.zeros(deltas.shape, dtype=np.intp)
    if region.polygon is not None:
        inside = shapely.contains_xy(region.polygon, deltas, omegas)
        dist = shapely.distance(region.polygon.boundary, shapely.points(deltas, omegas))
        codes[inside] = 1
        codes[dist <= tol] = 2
    return labels[codes]


# --------------------------------------------------------
# ARTIFACTS
# --------------------------------------------------------
def safe_name(node_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(node_id))


def region_basename(node_id: str, kind) -> str:
    return f"region_{safe_name(node_id)}_{SetKind.parse(kind).value}"


def region_sidecar(region: Region, opts: IntegratorOptions) -> dict:
    return {
        "node": region.node_id,
        "kind": region.kind.value,
        "empty": region.empty,
        "reason": region.reason,
        "hint": REGION_HINTS.get(region.reason, ""),
        "area": region.area,
        "box": {"delta_min": region.box[0], "delta_max": region.box[1], "omega_cap": region.box[2]},
        "termination": {c.side: c.termination for c in region.curves},
        "residuals": {c.side: c.hamiltonian_residual_max for c in region.curves},
        "existence": {c.side: {"ok": c.ok, "margin": c.margin} for c in region.checks},
        "provenance": {k: v for k, v in sorted(region.provenance.items()) if k != "hint"},
        "options": opts.to_dict(),
    }


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_region(region: Region, out_dir, opts: IntegratorOptions, fmt: str = "csv") -> List[str]:
    """Write the closed boundary polyline plus its JSON sidecar; return written paths."""
    base = os.path.join(out_dir, region_basename(region.node_id, region.kind))
    pts = region.boundary
    if fmt == "csv":
        path = base + ".csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["delta", "omega"])
            for d, o in pts:
                w.writerow([_fmt(d), _fmt(o)])
    elif fmt == "json":
        path = base + ".json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"delta": [float(v) for v in pts[:, 0]], "omega": [float(v) for v in pts[:, 1]]}, f)
            f.write("\n")
    else:
        raise ValueError(f"unknown region format {fmt!r}")

    sidecar = base + ".meta.json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(region_sidecar(region, opts), f, indent=2, sort_keys=True)
        f.write("\n")
    return [path, sidecar]


def write_curve(curve: BarrierCurve, out_dir) -> str:
    path = os.path.join(
        out_dir, f"curve_{safe_name(curve.node_id)}_{curve.kind.value}_{curve.side}.csv"
    )
    write_trajectory_csv(path, curve.t, curve.x, ("delta", "omega", "l1", "l2"))
    return path


def read_region(path, sidecar_path=None) -> Region:
    """Load a region written by write_region (CSV or JSON polyline plus sidecar)."""
    path = os.fspath(path)
    if sidecar_path is None:
        stem = path[: path.rfind(".")]
        sidecar_path = stem + ".meta.json"
    with open(sidecar_path, "r", encoding="utf-8") as f:
        meta = json.load(f)

    if path.endswith(".json"):
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        pts = list(zip(doc.get("delta", []), doc.get("omega", [])))
    else:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
        pts = [(float(r[0]), float(r[1])) for r in rows[1:] if r]

    b = meta.get("box", {})
    frame_box = (float(b.get("delta_min", -math.pi / 2)), float(b.get("delta_max", math.pi / 2)),
                 float(b.get("omega_cap", 10.0)))
    polygon = None
    if not meta.get("empty") and len(pts) >= 4:
        polygon = orient(Polygon(pts), 1.0)
    return Region(
        node_id=str(meta["node"]),
        kind=SetKind.parse(meta["kind"]),
        polygon=polygon,
        reason=str(meta.get("reason", "OK")),
        box=frame_box,
        provenance=dict(meta.get("provenance", {})),
    )
