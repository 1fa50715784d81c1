#!/usr/bin/env python3
# grid_assess.py -- post-fault state classification, coupled simulation and
# worst-case probe oracles

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from grid_barrier import Membership, Region, compute_region, membership, membership_grid
from grid_dynamics import (
    HALF_PI,
    Event,
    GenState,
    IntegratorOptions,
    NumericalFailure,
    SetKind,
    generator_rhs,
    integrate,
    load_rhs,
    rk4_step,
    sat,
    write_trajectory_csv,
)
from grid_loadsets import DEFAULT_RESOLUTION, LoadInterval, load_interval
from grid_model import GENERATOR, DecoupledNode, GridSpec, decouple

PROBE_HORIZON = 100.0
LOAD_STRATEGIES = ("push_up", "push_down")
GENERATOR_STRATEGIES = ("push_up", "push_down", "pump", "pump_down")
DEFAULT_CROSS_CHECK_GRID = 20


class StateError(ValueError):
    """State document does not match the grid (missing/unknown node, missing omega)."""


class Verdict(str, enum.Enum):
    SAFE = "Safe"
    POTENTIALLY_SAFE = "PotentiallySafe"
    UNSAFE = "Unsafe"


# worst first
VERDICT_ORDER = (Verdict.UNSAFE, Verdict.POTENTIALLY_SAFE, Verdict.SAFE)


def worst_verdict(verdicts: Iterable[Verdict]) -> Optional[Verdict]:
    seen = set(verdicts)
    for v in VERDICT_ORDER:
        if v in seen:
            return v
    return None


# --------------------------------------------------------
# STATES
# --------------------------------------------------------
@dataclass(frozen=True)
class NodeState:
    delta: float
    omega: Optional[float] = None


@dataclass(frozen=True)
class PostFaultState:
    nodes: Mapping[str, NodeState]

    def __getitem__(self, node_id: str) -> NodeState:
        return self.nodes[node_id]

    def ids(self) -> List[str]:
        return list(self.nodes)


def _finite(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise StateError(f"{where}: expected a number")
    out = float(value)
    if not math.isfinite(out):
        raise StateError(f"{where}: value must be finite")
    return out


def parse_state(document, grid: GridSpec) -> PostFaultState:
    """{node_id: {delta, omega?}} -> PostFaultState with one entry per non-reference node."""
    if not isinstance(document, dict):
        raise StateError("state document must be an object keyed by node id")
    expected = grid.node_ids()
    unknown = sorted(str(k) for k in document if str(k) not in expected)
    if unknown:
        raise StateError(f"state names unknown or reference node(s): {', '.join(unknown)}")
    missing = [nid for nid in expected if nid not in {str(k) for k in document}]
    if missing:
        raise StateError(f"state is missing node(s): {', '.join(missing)}")

    out: Dict[str, NodeState] = {}
    raw_by_id = {str(k): v for k, v in document.items()}
    for nid in expected:
        raw = raw_by_id[nid]
        if not isinstance(raw, dict):
            raise StateError(f"state[{nid!r}] must be an object")
        if "delta" not in raw:
            raise StateError(f"state[{nid!r}] is missing delta")
        delta = _finite(raw["delta"], f"state[{nid!r}].delta")
        kind = grid.node(nid).kind
        if kind == GENERATOR:
            if raw.get("omega") is None:
                raise StateError(f"state[{nid!r}] is missing omega for a generator")
            out[nid] = NodeState(delta, _finite(raw["omega"], f"state[{nid!r}].omega"))
        else:
            if raw.get("omega") is not None:
                raise StateError(f"state[{nid!r}]: load nodes carry no omega")
            out[nid] = NodeState(delta)
    return PostFaultState(out)


def state_to_document(x: PostFaultState) -> dict:
    doc = {}
    for nid, s in x.nodes.items():
        entry = {"delta": s.delta}
        if s.omega is not None:
            entry["omega"] = s.omega
        doc[nid] = entry
    return doc


# --------------------------------------------------------
# PER-NODE SETS
# --------------------------------------------------------
NodeSet = Union[Region, LoadInterval]


@dataclass(frozen=True, eq=False)
class NodeSets:
    node_id: str
    node_kind: str
    sets: Mapping[SetKind, NodeSet]

    @property
    def mrpi(self) -> Optional[NodeSet]:
        return self.sets.get(SetKind.MRPI)

    @property
    def admissible(self) -> Optional[NodeSet]:
        return self.sets.get(SetKind.ADMISSIBLE)


def compute_node_sets(
    grid: GridSpec,
    node_id: str,
    opts: Optional[IntegratorOptions] = None,
    resolution: float = DEFAULT_RESOLUTION,
    kinds: Sequence = (SetKind.MRPI, SetKind.ADMISSIBLE),
    log_fn=None,
) -> NodeSets:
    opts = opts or IntegratorOptions()
    node = decouple(grid, node_id)
    out: Dict[SetKind, NodeSet] = {}
    for kind in kinds:
        kind = SetKind.parse(kind)
        if node.kind == GENERATOR:
            out[kind] = compute_region(node, kind, opts, log_fn)
        else:
            out[kind] = load_interval(node, kind, resolution)
    return NodeSets(node_id=node.id, node_kind=node.kind, sets=out)


def interval_membership(interval: LoadInterval, delta: float, tol: float = 1e-6) -> Membership:
    if not interval.nonempty:
        return Membership.OUTSIDE
    if abs(delta - interval.lower) <= tol or abs(delta - interval.upper) <= tol:
        return Membership.BOUNDARY
    if interval.lower < delta < interval.upper:
        return Membership.INSIDE
    return Membership.OUTSIDE


def _node_membership(node_set: NodeSet, s: NodeState, tol: float) -> Membership:
    if isinstance(node_set, LoadInterval):
        return interval_membership(node_set, s.delta, tol)
    return membership(node_set, (s.delta, s.omega), tol)


# --------------------------------------------------------
# CLASSIFICATION
# --------------------------------------------------------
@dataclass(frozen=True)
class NodeMembership:
    in_mrpi: bool
    in_admissible: bool


@dataclass(frozen=True)
class Assessment:
    per_node: Mapping[str, NodeMembership]
    verdict: Verdict
    critical_nodes: Tuple[str, ...]

    def to_document(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "per_node": {
                nid: {"in_mrpi": m.in_mrpi, "in_admissible": m.in_admissible}
                for nid, m in sorted(self.per_node.items())
            },
            "critical_nodes": list(self.critical_nodes),
        }


def classify_state(
    grid: GridSpec,
    sets: Mapping[str, NodeSets],
    x: PostFaultState,
    tol: float = 1e-6,
) -> Assessment:
    """
    Unsafe if any node is outside its admissible set, Safe if every node is
    strictly inside its MRPI, PotentiallySafe otherwise. A boundary point
    counts as admissible but not as safe.
    """
    expected = set(grid.node_ids())
    given = set(x.nodes)
    if given != expected:
        missing = sorted(expected - given)
        extra = sorted(given - expected)
        parts = []
        if missing:
            parts.append(f"missing {', '.join(missing)}")
        if extra:
            parts.append(f"unknown {', '.join(extra)}")
        raise StateError("state does not match grid: " + "; ".join(parts))

    per_node: Dict[str, NodeMembership] = {}
    for nid in sorted(expected):
        node_sets = sets.get(nid)
        if node_sets is None or node_sets.mrpi is None or node_sets.admissible is None:
            raise StateError(f"no MRPI/admissible sets for node {nid!r}")
        s = x[nid]
        if grid.node(nid).kind == GENERATOR and s.omega is None:
            raise StateError(f"state[{nid!r}] is missing omega for a generator")
        in_mrpi = _node_membership(node_sets.mrpi, s, tol) is Membership.INSIDE
        in_adm = _node_membership(node_sets.admissible, s, tol) is not Membership.OUTSIDE
        per_node[nid] = NodeMembership(in_mrpi=in_mrpi, in_admissible=in_adm)

    if any(not m.in_admissible for m in per_node.values()):
        verdict = Verdict.UNSAFE
    elif all(m.in_mrpi for m in per_node.values()):
        verdict = Verdict.SAFE
    else:
        verdict = Verdict.POTENTIALLY_SAFE

    critical = [] if verdict is Verdict.SAFE else [
        nid for nid, m in sorted(per_node.items()) if not (m.in_admissible and m.in_mrpi)
    ]
    return Assessment(per_node=per_node, verdict=verdict, critical_nodes=tuple(critical))


def screen(
    grid: GridSpec,
    sets: Mapping[str, NodeSets],
    states: Sequence[PostFaultState],
    workers: Optional[int] = None,
) -> List[Assessment]:
    if not states:
        return []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda x: classify_state(grid, sets, x), states))


# --------------------------------------------------------
# TRAJECTORIES
# --------------------------------------------------------
@dataclass(frozen=True)
class Violation:
    t: float
    node: str
    bound: str  # "upper" | "lower"

    def to_document(self) -> dict:
        return {"t": self.t, "node": self.node, "bound": self.bound}


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    # node id -> (first column, has omega)
    layout: Mapping[str, Tuple[int, bool]]
    violations: Tuple[Violation, ...] = ()
    strategy: Optional[str] = None

    @property
    def first_violation(self) -> Optional[Violation]:
        if not self.violations:
            return None
        return min(self.violations, key=lambda v: (v.t, v.node))

    def node_series(self, node_id: str) -> np.ndarray:
        col, has_omega = self.layout[node_id]
        return self.states[:, col:col + (2 if has_omega else 1)]

    def node_ids(self) -> List[str]:
        return list(self.layout)


def write_trajectory_long_csv(traj: Trajectory, path):
    """`t,node,delta,omega` rows (omega empty for loads), grouped by time."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "node", "delta", "omega"])
        for idx, t in enumerate(traj.times):
            for nid, (col, has_omega) in traj.layout.items():
                row = traj.states[idx]
                omega = format(float(row[col + 1]), ".17g") if has_omega else ""
                w.writerow([format(float(t), ".17g"), nid, format(float(row[col]), ".17g"), omega])


def _bound_events(layout: Mapping[str, Tuple[int, bool]], boxes: Mapping[str, Tuple[float, float]], terminal: bool):
    events = []
    for nid, (col, _) in layout.items():
        lo, hi = boxes[nid]
        events.append(Event(f"{nid}:upper", lambda t, x, c=col, h=hi: h - x[c], terminal=terminal))
        events.append(Event(f"{nid}:lower", lambda t, x, c=col, l=lo: x[c] - l, terminal=terminal))
    return events


def _initial_violations(layout, boxes, x0) -> List[Violation]:
    out = []
    for nid, (col, _) in layout.items():
        lo, hi = boxes[nid]
        if x0[col] > hi:
            out.append(Violation(0.0, nid, "upper"))
        elif x0[col] < lo:
            out.append(Violation(0.0, nid, "lower"))
    return out


def _first_per_node(hits, already: Iterable[Violation]) -> Tuple[Violation, ...]:
    seen = {v.node for v in already}
    out = list(already)
    for hit in hits:
        nid, bound = hit.name.rsplit(":", 1)
        if nid in seen:
            continue
        seen.add(nid)
        out.append(Violation(float(hit.t), nid, bound))
    return tuple(out)


# --------------------------------------------------------
# COUPLED POST-FAULT SYSTEM
# --------------------------------------------------------
class CoupledSystem:
    """
    The full network with reference angles fixed. State vector packs each
    non-reference node in grid order: (delta, omega) for generators, delta
    for loads. Each node's derivative is its decoupled vector field with the
    disturbance set to the neighbors' actual angles.
    """

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.nodes: Dict[str, DecoupledNode] = {nid: decouple(grid, nid) for nid in grid.node_ids()}
        self.layout: Dict[str, Tuple[int, bool]] = {}
        col = 0
        for nid, node in self.nodes.items():
            has_omega = node.kind == GENERATOR
            self.layout[nid] = (col, has_omega)
            col += 2 if has_omega else 1
        self.size = col
        self.boxes = {nid: (n.node.delta_min, n.node.delta_max) for nid, n in self.nodes.items()}
        self._neighbor_cols = {
            nid: np.array([self.layout[nb.id][0] for nb in node.variable_neighbors], dtype=int)
            for nid, node in self.nodes.items()
        }

    def pack(self, x: PostFaultState) -> np.ndarray:
        out = np.zeros(self.size)
        for nid, (col, has_omega) in self.layout.items():
            s = x[nid]
            out[col] = s.delta
            if has_omega:
                out[col + 1] = s.omega
        return out

    def unpack(self, vec) -> PostFaultState:
        nodes = {}
        for nid, (col, has_omega) in self.layout.items():
            nodes[nid] = NodeState(float(vec[col]), float(vec[col + 1]) if has_omega else None)
        return PostFaultState(nodes)

    def node_rhs(self, nid: str, vec) -> Tuple[float, ...]:
        node = self.nodes[nid]
        col, has_omega = self.layout[nid]
        d = vec[self._neighbor_cols[nid]] if self._neighbor_cols[nid].size else np.zeros(0)
        if has_omega:
            return generator_rhs(node, (vec[col], vec[col + 1]), d)
        return (load_rhs(node, vec[col], d),)

    def rhs(self, t, vec) -> np.ndarray:
        out = np.empty(self.size)
        for nid, (col, has_omega) in self.layout.items():
            vals = self.node_rhs(nid, vec)
            out[col:col + len(vals)] = vals
        return out


def simulate_postfault(
    grid: GridSpec,
    x0: PostFaultState,
    t_end: float,
    opts: Optional[IntegratorOptions] = None,
    system: Optional[CoupledSystem] = None,
) -> Trajectory:
    """Forward RK4 of the coupled network; records the first bound violation per node."""
    opts = opts or IntegratorOptions()
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    system = system or CoupledSystem(grid)
    vec0 = system.pack(x0)
    start = _initial_violations(system.layout, system.boxes, vec0)
    events = _bound_events(system.layout, system.boxes, terminal=False)
    try:
        result = integrate(system.rhs, vec0, "forward", opts, events, horizon=t_end)
    except NumericalFailure as e:
        # hand the caller what was integrated, crossings included
        times = e.partial_t if e.partial_t is not None else np.array([0.0])
        states = e.partial_x if e.partial_x is not None else vec0.reshape(1, -1)
        e.trajectory = Trajectory(
            times=times,
            states=states,
            layout=dict(system.layout),
            violations=_first_per_node(e.hits, start),
        )
        raise
    return Trajectory(
        times=result.t,
        states=result.x,
        layout=dict(system.layout),
        violations=_first_per_node(result.hits, start),
    )


def equilibrium_residual(grid: GridSpec, x: PostFaultState) -> float:
    system = CoupledSystem(grid)
    return float(np.linalg.norm(system.rhs(0.0, system.pack(x))))


# --------------------------------------------------------
# WORST-CASE PROBES
# --------------------------------------------------------
def _probe_disturbance(node: DecoupledNode, strategy: str, delta: float, omega: float) -> np.ndarray:
    if strategy == "push_up":
        up = True
    elif strategy == "push_down":
        up = False
    elif strategy == "pump":
        up = omega >= 0
    else:  # pump_down
        up = omega > 0
    shift = HALF_PI if up else -HALF_PI
    return sat(delta + shift, node.d_hi, node.d_lo)


def _node_state_vector(node: DecoupledNode, s0) -> np.ndarray:
    if node.kind == GENERATOR:
        if isinstance(s0, GenState):
            return np.array([s0.delta, s0.omega], dtype=float)
        if isinstance(s0, NodeState):
            return np.array([s0.delta, s0.omega or 0.0], dtype=float)
        return np.array([float(s0[0]), float(s0[1])], dtype=float)
    if isinstance(s0, NodeState):
        return np.array([s0.delta], dtype=float)
    return np.array([float(s0)], dtype=float)


def worst_case_probe(
    node: DecoupledNode,
    s0,
    strategy: str,
    t_end: float = PROBE_HORIZON,
    opts: Optional[IntegratorOptions] = None,
) -> Trajectory:
    """
    Integrate one decoupled node forward with the neighbor angles chosen as
    state feedback: push_up minimizes the coupling pull (d = sat(delta + pi/2)),
    push_down maximizes it; pump / pump_down follow the sign of omega.
    Stops at the first constraint violation.
    """
    opts = opts or IntegratorOptions()
    allowed = GENERATOR_STRATEGIES if node.kind == GENERATOR else LOAD_STRATEGIES
    if strategy not in allowed:
        raise ValueError(f"strategy {strategy!r} not available for a {node.kind} node")

    if node.kind == GENERATOR:
        def rhs(t, x):
            d = _probe_disturbance(node, strategy, x[0], x[1])
            return np.array(generator_rhs(node, (x[0], x[1]), d))
    else:
        def rhs(t, x):
            d = _probe_disturbance(node, strategy, x[0], 0.0)
            return np.array([load_rhs(node, x[0], d)])

    layout = {node.id: (0, node.kind == GENERATOR)}
    boxes = {node.id: (node.node.delta_min, node.node.delta_max)}
    x0 = _node_state_vector(node, s0)
    start = _initial_violations(layout, boxes, x0)
    if start:
        return Trajectory(np.array([0.0]), x0.reshape(1, -1), layout, tuple(start), strategy)

    result = integrate(rhs, x0, "forward", opts, _bound_events(layout, boxes, terminal=True), horizon=t_end)
    return Trajectory(
        times=result.t,
        states=result.x,
        layout=layout,
        violations=_first_per_node(result.hits, ()),
        strategy=strategy,
    )


def probe_escapes(node: DecoupledNode, s0, t_end: float = PROBE_HORIZON,
                  opts: Optional[IntegratorOptions] = None) -> Optional[Trajectory]:
    """First probe trajectory (over all strategies) that leaves the box, or None."""
    strategies = GENERATOR_STRATEGIES if node.kind == GENERATOR else LOAD_STRATEGIES
    for strategy in strategies:
        traj = worst_case_probe(node, s0, strategy, t_end, opts)
        if traj.first_violation is not None:
            return traj
    return None


def _batch_generator_field(node: DecoupledNode, strategy: str):
    """Probe field for many (delta, omega) rows at once; same feedback as _probe_disturbance."""
    spec = node.node

    def rhs(t, x):
        delta, omega = x[:, 0], x[:, 1]
        if strategy == "push_up":
            up = np.ones(delta.shape, dtype=bool)
        elif strategy == "push_down":
            up = np.zeros(delta.shape, dtype=bool)
        elif strategy == "pump":
            up = omega >= 0
        else:  # pump_down
            up = omega > 0
        shift = np.where(up, HALF_PI, -HALF_PI)[:, None]
        pull = np.zeros(delta.shape)
        if node.variable_neighbors:
            d = np.clip(delta[:, None] + shift, node.d_lo, node.d_hi)
            pull = pull + np.sin(delta[:, None] - d) @ node.a_var
        if node.fixed_neighbors:
            pull = pull + np.sin(delta[:, None] - node.delta_fix) @ node.a_fix
        return np.column_stack([omega, (-spec.k * omega - pull + spec.p_m) / spec.m])

    return rhs


def batch_escapes(
    node: DecoupledNode,
    starts,
    strategy: str,
    t_end: float = PROBE_HORIZON,
    opts: Optional[IntegratorOptions] = None,
) -> np.ndarray:
    """
    Run one generator probe strategy from every (delta, omega) row of `starts`
    in a single RK4 loop. Rows stop once they leave the delta box; returns the
    boolean escape mask.
    """
    opts = opts or IntegratorOptions()
    if node.kind != GENERATOR:
        raise ValueError(f"node {node.id!r} is not a generator")
    if strategy not in GENERATOR_STRATEGIES:
        raise ValueError(f"unknown probe strategy {strategy!r}")
    lo, hi = node.node.delta_min, node.node.delta_max
    rhs = _batch_generator_field(node, strategy)
    x = np.array(starts, dtype=float).reshape(-1, 2)
    escaped = (x[:, 0] < lo) | (x[:, 0] > hi)
    active = ~escaped
    t = 0.0
    slack = 1e-6 * opts.step
    while active.any() and t_end - t > slack:
        h = min(opts.step, t_end - t)
        rows = np.flatnonzero(active)
        x_new = rk4_step(rhs, t, h, x[rows])
        if not np.all(np.isfinite(x_new)):
            raise NumericalFailure(f"non-finite probe state after t={t:.6g}", t, x[rows].copy())
        x[rows] = x_new
        out = (x_new[:, 0] >= hi) | (x_new[:, 0] <= lo)
        escaped[rows[out]] = True
        active[rows[out]] = False
        t += h
    return escaped


@dataclass(frozen=True)
class CrossCheck:
    node_id: str
    kind: SetKind
    samples: int
    checked: int
    # (delta, omega, expectation)
    disagreements: Tuple[Tuple[float, float, str], ...] = field(default=())

    def to_document(self) -> dict:
        return {
            "node": self.node_id,
            "kind": self.kind.value,
            "samples": self.samples,
            "checked": self.checked,
            "disagreements": [
                {"delta": d, "omega": w, "expected": e} for d, w, e in self.disagreements
            ],
        }


def cross_check_region(
    node: DecoupledNode,
    region: Region,
    opts: Optional[IntegratorOptions] = None,
    grid_size: int = DEFAULT_CROSS_CHECK_GRID,
    horizon: float = PROBE_HORIZON,
    log_fn=None,
) -> CrossCheck:
    """
    Probe a grid_size x grid_size sample of the constraint box:
      - MRPI, non-empty: samples Inside must survive every probe
      - MRPI, empty: every sample must have an escaping probe
      - admissible: samples Outside must escape under every probe
    Disagreements are reported, never used to overrule the region.
    """
    opts = opts or IntegratorOptions()
    lo, hi, cap = region.box
    # stay off the box edges, a sample exactly on delta_max counts as violated at t=0
    pad_d = 0.5 * (hi - lo) / grid_size
    pad_w = cap / grid_size
    deltas, omegas = np.meshgrid(
        np.linspace(lo + pad_d, hi - pad_d, grid_size),
        np.linspace(-cap + pad_w, cap - pad_w, grid_size),
    )
    where = membership_grid(region, deltas, omegas)

    flat_d, flat_w = deltas.ravel(), omegas.ravel()
    labels = where.ravel()
    if region.kind is SetKind.MRPI:
        if region.empty:
            picked = np.ones(flat_d.shape, dtype=bool)
        else:
            picked = np.array([m is Membership.INSIDE for m in labels], dtype=bool)
    else:
        picked = np.array([m is Membership.OUTSIDE for m in labels], dtype=bool)
    starts = np.column_stack([flat_d[picked], flat_w[picked]])

    # one batched run per strategy over every picked sample
    runs = [batch_escapes(node, starts, s, horizon, opts) for s in GENERATOR_STRATEGIES] if len(starts) else []
    if region.kind is SetKind.MRPI:
        # empty: something must escape; non-empty: nothing may
        escapes = np.any(runs, axis=0) if runs else np.zeros(0, dtype=bool)
        wrong = ~escapes if region.empty else escapes
        expected = "escape" if region.empty else "stay"
    else:
        wrong = ~np.all(runs, axis=0) if runs else np.zeros(0, dtype=bool)
        expected = "escape"
    checked = int(len(starts))
    disagreements = [(float(d), float(w), expected) for (d, w) in starts[wrong]]

    if disagreements and log_fn:
        try:
            log_fn(
                "WARN",
                f"node={node.id} kind={region.kind.value}: {len(disagreements)}/{checked} probe "
                f"sample(s) disagree with the {'empty' if region.empty else 'traced'} region",
            )
        except Exception:
            pass
    return CrossCheck(
        node_id=node.id,
        kind=region.kind,
        samples=int(deltas.size),
        checked=checked,
        disagreements=tuple(disagreements),
    )


def write_probe_csv(traj: Trajectory, path):
    nid = traj.node_ids()[0]
    _, has_omega = traj.layout[nid]
    write_trajectory_csv(path, traj.times, traj.states, ("delta", "omega") if has_omega else ("delta",))
