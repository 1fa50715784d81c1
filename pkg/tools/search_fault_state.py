#!/usr/bin/env python3
"""
search_fault_state.py

Search behind the six-bus post-fault fixture: start every node at the coupled
equilibrium (rounded), then kick one generator (delta, omega) and keep the
first kick for which that generator crosses its angle constraint within the
horizon while every other node stays inside its box.

Candidates are tried delta ascending, then omega ascending, so the search
reports the mildest such kick on its grid. data/six_bus_fault_state.json is
the (1.2, 2.5) point of the same grid, a harder kick chosen so the violation
happens well inside the first second; --check re-verifies a state file.

Usage:
  python3 tools/search_fault_state.py
  python3 tools/search_fault_state.py --grid data/six_bus.json --node 1
  python3 tools/search_fault_state.py --t-end 20 --out data/six_bus_fault_state.json
  python3 tools/search_fault_state.py --equilibrium     # print the equilibrium only
  python3 tools/search_fault_state.py --check data/six_bus_fault_state.json
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.optimize import root

TOOLS_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_DIR = os.path.dirname(TOOLS_DIR)
if PROJECT_DIR not in sys.path:
    sys.path.insert(0, PROJECT_DIR)

from grid_assess import (  # noqa: E402
    CoupledSystem,
    NodeState,
    PostFaultState,
    Trajectory,
    parse_state,
    simulate_postfault,
    state_to_document,
)
from grid_dynamics import IntegratorOptions  # noqa: E402
from grid_model import GridSpec, load_grid  # noqa: E402

DEFAULT_GRID = os.path.join(PROJECT_DIR, "data", "six_bus.json")
DEFAULT_DELTAS = tuple(np.round(np.arange(0.6, 1.45, 0.1), 4))
DEFAULT_OMEGAS = tuple(np.round(np.arange(0.5, 4.01, 0.5), 4))
ROUND_DIGITS = 4


def equilibrium(grid: GridSpec, tol: float = 1e-12) -> PostFaultState:
    """All omegas zero, angles solving the coupled power balance."""
    system = CoupledSystem(grid)
    angle_cols = [col for col, _ in system.layout.values()]
    rate_cols = [col + 1 if has_omega else col for col, has_omega in system.layout.values()]

    def residual(angles):
        vec = np.zeros(system.size)
        vec[angle_cols] = angles
        return system.rhs(0.0, vec)[rate_cols]

    sol = root(residual, np.zeros(len(angle_cols)), tol=tol)
    if not sol.success:
        raise RuntimeError(f"equilibrium solve failed: {sol.message}")
    vec = np.zeros(system.size)
    vec[angle_cols] = sol.x
    return system.unpack(vec)


def kicked(base: PostFaultState, node_id: str, delta: float, omega: float) -> PostFaultState:
    nodes = dict(base.nodes)
    nodes[node_id] = NodeState(float(delta), float(omega))
    return PostFaultState(nodes)


def rounded(x: PostFaultState, digits: int = ROUND_DIGITS) -> PostFaultState:
    return PostFaultState({
        nid: NodeState(round(s.delta, digits), None if s.omega is None else round(s.omega, digits))
        for nid, s in x.nodes.items()
    })


def isolates(
    grid: GridSpec,
    node_id: str,
    x0: PostFaultState,
    t_end: float,
    opts: IntegratorOptions,
    system: Optional[CoupledSystem] = None,
) -> Optional[Trajectory]:
    """Trajectory from x0 if node_id is its only violator, else None."""
    traj = simulate_postfault(grid, x0, t_end, opts, system)
    if {v.node for v in traj.violations} == {node_id}:
        return traj
    return None


def search(
    grid: GridSpec,
    node_id: str,
    deltas: Iterable[float] = DEFAULT_DELTAS,
    omegas: Iterable[float] = DEFAULT_OMEGAS,
    t_end: float = 20.0,
    opts: Optional[IntegratorOptions] = None,
) -> Optional[Tuple[PostFaultState, Trajectory]]:
    opts = opts or IntegratorOptions(step=1e-2)
    base = rounded(equilibrium(grid))
    system = CoupledSystem(grid)
    omegas = list(omegas)
    for delta in deltas:
        for omega in omegas:
            x0 = kicked(base, node_id, delta, omega)
            traj = isolates(grid, node_id, x0, t_end, opts, system)
            if traj is not None:
                return x0, traj
    return None


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", default=DEFAULT_GRID)
    ap.add_argument("--node", default="1", help="generator to kick")
    ap.add_argument("--t-end", dest="t_end", type=float, default=20.0)
    ap.add_argument("--step", type=float, default=1e-2)
    ap.add_argument("--out", help="write the state here instead of stdout")
    ap.add_argument("--equilibrium", action="store_true", help="print the coupled equilibrium and exit")
    ap.add_argument("--check", metavar="STATE", help="verify that STATE makes --node the only violator")
    args = ap.parse_args()

    grid = load_grid(args.grid)
    if args.equilibrium:
        print(json.dumps(state_to_document(equilibrium(grid)), indent=2))
        return 0

    if args.check:
        with open(args.check, "r", encoding="utf-8") as f:
            state = parse_state(json.load(f), grid)
        traj = isolates(grid, args.node, state, args.t_end, IntegratorOptions(step=args.step))
        if traj is None:
            print(f"{args.check}: node {args.node} is not the only violator", file=sys.stderr)
            return 1
        v = traj.first_violation
        print(f"{args.check}: ok, node {v.node} crosses its {v.bound} bound at t={v.t:.4f}")
        return 0

    found = search(grid, args.node, t_end=args.t_end, opts=IntegratorOptions(step=args.step))
    if found is None:
        print(f"no kick on the candidate grid makes node {args.node} the only violator", file=sys.stderr)
        return 1

    state, traj = found
    v = traj.first_violation
    print(f"node {v.node} crosses its {v.bound} bound at t={v.t:.4f}", file=sys.stderr)
    text = json.dumps(state_to_document(state), indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
