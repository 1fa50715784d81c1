#!/usr/bin/env python3
# grid_loadsets.py -- MRPI and admissible intervals for load nodes

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import bisect

from grid_dynamics import (
    HALF_PI,
    IntegratorOptions,
    SetKind,
    coupling_sum,
    sat,
)
from grid_model import LOAD, DecoupledNode

DEFAULT_RESOLUTION = math.pi / 2000.0
BISECT_XTOL = 1e-10


@dataclass(frozen=True)
class LoadInterval:
    node_id: str
    kind: SetKind
    lower: Optional[float]
    upper: Optional[float]
    lower_feasible: bool
    upper_feasible: bool
    resolution: float

    @property
    def nonempty(self) -> bool:
        return (
            self.lower_feasible
            and self.upper_feasible
            and self.lower is not None
            and self.upper is not None
            and self.lower <= self.upper
        )

    def to_document(self) -> dict:
        return {
            "node": self.node_id,
            "kind": self.kind.value,
            "lower": self.lower,
            "upper": self.upper,
            "lower_feasible": self.lower_feasible,
            "upper_feasible": self.upper_feasible,
            "nonempty": self.nonempty,
            "resolution": self.resolution,
        }


def _require_load(node: DecoupledNode):
    if node.kind != LOAD:
        raise ValueError(f"node {node.id!r} is not a load")


def extremal_rate(node: DecoupledNode, delta: float, which: str) -> float:
    """
    Smallest ('min') or largest ('max') angle rate over the disturbance box.
    Each neighbor term is optimized on its own: sin(delta - d) peaks at
    d = delta - pi/2 and bottoms out at d = delta + pi/2, saturated.
    """
    _require_load(node)
    if which == "min":
        shift = -HALF_PI
    elif which == "max":
        shift = HALF_PI
    else:
        raise ValueError(f"which must be 'min' or 'max', got {which!r}")
    d = sat(delta + shift, node.d_hi, node.d_lo) if node.variable_neighbors else np.zeros(0)
    spec = node.node
    return (-coupling_sum(node, delta, d) - spec.p_d) / spec.k


def _grid(node: DecoupledNode, resolution: float) -> np.ndarray:
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    lo, hi = node.node.delta_min, node.node.delta_max
    n = int(math.ceil((hi - lo) / resolution)) + 1
    return np.linspace(lo, hi, max(n, 2))


def _lowest(node, grid, which: str, cond_ge: bool) -> Optional[float]:
    """Smallest delta on the box where rate >= 0 (cond_ge) or <= 0, refined by bisection."""
    f = lambda x: extremal_rate(node, x, which)  # noqa: E731
    ok = lambda v: v >= 0 if cond_ge else v <= 0  # noqa: E731
    values = [f(x) for x in grid]
    for idx, v in enumerate(values):
        if not ok(v):
            continue
        if idx == 0 or v == 0:
            return float(grid[idx])
        return float(bisect(f, grid[idx - 1], grid[idx], xtol=BISECT_XTOL))
    return None


def _highest(node, grid, which: str, cond_ge: bool) -> Optional[float]:
    f = lambda x: extremal_rate(node, x, which)  # noqa: E731
    ok = lambda v: v >= 0 if cond_ge else v <= 0  # noqa: E731
    values = [f(x) for x in grid]
    last = len(values) - 1
    for idx in range(last, -1, -1):
        v = values[idx]
        if not ok(v):
            continue
        if idx == last or v == 0:
            return float(grid[idx])
        return float(bisect(f, grid[idx], grid[idx + 1], xtol=BISECT_XTOL))
    return None


def _interval(node, kind, lower, upper, resolution) -> LoadInterval:
    return LoadInterval(
        node_id=node.id,
        kind=kind,
        lower=lower,
        upper=upper,
        lower_feasible=lower is not None,
        upper_feasible=upper is not None,
        resolution=resolution,
    )


def mrpi_interval(node: DecoupledNode, resolution: float = DEFAULT_RESOLUTION) -> LoadInterval:
    _require_load(node)
    grid = _grid(node, resolution)
    lower = _lowest(node, grid, "min", cond_ge=True)
    upper = _highest(node, grid, "max", cond_ge=False)
    return _interval(node, SetKind.MRPI, lower, upper, resolution)


def admissible_interval(node: DecoupledNode, resolution: float = DEFAULT_RESOLUTION) -> LoadInterval:
    _require_load(node)
    grid = _grid(node, resolution)
    lower = _lowest(node, grid, "max", cond_ge=True)
    upper = _highest(node, grid, "min", cond_ge=False)
    return _interval(node, SetKind.ADMISSIBLE, lower, upper, resolution)


def load_interval(node: DecoupledNode, kind, resolution: float = DEFAULT_RESOLUTION) -> LoadInterval:
    if SetKind.parse(kind) is SetKind.MRPI:
        return mrpi_interval(node, resolution)
    return admissible_interval(node, resolution)


def nagumo_check(node: DecoupledNode, interval: LoadInterval, opts: IntegratorOptions,
                 t_end: float = 100.0, samples: int = 5):
    """
    Run worst-case probes from points spread over the interval; return the
    first violating probe trajectory, or None when every probe stays inside.
    """
    import grid_assess  # late import: assess builds on this module

    if not interval.nonempty:
        return None
    span = interval.upper - interval.lower
    starts = np.linspace(interval.lower + 0.05 * span, interval.upper - 0.05 * span, samples)
    for delta0 in starts:
        for strategy in ("push_up", "push_down"):
            traj = grid_assess.worst_case_probe(node, float(delta0), strategy, t_end, opts)
            if traj.first_violation is not None:
                return traj
    return None


# --------------------------------------------------------
# ARTIFACTS
# --------------------------------------------------------
def write_interval(interval: LoadInterval, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(interval.to_document(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_interval(path) -> LoadInterval:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return LoadInterval(
        node_id=str(doc["node"]),
        kind=SetKind.parse(doc["kind"]),
        lower=doc.get("lower"),
        upper=doc.get("upper"),
        lower_feasible=bool(doc.get("lower_feasible")),
        upper_feasible=bool(doc.get("upper_feasible")),
        resolution=float(doc.get("resolution", DEFAULT_RESOLUTION)),
    )
