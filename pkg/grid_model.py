#!/usr/bin/env python3
# grid_model.py -- grid description files, validation and per-node decoupling

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

GENERATOR = "generator"
LOAD = "load"
REFERENCE = "reference"
NODE_KINDS = (GENERATOR, LOAD, REFERENCE)

# which numeric fields each kind accepts / requires
_REQUIRED = {
    GENERATOR: ("m", "k", "p_m", "delta_min", "delta_max"),
    LOAD: ("k", "p_d", "delta_min", "delta_max"),
    REFERENCE: (),
}
_OPTIONAL = {
    GENERATOR: (),
    LOAD: (),
    REFERENCE: ("delta_fixed",),
}
_NODE_FIELDS = ("m", "k", "p_m", "p_d", "delta_min", "delta_max", "delta_fixed")


class GridError(ValueError):
    """Validation error naming the offending field as a JSON path."""

    def __init__(self, path: str, msg: str):
        self.path = path
        self.msg = msg
        super().__init__(f"{path}: {msg}" if path else msg)


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    m: Optional[float] = None
    k: Optional[float] = None
    p_m: Optional[float] = None
    p_d: Optional[float] = None
    delta_min: Optional[float] = None
    delta_max: Optional[float] = None
    delta_fixed: Optional[float] = None

    @property
    def is_reference(self) -> bool:
        return self.kind == REFERENCE


@dataclass(frozen=True)
class EdgeSpec:
    i: str
    j: str
    a: float
    # neighbor id -> (lo, hi), narrows that neighbor's interval as seen across this edge
    disturbance: Tuple[Tuple[str, Tuple[float, float]], ...] = ()

    def other(self, node_id: str) -> str:
        return self.j if node_id == self.i else self.i

    def override_for(self, neighbor_id: str) -> Optional[Tuple[float, float]]:
        for nid, interval in self.disturbance:
            if nid == neighbor_id:
                return interval
        return None


@dataclass(frozen=True)
class GridSpec:
    nodes: Tuple[NodeSpec, ...]
    edges: Tuple[EdgeSpec, ...]
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def node(self, node_id) -> NodeSpec:
        key = str(node_id)
        for n in self.nodes:
            if n.id == key:
                return n
        raise GridError("", f"unknown node id: {key}")

    def node_ids(self, *, include_reference: bool = False) -> List[str]:
        return [n.id for n in self.nodes if include_reference or not n.is_reference]

    def incident_edges(self, node_id: str) -> List[EdgeSpec]:
        return [e for e in self.edges if node_id in (e.i, e.j)]


@dataclass(frozen=True)
class Neighbor:
    id: str
    a: float
    d_min: float
    d_max: float


@dataclass(frozen=True)
class FixedNeighbor:
    id: str
    a: float
    delta: float


@dataclass(frozen=True)
class DecoupledNode:
    node: NodeSpec
    variable_neighbors: Tuple[Neighbor, ...]
    fixed_neighbors: Tuple[FixedNeighbor, ...]

    @property
    def id(self) -> str:
        return self.node.id

    @property
    def kind(self) -> str:
        return self.node.kind

    # array views used by the vector fields; cached_property writes __dict__ directly,
    # which frozen dataclasses allow
    @cached_property
    def a_var(self) -> np.ndarray:
        return np.array([n.a for n in self.variable_neighbors], dtype=float)

    @cached_property
    def d_lo(self) -> np.ndarray:
        return np.array([n.d_min for n in self.variable_neighbors], dtype=float)

    @cached_property
    def d_hi(self) -> np.ndarray:
        return np.array([n.d_max for n in self.variable_neighbors], dtype=float)

    @cached_property
    def a_fix(self) -> np.ndarray:
        return np.array([n.a for n in self.fixed_neighbors], dtype=float)

    @cached_property
    def delta_fix(self) -> np.ndarray:
        return np.array([n.delta for n in self.fixed_neighbors], dtype=float)


# --------------------------------------------------------
# PARSING
# --------------------------------------------------------
def _json_path(parts) -> str:
    out = "$"
    for part in parts:
        if isinstance(part, int):
            out += f"[{part}]"
        elif re.match(r"^[A-Za-z_][A-Za-z0-9_]*$", str(part)):
            out += f".{part}"
        else:
            out += f"[{json.dumps(str(part), ensure_ascii=False)}]"
    return out


def _format_json_error_context(text: str, lineno: int, colno: int, radius: int = 2) -> str:
    lines = text.splitlines()
    if not lines:
        return "(no text content)"

    out = []
    start = max(1, lineno - radius)
    end = min(len(lines), lineno + radius)

    for n in range(start, end + 1):
        line = lines[n - 1]
        prefix = ">>" if n == lineno else "  "
        out.append(f"{prefix} {n:4d} | {line}")
        if n == lineno:
            out.append(" " * (colno + 7) + "^")
    return "\n".join(out)


def _number(value, parts) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GridError(_json_path(parts), f"expected a number, got {type(value).__name__}")
    out = float(value)
    if not math.isfinite(out):
        raise GridError(_json_path(parts), "value must be finite")
    return out


def _parse_id(value, parts) -> str:
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise GridError(_json_path(parts), "node id must be a string or integer")
    out = str(value).strip()
    if not out:
        raise GridError(_json_path(parts), "node id must not be empty")
    return out


def _parse_node(raw, idx: int) -> NodeSpec:
    parts = ("nodes", idx)
    if not isinstance(raw, dict):
        raise GridError(_json_path(parts), "node entry must be an object")
    if "id" not in raw:
        raise GridError(_json_path(parts + ("id",)), "missing node id")
    node_id = _parse_id(raw["id"], parts + ("id",))

    kind = str(raw.get("kind", "")).strip().lower()
    if kind not in NODE_KINDS:
        raise GridError(
            _json_path(parts + ("kind",)),
            f"kind must be one of {', '.join(NODE_KINDS)}, got {raw.get('kind')!r}",
        )

    values: Dict[str, float] = {}
    for key in _NODE_FIELDS:
        if key not in raw or raw[key] is None:
            continue
        if key not in _REQUIRED[kind] and key not in _OPTIONAL[kind]:
            raise GridError(_json_path(parts + (key,)), f"field not allowed on a {kind} node")
        values[key] = _number(raw[key], parts + (key,))

    for key in _REQUIRED[kind]:
        if key not in values:
            if key in ("delta_min", "delta_max"):
                raise GridError(_json_path(parts + (key,)), "missing constraint bound on a non-reference node")
            raise GridError(_json_path(parts + (key,)), f"missing required field for a {kind} node")

    if kind == GENERATOR:
        if values["m"] <= 0:
            raise GridError(_json_path(parts + ("m",)), "generator inertia must be positive")
        if values["k"] < 0:
            raise GridError(_json_path(parts + ("k",)), "generator damping must be nonnegative")
        if values["p_m"] < 0:
            raise GridError(_json_path(parts + ("p_m",)), "mechanical power must be nonnegative")
    elif kind == LOAD:
        if values["k"] <= 0:
            raise GridError(_json_path(parts + ("k",)), "load damping must be positive")
        if values["p_d"] < 0:
            raise GridError(_json_path(parts + ("p_d",)), "power demand must be nonnegative")
    else:
        values.setdefault("delta_fixed", 0.0)

    if kind != REFERENCE and not values["delta_min"] < values["delta_max"]:
        raise GridError(_json_path(parts + ("delta_max",)), "delta_min must be smaller than delta_max")

    return NodeSpec(id=node_id, kind=kind, **values)


def _parse_edge(raw, idx: int, nodes: Dict[str, NodeSpec]) -> EdgeSpec:
    parts = ("edges", idx)
    if not isinstance(raw, dict):
        raise GridError(_json_path(parts), "edge entry must be an object")
    for key in ("i", "j", "a"):
        if key not in raw:
            raise GridError(_json_path(parts + (key,)), "missing required edge field")
    i = _parse_id(raw["i"], parts + ("i",))
    j = _parse_id(raw["j"], parts + ("j",))
    for key, nid in (("i", i), ("j", j)):
        if nid not in nodes:
            raise GridError(_json_path(parts + (key,)), f"edge references unknown node {nid!r}")
    if i == j:
        raise GridError(_json_path(parts + ("j",)), "edge must connect two distinct nodes")
    a = _number(raw["a"], parts + ("a",))
    if a < 0:
        raise GridError(_json_path(parts + ("a",)), "negative coupling")

    overrides = []
    dist = raw.get("disturbance")
    if dist is not None:
        if not isinstance(dist, dict):
            raise GridError(_json_path(parts + ("disturbance",)), "disturbance override must be an object")
        for key in sorted(dist, key=str):
            nid = str(key)
            here = parts + ("disturbance", nid)
            if nid not in (i, j):
                raise GridError(_json_path(here), "override must name an endpoint of this edge")
            if nodes[nid].is_reference:
                raise GridError(_json_path(here), "reference angles are fixed; no override allowed")
            pair = dist[key]
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise GridError(_json_path(here), "override must be a [lo, hi] pair")
            lo = _number(pair[0], here + (0,))
            hi = _number(pair[1], here + (1,))
            if lo > hi:
                raise GridError(_json_path(here), "override lower bound exceeds upper bound")
            overrides.append((nid, (lo, hi)))

    return EdgeSpec(i=i, j=j, a=a, disturbance=tuple(overrides))


def _connected_components(node_ids: List[str], edges) -> List[List[str]]:
    adj = {nid: set() for nid in node_ids}
    for e in edges:
        adj[e.i].add(e.j)
        adj[e.j].add(e.i)
    seen = set()
    comps = []
    for nid in node_ids:
        if nid in seen:
            continue
        stack = [nid]
        comp = []
        seen.add(nid)
        while stack:
            cur = stack.pop()
            comp.append(cur)
            for nxt in sorted(adj[cur]):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        comps.append(comp)
    return comps


def grid_from_document(document) -> GridSpec:
    if not isinstance(document, dict):
        raise GridError("$", f"top-level JSON must be an object, got {type(document).__name__}")
    raw_nodes = document.get("nodes")
    raw_edges = document.get("edges", [])
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise GridError("$.nodes", "must be a non-empty array")
    if not isinstance(raw_edges, list):
        raise GridError("$.edges", "must be an array")

    nodes: Dict[str, NodeSpec] = {}
    ordered = []
    for idx, raw in enumerate(raw_nodes):
        spec = _parse_node(raw, idx)
        if spec.id in nodes:
            raise GridError(_json_path(("nodes", idx, "id")), f"duplicate id {spec.id!r}")
        nodes[spec.id] = spec
        ordered.append(spec)

    edges = []
    pairs = set()
    for idx, raw in enumerate(raw_edges):
        edge = _parse_edge(raw, idx, nodes)
        key = frozenset((edge.i, edge.j))
        if key in pairs:
            raise GridError(_json_path(("edges", idx)), f"duplicate edge between {edge.i!r} and {edge.j!r}")
        pairs.add(key)
        edges.append(edge)

    warnings = []
    comps = _connected_components([n.id for n in ordered], edges)
    if len(comps) > 1:
        warnings.append(
            "grid is disconnected: " + " | ".join(",".join(c) for c in comps)
        )

    return GridSpec(nodes=tuple(ordered), edges=tuple(edges), warnings=tuple(warnings))


def parse_grid(text: str) -> GridSpec:
    """Parse a grid description document (JSON text) into a validated GridSpec."""
    if text is None or not str(text).strip():
        raise GridError("", "grid document is empty")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        context = _format_json_error_context(text, e.lineno, e.colno)
        raise GridError(
            "",
            f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}\n{context}",
        ) from e
    return grid_from_document(document)


def load_grid(path) -> GridSpec:
    grid_path = Path(os.path.abspath(os.path.expanduser(os.path.expandvars(str(path or "")))))
    if not grid_path.exists():
        raise FileNotFoundError(f"grid file does not exist: {grid_path}")
    if not grid_path.is_file():
        raise FileNotFoundError(f"grid path is not a regular file: {grid_path}")
    raw = grid_path.read_text(encoding="utf-8-sig")
    try:
        return parse_grid(raw)
    except GridError as e:
        raise GridError(e.path, f"{e.msg} (in {grid_path})") from e


# --------------------------------------------------------
# SERIALIZATION
# --------------------------------------------------------
def node_to_document(node: NodeSpec) -> Dict[str, Any]:
    out: Dict[str, Any] = {"id": node.id, "kind": node.kind}
    for key in _NODE_FIELDS:
        value = getattr(node, key)
        if value is not None:
            out[key] = value
    return out


def edge_to_document(edge: EdgeSpec) -> Dict[str, Any]:
    out: Dict[str, Any] = {"i": edge.i, "j": edge.j, "a": edge.a}
    if edge.disturbance:
        out["disturbance"] = {nid: [lo, hi] for nid, (lo, hi) in edge.disturbance}
    return out


def grid_to_document(grid: GridSpec) -> Dict[str, Any]:
    return {
        "nodes": [node_to_document(n) for n in grid.nodes],
        "edges": [edge_to_document(e) for e in grid.edges],
    }


def dump_grid(grid: GridSpec) -> str:
    return json.dumps(grid_to_document(grid), indent=2, ensure_ascii=False) + "\n"


def grid_hash(grid: GridSpec) -> str:
    canonical = json.dumps(grid_to_document(grid), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --------------------------------------------------------
# DECOUPLING
# --------------------------------------------------------
def decouple(grid: GridSpec, node_id) -> DecoupledNode:
    """
    View one node on its own: every non-reference neighbor becomes a bounded
    disturbance (its own angle constraints unless the edge overrides them),
    reference neighbors become fixed couplings.
    """
    node = grid.node(node_id)
    if node.is_reference:
        raise GridError("", f"node {node.id!r} is a reference node and has no dynamics")

    variable: List[Neighbor] = []
    fixed: List[FixedNeighbor] = []
    for edge in grid.incident_edges(node.id):
        other = grid.node(edge.other(node.id))
        if other.is_reference:
            fixed.append(FixedNeighbor(id=other.id, a=edge.a, delta=other.delta_fixed))
            continue
        override = edge.override_for(other.id)
        if override is not None:
            lo, hi = override
        else:
            lo, hi = other.delta_min, other.delta_max
        variable.append(Neighbor(id=other.id, a=edge.a, d_min=lo, d_max=hi))

    return DecoupledNode(node=node, variable_neighbors=tuple(variable), fixed_neighbors=tuple(fixed))
