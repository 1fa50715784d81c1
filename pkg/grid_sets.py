#!/usr/bin/env python3

# =============================================================
# grid-sets
# -------------------------------------------------------------
# MRPI / admissible set screening for post-fault power grids
# -------------------------------------------------------------
# per-node invariant sets, state classification, coupled
# post-fault simulation and batch contingency screening
# =============================================================

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from grid_assess import (
    NodeSets,
    StateError,
    Verdict,
    classify_state,
    compute_node_sets,
    cross_check_region,
    parse_state,
    screen,
    simulate_postfault,
    worst_verdict,
    write_trajectory_long_csv,
)
from grid_barrier import read_region, safe_name, write_curve, write_region
from grid_dynamics import IntegratorOptions, NumericalFailure, SetKind
from grid_loadsets import (
    DEFAULT_RESOLUTION,
    LoadInterval,
    nagumo_check,
    read_interval,
    write_interval,
)
from grid_model import (
    GENERATOR,
    LOAD,
    GridError,
    GridSpec,
    _format_json_error_context,
    decouple,
    grid_from_document,
    grid_hash,
    grid_to_document,
    load_grid,
)

__version__ = "0.3.0"

TOOL_NAME = "grid_sets"
PROJECT_DIR = os.path.dirname(os.path.abspath(__file__))
CFG_FOR_HINTS = None

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
VERDICT_EXIT = {
    Verdict.SAFE: EXIT_OK,
    Verdict.POTENTIALLY_SAFE: 10,
    Verdict.UNSAFE: 20,
}

DEFAULTS = {
    # grid description (JSON); relative paths resolve against the config file dir
    "grid": "",

    # node filter for compute-sets / load-sets; empty = every non-reference node
    "nodes": [],

    # "mrpi" | "admissible" | "both"
    "kind": "both",

    # ---------------------------------------------------------
    # Integrator (fixed-step RK4, shared by tracing and simulation)
    # ---------------------------------------------------------
    "step": 1e-3,
    "t_back_max": 50.0,     # backward horizon for barrier traces (s)
    "omega_cap": 10.0,      # |omega| window closing the generator box
    "box_margin": 1e-9,
    "event_tol": 1e-10,

    # load-interval scan resolution (rad)
    "resolution": DEFAULT_RESOLUTION,

    # membership tolerance for Boundary classification
    "membership_tol": 1e-6,

    # ---------------------------------------------------------
    # Outputs
    # ---------------------------------------------------------
    "out_dir": os.path.join(PROJECT_DIR, "out"),
    "format": "csv",        # region polylines: "csv" | "json"
    "export_curves": False, # also write traced barrier curves

    # reuse artifacts from an earlier compute-sets run (classify / screen)
    "sets_dir": "",

    # NOTE: this must be a FILE path; empty disables the log file
    "logfile": "",

    # worker processes for per-node set computations; 0 = all CPUs, 1 = in-process
    "jobs": 0,

    # ---------------------------------------------------------
    # Probe cross-validation (off by default, it is slow)
    # ---------------------------------------------------------
    "cross_check": False,
    "cross_check_grid": 20,
    "cross_check_horizon": 20.0,

    # load-sets --verify probe horizon (s)
    "probe_horizon": 100.0,
}

ENV_PREFIX = "GRIDSETS_"
# env suffix -> (config key, parser)
ENV_KEYS = {
    "GRID": ("grid", "path"),
    "NODE": ("nodes", "list"),
    "KIND": ("kind", "kind"),
    "STEP": ("step", "float"),
    "T_BACK_MAX": ("t_back_max", "float"),
    "OMEGA_CAP": ("omega_cap", "float"),
    "RESOLUTION": ("resolution", "float"),
    "OUT": ("out_dir", "path"),
    "FORMAT": ("format", "format"),
    "JOBS": ("jobs", "int"),
    "LOGFILE": ("logfile", "path"),
}
KIND_CHOICES = ("mrpi", "admissible", "both")
FORMAT_CHOICES = ("csv", "json")

# --------------------------------------------------------
# LOGGING + TIMESTAMPS
# --------------------------------------------------------
def ts():
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")

def log(line, fp=None):
    msg = f"[{ts()}] {line}"
    print(msg, flush=True)
    if fp:
        fp.write(msg + "\n")
        fp.flush()

# --------------------------------------------------------
# FATAL + PRE-FLIGHT
# --------------------------------------------------------
FATAL_HINTS = {
    EXIT_USAGE: [
        "Check the grid and state files against the documented format:",
        "  grid:  {\"nodes\": [{id, kind, ...}], \"edges\": [{i, j, a}]}",
        "  state: {\"<node id>\": {\"delta\": ..., \"omega\": ...}}",
        "Every non-reference node needs an entry in a state file; loads carry no omega.",
        "Sets reused with --sets must come from a compute-sets run on the same grid.",
    ],
    EXIT_IO: [
        "The output directory and log file parent must be writable by the current user.",
        "Point --out somewhere writable, or fix the permissions:",
        "  mkdir -p ./out",
    ],
    EXIT_NUMERIC: [
        "The integration blew up (non-finite state or collapsed adjoint).",
        "Try a smaller --step, a shorter --t-back-max, or check the grid parameters.",
    ],
}

def fatal(msg, code=EXIT_USAGE, fp=None):
    # Log (if possible) + print to stderr + exit
    try:
        if fp:
            log(f"FATAL: {msg}", fp)
    except Exception:
        pass

    print(f"FATAL: {msg}", file=sys.stderr)

    cfg = CFG_FOR_HINTS or {}
    grid = (cfg.get("grid") or "").strip()
    out_dir = (cfg.get("out_dir") or "").strip()
    logfile = (cfg.get("logfile") or "").strip()

    sep = "-" * 72
    print("", file=sys.stderr)
    print(sep, file=sys.stderr)
    print(f"{TOOL_NAME}: run failed (exit {code})", file=sys.stderr)
    print(sep, file=sys.stderr)

    print(f"Reason: {msg}", file=sys.stderr)
    print("", file=sys.stderr)

    try:
        print(f"CWD:     {os.getcwd()}", file=sys.stderr)
    except Exception:
        pass
    if grid:
        print(f"grid:    {grid}", file=sys.stderr)
    if out_dir:
        print(f"out_dir: {out_dir}", file=sys.stderr)
    if logfile:
        print(f"logfile: {logfile}", file=sys.stderr)

    hints = FATAL_HINTS.get(code)
    if hints:
        print("", file=sys.stderr)
        print(sep, file=sys.stderr)
        print("How to fix", file=sys.stderr)
        print(sep, file=sys.stderr)
        for line in hints:
            print(line, file=sys.stderr)
    print(sep, file=sys.stderr)
    print(f"If you need help with command line options, run:  ./{TOOL_NAME}.py --help", file=sys.stderr)
    print(sep, file=sys.stderr)

    raise SystemExit(code)

def ensure_dir(path, what, fp=None):
    """
    Ensure 'path' exists and is a directory. Create it if missing.
    """
    if not path:
        fatal(f"{what}: empty path", EXIT_IO, fp=fp)

    if os.path.exists(path):
        if not os.path.isdir(path):
            fatal(f"{what}: exists but is not a directory: {path}", EXIT_IO, fp=fp)
        return

    try:
        os.makedirs(path, exist_ok=True)
        log(f"PRECHECK: created directory: {path}", fp)
    except Exception as e:
        fatal(f"{what}: cannot create directory '{path}': {e}", EXIT_IO, fp=fp)

# --------------------------------------------------------
# CONFIG LOADER
# --------------------------------------------------------
def _cfg_base_dir(config_path) -> str:
    try:
        cp = os.path.abspath(os.path.expanduser(os.path.expandvars(config_path or "")))
        return os.path.dirname(cp) if cp else PROJECT_DIR
    except Exception:
        return PROJECT_DIR

def norm_path(p, *, base_dir: str):
    """
    Normalize paths:
      - expand ~ and $VARS
      - if relative, resolve against base_dir (config file dir)
      - return absolute, normalized path
      - keep ""/None as ""
    """
    if p is None:
        return ""
    if not isinstance(p, str):
        p = str(p)
    p = p.strip()
    if not p:
        return ""

    p = os.path.expandvars(os.path.expanduser(p))
    if not os.path.isabs(p):
        p = os.path.join(base_dir, p)

    return os.path.normpath(os.path.abspath(p))

def normalize_cfg_paths(cfg: dict, config_path: str) -> dict:
    base_dir = _cfg_base_dir(config_path)
    for k in ("grid", "out_dir", "logfile", "sets_dir"):
        if k in cfg:
            cfg[k] = norm_path(cfg.get(k), base_dir=base_dir)
    return cfg

def _deep_merge(base, override):
    out = dict(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out

def load_cfg(path, fp=None):
    cfg = dict(DEFAULTS)

    if not path:
        return cfg

    cfg_path = os.path.abspath(os.path.expanduser(os.path.expandvars(path)))

    if not os.path.exists(cfg_path):
        # Missing config is OK: defaults only
        return cfg

    try:
        with open(cfg_path, "r", encoding="utf-8-sig") as f:
            raw = f.read()
    except Exception as e:
        fatal(f"config: cannot read '{cfg_path}': {e}", EXIT_IO, fp=fp)

    if not raw.strip():
        fatal(
            f"config: file exists but is empty: {cfg_path}\n"
            f"Fix: restore valid JSON or delete the file if you want defaults only.",
            fp=fp
        )

    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        context = _format_json_error_context(raw, e.lineno, e.colno)
        fatal(
            "config: invalid JSON in file:\n"
            f"  path:   {cfg_path}\n"
            f"  line:   {e.lineno}\n"
            f"  column: {e.colno}\n"
            f"  error:  {e.msg}\n"
            "\n"
            "Context:\n"
            f"{context}",
            fp=fp
        )

    if not isinstance(data, dict):
        fatal(
            f"config: top-level JSON must be an object/dict, got {type(data).__name__}: {cfg_path}",
            fp=fp
        )

    unknown = sorted(k for k in data if k not in DEFAULTS)
    if unknown:
        fatal(f"config: unknown key(s) in {cfg_path}: {', '.join(unknown)}", fp=fp)

    return _deep_merge(cfg, data)

def parse_bool(v, default=True):
    if v is None:
        return default
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, float)):
        return bool(v)
    if isinstance(v, str):
        s = v.strip().lower()
        if s in ("1", "true", "yes", "y", "on"):
            return True
        if s in ("0", "false", "no", "n", "off"):
            return False
    return default

def _split_nodes(value) -> List[str]:
    if isinstance(value, (list, tuple)):
        items = [str(v) for v in value]
    else:
        items = str(value or "").split(",")
    return [s.strip() for s in items if s.strip()]

def _parse_env_value(name: str, raw: str, how: str):
    text = raw.strip()
    if how == "path":
        return norm_path(text, base_dir=os.getcwd())
    if how == "list":
        return _split_nodes(text)
    if how == "float":
        try:
            value = float(text)
        except ValueError:
            raise ValueError(f"{name}={raw!r} is not a number") from None
        if not math.isfinite(value):
            raise ValueError(f"{name}={raw!r} must be finite")
        return value
    if how == "int":
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"{name}={raw!r} is not an integer") from None
    if how == "kind":
        if text.lower() not in KIND_CHOICES:
            raise ValueError(f"{name}={raw!r} must be one of {', '.join(KIND_CHOICES)}")
        return text.lower()
    if how == "format":
        if text.lower() not in FORMAT_CHOICES:
            raise ValueError(f"{name}={raw!r} must be one of {', '.join(FORMAT_CHOICES)}")
        return text.lower()
    raise ValueError(f"{name}: unsupported override")

def apply_env_overrides(cfg: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    for suffix, (key, how) in ENV_KEYS.items():
        name = ENV_PREFIX + suffix
        raw = environ.get(name)
        if raw is None or raw == "":
            continue
        cfg[key] = _parse_env_value(name, raw, how)
    return cfg

def apply_cli_overrides(cfg: dict, args) -> dict:
    cwd = os.getcwd()
    for attr, key in (("grid", "grid"), ("out", "out_dir"), ("sets", "sets_dir"), ("logfile", "logfile")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = norm_path(value, base_dir=cwd)
    if getattr(args, "node", None):
        cfg["nodes"] = _split_nodes(",".join(args.node))
    for attr, key in (
        ("kind", "kind"),
        ("step", "step"),
        ("t_back_max", "t_back_max"),
        ("omega_cap", "omega_cap"),
        ("resolution", "resolution"),
        ("format", "format"),
        ("jobs", "jobs"),
        ("cross_check_grid", "cross_check_grid"),
        ("cross_check_horizon", "cross_check_horizon"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "cross_check", False):
        cfg["cross_check"] = True
    if getattr(args, "curves", False):
        cfg["export_curves"] = True
    return cfg

def validate_cfg(cfg: dict) -> None:
    """Raise ValueError on a config value no subcommand could run with."""
    if str(cfg.get("kind")) not in KIND_CHOICES:
        raise ValueError(f"kind must be one of {', '.join(KIND_CHOICES)}, got {cfg.get('kind')!r}")
    if str(cfg.get("format")) not in FORMAT_CHOICES:
        raise ValueError(f"format must be one of {', '.join(FORMAT_CHOICES)}, got {cfg.get('format')!r}")
    for key in ("resolution", "membership_tol", "cross_check_horizon", "probe_horizon"):
        value = cfg.get(key)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
            raise ValueError(f"{key} must be a positive number, got {value!r}")
    for key in ("jobs", "cross_check_grid"):
        value = cfg.get(key)
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ValueError(f"{key} must be a nonnegative integer, got {value!r}")
    if cfg["cross_check_grid"] < 1:
        raise ValueError("cross_check_grid must be at least 1")
    cfg["cross_check"] = parse_bool(cfg.get("cross_check"), False)
    cfg["export_curves"] = parse_bool(cfg.get("export_curves"), False)
    cfg["nodes"] = _split_nodes(cfg.get("nodes"))
    build_options(cfg)

def build_options(cfg: dict) -> IntegratorOptions:
    return IntegratorOptions(
        step=cfg["step"],
        t_back_max=cfg["t_back_max"],
        omega_cap=cfg["omega_cap"],
        box_margin=cfg["box_margin"],
        event_tol=cfg["event_tol"],
    )

def selected_kinds(cfg: dict) -> Tuple[SetKind, ...]:
    if cfg["kind"] == "both":
        return (SetKind.MRPI, SetKind.ADMISSIBLE)
    return (SetKind.parse(cfg["kind"]),)

def print_effective_config(cfg: dict, config_path: str, *, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(json.dumps(cfg, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    stream.flush()

def open_logfile(cfg: dict):
    path = cfg.get("logfile") or ""
    if not path:
        return None
    ensure_dir(os.path.dirname(path), "logfile parent")
    try:
        return open(path, "a", encoding="utf-8")
    except OSError as e:
        fatal(f"logfile: cannot open '{path}': {e}", EXIT_IO)

# --------------------------------------------------------
# INPUT DOCUMENTS
# --------------------------------------------------------
def _load_json_document(path: str, what: str):
    doc_path = Path(os.path.abspath(os.path.expanduser(os.path.expandvars(path or ""))))
    if not path:
        raise ValueError(f"{what}: no file given")
    if not doc_path.exists():
        raise ValueError(f"{what} file does not exist: {doc_path}")
    if not doc_path.is_file():
        raise ValueError(f"{what} path is not a regular file: {doc_path}")
    try:
        raw = doc_path.read_text(encoding="utf-8-sig")
    except OSError as e:
        raise ValueError(f"cannot read {what} file {doc_path}: {e}") from e
    if not raw.strip():
        raise ValueError(f"{what} file is empty or whitespace-only: {doc_path}")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        context = _format_json_error_context(raw, e.lineno, e.colno)
        raise ValueError(
            f"invalid JSON in {doc_path} at line {e.lineno}, "
            f"column {e.colno}: {e.msg}\n{context}"
        ) from e

def read_grid(cfg: dict, fp=None) -> GridSpec:
    path = cfg.get("grid") or ""
    if not path:
        fatal("grid: no grid file given (use --grid or set \"grid\" in the config)", fp=fp)
    try:
        grid = load_grid(path)
    except FileNotFoundError as e:
        fatal(f"grid: {e}", fp=fp)
    except GridError as e:
        fatal(f"grid: {e}", fp=fp)
    except OSError as e:
        fatal(f"grid: cannot read '{path}': {e}", EXIT_IO, fp=fp)

    gen = sum(1 for n in grid.nodes if n.kind == GENERATOR)
    load = sum(1 for n in grid.nodes if n.kind == LOAD)
    log(
        f"GRID: loaded {path} ({gen} generator(s), {load} load(s), "
        f"{len(grid.edges)} edge(s), sha256={grid_hash(grid)[:12]})",
        fp,
    )
    for w in grid.warnings:
        log(f"GRID: WARN: {w}", fp)
    return grid

def selected_nodes(cfg: dict, grid: GridSpec, fp=None) -> List[str]:
    wanted = cfg.get("nodes") or []
    ids = grid.node_ids()
    if not wanted:
        return ids
    for nid in wanted:
        if nid not in grid.node_ids(include_reference=True):
            fatal(f"node filter: unknown node id {nid!r}", fp=fp)
        if nid not in ids:
            fatal(f"node filter: {nid!r} is a reference node and has no sets", fp=fp)
    return [nid for nid in ids if nid in wanted]

def read_states(path: str, grid: GridSpec, fp=None) -> List[Tuple[str, object]]:
    """One state object, or a list / name-keyed object of them for screen."""
    try:
        document = _load_json_document(path, "states")
    except ValueError as e:
        fatal(str(e), fp=fp)
    if isinstance(document, list):
        named = [(str(i), doc) for i, doc in enumerate(document)]
    elif isinstance(document, dict):
        named = list(document.items())
    else:
        fatal(f"states: expected a list or an object of states in {path}", fp=fp)
    out = []
    for name, doc in named:
        try:
            out.append((str(name), parse_state(doc, grid)))
        except StateError as e:
            fatal(f"states[{name!r}]: {e}", fp=fp)
    return out

def read_state(path: str, grid: GridSpec, fp=None):
    try:
        document = _load_json_document(path, "state")
        return parse_state(document, grid)
    except (ValueError, StateError) as e:
        fatal(f"state: {e}", fp=fp)

# --------------------------------------------------------
# ARTIFACTS + MANIFEST
# --------------------------------------------------------
def interval_basename(node_id: str, kind: SetKind) -> str:
    return f"interval_{safe_name(node_id)}_{kind.value}"

def write_json(path: str, document) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path

def new_manifest(command: str, cfg: dict, grid: GridSpec) -> dict:
    return {
        "tool": TOOL_NAME,
        "version": __version__,
        "command": command,
        "grid": {"path": cfg.get("grid", ""), "sha256": grid_hash(grid)},
        "options": {
            "integrator": build_options(cfg).to_dict(),
            "resolution": cfg["resolution"],
            "kind": cfg["kind"],
            "format": cfg["format"],
            "membership_tol": cfg["membership_tol"],
        },
        "artifacts": [],
        "nodes": {},
        "failures": [],
    }

def write_manifest(out_dir: str, manifest: dict, fp=None) -> str:
    manifest["artifacts"] = sorted(set(manifest["artifacts"]))
    path = write_json(os.path.join(out_dir, "manifest.json"), manifest)
    log(f"MANIFEST: wrote {path} ({len(manifest['artifacts'])} artifact(s), "
        f"{len(manifest['failures'])} failure(s))", fp)
    return path

def _region_summary(region, files) -> dict:
    return {
        "file": files[0],
        "meta": files[1],
        "empty": region.empty,
        "reason": region.reason,
        "area": region.area,
        "termination": {c.side: c.termination for c in region.curves},
        "residuals": {c.side: c.hamiltonian_residual_max for c in region.curves},
    }

def _interval_summary(interval: LoadInterval, name: str) -> dict:
    doc = interval.to_document()
    return {
        "file": name,
        "lower": doc["lower"],
        "upper": doc["upper"],
        "lower_feasible": doc["lower_feasible"],
        "upper_feasible": doc["upper_feasible"],
        "nonempty": doc["nonempty"],
    }

def write_node_sets(node_sets: NodeSets, out_dir: str, cfg: dict, opts: IntegratorOptions) -> Tuple[dict, List[str]]:
    """Write every set of one node; return (manifest node entry, artifact names)."""
    entry = {"kind": node_sets.node_kind, "sets": {}}
    names: List[str] = []
    for kind, node_set in node_sets.sets.items():
        if isinstance(node_set, LoadInterval):
            name = interval_basename(node_sets.node_id, kind) + ".json"
            write_interval(node_set, os.path.join(out_dir, name))
            names.append(name)
            entry["sets"][kind.value] = _interval_summary(node_set, name)
            continue
        paths = write_region(node_set, out_dir, opts, cfg["format"])
        files = [os.path.basename(p) for p in paths]
        names.extend(files)
        entry["sets"][kind.value] = _region_summary(node_set, files)
        if cfg.get("export_curves"):
            for curve in node_set.curves:
                names.append(os.path.basename(write_curve(curve, out_dir)))
    return entry, names

def load_sets_dir(sets_dir: str, grid: GridSpec, fp=None) -> Dict[str, NodeSets]:
    """Rebuild per-node sets from a compute-sets output directory."""
    try:
        manifest = _load_json_document(os.path.join(sets_dir, "manifest.json"), "sets manifest")
    except ValueError as e:
        fatal(f"sets: {e}", fp=fp)
    expected = grid_hash(grid)
    found = ((manifest.get("grid") or {}).get("sha256") or "")
    if found != expected:
        fatal(
            f"sets: {sets_dir} was computed for a different grid "
            f"(sha256 {found[:12] or 'missing'} != {expected[:12]})",
            fp=fp,
        )

    out: Dict[str, NodeSets] = {}
    nodes = manifest.get("nodes") or {}
    for nid in grid.node_ids():
        entry = nodes.get(nid) or {}
        sets = {}
        for kind in (SetKind.MRPI, SetKind.ADMISSIBLE):
            item = (entry.get("sets") or {}).get(kind.value)
            if not item:
                fatal(f"sets: {sets_dir} has no {kind.value} set for node {nid!r}", fp=fp)
            path = os.path.join(sets_dir, item["file"])
            try:
                if grid.node(nid).kind == GENERATOR:
                    sets[kind] = read_region(path, os.path.join(sets_dir, item["meta"]))
                else:
                    sets[kind] = read_interval(path)
            except (OSError, ValueError, KeyError) as e:
                fatal(f"sets: cannot read {path}: {e}", fp=fp)
        out[nid] = NodeSets(node_id=nid, node_kind=grid.node(nid).kind, sets=sets)
    log(f"SETS: reusing {len(out)} node set(s) from {sets_dir}", fp)
    return out

# --------------------------------------------------------
# PER-NODE WORKER
# --------------------------------------------------------
@dataclass
class NodeJobResult:
    node_id: str
    sets: Optional[NodeSets]
    # (prefix, level, message)
    messages: List[Tuple[str, str, str]] = field(default_factory=list)
    failure: str = ""
    cross_checks: List[dict] = field(default_factory=list)

def _node_job(grid_document, node_id, opts_dict, resolution, kinds, cross_check=None) -> NodeJobResult:
    # top-level so ProcessPoolExecutor can pickle it; logs travel back as messages
    grid = grid_from_document(grid_document)
    opts = IntegratorOptions(**opts_dict)
    result = NodeJobResult(node_id=node_id, sets=None)

    def sets_log(level, msg):
        result.messages.append(("SETS", level, msg))

    def check_log(level, msg):
        result.messages.append(("CROSSCHECK", level, msg))

    try:
        result.sets = compute_node_sets(grid, node_id, opts, resolution, kinds, sets_log)
        if cross_check and result.sets.node_kind == GENERATOR:
            node = decouple(grid, node_id)
            for kind, region in result.sets.sets.items():
                check = cross_check_region(
                    node, region, opts, cross_check["grid"], cross_check["horizon"], check_log
                )
                result.cross_checks.append(check.to_document())
                if not check.disagreements:
                    check_log("INFO", f"node={node_id} kind={kind.value}: {check.checked} sample(s) agree")
    except NumericalFailure as e:
        result.failure = f"{e} (t={e.t:.6g})"
        result.messages.append(("SETS", "WARN", f"node={node_id}: numerical failure: {result.failure}"))
    return result

def run_node_jobs(grid: GridSpec, node_ids: List[str], cfg: dict, fp=None) -> List[NodeJobResult]:
    """Per-node set computations, in grid node order regardless of scheduling."""
    opts_dict = build_options(cfg).to_dict()
    kinds = selected_kinds(cfg)
    cross = None
    if cfg.get("cross_check"):
        cross = {"grid": int(cfg["cross_check_grid"]), "horizon": float(cfg["cross_check_horizon"])}
    document = grid_to_document(grid)
    args = [(document, nid, opts_dict, cfg["resolution"], kinds, cross) for nid in node_ids]

    jobs = int(cfg.get("jobs") or 0) or (os.cpu_count() or 1)
    jobs = min(jobs, max(1, len(args)))
    if jobs <= 1:
        results = [_node_job(*a) for a in args]
    else:
        log(f"SETS: dispatching {len(args)} node(s) to {jobs} worker process(es)", fp)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_node_job, *a) for a in args]
            results = [f.result() for f in futures]

    for res in results:
        for prefix, level, msg in res.messages:
            log(f"{prefix}: {level}: {msg}", fp)
    return results

def compute_all_sets(grid: GridSpec, cfg: dict, fp=None) -> Dict[str, NodeSets]:
    """On-demand sets for classify / screen; any numerical failure is fatal here."""
    local = dict(cfg)
    local["kind"] = "both"
    local["cross_check"] = False
    out = {}
    for res in run_node_jobs(grid, grid.node_ids(), local, fp):
        if res.failure:
            fatal(f"node {res.node_id!r}: {res.failure}", EXIT_NUMERIC, fp=fp)
        out[res.node_id] = res.sets
    return out

def obtain_sets(cfg: dict, grid: GridSpec, fp=None) -> Dict[str, NodeSets]:
    if cfg.get("sets_dir"):
        return load_sets_dir(cfg["sets_dir"], grid, fp)
    log("SETS: no --sets given, computing sets on demand", fp)
    return compute_all_sets(grid, cfg, fp)

# --------------------------------------------------------
# SUBCOMMANDS
# --------------------------------------------------------
def cmd_compute_sets(cfg: dict, args, fp=None) -> int:
    grid = read_grid(cfg, fp)
    node_ids = selected_nodes(cfg, grid, fp)
    opts = build_options(cfg)
    out_dir = cfg["out_dir"]
    ensure_dir(out_dir, "out_dir", fp)

    manifest = new_manifest("compute-sets", cfg, grid)
    results = run_node_jobs(grid, node_ids, cfg, fp)
    try:
        for res in results:
            if res.failure:
                manifest["failures"].append({"node": res.node_id, "error": res.failure})
                continue
            entry, names = write_node_sets(res.sets, out_dir, cfg, opts)
            for check in res.cross_checks:
                name = f"crosscheck_{safe_name(res.node_id)}_{check['kind']}.json"
                write_json(os.path.join(out_dir, name), check)
                names.append(name)
                entry["sets"][check["kind"]]["cross_check"] = {
                    "checked": check["checked"],
                    "disagreements": len(check["disagreements"]),
                    "file": name,
                }
            manifest["nodes"][res.node_id] = entry
            manifest["artifacts"].extend(names)
        write_manifest(out_dir, manifest, fp)
    except OSError as e:
        fatal(f"output: {e}", EXIT_IO, fp=fp)

    for nid, entry in manifest["nodes"].items():
        for kind, item in entry["sets"].items():
            if "reason" in item:
                status = "EMPTY (" + item["reason"] + ")" if item["empty"] else f"area={item['area']:.6g}"
            else:
                status = f"[{item['lower']}, {item['upper']}]" if item["nonempty"] else "infeasible"
            log(f"SETS: node {nid} {kind}: {status}", fp)

    return EXIT_NUMERIC if manifest["failures"] else EXIT_OK

def cmd_load_sets(cfg: dict, args, fp=None) -> int:
    grid = read_grid(cfg, fp)
    node_ids = [nid for nid in selected_nodes(cfg, grid, fp) if grid.node(nid).kind == LOAD]
    if not node_ids:
        log("LOADSETS: no load nodes selected", fp)
    opts = build_options(cfg)
    out_dir = cfg["out_dir"]
    ensure_dir(out_dir, "out_dir", fp)

    manifest = new_manifest("load-sets", cfg, grid)
    try:
        for nid in node_ids:
            node_sets = compute_node_sets(grid, nid, opts, cfg["resolution"], selected_kinds(cfg))
            entry, names = write_node_sets(node_sets, out_dir, cfg, opts)
            for kind, interval in node_sets.sets.items():
                if interval.nonempty:
                    log(f"LOADSETS: node {nid} {kind.value}: [{interval.lower:.10f}, {interval.upper:.10f}]", fp)
                else:
                    log(
                        f"LOADSETS: node {nid} {kind.value}: empty "
                        f"(lower feasible={interval.lower_feasible}, upper feasible={interval.upper_feasible})",
                        fp,
                    )
                if args.verify and kind is SetKind.MRPI:
                    bad = nagumo_check(decouple(grid, nid), interval, opts, cfg["probe_horizon"])
                    if bad is not None:
                        v = bad.first_violation
                        log(f"LOADSETS: WARN: node {nid}: {bad.strategy} probe left the MRPI at t={v.t:.6g} ({v.bound})", fp)
                        manifest["failures"].append({"node": nid, "error": f"probe {bad.strategy} violated {v.bound} at t={v.t:.6g}"})
            manifest["nodes"][nid] = entry
            manifest["artifacts"].extend(names)
        write_manifest(out_dir, manifest, fp)
    except OSError as e:
        fatal(f"output: {e}", EXIT_IO, fp=fp)
    return EXIT_OK

def cmd_classify(cfg: dict, args, fp=None) -> int:
    grid = read_grid(cfg, fp)
    state = read_state(args.state, grid, fp)
    sets = obtain_sets(cfg, grid, fp)
    try:
        assessment = classify_state(grid, sets, state, cfg["membership_tol"])
    except StateError as e:
        fatal(f"classify: {e}", fp=fp)

    out_dir = cfg["out_dir"]
    ensure_dir(out_dir, "out_dir", fp)
    manifest = new_manifest("classify", cfg, grid)
    try:
        write_json(os.path.join(out_dir, "assessment.json"), assessment.to_document())
        manifest["artifacts"].append("assessment.json")
        write_manifest(out_dir, manifest, fp)
    except OSError as e:
        fatal(f"output: {e}", EXIT_IO, fp=fp)

    critical = ", ".join(assessment.critical_nodes) or "-"
    log(f"CLASSIFY: verdict={assessment.verdict.value} critical={critical}", fp)
    return VERDICT_EXIT[assessment.verdict]

def cmd_simulate(cfg: dict, args, fp=None) -> int:
    grid = read_grid(cfg, fp)
    state = read_state(args.state, grid, fp)
    if not (math.isfinite(args.t_end) and args.t_end >= 0):
        fatal(f"simulate: --t-end must be a nonnegative number, got {args.t_end!r}", fp=fp)
    opts = build_options(cfg)
    out_dir = cfg["out_dir"]
    ensure_dir(out_dir, "out_dir", fp)

    failure = ""
    try:
        traj = simulate_postfault(grid, state, args.t_end, opts)
    except NumericalFailure as e:
        # keep what was integrated before the blow-up
        failure = f"{e} (t={e.t:.6g})"
        traj = e.trajectory
        log(f"SIMULATE: WARN: {failure}", fp)

    violations = {
        "t_end": float(args.t_end),
        "violations": [v.to_document() for v in sorted(traj.violations, key=lambda v: (v.t, v.node))],
        "first_violation": traj.first_violation.to_document() if traj.first_violation else None,
        "failure": failure or None,
    }
    manifest = new_manifest("simulate", cfg, grid)
    try:
        write_trajectory_long_csv(traj, os.path.join(out_dir, "trajectory.csv"))
        write_json(os.path.join(out_dir, "violations.json"), violations)
        manifest["artifacts"].extend(["trajectory.csv", "violations.json"])
        if failure:
            manifest["failures"].append({"node": None, "error": failure})
        write_manifest(out_dir, manifest, fp)
    except OSError as e:
        fatal(f"output: {e}", EXIT_IO, fp=fp)

    for v in violations["violations"]:
        log(f"SIMULATE: node {v['node']} crossed its {v['bound']} bound at t={v['t']:.6g}", fp)
    if not violations["violations"]:
        log(f"SIMULATE: no constraint violation over {args.t_end:g} s", fp)
    return EXIT_NUMERIC if failure else EXIT_OK

def cmd_screen(cfg: dict, args, fp=None) -> int:
    grid = read_grid(cfg, fp)
    named = read_states(args.states, grid, fp)
    sets = obtain_sets(cfg, grid, fp) if named else {}
    try:
        assessments = screen(grid, sets, [x for _, x in named])
    except StateError as e:
        fatal(f"screen: {e}", fp=fp)

    worst = worst_verdict(a.verdict for a in assessments)
    counts = {v.value: sum(1 for a in assessments if a.verdict is v) for v in Verdict}
    document = {
        "results": [dict(name=name, **a.to_document()) for (name, _), a in zip(named, assessments)],
        "counts": counts,
        "worst": worst.value if worst else None,
    }
    out_dir = cfg["out_dir"]
    ensure_dir(out_dir, "out_dir", fp)
    manifest = new_manifest("screen", cfg, grid)
    try:
        write_json(os.path.join(out_dir, "screen.json"), document)
        manifest["artifacts"].append("screen.json")
        write_manifest(out_dir, manifest, fp)
    except OSError as e:
        fatal(f"output: {e}", EXIT_IO, fp=fp)

    log(
        "SCREEN: " + ", ".join(f"{k}={v}" for k, v in counts.items())
        + f" (worst={document['worst'] or '-'})",
        fp,
    )
    return VERDICT_EXIT[worst] if worst else EXIT_OK

COMMANDS = {
    "compute-sets": cmd_compute_sets,
    "load-sets": cmd_load_sets,
    "classify": cmd_classify,
    "simulate": cmd_simulate,
    "screen": cmd_screen,
}

# --------------------------------------------------------
# MAIN
# --------------------------------------------------------
def build_parser():
    ap = argparse.ArgumentParser(
        prog=TOOL_NAME,
        description="MRPI / admissible set screening for post-fault power grids",
    )
    ap.add_argument("--config", default=os.path.join(PROJECT_DIR, "grid_sets.json"))
    ap.add_argument("--version", action="store_true", help="print version and exit")
    ap.add_argument(
        "--view-config",
        "--viewconfig",
        dest="view_config",
        action="store_true",
        help="show the effective configuration (defaults, file, environment, flags) and exit",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grid", help="grid description file (JSON)")
    common.add_argument("--node", action="append", metavar="ID",
                        help="restrict to node id(s); repeat or comma-separate")
    common.add_argument("--kind", choices=KIND_CHOICES)
    common.add_argument("--step", type=float, help="RK4 step (s)")
    common.add_argument("--t-back-max", dest="t_back_max", type=float, help="backward trace horizon (s)")
    common.add_argument("--omega-cap", dest="omega_cap", type=float, help="|omega| window (rad/s)")
    common.add_argument("--resolution", type=float, help="load-interval scan resolution (rad)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", choices=FORMAT_CHOICES, help="region polyline format")
    common.add_argument("--jobs", type=int, help="worker processes (0 = all CPUs)")
    common.add_argument("--logfile", help="append log lines to this file")

    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("compute-sets", parents=[common], help="per-node MRPI / admissible sets")
    p.add_argument("--cross-check", dest="cross_check", action="store_true",
                   help="cross-validate generator regions with worst-case probes")
    p.add_argument("--cross-check-grid", dest="cross_check_grid", type=int, metavar="N")
    p.add_argument("--cross-check-horizon", dest="cross_check_horizon", type=float, metavar="T")
    p.add_argument("--curves", action="store_true", help="also export traced barrier curves")

    p = sub.add_parser("load-sets", parents=[common], help="load-node intervals only")
    p.add_argument("--verify", action="store_true",
                   help="run worst-case probes from inside each MRPI interval")

    p = sub.add_parser("classify", parents=[common], help="classify one post-fault state")
    p.add_argument("--state", required=True, help="state file (JSON)")
    p.add_argument("--sets", help="reuse a compute-sets output directory")

    p = sub.add_parser("simulate", parents=[common], help="coupled post-fault simulation")
    p.add_argument("--state", required=True, help="state file (JSON)")
    p.add_argument("--t-end", dest="t_end", type=float, required=True, help="simulated time (s)")

    p = sub.add_parser("screen", parents=[common], help="classify a batch of states")
    p.add_argument("--states", required=True, help="JSON list (or name-keyed object) of states")
    p.add_argument("--sets", help="reuse a compute-sets output directory")
    return ap

def main(argv=None) -> int:
    global CFG_FOR_HINTS

    ap = build_parser()
    args = ap.parse_args(argv)

    if args.version:
        print(__version__)
        return EXIT_OK

    cfg = load_cfg(args.config)
    cfg = normalize_cfg_paths(cfg, args.config)
    CFG_FOR_HINTS = cfg
    try:
        apply_env_overrides(cfg)
    except ValueError as e:
        fatal(f"environment: {e}")
    apply_cli_overrides(cfg, args)
    try:
        validate_cfg(cfg)
    except ValueError as e:
        fatal(f"config: {e}")

    if args.view_config:
        print_effective_config(cfg, args.config)
        return EXIT_OK

    if not args.command:
        ap.error("a subcommand is required (one of: " + ", ".join(COMMANDS) + ")")

    fp = open_logfile(cfg)
    try:
        log(f"CONFIG: {TOOL_NAME} {__version__} {args.command} (config: {args.config})", fp)
        return COMMANDS[args.command](cfg, args, fp)
    finally:
        if fp:
            fp.close()


if __name__ == "__main__":
    raise SystemExit(main())
