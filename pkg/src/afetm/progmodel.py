"""Deterministic synthetic target program.

A :class:`ProgramModel` is a call graph whose functions are small control-flow
graphs of basic blocks.  Executing a request walks those graphs, producing the
ground-truth function call tree and the full-tracking event stream that
adaptive tracing filters.  Branch decisions are a pure hash of the request
type, the seed-derived data variant and the corruption state, so injected
interface faults change control flow reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from afetm.calltree import CallNode, TraceEvent

MAX_STACK = 256


class ProgramSpecError(ValueError):
    """Malformed or invalid program specification."""


class RecursionGuardError(RuntimeError):
    pass


@dataclass(frozen=True)
class BasicBlock:
    label: int
    succ: tuple = ()
    calls: tuple = ()
    # request type -> successor label; taken regardless of corruption
    dispatch: Optional[dict] = None


@dataclass
class FunctionDef:
    id: str
    blocks: list
    params: int = 0
    cost: float = 1.0
    returns: int = 1
    max_depth: Optional[int] = None

    def __post_init__(self):
        self._by_label = {b.label: b for b in self.blocks}

    def block(self, label: int) -> BasicBlock:
        return self._by_label[label]


@dataclass
class WorkloadDef:
    id: str
    mix: dict
    rate: float


@dataclass
class ProgramModel:
    functions: list
    entry: str
    workloads: list = field(default_factory=list)
    rng_seed: int = 0
    loggers: tuple = ()
    variants: int = 2

    def __post_init__(self):
        self._by_id = {f.id: f for f in self.functions}

    def function(self, fid: str) -> FunctionDef:
        return self._by_id[fid]

    @property
    def function_ids(self) -> list:
        return [f.id for f in self.functions]

    @property
    def request_types(self) -> list:
        seen = []
        for w in self.workloads:
            for r in w.mix:
                if r not in seen:
                    seen.append(r)
        return seen

    def workload(self, wid: str) -> WorkloadDef:
        for w in self.workloads:
            if w.id == wid:
                return w
        raise KeyError(f"unknown workload {wid!r}")

    def to_dict(self) -> dict:
        out = {
            "entry": self.entry,
            "rng_seed": self.rng_seed,
            "variants": self.variants,
            "loggers": list(self.loggers),
            "functions": [],
            "workloads": [{"id": w.id, "mix": dict(w.mix), "rate": w.rate} for w in self.workloads],
        }
        for f in self.functions:
            fd = {"id": f.id, "params": f.params, "cost": f.cost, "returns": f.returns, "blocks": []}
            if f.max_depth is not None:
                fd["max_depth"] = f.max_depth
            for b in f.blocks:
                bd = {"label": b.label, "succ": list(b.succ), "calls": list(b.calls)}
                if b.dispatch:
                    bd["dispatch"] = dict(b.dispatch)
                fd["blocks"].append(bd)
            out["functions"].append(fd)
        return out

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Loading and validation

_TOP_KEYS = {"entry", "functions", "workloads", "rng_seed", "loggers", "variants"}
_FN_KEYS = {"id", "params", "cost", "blocks", "returns", "max_depth"}
_BLOCK_KEYS = {"label", "succ", "calls", "dispatch"}
_WL_KEYS = {"id", "mix", "rate"}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ProgramSpecError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ProgramSpecError(f"{where}: unknown field(s) {sorted(extra)}")


def _need(obj, key, where):
    if key not in obj:
        raise ProgramSpecError(f"{where}: missing field {key!r}")
    return obj[key]


def model_from_dict(data: dict) -> ProgramModel:
    _check_keys(data, _TOP_KEYS, "spec")
    functions = []
    for i, fd in enumerate(_need(data, "functions", "spec")):
        where = f"functions[{i}]"
        _check_keys(fd, _FN_KEYS, where)
        blocks = []
        for k, bd in enumerate(_need(fd, "blocks", where)):
            bwhere = f"{where}.blocks[{k}]"
            _check_keys(bd, _BLOCK_KEYS, bwhere)
            dispatch = bd.get("dispatch")
            blocks.append(
                BasicBlock(
                    int(_need(bd, "label", bwhere)),
                    tuple(int(s) for s in bd.get("succ", ())),
                    tuple(str(c) for c in bd.get("calls", ())),
                    {str(k2): int(v) for k2, v in dispatch.items()} if dispatch else None,
                )
            )
        functions.append(
            FunctionDef(
                str(_need(fd, "id", where)),
                blocks,
                int(fd.get("params", 0)),
                float(fd.get("cost", 1.0)),
                int(fd.get("returns", 1)),
                None if fd.get("max_depth") is None else int(fd["max_depth"]),
            )
        )
    workloads = []
    for i, wd in enumerate(data.get("workloads", ())):
        where = f"workloads[{i}]"
        _check_keys(wd, _WL_KEYS, where)
        workloads.append(
            WorkloadDef(
                str(_need(wd, "id", where)),
                {str(k): float(v) for k, v in _need(wd, "mix", where).items()},
                float(_need(wd, "rate", where)),
            )
        )
    model = ProgramModel(
        functions,
        str(_need(data, "entry", "spec")),
        workloads,
        int(data.get("rng_seed", 0)),
        tuple(data.get("loggers", ())),
        int(data.get("variants", 2)),
    )
    validate(model)
    return model


def load_program_spec(path) -> ProgramModel:
    """Read and validate a program-spec JSON file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProgramSpecError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProgramSpecError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return model_from_dict(data)
    except ProgramSpecError as exc:
        raise ProgramSpecError(f"{path}: {exc}") from exc


def _sccs(graph: dict) -> list:
    index, low, on, stack, out = {}, {}, set(), [], []
    counter = [0]

    def visit(v):
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on.add(v)
        for w in graph[v]:
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on.discard(w)
                comp.append(w)
                if w == v:
                    break
            out.append(comp)

    for v in graph:
        if v not in index:
            visit(v)
    return out


def call_graph(model: ProgramModel) -> dict:
    return {f.id: sorted({c for b in f.blocks for c in b.calls}) for f in model.functions}


def validate(model: ProgramModel) -> None:
    ids = [f.id for f in model.functions]
    dup = [i for i, n in Counter(ids).items() if n > 1]
    if dup:
        raise ProgramSpecError(f"duplicate function id(s) {dup}")
    if model.entry not in model._by_id:
        raise ProgramSpecError(f"entry function {model.entry!r} is not defined")
    if model.variants < 1:
        raise ProgramSpecError("variants must be >= 1")
    requests = set(model.request_types)
    for f in model.functions:
        if not f.blocks:
            raise ProgramSpecError(f"function {f.id!r} has no blocks")
        labels = [b.label for b in f.blocks]
        if len(set(labels)) != len(labels):
            raise ProgramSpecError(f"function {f.id!r} has duplicate block labels")
        if f.params < 0 or f.returns < 0:
            raise ProgramSpecError(f"function {f.id!r} has a negative params/returns count")
        for b in f.blocks:
            for s in b.succ:
                if s not in f._by_label:
                    raise ProgramSpecError(f"function {f.id!r} block {b.label}: unknown successor {s}")
            for c in b.calls:
                if c not in model._by_id:
                    raise ProgramSpecError(f"function {f.id!r} block {b.label}: call to undefined function {c!r}")
            for r, s in (b.dispatch or {}).items():
                if s not in b.succ:
                    raise ProgramSpecError(f"function {f.id!r} block {b.label}: dispatch target {s} not a successor")
                if r not in requests:
                    raise ProgramSpecError(f"function {f.id!r} block {b.label}: dispatch on undeclared request {r!r}")
    for logger in model.loggers:
        if logger not in model._by_id:
            raise ProgramSpecError(f"logger {logger!r} is not defined")
    graph = call_graph(model)
    for comp in _sccs(graph):
        cyclic = len(comp) > 1 or comp[0] in graph[comp[0]]
        if cyclic and not any(model.function(c).max_depth for c in comp):
            raise ProgramSpecError(f"recursive cycle {sorted(comp)} has no max_depth bound")
    for w in model.workloads:
        if w.rate < 0 or any(v < 0 for v in w.mix.values()) or not w.mix:
            raise ProgramSpecError(f"workload {w.id!r}: rate and mix weights must be non-negative")


# ---------------------------------------------------------------------------
# Execution


def _h64(*parts) -> int:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def corruption_tag(origin: str) -> int:
    """Corruption state carried by values that went bad inside ``origin``."""
    return _h64("corrupt", origin) | 1


def select_successor(block: BasicBlock, fn: str, request: str, variant: int, visit: int, corruption: int) -> int:
    if block.dispatch and request in block.dispatch:
        return block.dispatch[request]
    if len(block.succ) == 1:
        return block.succ[0]
    return block.succ[_h64(request, variant, fn, block.label, visit, corruption) % len(block.succ)]


@dataclass
class Execution:
    tree: CallNode
    events: list
    outcome: str = "ok"  # ok | crashed | hang
    activated: bool = False
    cost: float = 0.0
    invocations: int = 0


class _Halt(Exception):
    def __init__(self, outcome):
        self.outcome = outcome


def run_request(model: ProgramModel, request_type: str, seed: int, fault=None) -> Execution:
    """Execute one request; ``fault`` is an optional injector.FaultSpec."""
    if request_type not in model.request_types:
        raise KeyError(f"request type {request_type!r} not declared by any workload")
    variant = seed % model.variants
    events = []
    run = Execution(tree=None, events=events)
    target = fault.target if fault is not None else None
    kind = fault.kind if fault is not None else None
    site = fault.site if fault is not None else None

    def invoke(fid, parent, stack, corruption):
        """Returns (corruption handed back to the caller, calls the caller must skip)."""
        fdef = model.function(fid)
        node = CallNode(fid)
        if parent is None:
            run.tree = node
        else:
            parent.children.append(node)
        events.append(TraceEvent(fid, parent.fn if parent is not None else None, tuple(stack), len(events)))
        run.cost += fdef.cost
        run.invocations += 1

        hit = fid == target
        skip = 0
        if hit:
            run.activated = True
            if site == "entry":
                if kind in ("crash", "deadlock"):
                    raise _Halt("crashed" if kind == "crash" else "hang")
                if kind == "IP+N":
                    skip = fault.n
                    corruption = corruption_tag(fid)
                elif kind == "input_corruption":
                    corruption = corruption_tag(fid)

        visits = Counter()
        label = fdef.blocks[0].label
        budget = 4 * len(fdef.blocks)
        for _ in range(budget):
            block = fdef.block(label)
            visit = visits[label]
            visits[label] += 1
            for callee in block.calls:
                if skip:
                    skip -= 1
                    continue
                cdef = model.function(callee)
                depth = stack.count(callee)
                if depth and cdef.max_depth is not None and depth >= cdef.max_depth:
                    continue
                if len(stack) >= MAX_STACK:
                    first = stack.index(callee) if callee in stack else 0
                    raise RecursionGuardError(f"unbounded recursion through {' -> '.join(stack[first:] + [callee])}")
                ret, skip_after = invoke(callee, node, stack + [callee], corruption)
                if ret:
                    corruption = ret
                skip = skip_after
            if not block.succ:
                break
            label = select_successor(block, fid, request_type, variant, visit, corruption)

        skip_caller = 0
        if hit and site == "return":
            if kind in ("crash", "deadlock"):
                raise _Halt("crashed" if kind == "crash" else "hang")
            if kind == "output_corruption":
                corruption = corruption_tag(fid)
            elif kind == "IP+N":
                skip_caller = fault.n
                corruption = corruption_tag(fid)
        return corruption, skip_caller

    try:
        invoke(model.entry, None, [model.entry], 0)
    except _Halt as halt:
        run.outcome = halt.outcome
    return run


def execute_request(model: ProgramModel, request_type: str, seed: int, active_fault=None):
    """Ground-truth FCT and full-tracking event stream of one request."""
    run = run_request(model, request_type, seed, active_fault)
    return run.tree, run.events


def request_schedule(model: ProgramModel, workload: WorkloadDef, count: int, seed: int = 0) -> list:
    """Seeded draw of ``count`` request types according to the workload mix."""
    names = list(workload.mix)
    p = np.array([workload.mix[n] for n in names], dtype=float)
    if p.sum() <= 0:
        raise ProgramSpecError(f"workload {workload.id!r} has an all-zero mix")
    rng = np.random.default_rng([model.rng_seed, zlib.crc32(workload.id.encode()), seed])
    return [names[i] for i in rng.choice(len(names), size=count, p=p / p.sum())]


def sample_frequencies(model: ProgramModel, workload, duration: float = 10.0, seed: int = 0) -> np.ndarray:
    """Executions per second of every function under ``workload``.

    Returns a weight vector aligned with ``model.function_ids``.
    """
    if duration <= 0:
        raise ValueError("duration must be > 0")
    if isinstance(workload, str):
        workload = model.workload(workload)
    n_req = int(round(workload.rate * duration))
    counts = Counter()
    for i, req in enumerate(request_schedule(model, workload, n_req, seed)):
        tree = run_request(model, req, i).tree
        counts.update(n.fn for n in tree.iter())
    return np.array([counts[f] / duration for f in model.function_ids], dtype=float)


def build_coverage_instance(model: ProgramModel, weights, budget_fraction: float):
    """Block-by-function coverage matrix with ``w_ub = P * sum(w)``."""
    from afetm.selector import CoverageInstance

    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(model.functions),):
        raise ValueError(f"weights have shape {weights.shape}, model has {len(model.functions)} functions")
    if not 0 < budget_fraction <= 1:
        raise ValueError("budget fraction must lie in (0, 1]")
    col = {fid: j for j, fid in enumerate(model.function_ids)}
    blocks = [(f.id, b) for f in model.functions for b in f.blocks]
    h = np.zeros((len(blocks), len(col)), dtype=np.uint8)
    for i, (_, b) in enumerate(blocks):
        for c in b.calls:
            h[i, col[c]] = 1
    return CoverageInstance(
        h=h,
        w=weights,
        w_ub=float(budget_fraction * weights.sum()),
        function_ids=tuple(model.function_ids),
        block_ids=tuple(f"{fid}:{b.label}" for fid, b in blocks),
    )


def random_model(rng, n_functions: int = 10, max_blocks: int = 4, p_recursion: float = 0.1,
                 variants: int = 2) -> ProgramModel:
    """Seeded random model for property checks.

    Calls mostly go to higher-numbered functions; with probability
    ``p_recursion`` a block also calls back to an earlier function, and every
    function on such a cycle gets a depth bound.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    ids = [f"f{i}" for i in range(n_functions)]
    functions = []
    for i, fid in enumerate(ids):
        nb = int(rng.integers(1, max_blocks + 1))
        blocks = []
        for b in range(nb):
            calls = []
            if i + 1 < n_functions:
                k = int(rng.choice(3, p=[0.4, 0.4, 0.2]))
                calls = [ids[j] for j in rng.integers(i + 1, n_functions, size=k)]
            if i > 0 and rng.random() < p_recursion:
                j = int(rng.integers(0, i + 1))
                calls.insert(int(rng.integers(0, len(calls) + 1)), ids[j])
            later = list(range(b + 1, nb))
            if not later:
                succ = []
            else:
                succ = sorted(set(int(s) for s in rng.choice(later, size=min(len(later), int(rng.integers(1, 3))),
                                                             replace=False)))
            blocks.append(BasicBlock(b, tuple(succ), tuple(calls)))
        functions.append(FunctionDef(fid, blocks, params=int(rng.integers(0, 3))))
    model = ProgramModel(functions, ids[0], [WorkloadDef("w", {"r0": 1.0, "r1": 1.0}, 10.0)],
                         rng_seed=int(rng.integers(0, 2**31)), variants=variants)
    graph = call_graph(model)
    for comp in _sccs(graph):
        cyclic = len(comp) > 1 or any(v in graph[v] for v in comp)
        if cyclic:
            for v in comp:
                model.function(v).max_depth = int(rng.integers(1, 3))
    validate(model)
    return model
