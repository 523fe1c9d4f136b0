"""Fault model, injection campaigns and the fault diagnosis database.

Five fault kinds are injected at function level: IP+N and crash (control),
deadlock (resource), input and output corruption (interface).  Faults are
permanent.  A campaign re-executes requests under each fault until repeated
runs stop producing new call trees, and stores the distinct trees per
``function:kind`` label.
"""

from __future__ import annotations

import functools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from afetm.calltree import canonical_form, normalize, tree_from_dict, tree_to_dict
from afetm.progmodel import ProgramModel, run_request

KINDS = ("IP+N", "crash", "deadlock", "input_corruption", "output_corruption")
NORMAL = "normal"
MAX_SEEDS = 64


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    target: str
    site: str = "entry"
    param_index: Optional[int] = None
    bit_index: Optional[int] = None
    n: int = 1

    @property
    def label(self) -> str:
        return f"{self.target}:{self.kind}"

    @property
    def key(self) -> str:
        parts = [self.target, self.kind, self.site]
        if self.param_index is not None:
            parts.append(f"p{self.param_index}")
        if self.bit_index is not None:
            parts.append(f"b{self.bit_index}")
        if self.kind == "IP+N":
            parts.append(f"n{self.n}")
        return ":".join(parts)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "target": self.target, "site": self.site}
        if self.param_index is not None:
            d["param_index"] = self.param_index
        if self.bit_index is not None:
            d["bit_index"] = self.bit_index
        if self.kind == "IP+N":
            d["n"] = self.n
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        return cls(d["kind"], d["target"], d.get("site", "entry"), d.get("param_index"), d.get("bit_index"),
                   int(d.get("n", 1)))


def label_function(label: str) -> Optional[str]:
    return None if label == NORMAL else label.rsplit(":", 1)[0]


def validate_fault(model: ProgramModel, fault: FaultSpec) -> None:
    if fault.kind not in KINDS:
        raise FaultError(f"unknown fault kind {fault.kind!r}")
    if fault.site not in ("entry", "return"):
        raise FaultError(f"fault site must be 'entry' or 'return', got {fault.site!r}")
    try:
        fdef = model.function(fault.target)
    except KeyError:
        raise FaultError(f"fault target {fault.target!r} is not a model function") from None
    if fault.kind == "input_corruption":
        if fault.param_index is None or not 0 <= fault.param_index < fdef.params:
            raise FaultError(f"{fault.target!r} has {fdef.params} parameter(s); param_index={fault.param_index}")
    elif fault.param_index is not None:
        raise FaultError("param_index only applies to input_corruption")
    if fault.bit_index is not None and not 0 <= fault.bit_index < 64:
        raise FaultError(f"bit_index {fault.bit_index} outside a 64-bit value")
    if fault.kind == "IP+N" and fault.n < 1:
        raise FaultError("IP+N needs N >= 1")


def apply_fault(model: ProgramModel, fault: FaultSpec):
    """Validated faulted executor: ``(request_type, seed) -> Execution``.

    Simulated semantics: crash and deadlock stop the run at the site
    (outcomes ``crashed`` / ``hang``); IP+N skips the next N call instructions
    and leaves the frame's state corrupted; input corruption corrupts the
    target's own state, output corruption the value handed to its caller.
    Corrupted state changes every later branch decision it reaches.
    """
    validate_fault(model, fault)
    return functools.partial(_faulted, model, fault)


def _faulted(model, fault, request_type, seed):
    return run_request(model, request_type, seed, fault)


def activated_functions(model: ProgramModel, workload) -> list:
    """Functions executed by some request type of the workload, in model order."""
    if isinstance(workload, str):
        workload = model.workload(workload)
    seen = set()
    for req, weight in workload.mix.items():
        if weight <= 0:
            continue
        for seed in range(model.variants):
            seen.update(n.fn for n in run_request(model, req, seed).tree.iter())
    return [f for f in model.function_ids if f in seen]


def enumerate_fault_points(model: ProgramModel, workload) -> list:
    """IP+N, crash and deadlock per activated function, one input corruption
    per parameter and one output corruption per returned value."""
    out = []
    for fid in activated_functions(model, workload):
        fdef = model.function(fid)
        out.append(FaultSpec("IP+N", fid, "entry", n=1))
        out.append(FaultSpec("crash", fid, "entry"))
        out.append(FaultSpec("deadlock", fid, "entry"))
        for k in range(fdef.params):
            out.append(FaultSpec("input_corruption", fid, "entry", param_index=k, bit_index=0))
        for r in range(fdef.returns):
            out.append(FaultSpec("output_corruption", fid, "return", bit_index=r))
    return out


# ---------------------------------------------------------------------------
# Campaigns


@dataclass
class FaultResult:
    fault: Optional[FaultSpec]
    fcts: list
    runs: list  # (request, seed, index into fcts) for activated executions
    executions: int = 0

    @property
    def activated(self) -> bool:
        return bool(self.runs)


def saturate(model: ProgramModel, requests: list, fault: Optional[FaultSpec], k: int) -> FaultResult:
    """Run each request type over seeds 0, 1, ... until ``k`` consecutive
    executions add no new canonical tree."""
    if k < 1:
        raise FaultError("saturation_k must be >= 1")
    seen, fcts, runs = {}, [], []
    executions = 0
    for req in requests:
        quiet = 0
        for seed in range(MAX_SEEDS):
            run = run_request(model, req, seed, fault)
            executions += 1
            if fault is None or run.activated:
                tree = normalize(run.tree, fold=False)
                key = canonical_form(tree)
                if key not in seen:
                    seen[key] = len(fcts)
                    fcts.append(tree)
                    quiet = -1
                runs.append((req, seed, seen[key]))
            quiet += 1
            if quiet >= k:
                break
    return FaultResult(fault, fcts, runs, executions)


@dataclass
class FddbRecord:
    label: str
    faults: list
    fcts: list

    @property
    def fault(self) -> FaultSpec:
        return self.faults[0]

    @property
    def function(self) -> str:
        return label_function(self.label)


@dataclass
class Fddb:
    records: list
    normal_fcts: list
    fingerprint: str = ""
    unactivated: list = field(default_factory=list)

    def __post_init__(self):
        labels = [r.label for r in self.records]
        if len(set(labels)) != len(labels):
            raise FaultError("FDDB labels must be unique")
        if not self.normal_fcts:
            raise FaultError("FDDB needs at least one fault-free FCT")
        for r in self.records:
            if not r.fcts:
                raise FaultError(f"record {r.label!r} has no FCTs")

    @property
    def labels(self) -> list:
        return [r.label for r in self.records]

    def record(self, label: str) -> FddbRecord:
        for r in self.records:
            if r.label == label:
                return r
        raise KeyError(label)

    def subset(self, faults) -> "Fddb":
        keep = {f.key for f in faults}
        recs = []
        for r in self.records:
            fs = [f for f in r.faults if f.key in keep]
            if fs:
                recs.append(FddbRecord(r.label, fs, r.fcts))
        return Fddb(recs, self.normal_fcts, self.fingerprint, [f for f in self.unactivated if f.key in keep])

    def to_dict(self) -> dict:
        return {
            "model": self.fingerprint,
            "records": [
                {
                    "fault": r.fault.to_dict(),
                    "faults": [f.to_dict() for f in r.faults],
                    "label": r.label,
                    "fcts": [tree_to_dict(t) for t in r.fcts],
                }
                for r in self.records
            ],
            "normal": [tree_to_dict(t) for t in self.normal_fcts],
            "unactivated": [f.to_dict() for f in self.unactivated],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fddb":
        recs = [
            FddbRecord(
                r["label"],
                [FaultSpec.from_dict(f) for f in r.get("faults", [r["fault"]])],
                [tree_from_dict(t) for t in r["fcts"]],
            )
            for r in d["records"]
        ]
        return cls(recs, [tree_from_dict(t) for t in d["normal"]], d.get("model", ""),
                   [FaultSpec.from_dict(f) for f in d.get("unactivated", ())])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":"), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Fddb":
        return cls.from_dict(json.loads(Path(path).read_text()))


def assemble_fddb(model: ProgramModel, normal: FaultResult, results: list) -> Fddb:
    """Merge per-fault results into label-unique records (trees deduplicated)."""
    by_label, order, unactivated = {}, [], []
    for res in results:
        if not res.activated:
            unactivated.append(res.fault)
            continue
        label = res.fault.label
        if label not in by_label:
            by_label[label] = (FddbRecord(label, [], []), set())
            order.append(label)
        rec, keys = by_label[label]
        rec.faults.append(res.fault)
        for t in res.fcts:
            key = canonical_form(t)
            if key not in keys:
                keys.add(key)
                rec.fcts.append(t)
    return Fddb([by_label[lb][0] for lb in order], list(normal.fcts), model.fingerprint(), unactivated)


def campaign_requests(model: ProgramModel, workload) -> list:
    if isinstance(workload, str):
        workload = model.workload(workload)
    return [r for r, w in workload.mix.items() if w > 0]


def run_faults(model: ProgramModel, workload, faults: list, saturation_k: int = 3, jobs: int = 1) -> list:
    """Per-fault saturated results, in the order of ``faults``."""
    requests = campaign_requests(model, workload)
    for f in faults:
        validate_fault(model, f)
    task = functools.partial(saturate, model, requests, k=saturation_k)
    if jobs > 1 and len(faults) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(task, faults, chunksize=max(1, len(faults) // (4 * jobs))))
    return [task(f) for f in faults]


def run_campaign(model: ProgramModel, workload, faults: list, saturation_k: int = 3, jobs: int = 1) -> Fddb:
    """Inject every fault until saturation and build the FDDB."""
    normal = saturate(model, campaign_requests(model, workload), None, saturation_k)
    return assemble_fddb(model, normal, run_faults(model, workload, faults, saturation_k, jobs))
