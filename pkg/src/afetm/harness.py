"""Metrics and end-to-end experiments.

An experiment runs the offline phase (fault injection into the FDDB, trace
point selection, coloring, training) and then, for every injected fault,
one workload-scheduled execution that activates it.  Each method diagnoses
that execution:

* ``afetm``: the GCN on the AFCT rebuilt from the adaptive trace;
* ``gdc``: Gaussian influence of the same AFCT against the FDDB;
* ``edc``: edit distance of the fully traced FCT against the normal set;
* ``log``: the idealized error-log oracle.
"""

from __future__ import annotations

import csv
import json
import logging
import resource
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from afetm import baselines, diagnoser
from afetm.calltree import TracePlan, build_afct, color_fcts, filter_events, normalize, preorder
from afetm.injector import (
    FaultError,
    assemble_fddb,
    campaign_requests,
    enumerate_fault_points,
    run_faults,
    saturate,
)
from afetm.progmodel import ProgramModel, load_program_spec, request_schedule, run_request, sample_frequencies
from afetm.selector import MmasParams, mmas_select

log = logging.getLogger(__name__)

METHODS = ("afetm", "gdc", "edc", "log")
BUNDLED = Path(__file__).parent / "data"


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Metrics


def _pct(num: int, den: int) -> float:
    if den <= 0:
        raise ValueError("no injections")
    return 100.0 * num / den


def edr(result) -> float:
    """Detected injections over all injections, in percent."""
    n_inj, n_err = _counts(result, "detected")
    return _pct(n_err, n_inj)


def flr(result) -> float:
    """Correctly located injections over all injections, in percent."""
    n_inj, n_loc = _counts(result, "located_ok")
    return _pct(n_loc, n_inj)


def _counts(result, attr):
    if isinstance(result, tuple):
        return result
    recs = list(result)
    return len(recs), sum(bool(getattr(r, attr)) for r in recs)


def fld_summary(result) -> float:
    """Mean preorder distance over experiments that produced a location."""
    ds = [r if isinstance(r, (int, float)) else r.fld for r in result]
    ds = [d for d in ds if d is not None]
    return float(np.mean(ds)) if ds else float("nan")


def rtgr(t_before: float, t_after: float) -> float:
    if t_before <= 0:
        raise ValueError("t_before must be > 0")
    return 100.0 * (t_after - t_before) / t_before


@dataclass
class FddSample:
    construction_ms: float
    inference_ms: float

    @property
    def total_ms(self) -> float:
        return self.construction_ms + self.inference_ms


def measure_fdd(construct, infer) -> tuple:
    """Time ``construct()`` then ``infer(constructed)``; returns (result, FddSample)."""
    t0 = time.perf_counter()
    built = construct()
    t1 = time.perf_counter()
    out = infer(built)
    t2 = time.perf_counter()
    return out, FddSample((t1 - t0) * 1e3, (t2 - t1) * 1e3)


def tracing_profile(model: ProgramModel, workload, n_requests: int = 200, seed: int = 0) -> tuple:
    """Uninstrumented cost of a seeded request batch and its per-function event counts."""
    before = 0.0
    events = Counter()
    for i, req in enumerate(request_schedule(model, workload, n_requests, seed)):
        run = run_request(model, req, i)
        before += run.cost
        events.update(ev.fn for ev in run.events)
    return before, events


def tracing_cost(model: ProgramModel, workload, traced, n_requests: int = 200, seed: int = 0,
                 event_cost: float = 1.0, profile=None) -> tuple:
    """(t_before, t_after): the batch without instrumentation, and with a fixed
    cost per event of a traced function."""
    before, events = profile or tracing_profile(model, workload, n_requests, seed)
    return before, before + event_cost * sum(events[f] for f in set(traced))


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class ExperimentConfig:
    model: str = "webshop"
    workload: str = "default"
    P: float = 0.1
    mmas: dict = field(default_factory=dict)
    gcn: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: list(METHODS))
    seed: int = 0
    saturation_k: int = 3
    holdout: float = 0.2
    timeout: float = 1.0
    edc_threshold: float = 0.0
    sample_duration: float = 10.0
    rtgr_requests: int = 200
    event_cost: float = 1.0
    rtgr_sweep: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 1.0])
    max_attempts: int = 200

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config key(s) {sorted(unknown)}")
        cfg = cls(**d)
        bad = [m for m in cfg.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if not 0 < cfg.P <= 1:
            raise ValueError("P must lie in (0, 1]")
        if not 0 <= cfg.holdout < 1:
            raise ValueError("holdout must lie in [0, 1)")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_path(self, base: Optional[Path] = None) -> Path:
        bundled = BUNDLED / f"{self.model}.json"
        if "/" not in self.model and not self.model.endswith(".json") and bundled.exists():
            return bundled
        p = Path(self.model)
        if not p.is_absolute() and base is not None:
            p = base / p
        return p


@dataclass
class ExperimentRecord:
    fault: str
    label: str
    split: str
    method: str
    detected: bool
    located: Optional[str]
    located_ok: bool
    located_top3: bool
    fld: Optional[int]
    construction_ms: float = 0.0
    inference_ms: float = 0.0

    @property
    def fdd_ms(self) -> float:
        return self.construction_ms + self.inference_ms


@dataclass
class CampaignResult:
    records: list
    rtgr: dict
    t_before: float
    t_after: dict
    rtgr_by_p: dict
    selection: dict
    fddb_records: int
    unactivated: list
    peak_rss_kb: int = 0
    model: object = field(default=None, repr=False)
    fddb: object = field(default=None, repr=False)
    plan: object = field(default=None, repr=False)

    def subset(self, method: str, split: str) -> list:
        return [r for r in self.records if r.method == method and r.split == split]

    def metrics(self, method: str, split: str) -> dict:
        recs = self.subset(method, split)
        if not recs:
            return {}
        return {
            "N_injection": len(recs),
            "N_error": sum(r.detected for r in recs),
            "N_location": sum(r.located_ok for r in recs),
            "EDR": edr(recs),
            "FLR": flr(recs),
            "FLR@3": _pct(sum(r.located_top3 for r in recs), len(recs)),
            "FLD": fld_summary(recs),
            "RTGR": self.rtgr[method],
        }

    def timing(self, method: str, split: str = "train") -> dict:
        recs = self.subset(method, split)
        if not recs:
            return {}
        c = float(np.mean([r.construction_ms for r in recs]))
        i = float(np.mean([r.inference_ms for r in recs]))
        return {"construction_ms": c, "inference_ms": i, "fdd_ms": c + i}


def _split(faults: list, holdout: float, seed: int) -> tuple:
    """Seeded 80/20-style split of the fault list (original order kept)."""
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(len(faults))
    n_eval = int(round(holdout * len(faults)))
    held = set(perm[:n_eval].tolist())
    return [f for i, f in enumerate(faults) if i not in held], [f for i, f in enumerate(faults) if i in held]


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except Exception as exc:  # noqa: BLE001  (re-raised with the stage name)
        raise ExperimentError(name, exc) from exc


def _fld(tree, located, actual) -> Optional[int]:
    if located is None:
        return None
    seq = preorder(tree)
    if actual not in seq:
        return None
    if located not in seq:
        # the predicted function never ran: farthest possible distance
        return len(seq)
    return abs(seq.index(located) - seq.index(actual))


def select_plan(model: ProgramModel, weights, P: float, mmas: dict, seed: int, fcts: list):
    instance = build_instance(model, weights, P)
    sol = mmas_select(instance, MmasParams(**{"rng_seed": seed, **mmas}))
    _, callstack = color_fcts(fcts, sol.selected)
    return sol, TracePlan(frozenset(sol.selected), callstack)


def build_instance(model, weights, P):
    from afetm.progmodel import build_coverage_instance

    return build_coverage_instance(model, weights, P)


def run_experiment(config: ExperimentConfig, base: Optional[Path] = None, jobs: int = 1) -> CampaignResult:
    cfg = config
    model = _stage("load", load_program_spec, cfg.model_path(base))
    workload = _stage("load", model.workload, cfg.workload)

    # offline phase
    weights = _stage("sample", sample_frequencies, model, workload, cfg.sample_duration, cfg.seed)
    faults = _stage("enumerate", enumerate_fault_points, model, workload)
    if not faults:
        raise ExperimentError("enumerate", FaultError("no activated functions under the workload"))
    train_faults, eval_faults = _split(faults, cfg.holdout, cfg.seed)
    normal = _stage("inject", saturate, model, campaign_requests(model, workload), None, cfg.saturation_k)
    results = _stage("inject", run_faults, model, workload, faults, cfg.saturation_k, jobs)
    by_key = {r.fault.key: r for r in results}
    fddb = _stage("inject", assemble_fddb, model, normal, [by_key[f.key] for f in train_faults])
    db_fcts = list(fddb.normal_fcts) + [t for r in fddb.records for t in r.fcts]
    sol, plan = _stage("select", select_plan, model, weights, cfg.P, cfg.mmas, cfg.seed, db_fcts)
    log.info("selected %d trace points, %d record callstacks", len(plan.traced), len(plan.callstack))

    gcn = gdc = logm = None
    if "afetm" in cfg.methods:
        tc = diagnoser.TrainConfig.from_dict({"seed": cfg.seed, **cfg.gcn})
        gcn = _stage("train", diagnoser.train, fddb, plan, tc)
    if "gdc" in cfg.methods:
        gdc = _stage("index", baselines.GaussianIndex.from_fddb, fddb, plan, seed=cfg.seed)
    if "log" in cfg.methods:
        logm = _stage("log-model", baselines.LogModel.from_fddb, model, fddb)
    normal_full = [normalize(t) for t in fddb.normal_fcts]

    # online phase
    schedule = request_schedule(model, workload, cfg.max_attempts, cfg.seed)
    records, unactivated = [], []
    for split, group in (("train", train_faults), ("holdout", eval_faults)):
        for fault in group:
            run = None
            for i, req in enumerate(schedule):
                cand = run_request(model, req, i, fault)
                if cand.activated:
                    run = cand
                    break
            if run is None:
                unactivated.append(fault.key)
                continue
            truth = normalize(run.tree)
            events = filter_events(run.events, plan)
            records.extend(_stage("diagnose", _diagnose_all, cfg, fault, split, run, truth, events, gcn, gdc, logm,
                                  normal_full))

    prof = tracing_profile(model, workload, cfg.rtgr_requests, cfg.seed)
    t_before, t_after = tracing_cost(model, workload, plan.traced, event_cost=cfg.event_cost, profile=prof)
    _, t_full = tracing_cost(model, workload, model.function_ids, event_cost=cfg.event_cost, profile=prof)
    rates = {"afetm": rtgr(t_before, t_after), "gdc": rtgr(t_before, t_after), "edc": rtgr(t_before, t_full),
             "log": 0.0}
    sweep = {}
    for p in cfg.rtgr_sweep:
        s, _ = select_plan(model, weights, p, cfg.mmas, cfg.seed, [])
        sweep[p] = rtgr(*tracing_cost(model, workload, s.selected, event_cost=cfg.event_cost, profile=prof))
    return CampaignResult(
        records=records,
        rtgr=rates,
        t_before=t_before,
        t_after={"adaptive": t_after, "full": t_full},
        rtgr_by_p=sweep,
        selection={"traced": sorted(plan.traced), "callstack": sorted(plan.callstack),
                   "coverage": sol.coverage_fraction, "weight": sol.total_weight, "fitness": sol.fitness},
        fddb_records=len(fddb.records),
        unactivated=unactivated,
        peak_rss_kb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
        model=model,
        fddb=fddb,
        plan=plan,
    )


def _diagnose_all(cfg, fault, split, run, truth, events, gcn, gdc, logm, normal_full) -> list:
    out = []
    target = fault.target

    def rec(method, detected, located, top3, fdd=None):
        s = fdd or FddSample(0.0, 0.0)
        out.append(ExperimentRecord(fault.key, fault.label, split, method, bool(detected), located,
                                    located == target, top3, _fld(truth, located, target) if detected else None,
                                    s.construction_ms, s.inference_ms))

    def afct_or_none():
        af = build_afct(events)
        return af or None

    if gcn is not None:
        d, fdd = measure_fdd(afct_or_none, lambda af: None if af is None else diagnoser.diagnose(af, gcn))
        if d is None:
            rec("afetm", False, None, False, fdd)
        else:
            rec("afetm", d.detected, d.located, target in d.located_k(3), fdd)
    if gdc is not None:
        d, fdd = measure_fdd(afct_or_none, lambda af: None if af is None else baselines.afct_gdc_diagnose(af, gdc))
        if d is None:
            rec("gdc", False, None, False, fdd)
        else:
            rec("gdc", d.detected, d.located, target in d.located_k(3) if d.detected else False, fdd)
    if "edc" in cfg.methods:
        (err, loc), fdd = measure_fdd(lambda: truth, lambda t: baselines.fct_edc_detect(t, normal_full,
                                                                                          cfg.edc_threshold))
        rec("edc", err, loc, loc == target, fdd)
    if logm is not None:
        (det, fld) = baselines.log_oracle_diagnose(run.tree, logm, target)
        # idealized: a detected error is taken as located
        out.append(ExperimentRecord(fault.key, fault.label, split, "log", det, target if det else None, det, det,
                                    fld))
    return out


# ---------------------------------------------------------------------------
# Reports

REPORT_METRICS = ("EDR", "FLR", "FLR@3", "FLD", "RTGR")


def report_dict(result: CampaignResult, cfg: ExperimentConfig) -> dict:
    methods = {}
    for m in cfg.methods:
        methods[m] = {split: result.metrics(m, split) for split in ("train", "holdout") if result.subset(m, split)}
    return {
        "config": asdict(cfg),
        "methods": methods,
        "selection": result.selection,
        "rtgr_by_p": {f"{p:g}": v for p, v in result.rtgr_by_p.items()},
        "fddb_records": result.fddb_records,
        "unactivated": result.unactivated,
    }


def _num(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else (f"{v:.4f}" if isinstance(v, float) else v)


def write_reports(result: CampaignResult, cfg: ExperimentConfig, out_dir) -> dict:
    """report.json (deterministic), report.csv, timing.json and plots/*.csv."""
    out = Path(out_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    rep = report_dict(result, cfg)
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True, allow_nan=False, default=str)
                                     if _finite(rep) else json.dumps(_nan_to_none(rep), indent=2, sort_keys=True))
    timing = {m: result.timing(m) for m in cfg.methods}
    (out / "timing.json").write_text(json.dumps({"fdd": timing, "peak_rss_kb": result.peak_rss_kb}, indent=2,
                                                sort_keys=True))
    cols = ["method", "EDR", "FLR", "FLR@3", "FLD", "FDD_ms", "RTGR", "holdout_EDR", "holdout_FLR", "holdout_FLR@3"]
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for m in cfg.methods:
            tr = rep["methods"][m].get("train", {})
            ho = rep["methods"][m].get("holdout", {})
            w.writerow([m, *(_num(tr.get(k)) for k in ("EDR", "FLR", "FLR@3", "FLD")),
                        _num(timing[m].get("fdd_ms")), _num(result.rtgr[m]),
                        *(_num(ho.get(k)) for k in ("EDR", "FLR", "FLR@3"))])
    for metric in ("EDR", "FLR", "FLD", "RTGR"):
        with open(out / "plots" / f"{metric.lower()}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", metric])
            for m in cfg.methods:
                w.writerow([m, _num(rep["methods"][m].get("train", {}).get(metric))])
    with open(out / "plots" / "fdd.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "construction_ms", "inference_ms", "fdd_ms"])
        for m in cfg.methods:
            t = timing[m]
            w.writerow([m, _num(t.get("construction_ms")), _num(t.get("inference_ms")), _num(t.get("fdd_ms"))])
    with open(out / "plots" / "rtgr_by_p.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["P", "RTGR"])
        for p, v in result.rtgr_by_p.items():
            w.writerow([f"{p:g}", _num(v)])
    return rep


def _finite(obj) -> bool:
    if isinstance(obj, float):
        return np.isfinite(obj)
    if isinstance(obj, dict):
        return all(_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_finite(v) for v in obj)
    return True


def _nan_to_none(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj
