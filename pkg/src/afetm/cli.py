"""Command-line entry point: ``afetm <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
or malformed input files).  JSON results go to stdout or ``--out``.

Seeding: ``--seed`` (falling back to ``$AFETM_SEED``, then 0) is the single
root seed.  Each component derives its own stream from it: the workload
schedule uses ``(model rng_seed, workload, seed)``, the ant colony uses
``seed``, weight init uses ``seed`` and the holdout split ``(seed, 1)``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from afetm import baselines, diagnoser, harness
from afetm.calltree import (
    CallTreeError,
    TracePlan,
    build_afct,
    color_fcts,
    load_trees,
    preorder_distance,
    read_events,
    tree_edit_distance,
    tree_to_dict,
    write_events,
)
from afetm.injector import FaultSpec, Fddb, enumerate_fault_points, run_campaign, validate_fault
from afetm.progmodel import (
    ProgramSpecError,
    build_coverage_instance,
    load_program_spec,
    run_request,
    sample_frequencies,
)
from afetm.selector import CoverageInstance, MmasParams, brute_force_select, mmas_select

log = logging.getLogger("afetm")


class UsageError(Exception):
    """Bad invocation or unreadable input; exit code 2."""


# ---------------------------------------------------------------------------
# I/O helpers


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None


def _emit(args, obj) -> None:
    text = json.dumps(obj, indent=None if args.json else 2, sort_keys=True) + "\n"
    if getattr(args, "out", None):
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _model(path):
    bundled = harness.BUNDLED / f"{path}.json"
    p = Path(path)
    if not p.exists() and "/" not in str(path) and bundled.exists():
        p = bundled
    if not p.exists():
        raise UsageError(f"no such model file: {path}")
    return load_program_spec(p)


def _trees(path) -> list:
    return load_trees(_read_json(path))


def _plan(path) -> TracePlan:
    d = _read_json(path)
    if "traced" not in d and "selected" in d:
        d = {"traced": d["selected"], "callstack": d.get("callstack", ())}
    return TracePlan.from_dict(d)


def _afct(path):
    """AFCT from a CallTree JSON file (tree or forest) or an NDJSON trace stream."""
    p = Path(path)
    if p.suffix in (".ndjson", ".jsonl"):
        if not p.exists():
            raise UsageError(f"no such file: {p}")
        with open(p) as fh:
            return build_afct(read_events(fh))
    trees = _trees(p)
    return trees[0] if len(trees) == 1 else trees


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("AFETM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"AFETM_SEED must be an integer, got {env!r}") from None


def _apply_overrides(raw: dict, pairs) -> dict:
    """Apply ``--set key=value`` items; dotted keys reach into sections."""
    for item in pairs or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            val = json.loads(val)
        except json.JSONDecodeError:
            pass
        *path, leaf = key.split(".")
        node = raw
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {part!r} is not a section")
        node[leaf] = val
    return raw


# ---------------------------------------------------------------------------
# Subcommands


def cmd_select(args):
    seed = _seed(args)
    if args.p is not None and not 0 < args.p <= 1:
        raise UsageError("--p must lie in (0, 1]; the budget w_ub must be > 0")
    if args.instance:
        inst = CoverageInstance.from_dict(_read_json(args.instance))
        if args.p is not None:
            inst = CoverageInstance(inst.h, inst.w, float(args.p * inst.w.sum()), inst.function_ids, inst.block_ids)
        if inst.w_ub <= 0:
            raise UsageError("w_ub must be > 0")
    else:
        model = _model(args.model)
        w = sample_frequencies(model, args.workload, args.duration, seed)
        inst = build_coverage_instance(model, w, 0.1 if args.p is None else args.p)
    if args.oracle:
        sol = brute_force_select(inst)
    else:
        sol = mmas_select(inst, MmasParams(n_ant=args.n_ant, n_run=args.n_run, rng_seed=seed))
    out = sol.to_dict()
    if args.fddb:
        fddb = Fddb.load(args.fddb)
        _, callstack = color_fcts(list(fddb.normal_fcts) + [t for r in fddb.records for t in r.fcts], sol.selected)
        out["traced"] = sol.selected
        out["callstack"] = sorted(callstack)
    _emit(args, out)


def cmd_inject(args):
    model = _model(args.model)
    if args.faults:
        faults = [FaultSpec.from_dict(d) for d in _read_json(args.faults)]
        for f in faults:
            validate_fault(model, f)
    else:
        faults = enumerate_fault_points(model, args.workload)
    fddb = run_campaign(model, args.workload, faults, args.saturation, args.jobs)
    if args.out:
        fddb.save(args.out)
    summary = {"records": len(fddb.records), "normal": len(fddb.normal_fcts),
               "unactivated": [f.key for f in fddb.unactivated], "faults": len(faults)}
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


def cmd_train(args):
    fddb = Fddb.load(args.fddb)
    plan = _plan(args.plan)
    opts = {"seed": _seed(args)}
    for key in ("layers", "hidden", "lr", "epochs", "tol", "optimizer"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    model = diagnoser.train(fddb, plan, diagnoser.TrainConfig.from_dict(opts))
    model.save(args.out)
    sys.stdout.write(json.dumps({"labels": len(model.labels), "final_loss": model.final_loss,
                                 "epochs": model.epochs_run}, sort_keys=True) + "\n")


def cmd_diagnose(args):
    model = diagnoser.GcnModel.load(args.model)
    afct = _afct(args.afct)
    if not afct:
        raise UsageError("empty AFCT")
    _emit(args, diagnoser.diagnose(afct, model).to_dict(args.topk))


def cmd_baseline(args):
    if args.method == "gdc":
        if not (args.fddb and args.afct):
            raise UsageError("baseline gdc needs --fddb and --afct")
        fddb = Fddb.load(args.fddb)
        if args.plan:
            plan = _plan(args.plan)
        else:
            # no plan: everything traced
            plan = TracePlan(diagnoser.catalog_of(fddb))
        index = baselines.GaussianIndex.from_fddb(fddb, plan, seed=_seed(args))
        afct = _afct(args.afct)
        d = baselines.afct_gdc_diagnose(afct, index)
        out = d.to_dict(args.topk)
        out["sigma"] = index.sigma
    elif args.method == "edc":
        if not (args.normal and args.fct):
            raise UsageError("baseline edc needs --normal and --fct")
        normal = _trees(args.normal)
        (fct,) = _trees(args.fct)[:1]
        err, loc = baselines.fct_edc_detect(fct, normal, args.threshold)
        out = {"detected": err, "located": loc}
    else:
        if not (args.model and args.fddb):
            raise UsageError("baseline log needs --model and --fddb")
        lm = baselines.LogModel.from_fddb(_model(args.model), Fddb.load(args.fddb))
        out = {"loggers": list(lm.loggers), "reachable": lm.reachable,
               "detectable": sum(lm.reachable.values()), "records": len(lm.reachable)}
        if args.fct:
            if not args.target:
                raise UsageError("--fct needs --target")
            (fct,) = _trees(args.fct)[:1]
            det, fld = baselines.log_oracle_diagnose(fct, lm, args.target)
            out.update({"detected": det, "fld": fld})
    _emit(args, out)


def cmd_evaluate(args):
    if args.config:
        raw = _read_json(args.config)
        base = Path(args.config).resolve().parent
    else:
        raw = _read_json(harness.BUNDLED / "webshop_config.json")
        base = None
    _apply_overrides(raw, args.set)
    if args.seed is not None or os.environ.get("AFETM_SEED") is not None:
        raw["seed"] = _seed(args)
    try:
        cfg = harness.ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    if not cfg.model_path(base).exists():
        raise UsageError(f"no such model file: {cfg.model_path(base)}")
    res = harness.run_experiment(cfg, base, jobs=args.jobs)
    rep = harness.write_reports(res, cfg, args.out_dir)
    rows = {m: v.get("train", {}) for m, v in rep["methods"].items()}
    if args.json:
        sys.stdout.write(json.dumps(rep, sort_keys=True, default=str) + "\n")
        return
    print(f"{'method':8s} {'EDR':>7s} {'FLR':>7s} {'FLR@3':>7s} {'FLD':>7s} {'RTGR':>7s}")
    for m, r in rows.items():
        print(f"{m:8s} " + " ".join(f"{r.get(k, float('nan')):7.2f}" for k in harness.REPORT_METRICS))
    print(f"reports written to {args.out_dir}")


def cmd_color(args):
    fcts = _trees(args.fcts)
    traced = _read_json(args.traced)
    if isinstance(traced, dict):
        traced = traced.get("traced", traced.get("selected", []))
    colored, callstack = color_fcts(fcts, traced)
    _emit(args, {"colored": [tree_to_dict(t) for t in colored], "callstack": sorted(callstack)})


def cmd_build_afct(args):
    p = Path(args.events)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    with open(p) as fh:
        roots = build_afct(read_events(fh))
    _emit(args, [tree_to_dict(t) for t in roots])


def cmd_ted(args):
    a = _trees(args.a)
    b = _trees(args.b)
    _emit(args, {"distance": tree_edit_distance(a if len(a) > 1 else a[0], b if len(b) > 1 else b[0])})


def cmd_fld(args):
    (tree,) = _trees(args.tree)[:1]
    _emit(args, {"fld": preorder_distance(tree, args.located, args.actual)})


def cmd_execute(args):
    model = _model(args.model)
    fault = FaultSpec.from_dict(_read_json(args.fault)) if args.fault else None
    if fault is not None:
        validate_fault(model, fault)
    if args.request not in model.request_types:
        raise UsageError(f"unknown request type {args.request!r}; choose from {model.request_types}")
    run = run_request(model, args.request, _seed(args), fault)
    if args.events:
        Path(args.events).write_text(write_events(run.events))
    _emit(args, {"outcome": run.outcome, "activated": run.activated, "cost": run.cost,
                 "fct": tree_to_dict(run.tree)})


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed; falls back to $AFETM_SEED, then 0")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes for campaigns")
    common.add_argument("--json", action="store_true", help="compact machine-readable JSON on stdout")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    ap = argparse.ArgumentParser(prog="afetm", description="Adaptive function-level tracing and fault diagnosis.",
                                 parents=[common], formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help, description=help, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("select", cmd_select, "choose trace points with the ant colony solver")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--instance", help="coverage instance JSON")
    src.add_argument("--model", help="program model JSON or bundled model name")
    p.add_argument("--workload", default="default", help="workload id (with --model)")
    p.add_argument("--p", type=float, default=None,
                   help="budget fraction P; w_ub = P * sum(w) (default: instance w_ub, or 0.1 with --model)")
    p.add_argument("--duration", type=float, default=10.0, help="sampling window in simulated seconds")
    p.add_argument("--n-ant", type=int, default=20)
    p.add_argument("--n-run", type=int, default=200)
    p.add_argument("--oracle", action="store_true", help="exhaustive search instead (m <= 24)")
    p.add_argument("--fddb", help="also derive the callstack set from this FDDB's trees")
    p.add_argument("--out", help="output file (default: stdout)")

    p = add("inject", cmd_inject, "run a fault-injection campaign and write an FDDB")
    p.add_argument("--model", required=True)
    p.add_argument("--workload", default="default")
    p.add_argument("--faults", help="JSON list of fault specs (default: enumerate all fault points)")
    p.add_argument("--saturation", type=int, default=3, help="quiet runs before a request type is saturated")
    p.add_argument("--out", required=True, help="FDDB output path")

    p = add("train", cmd_train, "train the GCN diagnoser on an FDDB")
    p.add_argument("--fddb", required=True)
    p.add_argument("--plan", required=True, help="trace plan JSON ({traced, callstack}) or select output")
    p.add_argument("--out", required=True, help="model output path")
    d = diagnoser.TrainConfig()
    p.add_argument("--layers", type=int, help=f"GCN depth (default {d.layers})")
    p.add_argument("--hidden", type=int, help=f"hidden width (default {d.hidden})")
    p.add_argument("--lr", type=float, help=f"learning rate (default {d.lr})")
    p.add_argument("--epochs", type=int, help=f"max epochs (default {d.epochs})")
    p.add_argument("--tol", type=float, help=f"early-stop loss (default {d.tol})")
    p.add_argument("--optimizer", choices=("gd", "adam"), help=f"(default {d.optimizer})")

    p = add("diagnose", cmd_diagnose, "rank (function, fault) labels for one AFCT")
    p.add_argument("--model", required=True)
    p.add_argument("--afct", required=True, help="CallTree JSON, or .ndjson trace stream")
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--out")

    p = add("baseline", cmd_baseline, "run a comparison method")
    p.add_argument("method", choices=("gdc", "edc", "log"))
    p.add_argument("--fddb")
    p.add_argument("--plan", help="gdc: trace plan used for masking (default: full tracing)")
    p.add_argument("--afct", help="gdc: CallTree JSON or .ndjson trace stream")
    p.add_argument("--normal", help="edc: normal FCT list")
    p.add_argument("--fct", help="edc/log: fully traced FCT")
    p.add_argument("--threshold", type=float, default=0.0, help="edc: distance above which an error is declared")
    p.add_argument("--model", help="log: program model (declares loggers)")
    p.add_argument("--target", help="log: injected function")
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--out")

    for name in ("evaluate", "pipeline"):
        p = add(name, cmd_evaluate, "run the full offline/online experiment and write reports")
        p.add_argument("--config", help="experiment config JSON (default: bundled webshop config)")
        p.add_argument("--out-dir", default="results", help="directory for report.* and plots/")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")

    tools = add("tools", None, "single pipeline steps for scripting")
    tsub = tools.add_subparsers(dest="tool", required=True, metavar="TOOL")

    def tool(name, fn, help):
        t = tsub.add_parser(name, parents=[common], help=help, description=help, formatter_class=fmt)
        t.set_defaults(func=fn)
        t.add_argument("--out")
        return t

    t = tool("color", cmd_color, "color FCTs and compute the callstack set")
    t.add_argument("--fcts", required=True)
    t.add_argument("--traced", required=True, help="JSON list of traced functions or a plan")
    t = tool("build-afct", cmd_build_afct, "rebuild the AFCT from a trace stream")
    t.add_argument("--events", required=True)
    t = tool("ted", cmd_ted, "tree edit distance of two CallTree files")
    t.add_argument("a")
    t.add_argument("b")
    t = tool("fld", cmd_fld, "preorder distance between two functions of a tree")
    t.add_argument("--tree", required=True)
    t.add_argument("--located", required=True)
    t.add_argument("--actual", required=True)
    t = tool("execute", cmd_execute, "simulate one request; print its FCT")
    t.add_argument("--model", required=True)
    t.add_argument("--request", required=True)
    t.add_argument("--fault", help="fault spec JSON")
    t.add_argument("--events", help="also write the full trace stream here (NDJSON)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(None if argv is None else [str(a) for a in argv])
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"afetm: error: {exc}", file=sys.stderr)
        return 2
    except (ProgramSpecError, CallTreeError, KeyError, ValueError) as exc:
        # bad input content rather than a failed run
        msg = f"missing key {exc}" if isinstance(exc, KeyError) else exc
        print(f"afetm: error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"afetm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
