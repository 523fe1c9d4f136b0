"""Training the diagnoser and asking it about one faulty request.

The database trees are colored with the trace plan and their red parts are
dropped, so the model trains on what the adaptive tracer can actually see.
At run time a faulty request is traced with the same plan, its approximate
tree is rebuilt and the model ranks (function, fault) labels.

Run 03_fault_campaign.py first; it writes webshop_fddb.json.
"""

from pathlib import Path

from afetm.calltree import TracePlan, build_afct, color_fcts, filter_events
from afetm.diagnoser import TrainConfig, diagnose, train
from afetm.harness import BUNDLED
from afetm.injector import Fddb, FaultSpec
from afetm.progmodel import build_coverage_instance, load_program_spec, run_request, sample_frequencies
from afetm.selector import mmas_select

if not Path("webshop_fddb.json").exists():
    raise SystemExit("run 03_fault_campaign.py first")
model = load_program_spec(BUNDLED / "webshop.json")
fddb = Fddb.load("webshop_fddb.json")

weights = sample_frequencies(model, "default")
sol = mmas_select(build_coverage_instance(model, weights, 0.1))
_, callstack = color_fcts(list(fddb.normal_fcts) + [t for r in fddb.records for t in r.fcts], sol.selected)
plan = TracePlan(sol.selected, callstack)

# plain gradient descent stalls on this data set; Adam does not
gcn = train(fddb, plan, TrainConfig(optimizer="adam", lr=0.03, epochs=1000))
print(f"trained {gcn.epochs_run} epochs, final loss {gcn.final_loss:.4f}")

fault = FaultSpec("output_corruption", "price_lookup", site="return", bit_index=0)
for seed in range(20):
    run = run_request(model, "buy", seed, fault)
    if run.activated:
        break
afct = build_afct(filter_events(run.events, plan))
d = diagnose(afct, gcn)
print(f"injected {fault.label}; outcome {run.outcome}")
for label, p in d.topk(3):
    print(f"  {label:32s} {p:.3f}")
print("error detected:", d.detected, "| located function:", d.located)
