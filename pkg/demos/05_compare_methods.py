"""The whole experiment in one call, and how the four methods compare.

``run_experiment`` builds the database from 80% of the fault points, selects
trace points at P = 10%, trains the GCN and then diagnoses one faulty request
per fault point with every method.  Expect a couple of minutes on one core.

    afetm  GCN on the rebuilt partial tree
    gdc    nearest database tree by Gaussian influence, same partial tree
    edc    edit distance of the fully traced tree to the fault-free trees
    log    an ideal log reader: detects a fault when a logger runs after it
"""

from afetm import harness

cfg = harness.ExperimentConfig.load(harness.BUNDLED / "webshop_config.json")
result = harness.run_experiment(cfg)
report = harness.write_reports(result, cfg, "results")

print(f"{'method':8s} {'EDR':>7s} {'FLR':>7s} {'FLR@3':>7s} {'FLD':>7s} {'RTGR':>7s}   held-out FLR@3")
for m in cfg.methods:
    r = report["methods"][m]["train"]
    held = report["methods"][m].get("holdout", {}).get("FLR@3", float("nan"))
    print(f"{m:8s} " + " ".join(f"{r[k]:7.2f}" for k in harness.REPORT_METRICS) + f"   {held:7.2f}")

print("\nmean diagnosis delay (ms):")
for m in cfg.methods:
    t = result.timing(m)
    print(f"  {m:6s} build {t['construction_ms']:.2f} + infer {t['inference_ms']:.2f} = {t['fdd_ms']:.2f}")
print("\nresponse time growth by budget:", report["rtgr_by_p"])
print("reports in ./results")
