"""Filling the fault diagnosis database.

Every activated function gets an instruction-pointer skip, a crash, a hang,
one input corruption per parameter and one output corruption per returned
value.  Each fault is re-run over request types and seeds until three runs in
a row add no new call tree.  The distinct trees per (function, kind) label
make up the database that both the GCN and the Gaussian baseline learn from.
"""

import time
from collections import Counter

from afetm.harness import BUNDLED
from afetm.injector import enumerate_fault_points, run_campaign
from afetm.progmodel import load_program_spec

model = load_program_spec(BUNDLED / "webshop.json")
faults = enumerate_fault_points(model, "default")
print(f"{len(faults)} fault points:", dict(Counter(f.kind for f in faults)))

t0 = time.perf_counter()
fddb = run_campaign(model, "default", faults, saturation_k=3)
print(f"campaign took {time.perf_counter() - t0:.1f} s")
print(f"{len(fddb.records)} labels, {len(fddb.normal_fcts)} fault-free trees, "
      f"{len(fddb.unactivated)} faults never activated")

sizes = sorted(((len(r.fcts), r.label) for r in fddb.records), reverse=True)
print("labels with the most distinct trees:", sizes[:5])
fddb.save("webshop_fddb.json")
print("saved to webshop_fddb.json")
