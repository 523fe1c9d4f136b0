"""Picking trace points under a tracing budget.

Tracing every function of a busy service is expensive, because the hot helpers
run thousands of times per second.  Here we sample call frequencies of the
bundled web shop, then ask the ant colony solver for the set of functions
that covers the most call sites while its total frequency stays within a
budget of P times the overall call rate.
"""

import numpy as np

from afetm.harness import BUNDLED
from afetm.progmodel import build_coverage_instance, load_program_spec, sample_frequencies
from afetm.selector import MmasParams, mmas_select

model = load_program_spec(BUNDLED / "webshop.json")
weights = sample_frequencies(model, "default", duration=10.0, seed=0)

order = np.argsort(-weights)
print("busiest functions (calls/s):")
for j in order[:6]:
    print(f"  {model.function_ids[j]:14s} {weights[j]:9.1f}")
share = weights[order[:4]].sum() / weights.sum()
print(f"the top four account for {share:.1%} of all calls\n")

for p in (0.1, 0.3, 1.0):
    inst = build_coverage_instance(model, weights, p)
    sol = mmas_select(inst, MmasParams(rng_seed=0))
    print(f"P = {p:.0%}: {len(sol.selected):2d} functions traced, "
          f"{sol.coverage_fraction:.1%} of call sites covered, fitness {sol.fitness:.4f}")

# at 10% the hot helpers are left out and almost everything else is traced
inst = build_coverage_instance(model, weights, 0.1)
left_out = sorted(set(model.function_ids) - set(mmas_select(inst).selected))
print("\nuntraced at P = 10%:", ", ".join(left_out))
