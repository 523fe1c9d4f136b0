"""From a partial trace back to a call tree.

A request's full call tree is known only to the simulator.  With a subset of
functions traced, the trace stream still lets us rebuild an approximate tree:
untraced callers of traced functions show up as placeholder nodes, and a few
traced functions also record their call stack so that fragments can be
stitched together.  Coloring the full tree tells us which functions need that
call stack; removing its red (invisible) part gives exactly what the rebuild
should produce.
"""

from afetm.calltree import (
    TracePlan,
    build_afct,
    color_fcts,
    equivalent,
    filter_events,
    from_sexpr,
    mask_red,
    masked,
    normalize,
    to_sexpr,
)
from afetm.harness import BUNDLED
from afetm.progmodel import execute_request, load_program_spec

# a hand-sized example first
fct = from_sexpr("main(A(B(C(D)),E))")
(colored,), callstack = color_fcts([fct], {"A", "C", "D"})
print("colors:", {n.fn: n.color for n in colored.iter()})
print("functions that must record their call stack:", sorted(callstack))
print("masked tree:", to_sexpr(mask_red(colored)))

# now a real request of the web shop with a sparse plan
model = load_program_spec(BUNDLED / "webshop.json")
tree, events = execute_request(model, "cart", seed=3)
full = normalize(tree, fold=False)
traced = {"serve", "h_cart", "add_item", "db_query", "render_json", "write_socket"}
_, callstack = color_fcts([full], traced)
plan = TracePlan(traced, callstack)

kept = filter_events(events, plan)
print(f"\ncart request: {len(events)} calls, {len(kept)} traced events")
afct = build_afct(kept)
for root in afct:
    print("rebuilt:", to_sexpr(root))
print("matches the masked ground truth:", equivalent(masked(full, plan), afct))
