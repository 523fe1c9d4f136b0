import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afetm.calltree import (
    BLUE,
    RED,
    WHITE,
    CallNode,
    CallTreeError,
    TraceEvent,
    TracePlan,
    build_afct,
    canonical_form,
    color_fcts,
    decode_canonical,
    equivalent,
    filter_events,
    from_sexpr,
    mask_red,
    masked,
    normalize,
    preorder_distance,
    read_events,
    to_sexpr,
    tree_edit_distance,
    tree_from_dict,
    tree_to_dict,
    write_events,
)
from afetm.progmodel import execute_request, random_model

from oracles import all_trees, forest_distance, to_node

EXAMPLE = "main(A(B(C(D)),E))"


def colors(tree):
    return {n.fn: n.color for n in tree.iter()}


def test_coloring_example():
    (t,), cs = color_fcts([from_sexpr(EXAMPLE)], {"A", "C", "D"})
    assert colors(t) == {"main": BLUE, "A": WHITE, "B": BLUE, "C": WHITE, "D": WHITE, "E": RED}
    assert cs == {"A", "C"}


def test_coloring_extremes():
    t = from_sexpr(EXAMPLE)
    (all_w,), cs = color_fcts([t], {n.fn for n in t.iter()})
    assert set(colors(all_w).values()) == {WHITE} and cs == frozenset()
    (all_r,), cs = color_fcts([t], set())
    assert set(colors(all_r).values()) == {RED} and cs == frozenset()
    assert mask_red(all_r) is None


def test_coloring_leaves_input_uncolored():
    t = from_sexpr(EXAMPLE)
    color_fcts([t], {"A"})
    assert all(n.color == "none" for n in t.iter())


def test_mask_example():
    (t,), _ = color_fcts([from_sexpr(EXAMPLE)], {"A", "C", "D"})
    assert to_sexpr(mask_red(t)) == "main(A(B(C(D))))"
    (w,), _ = color_fcts([from_sexpr(EXAMPLE)], set("mainABCDE") | {"main"})
    assert to_sexpr(mask_red(w)) == EXAMPLE


def test_mask_needs_colors():
    with pytest.raises(CallTreeError):
        mask_red(from_sexpr("a(b)"))


def test_afct_example():
    evs = [TraceEvent("A", "main", ("main", "A"), 1), TraceEvent("C", "B", ("main", "A", "B", "C"), 2),
           TraceEvent("D", "C", None, 3)]
    (t,) = build_afct(evs)
    assert to_sexpr(t) == "main(A(B(C(D))))"
    assert [n.placeholder for n in t.iter()] == [True, False, True, False, False]


def test_afct_full_tracking_chain():
    evs = [TraceEvent("A", None, ("A",), 0), TraceEvent("B", "A", ("A", "B"), 1)]
    assert [to_sexpr(t) for t in build_afct(evs)] == ["A(B)"]


def test_afct_empty():
    assert build_afct([]) == []


def test_afct_without_callstacks_gives_a_forest():
    evs = [TraceEvent("A", "main", None, 0), TraceEvent("C", "B", None, 1)]
    assert sorted(to_sexpr(t) for t in build_afct(evs)) == ["B(C)", "main(A)"]


def test_afct_bad_callstack():
    with pytest.raises(CallTreeError, match="seq=4"):
        build_afct([TraceEvent("C", "B", ("main", "X", "C"), 4)])
    with pytest.raises(CallTreeError, match="seq=2"):
        build_afct([TraceEvent("C", "B", ("main", "B", "D"), 2)])


def test_afct_out_of_order():
    with pytest.raises(CallTreeError):
        build_afct([TraceEvent("A", None, None, 3), TraceEvent("B", "A", None, 2)])


def test_recursion_guard_folds():
    # A -> B -> A: the second A folds into the first
    evs = [TraceEvent("A", None, None, 0), TraceEvent("B", "A", None, 1), TraceEvent("A", "B", None, 2),
           TraceEvent("C", "A", None, 3)]
    (t,) = build_afct(evs)
    assert to_sexpr(t) == "A(B,C)"


def test_ted_examples():
    assert tree_edit_distance(from_sexpr(EXAMPLE), from_sexpr(EXAMPLE)) == 0
    assert tree_edit_distance(from_sexpr("a"), from_sexpr("b")) == 1
    assert tree_edit_distance(from_sexpr("A(B,C)"), from_sexpr("A(B)")) == 1
    assert tree_edit_distance(None, from_sexpr("A(B)")) == 2


def test_ted_matches_oracle_sample():
    trees = all_trees(4)
    rng = np.random.default_rng(0)
    for i, j in rng.integers(0, len(trees), size=(3000, 2)):
        a, b = trees[i], trees[j]
        assert tree_edit_distance(to_node(a), to_node(b)) == forest_distance((a,), (b,))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_ted_metric(seed):
    trees = all_trees(4)
    rng = np.random.default_rng(seed)
    a, b, c = (to_node(trees[i]) for i in rng.integers(0, len(trees), 3))
    dab, dba = tree_edit_distance(a, b), tree_edit_distance(b, a)
    assert dab == dba
    assert tree_edit_distance(a, c) <= dab + tree_edit_distance(b, c)
    assert (dab == 0) == equivalent(a, b, ordered=True, with_color=False)


def test_preorder_distance():
    t = from_sexpr("main(A(B(C(D))))")
    assert preorder_distance(t, "B", "D") == 2
    assert preorder_distance(t, "C", "C") == 0
    with pytest.raises(CallTreeError):
        preorder_distance(t, "Z", "A")


def test_canonical_form():
    a, b = from_sexpr("a(b,c(d))"), from_sexpr("a(b,c(d))")
    assert canonical_form(a) == canonical_form(b)
    assert canonical_form(a) != canonical_form(from_sexpr("a(b,c(e))"))
    assert canonical_form(a) != canonical_form(from_sexpr("a(c(d),b)"))
    assert equivalent(decode_canonical(canonical_form(a)), a, ordered=True)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(all_trees(4)))
def test_codecs_roundtrip(t):
    node = to_node(t)
    assert equivalent(decode_canonical(canonical_form(node)), node, ordered=True)
    assert equivalent(tree_from_dict(json.loads(json.dumps(tree_to_dict(node)))), node, ordered=True)
    assert equivalent(from_sexpr(to_sexpr(node)), node, ordered=True)


def test_event_stream_roundtrip():
    evs = [TraceEvent("A", None, ("A",), 0), TraceEvent("B", "A", None, 1)]
    assert read_events(write_events(evs).splitlines()) == evs
    with pytest.raises(CallTreeError, match="line 1"):
        read_events(["{not json"])


def test_plan_invariant():
    with pytest.raises(CallTreeError):
        TracePlan({"a"}, {"b"})


def test_normalize_merges_and_folds():
    t = from_sexpr("a(b(c),b(d),a(e))")
    assert to_sexpr(normalize(t, fold=False)) == "a(b(c,d),a(e))"
    assert to_sexpr(normalize(t)) == "a(b(c,d),e)"


def _random_case(seed):
    rng = np.random.default_rng([11, seed])
    m = random_model(rng, int(rng.integers(2, 16)))
    tree, events = execute_request(m, "r0", int(rng.integers(0, 50)))
    full = normalize(tree, fold=False)
    fns = sorted({n.fn for n in full.iter()})
    traced = [f for f in fns if rng.random() < 0.5]
    _, cs = color_fcts([full], traced)
    return full, events, TracePlan(frozenset(traced), cs)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**6))
def test_color_soundness(seed):
    full, _, plan = _random_case(seed)
    (t,), _ = color_fcts([full], plan.traced)

    def has_white_below(n):
        return any(c.color == WHITE or has_white_below(c) for c in n.children)

    for n in t.iter():
        if n.color == RED:
            assert not has_white_below(n)
        elif n.color == BLUE:
            assert has_white_below(n)
        else:
            assert n.color == WHITE and n.fn in plan.traced


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**6))
def test_afct_equals_masked_fct(seed):
    full, events, plan = _random_case(seed)
    gt = masked(full, plan)
    af = build_afct(filter_events(events, plan))
    assert equivalent(gt, af)
    if gt is not None:
        # same node set: white plus blue
        (col,), _ = color_fcts([full], plan.traced)
        assert {n.fn for n in col.iter() if n.color != RED} == {n.fn for r in af for n in r.iter()}
