import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afetm.calltree import TracePlan, build_afct, equivalent, normalize, tree_from_dict, tree_to_dict
from afetm.progmodel import (
    ProgramSpecError,
    build_coverage_instance,
    execute_request,
    load_program_spec,
    model_from_dict,
    random_model,
    request_schedule,
    sample_frequencies,
)

from conftest import chain_model

GOLDEN = Path(__file__).parent / "golden"


def test_minimal_spec(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"entry": "main", "functions": [{"id": "main", "blocks": [{"label": 0}]}]}))
    m = load_program_spec(p)
    assert len(m.functions) == 1


def test_undefined_callee_is_named():
    spec = {"entry": "main", "functions": [{"id": "main", "blocks": [{"label": 0, "calls": ["ghost"]}]}]}
    with pytest.raises(ProgramSpecError, match="ghost"):
        model_from_dict(spec)


def test_parse_error_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"entry": "main",\n  "functions": [}')
    with pytest.raises(ProgramSpecError, match=r"bad.json:2:"):
        load_program_spec(p)


def test_unknown_field_rejected():
    with pytest.raises(ProgramSpecError, match="colour"):
        model_from_dict({"entry": "a", "colour": 1, "functions": [{"id": "a", "blocks": [{"label": 0}]}]})


def test_unbounded_recursion_rejected():
    spec = {"entry": "a", "functions": [{"id": "a", "blocks": [{"label": 0, "calls": ["a"]}]}]}
    with pytest.raises(ProgramSpecError, match="a"):
        model_from_dict(spec)


def test_webshop_has_50_functions(webshop):
    assert len(webshop.functions) == 50
    assert len(webshop.request_types) == 4


def test_two_function_chain():
    m = chain_model("A", "B")
    tree, events = execute_request(m, "r", 0)
    assert tree_to_dict(tree)["children"][0]["fn"] == "B"
    assert [(e.fn, e.caller, e.stack) for e in events] == [("A", None, ("A",)), ("B", "A", ("A", "B"))]


def test_execution_is_deterministic(webshop):
    a = execute_request(webshop, "buy", 7)
    b = execute_request(webshop, "buy", 7)
    assert tree_to_dict(a[0]) == tree_to_dict(b[0]) and a[1] == b[1]


def test_buy_seed7_golden(webshop):
    tree, _ = execute_request(webshop, "buy", 7)
    assert tree.depth() >= 3
    golden = tree_from_dict(json.loads((GOLDEN / "webshop_buy_seed7.json").read_text()))
    assert equivalent(tree, golden, ordered=True)


def test_entry_frequency():
    m = chain_model("A", "B")
    w = sample_frequencies(m, "w", 10.0)
    assert w[0] == pytest.approx(10.0)


def test_unreachable_function_has_zero_weight():
    m = model_from_dict({"entry": "a", "functions": [{"id": "a", "blocks": [{"label": 0}]},
                                                      {"id": "z", "blocks": [{"label": 0}]}],
                         "workloads": [{"id": "w", "mix": {"r": 1}, "rate": 5}]})
    assert sample_frequencies(m, "w", 2.0)[1] == 0.0


def test_webshop_frequencies_golden(webshop):
    w = sample_frequencies(webshop, "default", 10.0, 0)
    ref = np.array(json.loads((GOLDEN / "webshop_freq.json").read_text()))
    np.testing.assert_allclose(w, ref, rtol=0, atol=1e-9)


def test_unknown_workload(webshop):
    with pytest.raises(KeyError):
        sample_frequencies(webshop, "nope", 1.0)


def test_fig2_style_coverage():
    # fun2 called in blocks C and H
    spec = {"entry": "main", "functions": [
        {"id": "main", "blocks": [
            {"label": 0, "succ": [1, 2], "calls": []},
            {"label": 1, "succ": [3], "calls": ["fun2"]},
            {"label": 2, "succ": [3], "calls": ["fun1"]},
            {"label": 3, "succ": [], "calls": ["fun2"]},
        ]},
        {"id": "fun1", "blocks": [{"label": 0}]},
        {"id": "fun2", "blocks": [{"label": 0}]},
        {"id": "lonely", "blocks": [{"label": 0}]},
    ]}
    m = model_from_dict(spec)
    inst = build_coverage_instance(m, np.ones(4), 1.0)
    col = inst.function_ids.index("fun2")
    assert inst.block_ids[1] == "main:1" and inst.block_ids[3] == "main:3"
    assert inst.h[1, col] == 1 and inst.h[3, col] == 1 and inst.h[:, col].sum() == 2
    assert inst.h[:, inst.function_ids.index("lonely")].sum() == 0
    assert inst.w_ub == pytest.approx(4.0)


def test_every_reachable_function_is_called_somewhere(webshop):
    inst = build_coverage_instance(webshop, np.ones(50), 1.0)
    for j, fid in enumerate(inst.function_ids):
        if fid != webshop.entry:
            assert inst.h[:, j].sum() >= 1, fid


def test_schedule_follows_mix(webshop):
    reqs = request_schedule(webshop, webshop.workload("default"), 4000, 0)
    share = reqs.count("browse") / len(reqs)
    assert abs(share - 0.4) < 0.03


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_full_trace_rebuilds_the_fct(seed):
    m = random_model(seed, n_functions=12)
    tree, events = execute_request(m, "r0", seed)
    afct = build_afct(events)
    assert len(afct) == 1
    assert equivalent(afct[0], normalize(tree), ordered=True)
