import numpy as np
import pytest

from afetm.calltree import canonical_form, preorder, to_sexpr
from afetm.injector import (
    FaultError,
    FaultSpec,
    Fddb,
    activated_functions,
    apply_fault,
    enumerate_fault_points,
    run_campaign,
    run_faults,
    saturate,
)
from afetm.progmodel import execute_request, model_from_dict

from conftest import chain_model


def test_enumeration_counts_one_function():
    m = model_from_dict({"entry": "f", "functions": [{"id": "f", "params": 2, "blocks": [{"label": 0}]}],
                         "workloads": [{"id": "w", "mix": {"r": 1}, "rate": 1}]})
    specs = enumerate_fault_points(m, "w")
    assert len(specs) == 6
    assert sorted(s.kind for s in specs) == sorted(["IP+N", "crash", "deadlock", "input_corruption",
                                                    "input_corruption", "output_corruption"])


def test_unreached_function_gets_no_faults():
    m = model_from_dict({"entry": "a", "functions": [{"id": "a", "blocks": [{"label": 0}]},
                                                      {"id": "z", "params": 3, "blocks": [{"label": 0}]}],
                         "workloads": [{"id": "w", "mix": {"r": 1}, "rate": 1}]})
    assert {s.target for s in enumerate_fault_points(m, "w")} == {"a"}


def test_webshop_enumeration_count(webshop):
    act = activated_functions(webshop, "default")
    expect = sum(3 + webshop.function(f).params + webshop.function(f).returns for f in act)
    assert len(enumerate_fault_points(webshop, "default")) == expect


def test_crash_at_entry_function():
    m = chain_model("A", "B", "C")
    run = apply_fault(m, FaultSpec("crash", "A"))("r", 0)
    assert to_sexpr(run.tree) == "A" and run.outcome == "crashed"


def test_deadlock_in_leaf():
    m = chain_model("A", "B", "C")
    run = apply_fault(m, FaultSpec("deadlock", "C"))("r", 0)
    assert to_sexpr(run.tree) == "A(B(C))" and run.outcome == "hang"


def test_ip_skips_a_call():
    m = chain_model("A", "B", "C")
    run = apply_fault(m, FaultSpec("IP+N", "B", n=1))("r", 0)
    assert to_sexpr(run.tree) == "A(B)"


def test_input_corruption_changes_the_tree(webshop):
    fault = FaultSpec("input_corruption", "h_buy", param_index=0, bit_index=0)
    changed = False
    for seed in range(8):
        clean, _ = execute_request(webshop, "buy", seed)
        run = apply_fault(webshop, fault)("buy", seed)
        if run.activated and canonical_form(run.tree) != canonical_form(clean):
            changed = True
    assert changed


def test_invalid_faults(webshop):
    with pytest.raises(FaultError):
        apply_fault(webshop, FaultSpec("meltdown", "serve"))
    with pytest.raises(FaultError):
        apply_fault(webshop, FaultSpec("input_corruption", "serve", param_index=99))
    with pytest.raises(FaultError):
        apply_fault(webshop, FaultSpec("crash", "serve", param_index=0))
    with pytest.raises(FaultError):
        apply_fault(webshop, FaultSpec("crash", "nobody"))
    with pytest.raises(FaultError):
        apply_fault(webshop, FaultSpec("output_corruption", "serve", "return", bit_index=64))


def test_truncating_faults_are_prefixes(webshop):
    for kind in ("crash", "deadlock"):
        for target in ("h_buy", "charge_card", "db_query"):
            for seed in range(4):
                clean, _ = execute_request(webshop, "buy", seed)
                run = apply_fault(webshop, FaultSpec(kind, target))("buy", seed)
                seq = preorder(run.tree)
                assert preorder(clean)[: len(seq)] == seq


def test_permanence():
    # every activation of the target misbehaves: B is called twice, both skip C
    m = model_from_dict({"entry": "A", "functions": [
        {"id": "A", "blocks": [{"label": 0, "calls": ["B", "B"]}]},
        {"id": "B", "blocks": [{"label": 0, "calls": ["C"]}]},
        {"id": "C", "blocks": [{"label": 0}]}], "workloads": [{"id": "w", "mix": {"r": 1}, "rate": 1}]})
    run = apply_fault(m, FaultSpec("IP+N", "B"))("r", 0)
    assert to_sexpr(run.tree) == "A(B,B)"


def test_single_path_saturation():
    m = chain_model("A", "B")
    res = saturate(m, ["r"], FaultSpec("crash", "B"), 3)
    assert len(res.fcts) == 1 and res.executions == 4


def test_unactivated_fault_flagged():
    m = model_from_dict({"entry": "a", "functions": [{"id": "a", "blocks": [{"label": 0}]},
                                                      {"id": "z", "blocks": [{"label": 0}]}],
                         "workloads": [{"id": "w", "mix": {"r": 1}, "rate": 1}]})
    fddb = run_campaign(m, "w", [FaultSpec("crash", "a"), FaultSpec("crash", "z")])
    assert [f.key for f in fddb.unactivated] == [FaultSpec("crash", "z").key]
    assert fddb.labels == ["a:crash"]


def test_saturation_is_stable(webshop):
    faults = [FaultSpec("IP+N", "h_cart"), FaultSpec("output_corruption", "db_query", "return", bit_index=0)]
    first = run_faults(webshop, "default", faults)
    again = run_faults(webshop, "default", faults)
    for a, b in zip(first, again):
        assert [canonical_form(t) for t in a.fcts] == [canonical_form(t) for t in b.fcts]
        assert len(a.fcts) >= 1


def test_parallel_equals_serial(webshop):
    faults = enumerate_fault_points(webshop, "default")[:6]
    a = run_faults(webshop, "default", faults, jobs=1)
    b = run_faults(webshop, "default", faults, jobs=2)
    assert [[canonical_form(t) for t in r.fcts] for r in a] == [[canonical_form(t) for t in r.fcts] for r in b]


def test_fddb_roundtrip(tmp_path, webshop):
    faults = enumerate_fault_points(webshop, "default")[:5]
    fddb = run_campaign(webshop, "default", faults)
    path = tmp_path / "fddb.json"
    fddb.save(path)
    back = Fddb.load(path)
    assert back.labels == fddb.labels and back.fingerprint == webshop.fingerprint()
    assert [canonical_form(t) for t in back.normal_fcts] == [canonical_form(t) for t in fddb.normal_fcts]
    for r, s in zip(fddb.records, back.records):
        assert r.faults == s.faults
        assert [canonical_form(t) for t in r.fcts] == [canonical_form(t) for t in s.fcts]
        assert len({canonical_form(t) for t in r.fcts}) == len(r.fcts)


def test_fddb_invariants():
    from afetm.calltree import from_sexpr
    from afetm.injector import FddbRecord

    t = from_sexpr("a")
    with pytest.raises(FaultError):
        Fddb([], [])
    with pytest.raises(FaultError):
        Fddb([FddbRecord("a:crash", [], [t]), FddbRecord("a:crash", [], [t])], [t])
