import json
import subprocess
import sys
from pathlib import Path

import pytest

from afetm.calltree import TraceEvent, from_sexpr, tree_to_dict, write_events
from afetm.cli import main

DATA = Path(__file__).parent / "data"
S1 = {"blocks": 4, "functions": [{"id": "f1", "covers": [0, 1], "weight": 2},
                                 {"id": "f2", "covers": [1, 2], "weight": 3},
                                 {"id": "f3", "covers": [3], "weight": 1}], "w_ub": 3}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def s1_file(tmp_path):
    p = tmp_path / "s1.json"
    p.write_text(json.dumps(S1))
    return p


def test_select_s1(capsys, s1_file):
    code, out, _ = run(capsys, "select", "--instance", s1_file, "--p", "1.0", "--json")
    assert code == 0 and json.loads(out)["fitness"] == pytest.approx(0.2)
    code, out, _ = run(capsys, "select", "--instance", s1_file, "--oracle", "--json")
    oracle = json.loads(out)
    _, out, _ = run(capsys, "select", "--instance", s1_file, "--json")
    assert oracle["fitness"] == json.loads(out)["fitness"] == pytest.approx(0.4)


def test_select_zero_budget_is_usage_error(capsys, s1_file):
    code, _, err = run(capsys, "select", "--instance", s1_file, "--p", "0")
    assert code == 2 and "w_ub" in err


def test_bad_flags_exit_2(capsys):
    assert main(["select"]) == 2
    assert main(["frobnicate"]) == 2


def test_missing_model_names_the_path(capsys, tmp_path):
    cfg = json.loads((DATA / "small_config.json").read_text())
    cfg["model"] = str(tmp_path / "ghost.json")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, err = run(capsys, "evaluate", "--config", tmp_path / "c.json", "--out-dir", tmp_path / "o")
    assert code == 2 and "ghost.json" in err


def test_tools_ted(capsys, tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(tree_to_dict(from_sexpr("a(b,c)"))))
    code, out, _ = run(capsys, "tools", "ted", p, p, "--json")
    assert code == 0 and json.loads(out) == {"distance": 0}


def test_tools_color(capsys, tmp_path):
    (tmp_path / "f.json").write_text(json.dumps([tree_to_dict(from_sexpr("main(A(B(C(D)),E))"))]))
    (tmp_path / "t.json").write_text(json.dumps(["A", "C", "D"]))
    code, out, _ = run(capsys, "tools", "color", "--fcts", tmp_path / "f.json", "--traced", tmp_path / "t.json")
    res = json.loads(out)
    assert code == 0 and res["callstack"] == ["A", "C"]
    assert res["colored"][0]["color"] == "blue"


def test_tools_build_afct(capsys, tmp_path):
    evs = [TraceEvent("A", "main", ("main", "A"), 1), TraceEvent("C", "B", ("main", "A", "B", "C"), 2),
           TraceEvent("D", "C", None, 3)]
    (tmp_path / "e.ndjson").write_text(write_events(evs))
    code, out, _ = run(capsys, "tools", "build-afct", "--events", tmp_path / "e.ndjson")
    (t,) = json.loads(out)
    assert code == 0 and t["fn"] == "main" and t["children"][0]["children"][0]["fn"] == "B"


def test_tools_fld(capsys, tmp_path):
    (tmp_path / "t.json").write_text(json.dumps(tree_to_dict(from_sexpr("main(A(B(C(D))))"))))
    code, out, _ = run(capsys, "tools", "fld", "--tree", tmp_path / "t.json", "--located", "B", "--actual", "D")
    assert json.loads(out) == {"fld": 2}
    code, _, _ = run(capsys, "tools", "fld", "--tree", tmp_path / "t.json", "--located", "Z", "--actual", "D")
    assert code == 2


def test_offline_online_flow(capsys, tmp_path):
    model = DATA / "small_model.json"
    code, out, _ = run(capsys, "inject", "--model", model, "--out", tmp_path / "fddb.json", "--jobs", 1)
    assert code == 0 and json.loads(out)["records"] > 0
    code, _, _ = run(capsys, "select", "--model", model, "--p", "0.5", "--fddb", tmp_path / "fddb.json",
                     "--n-run", 20, "--out", tmp_path / "plan.json")
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert code == 0 and set(plan["callstack"]) <= set(plan["traced"])
    code, out, _ = run(capsys, "train", "--fddb", tmp_path / "fddb.json", "--plan", tmp_path / "plan.json",
                       "--out", tmp_path / "model.json", "--epochs", 30, "--hidden", 8, "--optimizer", "adam",
                       "--lr", "0.03")
    assert code == 0
    code, _, _ = run(capsys, "tools", "execute", "--model", model, "--request", "r0",
                     "--events", tmp_path / "run.ndjson", "--seed", 2)
    assert code == 0
    code, out, _ = run(capsys, "diagnose", "--model", tmp_path / "model.json", "--afct", tmp_path / "run.ndjson",
                       "--topk", 2, "--json")
    d = json.loads(out)
    assert code == 0 and len(d["ranked"]) == 2
    code, out, _ = run(capsys, "baseline", "gdc", "--fddb", tmp_path / "fddb.json", "--plan",
                       tmp_path / "plan.json", "--afct", tmp_path / "run.ndjson", "--json")
    assert code == 0 and "sigma" in json.loads(out)
    code, out, _ = run(capsys, "baseline", "log", "--model", model, "--fddb", tmp_path / "fddb.json", "--json")
    assert code == 0 and json.loads(out)["records"] > 0


def test_baseline_edc(capsys, tmp_path):
    (tmp_path / "n.json").write_text(json.dumps([tree_to_dict(from_sexpr("m(a(b),c(d,e))"))]))
    (tmp_path / "t.json").write_text(json.dumps(tree_to_dict(from_sexpr("m(a(b),c)"))))
    code, out, _ = run(capsys, "baseline", "edc", "--normal", tmp_path / "n.json", "--fct", tmp_path / "t.json",
                       "--threshold", 0)
    assert code == 0 and json.loads(out) == {"detected": True, "located": "d"}


def test_seed_from_environment(capsys, monkeypatch, s1_file):
    monkeypatch.setenv("AFETM_SEED", "5")
    _, a, _ = run(capsys, "select", "--instance", s1_file, "--json")
    _, b, _ = run(capsys, "select", "--instance", s1_file, "--json", "--seed", "5")
    assert a == b
    monkeypatch.setenv("AFETM_SEED", "x")
    code, _, _ = run(capsys, "select", "--instance", s1_file)
    assert code == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "afetm.cli", "select", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "default" in out.stdout


def test_set_overrides_nested_keys():
    from afetm.cli import UsageError, _apply_overrides

    raw = {"P": 0.1, "gcn": {"epochs": 1000, "lr": 0.03}}
    _apply_overrides(raw, ["P=0.3", "gcn.epochs=200", "model=tiny"])
    assert raw == {"P": 0.3, "gcn": {"epochs": 200, "lr": 0.03}, "model": "tiny"}
    with pytest.raises(UsageError):
        _apply_overrides(raw, ["P.x=1"])
    with pytest.raises(UsageError):
        _apply_overrides(raw, ["epochs"])


def test_missing_fault_key_is_usage_error(capsys, tmp_path):
    (tmp_path / "f.json").write_text('{"kind": "crash", "function": "h_buy"}')
    code, _, err = run(capsys, "tools", "execute", "--model", "webshop", "--request", "buy",
                       "--fault", tmp_path / "f.json")
    assert code == 2 and "missing key 'target'" in err
