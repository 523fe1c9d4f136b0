import math

import numpy as np
import pytest

from afetm.baselines import (
    BaselineError,
    GaussianIndex,
    LogModel,
    afct_gdc_diagnose,
    fct_edc_detect,
    gaussian_influence,
    influence,
    log_oracle_diagnose,
)
from afetm.calltree import TracePlan, from_sexpr, masked
from afetm.injector import FaultSpec, Fddb, FddbRecord

from conftest import chain_model


def test_influence_values():
    t = from_sexpr("a(b,c)")
    assert gaussian_influence(t, t, 2.0) == 1.0
    assert influence(3.0, 3.0) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert influence(4.0, 2.0) == pytest.approx(math.exp(-2), abs=1e-12)
    with pytest.raises(BaselineError):
        influence(1.0, 0.0)


def test_influence_strictly_decreasing():
    vals = [influence(d, 1.7) for d in range(10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[0] == 1.0 and all(v < 1 for v in vals[1:])


def test_sigma_is_std_of_pairwise_distances():
    trees = [from_sexpr("a"), from_sexpr("a(b)"), from_sexpr("a(b,c)")]
    idx = GaussianIndex([("normal", trees[:1]), ("x:crash", trees[1:])])
    assert idx.sigma == pytest.approx(np.std([1, 2, 1]))


def test_sigma_sampling_is_seeded():
    trees = [from_sexpr("a" + "(b" * k + ")" * k) for k in range(12)]
    a = GaussianIndex([("normal", trees)], max_pairs=20, seed=1)
    b = GaussianIndex([("normal", trees)], max_pairs=20, seed=1)
    full = GaussianIndex([("normal", trees)])
    assert a.sigma == b.sigma and a.sigma > 0 and full.sigma > 0


def test_degenerate_sigma_warns():
    with pytest.warns(RuntimeWarning):
        idx = GaussianIndex([("normal", [from_sexpr("a")]), ("x:crash", [from_sexpr("a")])])
    assert idx.sigma == 1.0


def test_exact_match_ranks_first():
    idx = GaussianIndex([("normal", [from_sexpr("m(a,b)")]), ("a:crash", [from_sexpr("m(a)")]),
                         ("b:crash", [from_sexpr("m(b(c,d,e))")])])
    d = afct_gdc_diagnose(from_sexpr("m(a)"), idx)
    assert d.ranked[0] == ("a:crash", 1.0) and d.detected and d.located == "a"
    assert not afct_gdc_diagnose(from_sexpr("m(a,b)"), idx).detected


def test_tie_breaks_by_label():
    idx = GaussianIndex([("normal", [from_sexpr("m(z,z2,z3)")]), ("b:crash", [from_sexpr("m(a)")]),
                         ("a:crash", [from_sexpr("m(b)")])])
    d = afct_gdc_diagnose(from_sexpr("m"), idx)
    assert [lab for lab, _ in d.ranked[:2]] == ["a:crash", "b:crash"]


def test_empty_index():
    with pytest.raises(BaselineError):
        GaussianIndex([])
    with pytest.raises(BaselineError):
        afct_gdc_diagnose(from_sexpr("a"), None)


def test_index_from_fddb_masks_trees():
    fddb = Fddb([FddbRecord("b:crash", [FaultSpec("crash", "b")], [from_sexpr("m(a,b)")])],
                [from_sexpr("m(a,b(c))")])
    plan = TracePlan({"m", "b", "c"})
    with pytest.warns(RuntimeWarning):  # a single pair has zero spread
        idx = GaussianIndex.from_fddb(fddb, plan)
    assert len(idx) == 2
    d = afct_gdc_diagnose(masked(from_sexpr("m(a,b)"), plan), idx)
    assert d.top1 == "b:crash"


def test_edc():
    normal = [from_sexpr("m(a(b),c(d,e))"), from_sexpr("m(a)")]
    assert fct_edc_detect(normal[0], normal) == (False, None)
    crashed = from_sexpr("m(a(b),c)")  # truncated after c
    assert fct_edc_detect(crashed, normal, threshold=1) == (True, "d")
    assert fct_edc_detect(crashed, normal, threshold=2) == (False, None)
    assert fct_edc_detect(crashed, normal, threshold=math.inf) == (False, None)
    with pytest.raises(BaselineError):
        fct_edc_detect(crashed, [])


def test_edc_flags_any_unseen_tree():
    normal = [from_sexpr("m(a)")]
    assert fct_edc_detect(from_sexpr("m(b)"), normal)[0]


def test_log_oracle():
    lm = LogModel(("log",), {})
    # logger three preorder slots after the fault site
    t = from_sexpr("m(f(x,y),log)")
    assert log_oracle_diagnose(t, lm, "f") == (True, 3)
    # crash before any logger call
    assert log_oracle_diagnose(from_sexpr("m(f)"), lm, "f") == (False, None)
    # logger only before the site does not count
    assert log_oracle_diagnose(from_sexpr("m(log,f)"), lm, "f") == (False, None)


def test_log_model_needs_loggers():
    fddb = Fddb([FddbRecord("a:crash", [FaultSpec("crash", "a")], [from_sexpr("m(a)")])], [from_sexpr("m(a)")])
    with pytest.raises(BaselineError):
        LogModel.from_fddb(chain_model("m", "a"), fddb)
    lm = LogModel.from_fddb(chain_model("m", "a", loggers=("a",)), fddb)
    assert lm.reachable == {"a:crash": False}
