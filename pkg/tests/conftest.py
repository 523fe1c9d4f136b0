import numpy as np
import pytest

from afetm.harness import BUNDLED
from afetm.progmodel import load_program_spec, model_from_dict
from afetm.selector import CoverageInstance


def chain_model(*names, params=0, loggers=()):
    """names[0] calls names[1] calls ... (one block each)."""
    fns = []
    for a, b in zip(names, names[1:] + (None,)):
        fns.append({"id": a, "params": params, "blocks": [{"label": 0, "succ": [], "calls": [b] if b else []}]})
    return model_from_dict({"entry": names[0], "functions": fns, "loggers": list(loggers),
                            "workloads": [{"id": "w", "mix": {"r": 1.0}, "rate": 10.0}]})


def s1(w_ub=6.0):
    h = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1]], dtype=np.uint8)
    return CoverageInstance(h=h, w=np.array([2.0, 3.0, 1.0]), w_ub=w_ub, function_ids=("f1", "f2", "f3"))


@pytest.fixture(scope="session")
def webshop():
    return load_program_spec(BUNDLED / "webshop.json")


# one summary line per acceptance criterion
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_"):
        num = int(name.split("_")[2])
        detail = next((v for k, v in report.user_properties if k == "detail"), "")
        _CRITERIA[num] = ("PASS" if report.passed else "FAIL", name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {status}  {name}  {detail}")
