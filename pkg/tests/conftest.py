import re
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ccpgmm import aecm  # noqa: E402

MONO_SLACK = 1e-8


class FitAudit:
    """Records every fit completed anywhere in the session."""

    def __init__(self):
        self.n_fits = 0
        self.n_constrained = 0
        self.trace_violations = []
        self.block_violations = []

    def __call__(self, result):
        self.n_fits += 1
        tr = np.asarray(result.loglik_trace)
        prev, cur = tr[:-1], tr[1:]
        bad = np.flatnonzero(cur < prev - MONO_SLACK * np.abs(prev))
        if bad.size:
            k = int(bad[0])
            self.trace_violations.append((self.n_fits, k, float(prev[k]), float(cur[k])))
        cons = result.constraints
        if cons is not None and cons.n_blocks:
            self.n_constrained += 1
            z = result.posteriors
            for i, b in enumerate(cons.blocks):
                if not np.array_equal(z[b], np.broadcast_to(z[b[0]], z[b].shape)):
                    self.block_violations.append((self.n_fits, i))


AUDIT = FitAudit()
ACCEPTANCE = {}


def pytest_configure(config):
    aecm.add_fit_observer(AUDIT)
    config.addinivalue_line("markers", "audit_last: run after every other test")


def pytest_collection_modifyitems(session, config, items):
    # the suite-wide monotonicity audit must run after every other fit
    last = [it for it in items if it.get_closest_marker("audit_last")]
    rest = [it for it in items if not it.get_closest_marker("audit_last")]
    items[:] = rest + last


@pytest.fixture(scope="session")
def fit_audit():
    return AUDIT


@pytest.fixture
def record_criterion(request):
    """Store a one-line detail for the acceptance summary."""
    n = _criterion(request.node.name)

    def record(detail):
        ACCEPTANCE.setdefault(n, {})["detail"] = detail

    return record


def _criterion(name):
    m = re.match(r"test_c(\d+)_", name)
    return int(m.group(1)) if m else None


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    n = _criterion(name)
    if "test_acceptance" not in report.nodeid or n is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry = ACCEPTANCE.setdefault(n, {})
        entry["outcome"] = "PASS" if report.outcome == "passed" else "FAIL"
        entry["name"] = name


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        e = ACCEPTANCE[n]
        if "outcome" not in e:
            continue
        terminalreporter.write_line(f"{e['outcome']} criterion {n:2d} {e['name']}: {e.get('detail', '')}")
