import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                rows[props["criterion"]] = ("PASS" if outcome == "passed" else "FAIL", props.get("detail", ""))
            elif "test_acceptance.py" in getattr(rep, "nodeid", "") and outcome != "passed":
                name = rep.nodeid.split("::")[-1]
                n = int(name.split("_")[1][1:]) if name.startswith("test_c") else name
                rows.setdefault(n, ("FAIL", f"{rep.when} error"))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows, key=lambda n: (isinstance(n, str), str(n).zfill(3))):
        status, detail = rows[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {detail}")
