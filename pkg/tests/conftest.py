import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance criterion -> list of (part, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[num]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name} {'ok' if passed else 'FAILED'} ({info})" for name, passed, info in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
