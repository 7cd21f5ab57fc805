import re

import pytest

# criterion id -> one-line verdict, filled by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion, named by the test (``test_a7_...`` -> ``A7``)."""
    cid = re.match(r"test_(a\d+)", request.node.name).group(1).upper()

    def record(passed: bool, detail: str):
        ACCEPTANCE[cid] = f"{cid} {'PASS' if passed else 'FAIL'}: {detail}"
        return passed

    yield record
    ACCEPTANCE.setdefault(cid, f"{cid} FAIL: error before the criterion was evaluated")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        terminalreporter.write_line(ACCEPTANCE[cid])
