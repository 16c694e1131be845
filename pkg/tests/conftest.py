import pytest

from graphrbm.decompose import preset
from graphrbm.verification import paper_system


@pytest.fixture(scope="session")
def paper_small():
    """Reference network at N=4 with both three-group splittings."""
    system = paper_system(4)
    return system, preset("paper_overlap_3", system), preset("paper_nonoverlap_3", system)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test body sets ``ok`` and ``detail``."""
    rec = {"ok": False, "detail": "not evaluated"}
    yield rec
    label = request.node.callspec.id if hasattr(request.node, "callspec") else request.node.name[5:]
    line = f"{label}: {'PASS' if rec['ok'] else 'FAIL'} ({rec['detail']})"
    _ACCEPTANCE.append(line)
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
