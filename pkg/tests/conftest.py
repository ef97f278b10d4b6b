import pytest

from islandsdb.deployment import DeploymentConfig, deploy
from islandsdb.topology import Topology

_CRITERIA: list[tuple[int, str]] = []


@pytest.fixture
def topo44():
    return Topology(4, 4)


def make_cluster(n_instances, workers, rows, topo=None, **kw):
    topo = topo or Topology(4, 4)
    return deploy(DeploymentConfig(n_instances, workers, rows, topology=topo, **kw))


def report(n: int, ok: bool | None, detail: str) -> None:
    """Record one acceptance line; ``ok=None`` marks a skip."""
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"{status} criterion {n}: {detail}"
    _CRITERIA.append((n, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda x: x[0]):
        terminalreporter.write_line(line)
