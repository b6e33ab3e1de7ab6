import contextlib

import pytest
from hypothesis import HealthCheck, settings

from mrbsp import Backend, Cluster, ClusterSpec, TransportKind

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = ("a", "smp", "sms")


@contextlib.contextmanager
def make_cluster(backend="a", shape=(2, 2), transport="inproc", **kw):
    spec = ClusterSpec(machines=shape[0], nodes_per_machine=shape[1],
                       backend=Backend.parse(backend),
                       transport=TransportKind.parse(transport), **kw)
    with Cluster(spec) as cluster:
        yield cluster


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def cluster4(backend):
    with make_cluster(backend, (2, 2)) as c:
        yield c


# One PASS/FAIL line per acceptance criterion, repeated in the run summary.
ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def record(name, ok, detail):
        line = "%s %s: %s" % ("PASS" if ok else "FAIL", name, detail)
        ACCEPTANCE_LINES.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
