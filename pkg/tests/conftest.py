import numpy as np
import pytest

from fldec import decision, runtime


@pytest.fixture(scope="session")
def ref_models():
    return decision.load_reference_models()


@pytest.fixture(scope="session")
def good_window():
    return decision.sample_window(3, good=True)


@pytest.fixture(scope="session")
def bad_window():
    return decision.sample_window(3, good=False)


@pytest.fixture(scope="module")
def services(tmp_path_factory):
    """A cloud tier and an edge that forwards to it, both on ephemeral loopback ports."""
    root = tmp_path_factory.mktemp("svc")
    cloud = runtime.cloud_serve("127.0.0.1:0", root / "cloud")
    host, port = cloud.address
    edge = runtime.edge_serve("127.0.0.1:0", f"{host}:{port}", root / "edge", runtime.CapacityPolicy(max_matmul_order=64))
    yield edge, cloud
    edge.stop()
    cloud.stop()


def addr(service) -> str:
    host, port = service.address
    return f"{host}:{port}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
