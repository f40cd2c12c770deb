import numpy as np
import pytest

from hfdtm.dataio import CorridorTopology, prepare
from hfdtm.synth import SynthConfig, corridor_layout, generate_corridor_data


def small_topology() -> CorridorTopology:
    """Two intersections of three movements; index 5 is structurally zero."""
    return CorridorTopology(
        movement_ids=("I1:NB:T", "I1:NB:L", "I1:EB:R", "I2:NB:T", "I2:NB:L", "I2:EB:R"),
        corridor_idx=np.array([0, 3]),
        active_idx=np.array([0, 1, 2, 3, 4]),
        groups=(np.array([0, 1, 2]), np.array([3, 4, 5])),
        zero_mask=np.array([1.0, 1.0, 1.0, 1.0, 1.0, 0.0]),
        group_names=("I1", "I2"),
    )


@pytest.fixture
def topo6():
    return small_topology()


@pytest.fixture(scope="session")
def paper_topology():
    return corridor_layout(6, SynthConfig().zero_movements)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_corridor_data(SynthConfig())


@pytest.fixture(scope="session")
def tiny_data():
    """Two intersections, ten days: fast enough for full training loops."""
    cfg = SynthConfig(n_intersections=2, days=10, zero_movements=("I2:WB:L", "I2:WB:T", "I2:WB:R"), seed=5)
    table, topo = generate_corridor_data(cfg)
    return prepare(table, topo, window=4)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL/WARN line per acceptance criterion."""

    def record(number: int, title: str, ok: bool | None, detail: str = "") -> bool:
        status = "PASS" if ok else ("WARN" if ok is None else "FAIL")
        _ACCEPTANCE[number] = f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        print(_ACCEPTANCE[number])
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
