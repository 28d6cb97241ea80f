import math
from typing import Optional

import pytest

from dermclass.model import GraphBuilder, NetworkConfig, build_network, init_parameters

ACCEPTANCE_RESULTS: dict[str, tuple[Optional[bool], str]] = {}

TOY_CONFIG = NetworkConfig(input_hw=75, block_counts=(1, 1, 1), base_filters=8, bn_momentum=0.9)


def _verdict(passed: Optional[bool]) -> str:
    return "SKIP" if passed is None else ("PASS" if passed else "FAIL")


def record_acceptance(name: str, passed: Optional[bool], detail: str = "") -> None:
    """``passed=None`` records a criterion that could not run here."""
    ACCEPTANCE_RESULTS[name] = (passed, detail)
    print(f"ACCEPTANCE {name}: {_verdict(passed)} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{_verdict(passed)}  {name}  {detail}".rstrip())


def conv_softmax_graph(k: int = 3, size: int = 3, channels: int = 3):
    """One valid convolution covering the whole input, then softmax."""
    b = GraphBuilder((channels, size, size))
    x = b.conv("input", k, size, padding="valid", name="conv", bias=True)
    x = b.flatten(x, "flatten")
    b.softmax(x, "softmax")
    graph = b.build(NetworkConfig(input_hw=size, num_classes=k))
    return init_parameters(graph, 0)


@pytest.fixture
def toy_graph():
    return init_parameters(build_network(TOY_CONFIG), 0)


@pytest.fixture
def tiny_graph():
    return conv_softmax_graph()


def he_limit(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)
