import math

import numpy as np
import pytest

from cinav.geodesy import GeodeticPosition, LocalFrame

ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def origin():
    return GeodeticPosition.from_degrees(39.9543, 116.3157, 55.0)


@pytest.fixture
def frame(origin):
    return LocalFrame(origin)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=100.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.exp(rng.uniform(0.0, math.log(cond), n))
    return q @ np.diag(eig) @ q.T
