import math

import pytest
from hypothesis import strategies as st

from fedtrust.opinion import Opinion

TOL = 1e-9


@st.composite
def opinions(draw, allow_dogmatic=True):
    """Valid opinions, including the simplex corners and edges."""
    kind = draw(st.sampled_from(["interior", "corner", "edge"]))
    if kind == "corner":
        return draw(st.sampled_from([Opinion(1, 0, 0), Opinion(0, 1, 0), Opinion(0, 0, 1)]))
    a = draw(st.floats(0, 1))
    c = draw(st.floats(0, 1))
    if kind == "edge":
        u = 0.0 if allow_dogmatic else draw(st.floats(1e-6, 1))
        b = a * (1 - u)
        return Opinion(b, max(0.0, 1 - b - u), u)
    b, d = sorted((a, c))
    return Opinion(b, d - b, max(0.0, 1.0 - d))


def assert_on_simplex(op: Opinion) -> None:
    for v in op.as_tuple():
        assert 0.0 <= v <= 1.0
    assert math.isclose(sum(op.as_tuple()), 1.0, abs_tol=TOL)


@pytest.fixture
def small_dataset():
    from fedtrust.fl import gen_synthetic
    return gen_synthetic(600, 4, 6, 4.0, seed=11)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
