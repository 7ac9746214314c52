import io

import numpy as np
import pytest

from clipart.dataset import AnnotatedRecord, AttributeTaxonomy, parse_labels

LABELS = """attribute_id,attribute_name
1,country::Japan
2,medium::paper
3,dimension::big
4,tags::woman
5,tags::party
6,tags::edo
7,culture::roma
42,medium::bronze
"""


@pytest.fixture(scope="session")
def taxonomy() -> AttributeTaxonomy:
    return parse_labels(io.StringIO(LABELS))


@pytest.fixture
def japan_record() -> AnnotatedRecord:
    return AnnotatedRecord("fig3", frozenset({1, 2, 3, 4, 5, 6}))


@pytest.fixture
def full_record() -> AnnotatedRecord:
    return AnnotatedRecord("full", frozenset({1, 2, 3, 4, 5, 6, 7}))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
