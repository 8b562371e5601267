import pytest

from bartree import build_model, make_noise


@pytest.fixture
def ref_model():
    return build_model(1, [1.0, 0.5], [1.0, 0.5])


@pytest.fixture
def ref_noise():
    return make_noise("gaussian_pair", 1.0, 0.3)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
