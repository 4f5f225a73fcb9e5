import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


_ACCEPTANCE = []


def record_acceptance(ac, passed, detail):
    line = f"{ac} {'PASS' if passed else 'FAIL'}: {detail}"
    _ACCEPTANCE.append(line)
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
