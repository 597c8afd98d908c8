import math

import pytest

from perfhom.perforation import Lattice, eta_for_gamma, generate_periodic


def lattice_spec(eps, gamma=4.0, cells=4, law=None, eta=None, spacing=4.0):
    """The 4Z^2 disk lattice on a cell-centred torus."""
    lat = Lattice.square(spacing)
    eta = eta_for_gamma(eps, gamma) if eta is None else eta
    return generate_periodic(lat, eps, eta, law=law, domain=lat.torus(eps, cells), gamma=gamma)


@pytest.fixture
def spec16():
    return lattice_spec(0.25)


def pytest_report_header(config):
    return f"reference on-ball value 4/(9 pi) = {4 / (9 * math.pi):.12f}"


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
