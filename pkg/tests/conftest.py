import numpy as np
import pytest

from aimarray.geometry import PositionGrid, load_grid, wavelength_mm

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def lattice48():
    return load_grid("lattice48")


@pytest.fixture(scope="session")
def lam():
    return wavelength_mm(38.0)


def toy_grid(rng, n_slots=10, box=100.0, name="toy", min_spacing=4.0):
    """Random grid inside a box, drawn by rejection so slots keep ``min_spacing``."""
    pts = []
    while len(pts) < n_slots:
        p = rng.uniform(0, box, 2)
        if all(np.hypot(*(p - q)) >= min_spacing for q in pts):
            pts.append(p)
    return PositionGrid(tuple(range(1, n_slots + 1)), np.array(pts), name=name, min_spacing=min_spacing)


@pytest.fixture
def acceptance():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
