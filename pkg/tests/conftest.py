import numpy as np
import pytest

from msrpsf.optics import ApertureSpec, BandSpec, build_dictionaries, default_zeta_grid

SMALL_SIDE = 32
SMALL_BANDS = [BandSpec(400.0, 0), BandSpec(548.5, 1), BandSpec(697.0, 2), BandSpec(845.5, 3)]


@pytest.fixture(scope="session")
def small_aperture():
    return ApertureSpec(pupil_grid_side=256)


@pytest.fixture(scope="session")
def small_dicts(small_aperture):
    """Four bands, 32 x 32 pixels, 5 depth slices over [-21, 21]."""
    return build_dictionaries(SMALL_BANDS, default_zeta_grid(5), small_aperture, SMALL_SIDE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
