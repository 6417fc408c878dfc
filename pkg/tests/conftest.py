import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

A_LEVELS = [3.8e-12, 9.2e-12, 23.0e-12, 55.4e-12, 124.9e-12]
E_LEVELS = [5.6e-10, 6.8e-10, 8.2e-10, 9.3e-10, 10.0e-10]


@pytest.fixture(scope="session")
def plain_scene():
    """Scene built literally from the stated constants (coupling scale 1)."""
    from pbec_kinetics.model import build_scene
    return build_scene(5, A_LEVELS, E_LEVELS)


@pytest.fixture(scope="session")
def scene():
    """The calibrated default scene used by the bundled presets."""
    from pbec_kinetics.cli import load_preset
    return load_preset("paper_fig1").scene()


@pytest.fixture(scope="session")
def small_scene():
    """Coarse grid for tests that need many RHS evaluations or a full-rank hierarchy."""
    from pbec_kinetics.model import build_scene
    return build_scene(3, A_LEVELS[:3], E_LEVELS[:3], density=1e13, N_per_bin=4e12,
                       extent=2.5, coupling_scale=0.53)


@pytest.fixture(scope="session")
def basis2(scene):
    from pbec_kinetics.hierarchy import build_hierarchy
    return build_hierarchy(scene, 2)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
