import math

import numpy as np
import pytest
from scipy.special import eval_hermite

from pbec_kinetics.model import (ConfigError, ModeIndex, PumpSchedule, build_coupling, build_grid,
                                 build_mode_set, build_scene, mode_intensity)

from conftest import A_LEVELS, E_LEVELS


def oracle_intensity(m, x):
    # textbook closed form with explicit Hermite polynomials
    norm = 1.0 / math.sqrt(2.0 ** m * math.factorial(m) * math.sqrt(math.pi))
    psi = norm * eval_hermite(m, x) * np.exp(-x * x / 2)
    return psi * psi


def test_mode_set_default_levels():
    ms = build_mode_set(5, A_LEVELS, E_LEVELS)
    assert len(ms) == 15
    assert ms.modes[0] == ModeIndex(0, 0)
    assert ms.modes[1:3] == (ModeIndex(0, 1), ModeIndex(1, 0))
    assert ms.A[0] == 3.8e-12 and ms.E[0] == 5.6e-10
    assert ms.kappa == 1.0


def test_mode_set_ordering_and_sizes():
    assert [m.label() for m in build_mode_set(1, [1.0], [1.0]).modes] == ["[0,0]"]
    ms = build_mode_set(6, A_LEVELS + [2.7e-10], E_LEVELS + [1.03e-9])
    assert len(ms) == 21
    keys = [(m.level, m.mx) for m in ms.modes]
    assert keys == sorted(keys)
    assert len(set(ms.modes)) == 21


def test_mode_set_rate_mismatch():
    with pytest.raises(ConfigError):
        build_mode_set(5, A_LEVELS[:4], E_LEVELS)
    with pytest.raises(ConfigError):
        build_mode_set(0, [], [])


def test_degenerate_rates_share_level():
    sc = build_scene(5, A_LEVELS, E_LEVELS)
    lv = np.array([m.level for m in sc.modes.modes])
    for lev in range(5):
        sel = lv == lev
        for arr in (sc.A, sc.E):
            assert np.all(arr[sel] == arr[sel][0])
        # gamma differs only by the midpoint-quadrature error of the bin sum
        assert np.allclose(sc.gamma[sel], sc.gamma[sel][0], rtol=1e-6, atol=0)
    # swap partners sum the same numbers, so they agree to rounding
    p = sc.modes.swap_permutation()
    assert np.allclose(sc.gamma, sc.gamma[p], rtol=1e-14, atol=0)


def test_intensity_point_values():
    assert mode_intensity(ModeIndex(0, 0), (0.0, 0.0)) == pytest.approx(1 / math.pi, rel=1e-14)
    assert mode_intensity(ModeIndex(0, 1), (0.0, 0.0)) == 0.0


@pytest.mark.parametrize("mx,my", [(m, l - m) for l in range(6) for m in range(l + 1)])
def test_intensity_against_closed_form_and_normalisation(mx, my):
    x = np.linspace(-12, 12, 4801)
    X, Y = np.meshgrid(x, x, indexing="ij")
    I = mode_intensity(ModeIndex(mx, my), np.stack([X, Y], axis=-1))
    ref = oracle_intensity(mx, X) * oracle_intensity(my, Y)
    assert np.allclose(I, ref, rtol=1e-10, atol=1e-300)
    total = np.trapezoid(np.trapezoid(I, x, axis=1), x)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_grid_geometry():
    g = build_grid(1e13, 1e12, 5.0)
    assert g.cell_area == pytest.approx(0.1, rel=1e-14)
    assert g.spacing == pytest.approx(math.sqrt(0.1), rel=1e-14)
    assert g.n_side == 32 and g.n_bins == 1024
    assert np.all(g.x == -g.x[::-1])
    assert np.all(g.N == 1e12)
    assert g.cell_area * 1e13 == pytest.approx(g.N[0])
    assert build_grid(3.0, 3.0, 4.0).spacing == 1.0


@pytest.mark.parametrize("args", [(0, 1, 1), (1, -1, 1), (1, 1, 0), (1, 1, float("nan"))])
def test_grid_rejects_nonpositive(args):
    with pytest.raises(ConfigError):
        build_grid(*args)


def test_coupling_normalisation_and_gamma():
    sc = build_scene(5, A_LEVELS, E_LEVELS)
    assert sc.g.sum(axis=1)[0] == pytest.approx(1.0, abs=1e-3)
    assert np.all(sc.g >= 0)
    assert sc.gamma[0] == pytest.approx(3.8e-12 * 1e12 * sc.g[0].sum() + 1)
    assert sc.gamma[0] == pytest.approx(4.8, rel=1e-3)


def test_coupling_node_line():
    # odd bin count puts a row of bins on y = 0
    sc = build_scene(5, A_LEVELS, E_LEVELS, extent=4.9)
    assert sc.grid.n_side % 2 == 1
    pos = sc.grid.positions
    on_axis = pos[:, 1] == 0.0
    assert on_axis.sum() == sc.grid.n_side
    k = sc.modes.index_of((0, 1))
    assert np.all(sc.g[k, on_axis] == 0.0)


def test_mirror_symmetry_exact():
    sc = build_scene(5, A_LEVELS, E_LEVELS)
    nb = sc.grid.n_side
    for i, m in enumerate(sc.modes.modes):
        j = sc.modes.index_of(m.swapped())
        assert np.array_equal(sc.g[i].reshape(nb, nb), sc.g[j].reshape(nb, nb).T)


def test_normalisation_improves_with_extent():
    errs = []
    for extent in (4.0, 4.5, 5.0, 5.5, 6.0, 7.0):
        ms = build_mode_set(5, A_LEVELS, E_LEVELS)
        g = build_coupling(ms, build_grid(1e13, 1e12, extent)).g
        errs.append(np.max(np.abs(g.sum(axis=1) - 1)))
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


def test_pump_schedule_validation():
    s = PumpSchedule(((0, 0.1), (5, 0.2)))
    assert s.pump_at(4.9) == 0.1 and s.pump_at(5.0) == 0.2
    assert s.final_pump == 0.2 and s.last_switch == 5.0
    for bad in [(), ((1, 0.1),), ((0, 0.1), (0, 0.2)), ((0, -1.0),)]:
        with pytest.raises(ConfigError):
            PumpSchedule(bad)
