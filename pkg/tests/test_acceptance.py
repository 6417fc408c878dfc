"""Acceptance criteria 1-9 on the bundled presets.

Each test registers one PASS/FAIL line (printed in the terminal summary) and
then asserts the same condition. These runs are long: the whole module takes
tens of minutes on one core.
"""
import math

import numpy as np
import pytest

from pbec_kinetics.analysis import (compare_time_definitions, detect_transitions, fit_critical_exponent,
                                    fit_tail, interval_bounds, loglog_slope)
from pbec_kinetics.cli import load_preset
from pbec_kinetics.experiments import big_quench_trace, equilibration_time, interval_label, run_schedule
from pbec_kinetics.hierarchy import build_hierarchy
from pbec_kinetics.kernel import SystemState, effective_view, full_jacobian, full_rates
from pbec_kinetics.model import PumpSchedule, build_scene
from pbec_kinetics.solver import Dynamics, continuation_sweep, integrate

from conftest import A_LEVELS, ACCEPTANCE, E_LEVELS

# post-quench pumps for the baseline, at least 5% away from every transition
BASELINE_P = {"A": [3e-4, 1e-3, 2e-3], "B": [5e-3, 1e-2, 2e-2], "C": [0.035, 0.045, 0.055]}
# relative distances |P_end/P_crit - 1| for the exponent fits; every 1% quench
# in this window starts and ends on the same side of the transition
EXPONENT_D = np.geomspace(0.0105, 0.05, 8)
FIG3 = (3.16e-4, 0.25)
FIG3_T_END = 1e5
# bracket width for critical pumps, fine enough to compare mode counts
CRIT_WIDTH = 1e-6


def record(k, ok, detail):
    ACCEPTANCE[k] = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[k])
    return ok


def quench(P_end, dyn, settings):
    """1% upward quench indexed by its post-quench pump."""
    return equilibration_time(P_end / 1.01, P_end, dynamics=dyn, settings=settings)


@pytest.fixture(scope="module")
def cfg():
    return load_preset("paper_fig1")


@pytest.fixture(scope="module")
def dyn(cfg):
    sc = cfg.scene()
    return Dynamics(sc, build_hierarchy(sc, cfg["hierarchy"]["depth"]))


@pytest.fixture(scope="module")
def settings(cfg):
    return cfg.settings()


@pytest.fixture(scope="module")
def transitions(cfg, dyn, settings):
    e = cfg["experiment"]
    P = np.geomspace(e["P_min"], e["P_max"], e["n_points"])
    sweep = continuation_sweep(P, settings=settings, dynamics=dyn)
    return sweep, detect_transitions(sweep, dynamics=dyn, settings=settings, rel_width=CRIT_WIDTH)


@pytest.fixture(scope="module")
def baseline(dyn, settings):
    return {lab: [quench(P, dyn, settings) for P in Ps] for lab, Ps in BASELINE_P.items()}


def test_1_baseline_equilibration(baseline, transitions):
    crits = interval_bounds(transitions[1])
    parts, ok = [], True
    for lab, recs in baseline.items():
        for r in recs:
            assert interval_label(r.P_end, crits) == lab
            assert min(abs(r.P_end / c - 1) for c in crits) >= 0.05
        t = np.array([r.t_eq for r in recs])
        ok &= bool(np.all((t >= 8) & (t <= 12)))
        parts.append(f"{lab}: " + ",".join(f"{x:.1f}" for x in t))
    record(1, ok, "t_eq in [8,12]/kappa; got " + "; ".join(parts))
    assert ok


def test_2_phase_structure(transitions):
    sweep, tr = transitions
    kinds = [t.kind for t in tr]
    ok = len(tr) == 4 and "decondensation" in kinds and len(sweep) >= 200
    desc = ", ".join(f"{t.P_crit:.5g} {t.kind[:5]} {[m.label() for m in t.modes]}" for t in tr)
    record(2, ok, f"{len(tr)} transitions: {desc}")
    assert ok


def test_3_critical_exponents(transitions, dyn, settings):
    tr = transitions[1]
    assert len(tr) == 4
    ok, parts = True, []
    for k, t in enumerate(tr):
        Pc = t.P_crit
        P_end = np.concatenate([Pc * (1 - EXPONENT_D[::-1]), Pc * (1 + EXPONENT_D)])
        recs = [quench(P, dyn, settings) for P in P_end]
        for side, fit in zip(("below", "above"), fit_critical_exponent(recs, Pc)):
            good = abs(fit.exponent + 1) <= 0.05 and abs(fit.r) >= 0.998
            ok &= good
            parts.append(f"T{k} {side} {fit.exponent:.3f} (r={fit.r:+.5f})")
    record(3, ok, "exponent -1+-0.05, |r|>=0.998; got " + "; ".join(parts))
    assert ok


def test_4_plateau(baseline, settings):
    cfg = load_preset("plateau")
    sc = cfg.scene()
    dyn = Dynamics(sc, build_hierarchy(sc, cfg["hierarchy"]["depth"]))
    e = cfg["experiment"]
    P = np.geomspace(e["P_min"], e["P_max"], e["n_points"])
    t = np.array([quench(p, dyn, settings).t_eq for p in P])
    base = float(np.mean([r.t_eq for r in baseline["A"]]))
    # transitions inside the plateau: sweep slightly wider than the quench range
    inside = detect_transitions(continuation_sweep(np.geomspace(P[0] / 1.01, P[-1], 4 * len(P)),
                                                   settings=settings, dynamics=dyn))
    ok = len(P) >= 20 and bool(np.all(t >= 10 * base)) and not inside
    record(4, ok, f"min t_eq {np.nanmin(t):.1f} at P={P[np.nanargmin(t)]:.3g} vs 10x baseline "
                  f"{10 * base:.1f}; max t_eq {np.nanmax(t):.1f}; transitions inside: {len(inside)}")
    assert ok


@pytest.fixture(scope="module")
def fig3(dyn, settings):
    times = np.unique(np.concatenate([np.geomspace(1e-2, FIG3_T_END, 701), [20.0]]))
    return big_quench_trace(*FIG3, times, settings=settings, dynamics=dyn)


def test_5_fig3_trace(fig3, dyn):
    sc = dyn.scene
    i00, i01, i02 = (sc.modes.index_of(m) for m in ((0, 0), (0, 1), (0, 2)))
    late = fig3.times >= 20.0
    fast = max(float(np.max(np.abs(fig3.n[late, i] / fig3.n_end[i] - 1))) for i in (i00, i02))
    ok_a = fast <= 1e-6
    peak = math.log10(fig3.n_peak[i01] / fig3.n_end[i01])
    ok_b = abs(peak - 14) <= 1
    slope = loglog_slope(fig3.times, fig3.n[:, i01], (10.0, 1e3))
    ok_c = abs(slope + 1.5) <= 0.1
    eta = float(effective_view(fig3.steady_end.state, sc, dyn.basis).eta[i01])
    tail = fit_tail(fig3.times, fig3.n[:, i01], eta, fig3.n_end[i01])
    ok_d = tail.matched_decades >= 7 and tail.max_log_deviation <= 0.01
    ok = ok_a and ok_b and ok_c and ok_d
    record(5, ok, f"(a) max dev after t=20: {fast:.2e} [{'ok' if ok_a else 'no'}]; "
                  f"(b) peak {peak:.2f} decades above final [{'ok' if ok_b else 'no'}]; "
                  f"(c) slope {slope:.3f} [{'ok' if ok_c else 'no'}]; "
                  f"(d) {tail.matched_decades:.2f} decades, max dev {tail.max_log_deviation:.2e} "
                  f"[{'ok' if ok_d else 'no'}]")
    assert ok


def test_6_hierarchy_oracle(cfg, dyn, settings):
    e = cfg["experiment"]
    P = np.geomspace(e["P_min"], e["P_max"], 20)
    full = Dynamics(dyn.scene)
    ref = continuation_sweep(P, settings=settings, dynamics=full)
    hs = continuation_sweep(P, settings=settings, dynamics=dyn)
    steady = max(float(np.max(np.abs(h.state.n - r.state.n) / r.state.n)) for h, r in zip(hs, ref))
    times = np.linspace(0.0, 100.0, 201)[1:]
    a = big_quench_trace(*FIG3, times, settings=settings, dynamics=dyn)
    b = big_quench_trace(*FIG3, times, settings=settings, dynamics=full)
    dynamic = float(np.max(np.abs(a.n - b.n) / b.n))
    ok = steady <= 1e-6 and dynamic <= 1e-5
    record(6, ok, f"steady max rel {steady:.2e} (<=1e-6); trajectory max rel {dynamic:.2e} (<=1e-5)")
    assert ok


def test_7_mode_count(transitions, dyn, settings):
    cfg21 = load_preset("paper_fig1_21modes")
    sc = cfg21.scene()
    dyn21 = Dynamics(sc, build_hierarchy(sc, cfg21["hierarchy"]["depth"]))
    e = cfg21["experiment"]
    sweep = continuation_sweep(np.geomspace(e["P_min"], e["P_max"], e["n_points"]),
                               settings=settings, dynamics=dyn21)
    c15 = interval_bounds(transitions[1])
    c21 = interval_bounds(detect_transitions(sweep, dynamics=dyn21, settings=settings,
                                             rel_width=CRIT_WIDTH))
    dev_c = max(abs(b / a - 1) for a, b in zip(c15, c21)) if len(c21) == len(c15) else math.inf
    plateau = [0.25, 1.0, 10.0]
    t15 = np.array([quench(P, dyn, settings).t_eq for P in plateau])
    t21 = np.array([quench(P, dyn21, settings).t_eq for P in plateau])
    dev_t = float(np.max(np.abs(t21 / t15 - 1)))
    ok = dev_c <= 0.01 and dev_t <= 0.1
    record(7, ok, f"{len(c21)} transitions at 21 modes, max P_crit dev {dev_c:.2e} (<=1%); "
                  f"plateau t_eq 15/21: " + ", ".join(f"{a:.1f}/{b:.1f}" for a, b in zip(t15, t21))
                  + f" max dev {dev_t:.2%} (<=10%)")
    assert ok


def test_8_two_step(cfg, dyn, settings):
    e = cfg["experiment"]
    P_a, P_b, P_e = e["schedule_initial"], e["schedule"][0][1], e["schedule"][-1][1]
    direct = equilibration_time(P_a, P_e, dynamics=dyn, settings=settings)
    via_b = equilibration_time(P_b, P_e, dynamics=dyn, settings=settings)
    totals = {}
    for delay in e["schedule_delays"]:
        r = run_schedule(PumpSchedule(((0.0, P_b), (delay, P_e))), P_initial=P_a,
                         dynamics=dyn, settings=settings)
        totals[delay] = r.extra["t_total"]
    best = min(totals, key=lambda k: totals[k])
    ratio = totals[best] / direct.t_eq
    i01 = dyn.scene.modes.index_of((0, 1))
    gap = math.log10(direct.n_peak[i01] / via_b.n_peak[i01])
    ok = ratio <= 0.7 and abs(gap - 6) <= 1
    record(8, ok, f"direct {direct.t_eq:.1f}, best two-step {totals[best]:.1f} at delay {best:g} "
                  f"(ratio {ratio:.2f}, <=0.7); [0,1] peaks {direct.n_peak[i01]:.2e} vs "
                  f"{via_b.n_peak[i01]:.2e} ({gap:.2f} decades, 6+-1)")
    assert ok


def _fd_jacobian(fun, y, rel=1e-3):
    J = np.empty((len(y), len(y)))
    for k in range(len(y)):
        h = rel * max(abs(y[k]), 1e-3)
        yp, ym = y.copy(), y.copy()
        yp[k] += h
        ym[k] -= h
        J[:, k] = (fun(yp) - fun(ym)) / (2 * h)
    return J


def test_9_property_suite(dyn, transitions, baseline):
    sc = dyn.scene
    rng = np.random.default_rng(7)
    checks = {}

    small = build_scene(3, A_LEVELS[:3], E_LEVELS[:3], N_per_bin=4e12, extent=2.5, coupling_scale=0.53)
    y = np.concatenate([rng.uniform(0, 1e6, small.n_modes), rng.uniform(0.05, 0.95, small.n_bins)])
    J = full_jacobian(y, 0.07, small).toarray()
    Jfd = _fd_jacobian(lambda v: full_rates(v, 0.07, small), y)
    scale = np.maximum(np.abs(J), np.abs(J).max(axis=1, keepdims=True) * 1e-8)
    checks["jacobian"] = float(np.max(np.abs(J - Jfd) / scale)) <= 1e-6

    worst = 0.0
    for _ in range(50):
        n = 10 ** rng.uniform(-3, 13, sc.n_modes)
        u = sc.W @ rng.uniform(0, 1, sc.n_bins)
        eta = sc.gamma - (sc.E + sc.A) * u
        effective = -eta * n + sc.E * u
        gain_loss = (n * (sc.E + sc.A) + sc.E) * u - sc.gamma * n
        term = np.maximum(np.abs((n * (sc.E + sc.A) + sc.E) * u), sc.gamma * n)
        worst = max(worst, float(np.max(np.abs(gain_loss - effective) / np.spacing(term))))
    checks["photon_forms_ulp"] = worst <= 4

    box = True
    for _ in range(5):
        st = np.concatenate([rng.uniform(0, 1e8, small.n_modes), rng.uniform(0, 1, small.n_bins)])
        st[small.n_modes + rng.integers(small.n_bins)] = 1.0
        st[rng.integers(small.n_modes)] = 0.0
        tr = integrate(SystemState(st[:small.n_modes], st[small.n_modes:]), 0.5, 5.0,
                       load_preset("paper_fig1").settings(), scene=small,
                       sample_times=np.linspace(0, 5, 11))
        box &= bool(np.all(tr.samples[:, :small.n_modes] >= 0))
        f = tr.samples[:, small.n_modes:]
        box &= bool(f.min() >= -1e-12 and f.max() <= 1 + 1e-12)
    checks["forward_invariance"] = box

    p = sc.modes.swap_permutation()
    sym = max(float(np.max(np.abs(s.state.n - s.state.n[p]) / s.state.n)) for s in transitions[0])
    checks["degenerate_symmetry"] = sym <= 1e-10

    closed = build_scene(3, A_LEVELS[:3], E_LEVELS[:3], N_per_bin=4e12, extent=2.5,
                         Gamma_down=0.0, kappa=0.0, coupling_scale=0.53)
    st = SystemState(rng.uniform(1e8, 1e10, closed.n_modes), rng.uniform(0.2, 0.6, closed.n_bins))
    tr = integrate(st, 0.0, 100.0, load_preset("paper_fig1").settings(), scene=closed,
                   sample_times=np.linspace(0, 100, 11))
    M = closed.n_modes
    tot = tr.samples[:, :M].sum(axis=1) + tr.samples[:, M:] @ closed.grid.N
    checks["conservation"] = float(np.max(np.abs(tot / tot[0] - 1))) <= 1e-9

    b = dyn.basis
    big = max(np.abs(b.K[i]).max() for i in range(sc.n_modes))
    off = max((np.abs(b.projected_op(i, j, k)).max() for i in range(sc.n_modes)
               for j in range(b.depth + 1) for k in range(b.depth + 1) if abs(j - k) >= 2), default=0.0)
    checks["tridiagonal"] = off <= 1e-10 * big

    _, summary = compare_time_definitions([r for recs in baseline.values() for r in recs])
    checks["time_definitions"] = summary["n_clean"] > 0 and summary["dispersion"] <= 0.1

    ok = all(checks.values())
    record(9, ok, ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items())
           + f" (ratio dispersion {summary['dispersion']:.2%} over {summary['n_clean']} quenches)")
    assert ok
