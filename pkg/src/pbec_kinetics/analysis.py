"""Post-processing of runs: transitions, critical exponents, relaxation tails, clamping."""
from dataclasses import dataclass, field
import math

import numpy as np

from .kernel import effective_view
from .solver import find_steady

CONDENSED = 1e6
SLOPE_THRESHOLD = 5.0


class FitError(Exception):
    pass


@dataclass
class Transition:
    P_crit: float
    mode: object                 # ModeIndex of the first affected mode
    kind: str                    # "condensation" | "decondensation"
    modes: list = field(default_factory=list)   # all modes switching together
    slope: float = math.nan      # largest |d log n / d log P| near the jump
    bracket: tuple = ()          # (P_lo, P_hi) after refinement
    grid_bracket: tuple = ()     # bracketing sweep points
    widths: list = field(default_factory=list)  # bracket width per refinement iteration


@dataclass
class ExponentFit:
    exponent: float              # d log t_eq / d log |P - P_crit|
    r: float                     # signed correlation of rate 1/t_eq with P
    window: tuple                # (min, max) of |P - P_crit|
    P_crit: float
    n_points: int
    r_loglog: float = math.nan
    rate_slope: float = math.nan  # least-squares slope of rate vs |P - P_crit| through the origin


@dataclass
class TailReport:
    slope: float
    slope_window: tuple
    eta: float
    n_eq: float
    t0: float
    matched_decades: float
    matched_window: tuple
    max_log_deviation: float
    max_slope_mismatch: float


def _slopes(P, n):
    lp = np.log(P)
    ln = np.log(np.maximum(n, 1e-300))
    return np.diff(ln, axis=0) / np.diff(lp)[:, None]


def _solve_at(P, seed, dynamics, settings):
    return find_steady(P, seed, settings=settings, dynamics=dynamics)


def detect_transitions(sweep, dynamics=None, settings=None, rel_width=1e-3, modes=None,
                       slope_threshold=SLOPE_THRESHOLD, condensed=CONDENSED):
    """Locate condensation/decondensation transitions in a steady-state sweep.

    `sweep` is a list of SteadyState or a (P, n) pair of arrays. With a
    `dynamics` object the critical pump is refined by bisection in log P
    until the bracket is at most rel_width wide (relative).
    """
    if isinstance(sweep, tuple):
        P, n = np.asarray(sweep[0], float), np.asarray(sweep[1], float)
        states = None
    else:
        if len(sweep) < 3:
            raise FitError("need at least 3 sweep points")
        P = np.array([s.P for s in sweep])
        n = np.array([s.state.n for s in sweep])
        states = sweep
    if modes is None and dynamics is not None:
        modes = dynamics.scene.modes.modes
    order = np.argsort(P)
    P, n = P[order], n[order]
    if states is not None:
        states = [states[k] for k in order]
    slope = np.abs(_slopes(P, n))
    cond = n > condensed
    events = {}
    for i in range(n.shape[1]):
        for k in np.nonzero(cond[:-1, i] != cond[1:, i])[0]:
            lo, hi = max(k - 2, 0), min(k + 3, len(slope))
            s = float(slope[lo:hi, i].max())
            if s < slope_threshold:
                continue
            kind = "condensation" if cond[k + 1, i] else "decondensation"
            events.setdefault((k, kind), []).append((i, s))
    out = []
    for (k, kind), members in sorted(events.items()):
        idx = [i for i, _ in members]
        mode = modes[idx[0]] if modes is not None else idx[0]
        tr = Transition(math.sqrt(P[k] * P[k + 1]), mode, kind,
                        [modes[i] if modes is not None else i for i in idx],
                        max(s for _, s in members), (P[k], P[k + 1]), (P[k], P[k + 1]))
        if dynamics is not None:
            _refine(tr, idx[0], P[k], P[k + 1], states[k].state if states else None,
                    dynamics, settings, rel_width, condensed)
        out.append(tr)
    return out


def _refine(tr, i, lo, hi, seed, dynamics, settings, rel_width, condensed):
    cond_lo = tr.kind == "decondensation"
    tr.widths = [hi / lo - 1]
    while hi / lo - 1 > rel_width:
        mid = math.sqrt(lo * hi)
        ss = _solve_at(mid, seed, dynamics, settings)
        if (ss.state.n[i] > condensed) == cond_lo:
            lo, seed = mid, ss.state
        else:
            hi = mid
        tr.widths.append(hi / lo - 1)
    tr.bracket = (lo, hi)
    tr.P_crit = math.sqrt(lo * hi)


def interval_bounds(transitions):
    return sorted(t.P_crit for t in transitions)


def _pearson(x, y):
    x = np.asarray(x, float) - np.mean(x)
    y = np.asarray(y, float) - np.mean(y)
    den = math.sqrt(float(x @ x) * float(y @ y))
    return float(x @ y) / den if den > 0 else math.nan


def _side_fit(P, t, P_crit, min_points):
    d = np.abs(P - P_crit)
    if len(P) < min_points:
        raise FitError(f"need >= {min_points} points on each side of P_crit, got {len(P)}")
    rate = 1.0 / t
    slope = np.polyfit(np.log(d), np.log(t), 1)[0]
    r_ll = _pearson(np.log(d), np.log(t))
    through0 = float(d @ rate) / float(d @ d)
    return ExponentFit(float(slope), _pearson(P, rate), (float(d.min()), float(d.max())),
                       float(P_crit), int(len(P)), r_ll, through0)


def fit_critical_exponent(records, P_crit, min_points=6, window=None):
    """Fit t_eq ~ |P - P_crit|^exponent separately below and above P_crit.

    records: QuenchRecords (using P_end) or a (P, t_eq) pair. window, if given,
    restricts |P - P_crit| to [window[0], window[1]].
    """
    if isinstance(records, tuple):
        P, t = np.asarray(records[0], float), np.asarray(records[1], float)
    else:
        P = np.array([r.P_end for r in records])
        t = np.array([r.t_eq for r in records])
    ok = np.isfinite(t) & (t > 0) & (P != P_crit)
    if window is not None:
        dd = np.abs(P - P_crit)
        ok &= (dd >= window[0]) & (dd <= window[1])
    P, t = P[ok], t[ok]
    below, above = P < P_crit, P > P_crit
    return (_side_fit(P[below], t[below], P_crit, min_points),
            _side_fit(P[above], t[above], P_crit, min_points))


def loglog_slope(times, values, window):
    times, values = np.asarray(times, float), np.asarray(values, float)
    sel = (times >= window[0]) & (times <= window[1]) & (values > 0)
    if sel.sum() < 3:
        raise FitError(f"window {window} holds fewer than 3 trace samples")
    return float(np.polyfit(np.log(times[sel]), np.log(values[sel]), 1)[0])


def exponential_prediction(times, t0, n0, n_eq, eta):
    return n_eq + (n0 - n_eq) * np.exp(-eta * (np.asarray(times) - t0))


def fit_tail(times, n, eta, n_eq, window=(10.0, 1e3), t0=None, tol=0.01):
    """Algebraic-window slope plus the frozen-drive exponential prediction.

    The prediction n_eq + (n(t0) - n_eq) exp(-eta (t - t0)) is compared with the
    trace from t0 onward; the matched stretch is the longest run of samples
    whose |ln n_pred - ln n| / |ln n| stays within tol. With t0=None the anchor
    maximising the matched range of n is chosen.
    """
    times, n = np.asarray(times, float), np.asarray(n, float)
    if window[0] < times[0] or window[1] > times[-1]:
        raise FitError(f"slope window {window} outside trace [{times[0]}, {times[-1]}]")
    slope = loglog_slope(times, n, window)
    ln = np.log(n)

    def matched(k0):
        pred = exponential_prediction(times[k0:], times[k0], n[k0], n_eq, eta)
        with np.errstate(invalid="ignore", divide="ignore"):
            dev = np.abs(np.log(pred) - ln[k0:]) / np.abs(ln[k0:])
        bad = np.nonzero(~(dev <= tol))[0]
        end = k0 + (bad[0] if bad.size else len(dev))
        return end, dev[:end - k0]

    candidates = [int(np.searchsorted(times, t0))] if t0 is not None else range(len(times) - 1)
    best = None
    for k0 in candidates:
        end, dev = matched(k0)
        if end - k0 < 2:
            continue
        seg = n[k0:end]
        dec = math.log10(seg.max() / seg.min())
        if best is None or dec > best[0]:
            best = (dec, k0, end, float(dev.max()))
    if best is None:
        return TailReport(slope, tuple(window), eta, n_eq, math.nan, 0.0, (), math.nan, math.nan)
    dec, k0, end, maxdev = best
    tt = times[k0:end]
    pred = exponential_prediction(tt, times[k0], n[k0], n_eq, eta)
    s_sim = np.diff(ln[k0:end]) / np.diff(tt)
    s_pred = np.diff(np.log(pred)) / np.diff(tt)
    with np.errstate(invalid="ignore", divide="ignore"):
        mism = np.abs(s_sim - s_pred) / np.abs(s_pred)
    mism = mism[np.isfinite(mism)]
    return TailReport(slope, tuple(window), float(eta), float(n_eq), float(times[k0]), dec,
                      (float(tt[0]), float(tt[-1])), maxdev,
                      float(mism.max()) if mism.size else math.nan)


def clamping_diagnostics(sweep, scene, basis=None):
    P = np.array([s.P for s in sweep])
    views = [effective_view(s.state, scene, basis) for s in sweep]
    ratio = np.array([v.u / v.u_crit for v in views])
    eta = np.array([v.eta for v in views])
    eta_alt = np.array([(scene.E + scene.A) * (v.u_crit - v.u) for v in views])
    return {"P": P, "u_over_ucrit": ratio, "eta": eta, "eta_from_ucrit": eta_alt,
            "modes": scene.modes.labels()}


def exponential_decay_time(t, dev, d, upper=1e-1, min_points=3):
    """Decay time of the max relative deviation from a log-linear fit of the late tail.

    Uses samples whose deviation lies between d/10 and `upper` times the initial
    deviation. Returns (tau, r_squared) or (nan, nan) if too few samples.
    """
    t, dev = np.asarray(t, float), np.asarray(dev, float)
    if len(dev) < min_points or not dev[0] > 0:
        return math.nan, math.nan
    sel = (dev > 0) & (dev <= upper * dev[0]) & (dev >= d / 10)
    if sel.sum() < min_points:
        return math.nan, math.nan
    x, y = t[sel], np.log(dev[sel])
    k, c = np.polyfit(x, y, 1)
    res = y - (k * x + c)
    ss = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - float(res @ res) / ss if ss > 0 else math.nan
    return (-1.0 / k if k < 0 else math.nan), r2


def compare_time_definitions(records, min_r2=0.999):
    """Ratio of threshold time to exponential decay time per quench."""
    rows = []
    for r in records:
        tau, r2 = (math.nan, math.nan)
        if r.t_dev is not None and r.converged:
            tau, r2 = exponential_decay_time(r.t_dev, r.dev, r.d)
        delta = float(r.dev[0]) if r.dev is not None and len(r.dev) else math.nan
        clean = bool(np.isfinite(tau) and r2 >= min_r2)
        rows.append({"P_start": r.P_start, "P_end": r.P_end, "t_eq": r.t_eq, "tau": tau,
                     "ratio": r.t_eq / tau if np.isfinite(tau) else math.nan,
                     "expected_ratio": math.log(delta / r.d) if delta > r.d else math.nan,
                     "r2": r2, "exponential": clean})
    ratios = np.array([row["ratio"] for row in rows if row["exponential"]])
    summary = {"mean_ratio": float(ratios.mean()) if ratios.size else math.nan,
               "dispersion": float(ratios.std() / ratios.mean()) if ratios.size else math.nan,
               "n_clean": int(ratios.size), "n_total": len(rows)}
    return rows, summary
