"""Quench protocols: equilibration timing, pump sweeps, quench maps, multi-step schedules."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math

import numpy as np

from .model import PumpSchedule
from .solver import Dynamics, IntegratorSettings, SolverError, continuation_sweep, find_steady, integrate

T_MAX = 1e6


@dataclass
class QuenchRecord:
    P_start: float
    P_end: float
    t_eq: float
    converged: bool
    d: float
    n_start: np.ndarray
    n_end: np.ndarray
    n_peak: np.ndarray
    t_peak: np.ndarray
    t_first: float = math.nan
    t_last: float = math.nan
    n_steps: int = 0
    t_dev: np.ndarray = field(default=None, repr=False)    # step-end times after the final switch
    dev: np.ndarray = field(default=None, repr=False)      # max relative deviation at those times
    error: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class QuenchMap:
    P_start_grid: np.ndarray
    P_end_grid: np.ndarray
    t_eq: np.ndarray
    converged: np.ndarray
    labels_start: list
    labels_end: list
    records: list


@dataclass
class QuenchTrace:
    P_start: float
    P_end: float
    times: np.ndarray
    n: np.ndarray               # (len(times), modes)
    n_start: np.ndarray
    n_end: np.ndarray
    n_peak: np.ndarray
    t_peak: np.ndarray
    steady_end: object = None   # SteadyState at P_end


class _Equilibration:
    """Step observer implementing the threshold criterion after the final pump switch."""

    def __init__(self, target, d, t_switch, abs_floor=0.0, n_modes=None):
        self.target = np.asarray(target, dtype=float)
        self.M = len(self.target)
        self.denom = np.maximum(self.target, abs_floor)
        self.d = d
        self.t_switch = t_switch
        self.above = None
        self.pending = False
        self.t_first = math.nan
        self.t_last = math.nan
        self.done = False
        self.hist_t, self.hist_dev = [], []

    def deviation(self, y):
        diff = np.abs(y[:self.M] - self.target)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.denom > 0, diff / np.where(self.denom > 0, self.denom, 1.0),
                         np.where(diff > 0, np.inf, 0.0))
        return float(np.max(r))

    def start(self, y):
        dv = self.deviation(y)
        self.hist_t.append(self.t_switch)
        self.hist_dev.append(dv)
        self.above = dv > self.d
        if not self.above:
            self.t_first = self.t_last = self.t_switch
            self.done = True
        return self.done

    def _bisect(self, lo, hi, dense):
        while hi - lo > 1e-3 * max(hi - self.t_switch, 1e-12) * 0.5:
            mid = 0.5 * (lo + hi)
            if self.deviation(dense(mid)) > self.d:
                lo = mid
            else:
                hi = mid
        return hi

    def __call__(self, step):
        if step.t < self.t_switch or (step.t == self.t_switch and self.above is None):
            return False
        if self.above is None:
            raise RuntimeError("observer not started at the final switch")
        dv = self.deviation(step.y)
        self.hist_t.append(step.t)
        self.hist_dev.append(dv)
        if dv <= self.d:
            if self.above:
                tc = self._bisect(max(step.t_old, self.t_switch), step.t, step.dense)
                if math.isnan(self.t_first):
                    self.t_first = tc
                self.t_last = tc
                self.above = False
                self.pending = True
                return False
            self.done = True
            return True
        self.above = True
        self.pending = False
        return False


def _steady_states(P_values, dynamics, settings):
    """Steady states for a set of pumps via one ascending continuation."""
    Ps = sorted(set(float(p) for p in P_values))
    sweep = continuation_sweep(Ps, settings=settings, dynamics=dynamics)
    return {ss.P: ss for ss in sweep}


def _relax(initial, schedule, target, d, dynamics, settings, t_max, abs_floor, P_start):
    """Integrate a schedule from `initial`, timing equilibration after the last switch."""
    obs = _Equilibration(target.state.n, d, schedule.last_switch, abs_floor)
    M = dynamics.n_modes
    t_switch = schedule.last_switch
    y0 = initial.to_vector()
    n_steps = 0
    peaks = {"n_peak": y0[:M].copy(), "t_peak": np.zeros(M)}
    state = initial
    error = ""
    if t_switch > 0:
        pre = integrate(initial, PumpSchedule(schedule.segments[:-1]), t_switch, settings,
                        dynamics=dynamics)
        state, n_steps = pre.final, pre.n_steps
        peaks = pre.peaks
    if not obs.start(state.to_vector()):
        state.t = t_switch
        post = integrate(state, schedule.segments[-1][1], t_switch + t_max, settings,
                         observer=obs, dynamics=dynamics)
        n_steps += post.n_steps
        up = post.peaks["n_peak"] > peaks["n_peak"]
        peaks["n_peak"] = np.where(up, post.peaks["n_peak"], peaks["n_peak"])
        peaks["t_peak"] = np.where(up, post.peaks["t_peak"], peaks["t_peak"])
        if not obs.done:
            error = f"timeout: not equilibrated by t={t_switch + t_max:g}"
    converged = obs.done
    t_first = obs.t_first - t_switch if converged or not math.isnan(obs.t_first) else math.nan
    t_last = obs.t_last - t_switch if converged else math.nan
    n_start = initial.n.copy()
    n_end = target.state.n.copy()
    n_peak = np.maximum.reduce([peaks["n_peak"], n_start, n_end])
    return QuenchRecord(P_start, schedule.final_pump, t_first if converged else math.nan, converged, d,
                        n_start, n_end, n_peak, peaks["t_peak"], t_first, t_last, n_steps,
                        np.array(obs.hist_t) - t_switch, np.array(obs.hist_dev), error,
                        {"t_switch": t_switch, "t_total": t_switch + t_first if converged else math.nan})


def _resolve(scene, basis, dynamics, settings):
    dyn = dynamics or Dynamics(scene, basis)
    return dyn, settings or IntegratorSettings()


def equilibration_time(P_start, P_end, d=1e-6, scene=None, settings=None, basis=None, t_max=T_MAX,
                       abs_floor=0.0, ss_start=None, ss_end=None, dynamics=None):
    if not 0 < d < 1:
        raise ValueError("threshold d must lie in (0, 1)")
    dyn, settings = _resolve(scene, basis, dynamics, settings)
    if ss_start is None or ss_end is None:
        ss = _steady_states([P_start, P_end], dyn, settings)
        ss_start = ss_start or ss[float(P_start)]
        ss_end = ss_end or ss[float(P_end)]
    init = ss_start.state.copy()
    init.t = 0.0
    return _relax(init, PumpSchedule.constant(P_end), ss_end, d, dyn, settings, t_max, abs_floor,
                  float(P_start))


def _equilibration_job(args):
    P0, P1, d, scene, basis, settings, t_max, abs_floor, ss0, ss1 = args
    try:
        return equilibration_time(P0, P1, d, scene, settings, basis, t_max, abs_floor, ss0, ss1)
    except SolverError as e:
        M = scene.n_modes
        nan = np.full(M, np.nan)
        return QuenchRecord(P0, P1, math.nan, False, d, nan, nan, nan, nan, error=str(e))


def _map_jobs(jobs_args, jobs):
    if jobs is None or jobs <= 1 or len(jobs_args) <= 1:
        return [_equilibration_job(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        # map preserves submission order, so assembly is by grid index
        return list(ex.map(_equilibration_job, jobs_args))


def sweep_1d(P_grid, quench_fraction=0.01, d=1e-6, scene=None, settings=None, basis=None,
             t_max=T_MAX, abs_floor=0.0, jobs=1, steady=None):
    """1% (by default) upward quench at every grid pump."""
    P_grid = [float(p) for p in P_grid]
    if any(b <= a for a, b in zip(P_grid, P_grid[1:])):
        raise ValueError("P_grid must be ascending")
    dyn, settings = _resolve(scene, basis, None, settings)
    ends = [P * (1 + quench_fraction) for P in P_grid]
    if steady is None:
        steady = _steady_states(P_grid + ends, dyn, settings)
    args = [(P0, P1, d, dyn.scene, dyn.basis, settings, t_max, abs_floor, steady[P0], steady[P1])
            for P0, P1 in zip(P_grid, ends)]
    return _map_jobs(args, jobs)


def interval_label(P, P_crits):
    k = int(np.searchsorted(np.sort(P_crits), P))
    return chr(ord("A") + k)


def quench_map(P_start_grid, P_end_grid, d=1e-6, scene=None, settings=None, basis=None,
               t_max=T_MAX, abs_floor=0.0, jobs=1, P_crits=None):
    P_start_grid = np.asarray(P_start_grid, dtype=float)
    P_end_grid = np.asarray(P_end_grid, dtype=float)
    if P_start_grid.size == 0 or P_end_grid.size == 0:
        raise ValueError("quench map grids must be nonempty")
    dyn, settings = _resolve(scene, basis, None, settings)
    steady = _steady_states(list(P_start_grid) + list(P_end_grid), dyn, settings)
    args = [(P0, P1, d, dyn.scene, dyn.basis, settings, t_max, abs_floor, steady[P0], steady[P1])
            for P0 in P_start_grid for P1 in P_end_grid]
    recs = _map_jobs(args, jobs)
    shape = (len(P_start_grid), len(P_end_grid))
    t = np.array([r.t_eq for r in recs]).reshape(shape)
    conv = np.array([r.converged for r in recs]).reshape(shape)
    crits = [] if P_crits is None else list(P_crits)
    labels = lambda grid: [interval_label(P, crits) if crits else "" for P in grid]
    return QuenchMap(P_start_grid, P_end_grid, t, conv, labels(P_start_grid), labels(P_end_grid), recs)


def run_schedule(schedule, d=1e-6, scene=None, settings=None, basis=None, P_initial=None,
                 t_max=T_MAX, abs_floor=0.0, dynamics=None):
    """Start from the steady state at P_initial (default: first segment pump) and run the schedule.

    t_eq is measured from the final switch; extra['t_total'] from t=0.
    """
    dyn, settings = _resolve(scene, basis, dynamics, settings)
    if not isinstance(schedule, PumpSchedule):
        schedule = PumpSchedule(schedule)
    P0 = schedule.segments[0][1] if P_initial is None else float(P_initial)
    ss = _steady_states([P0, schedule.final_pump], dyn, settings)
    init = ss[P0].state.copy()
    init.t = 0.0
    return _relax(init, schedule, ss[schedule.final_pump], d, dyn, settings, t_max, abs_floor, P0)


def big_quench_trace(P_start, P_end, sample_times, scene=None, settings=None, basis=None,
                     dynamics=None):
    dyn, settings = _resolve(scene, basis, dynamics, settings)
    times = np.sort(np.asarray(sample_times, dtype=float))
    ss = _steady_states([P_start, P_end], dyn, settings)
    init = ss[float(P_start)].state.copy()
    init.t = 0.0
    tr = integrate(init, float(P_end), float(times[-1]), settings, sample_times=times, dynamics=dyn)
    M = dyn.n_modes
    return QuenchTrace(float(P_start), float(P_end), times, tr.samples[:, :M], init.n.copy(),
                       ss[float(P_end)].state.n.copy(), tr.peaks["n_peak"], tr.peaks["t_peak"],
                       ss[float(P_end)])
