"""Stiff time integration and steady-state solves.

Integration uses the 5th-order Radau IIA method from scipy with the
analytic Jacobian; pump switches restart the integrator exactly at the
segment boundary. Steady states come from damped Newton with a fallback to
long integration.
"""
from dataclasses import dataclass, field, asdict
import logging
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import Radau

from . import kernel
from .kernel import SystemState, StateValidityError
from .model import PumpSchedule

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-12
WEIGHTED_TOL = 1e-10
MAX_HALVINGS = 8
GROW = 2.0
FALLBACK_STEPS = 20000


class SolverError(Exception):
    def __init__(self, msg, state=None, P=None):
        super().__init__(msg)
        self.state = state
        self.P = P


class StiffnessError(SolverError):
    pass


@dataclass(frozen=True)
class IntegratorSettings:
    rel_tol: float = 1e-10
    abs_tol_n: float = 1e-20
    abs_tol_f: float = 1e-18
    max_step: float = math.inf
    dense_output: bool = True

    def __post_init__(self):
        for k in ("rel_tol", "abs_tol_n", "abs_tol_f", "max_step"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")

    def as_dict(self):
        d = asdict(self)
        d["max_step"] = None if math.isinf(self.max_step) else self.max_step
        return d


class Dynamics:
    """Flat-vector view of the equations in one representation."""

    def __init__(self, scene, basis=None):
        self.scene = scene
        self.basis = basis
        self.n_modes = scene.n_modes
        self.depth = None if basis is None else basis.depth
        self.size = scene.n_modes + (scene.n_bins if basis is None else basis.size)
        # every photon needs an excited molecule; far above this is a runaway
        self.n_max = (1e3 * float(scene.grid.N.sum()) * max(1.0, 1.0 / scene.kappa)
                      if scene.kappa > 0 else math.inf)

    def rates(self, y, P):
        if self.basis is None:
            return kernel.full_rates(y, P, self.scene)
        return kernel.hier_rates(y, P, self.scene, self.basis)

    def jacobian(self, y, P):
        if self.basis is None:
            return kernel.full_jacobian(y, P, self.scene)
        return kernel.hier_jacobian(y, P, self.scene, self.basis)

    def solve_linear(self, J, b):
        if self.basis is None:
            return spla.spsolve(J, b)
        return np.linalg.solve(J, b)

    def atol(self, settings, y=None):
        a = np.full(self.size, settings.abs_tol_f)
        a[:self.n_modes] = settings.abs_tol_n
        if self.basis is not None and y is not None:
            # coefficients that vanish by symmetry carry roundoff of order
            # 1e-16 |f|; tie their tolerance to the rms of the field instead
            a[self.n_modes + 1:] += settings.rel_tol * self.field_scale(y)
        return a

    def field_scale(self, y):
        """rms of the excitation field."""
        if self.basis is None:
            return 1.0
        f = self.field(y)
        return math.sqrt(float(np.mean(f * f)))

    def state(self, y, t=0.0):
        return SystemState.from_vector(y, self.n_modes, t, self.depth)

    def vector(self, state):
        if state.depth != self.depth:
            raise ValueError(f"state depth {state.depth} does not match dynamics depth {self.depth}")
        return state.to_vector()

    def field(self, y):
        x = y[self.n_modes:]
        return x if self.basis is None else self.basis.lift_vector(x)

    def is_valid(self, y, tol_n=1e-6, tol_f=1e-8):
        try:
            kernel.check_validity(self.state(y), tol_n, tol_f, self.basis, self.n_max)
        except StateValidityError:
            return False
        return True

    def residual_weights(self, y, P):
        """Per-component scale turning the RHS into dimensionless rates."""
        M = self.n_modes
        w = np.empty(self.size)
        w[:M] = self.scene.gamma * (np.abs(y[:M]) + 1.0)
        w[M:] = self.scene.Gamma_down + P + 1.0
        if self.basis is not None:
            w[M + 1:] *= math.sqrt(self.basis.Q.shape[0])
        return w

    def metadata(self):
        if self.basis is None:
            return {"representation": "full", "hierarchy_depth": None}
        return {"representation": "hierarchical", "hierarchy_depth": self.depth, **self.basis.metadata()}


@dataclass
class StepInfo:
    t_old: float
    t: float
    y: np.ndarray
    P: float
    dense: object  # callable t -> y on [t_old, t]


@dataclass
class Trajectory:
    t: np.ndarray                 # step end times (if kept) else [t0, t_final]
    y: np.ndarray
    sample_times: np.ndarray
    samples: np.ndarray           # states at sample_times
    final: SystemState
    n_steps: int
    stopped_early: bool = False
    peaks: dict = field(default_factory=dict)


def integrate(initial, schedule, t_end, settings, observer=None, scene=None, basis=None,
              sample_times=None, keep_steps=False, dynamics=None, max_steps=None):
    """Integrate from `initial` (at its own time) to t_end under a pump schedule.

    observer(StepInfo) is called after every accepted step; returning True stops
    the run. States at sample_times are taken from the dense output.
    Per-mode peak photon numbers over step ends are tracked in Trajectory.peaks.
    """
    if dynamics is None:
        dynamics = Dynamics(scene, basis)
    if not isinstance(schedule, PumpSchedule):
        schedule = PumpSchedule.constant(float(schedule))
    y = np.array(dynamics.vector(initial), dtype=float)
    if not dynamics.is_valid(y):
        kernel.check_validity(dynamics.state(y), basis=dynamics.basis)
    t = float(initial.t)
    samples_t = np.array([] if sample_times is None else sorted(sample_times), dtype=float)
    samples = np.full((len(samples_t), dynamics.size), np.nan)
    k_sample = 0
    while k_sample < len(samples_t) and samples_t[k_sample] <= t:
        samples[k_sample] = y
        k_sample += 1
    ts, ys = [t], [y.copy()]
    M = dynamics.n_modes
    n_peak, t_peak = y[:M].copy(), np.full(M, t)
    n_steps = 0
    stopped = False
    bounds = [s for s, _ in schedule.segments[1:]] + [math.inf]
    for (seg_start, P), seg_end in zip(schedule.segments, bounds):
        if seg_end <= t:
            continue
        if t >= t_end:
            break
        t_bound = min(seg_end, t_end)

        def start(t0, y0, atol, P=P):
            return Radau(lambda tt, yy: dynamics.rates(yy, P), t0, y0, t_bound,
                         max_step=settings.max_step, rtol=settings.rel_tol, atol=atol,
                         jac=lambda tt, yy: dynamics.jacobian(yy, P))

        atol = dynamics.atol(settings, y)
        scale = dynamics.field_scale(y)
        solver = start(t, y, atol)
        while solver.status == "running":
            msg = solver.step()
            if solver.status == "failed":
                raise StiffnessError(f"integration failed at t={solver.t:.6g}: {msg}",
                                     dynamics.state(solver.y, solver.t), P)
            n_steps += 1
            if max_steps is not None and n_steps > max_steps:
                raise SolverError(f"step budget {max_steps} exhausted at t={solver.t:.6g}",
                                  dynamics.state(solver.y, solver.t), P)
            y_new = solver.y
            if not dynamics.is_valid(y_new):
                try:
                    kernel.check_validity(dynamics.state(y_new, solver.t), basis=dynamics.basis,
                                         n_max=dynamics.n_max)
                except StateValidityError as e:
                    raise SolverError(f"validity error at t={solver.t:.6g}: {e}",
                                      dynamics.state(y_new, solver.t), P) from e
            dense = solver.dense_output() if (settings.dense_output or observer is not None
                                               or k_sample < len(samples_t)) else None
            while k_sample < len(samples_t) and samples_t[k_sample] <= solver.t:
                samples[k_sample] = dense(samples_t[k_sample]) if dense is not None else y_new
                k_sample += 1
            up = y_new[:M] > n_peak
            n_peak[up] = y_new[:M][up]
            t_peak[up] = solver.t
            if keep_steps:
                ts.append(solver.t)
                ys.append(y_new.copy())
            if observer is not None and observer(StepInfo(solver.t_old, solver.t, y_new, P, dense)):
                stopped = True
                break
            new_scale = dynamics.field_scale(y_new)
            if solver.status == "running" and not 0.5 * scale <= new_scale <= 2.0 * scale:
                # the coefficient tolerance follows the field; restart with the new one
                scale = new_scale
                solver = start(solver.t, y_new.copy(), dynamics.atol(settings, y_new))
        t, y = solver.t, solver.y.copy()
        if stopped:
            break
    if not keep_steps:
        ts.append(t)
        ys.append(y.copy())
    return Trajectory(np.array(ts), np.array(ys), samples_t, samples, dynamics.state(y, t),
                      n_steps, stopped, {"n_peak": n_peak, "t_peak": t_peak})


@dataclass
class SteadyState:
    state: SystemState
    P: float
    residual_norm: float
    converged: bool
    iterations: int = 0
    residual_history: list = field(default_factory=list)


def relative_residual(F, y):
    ny = np.linalg.norm(y)
    nf = np.linalg.norm(F)
    return nf / ny if ny > 0 else nf


def _newton(dyn, y, P, max_iter=40):
    """Damped Newton; returns (y, converged, relative residual history).

    Convergence needs both the relative residual |F|/|y| <= NEWTON_TOL and a
    small component-weighted residual, since |y| is dominated by the largest
    condensate and says little about weakly populated modes.
    """
    F = dyn.rates(y, P)
    phi = np.linalg.norm(F / dyn.residual_weights(y, P))
    hist = [relative_residual(F, y)]

    def done():
        return hist[-1] <= NEWTON_TOL and phi <= WEIGHTED_TOL

    for _ in range(max_iter):
        if phi == 0.0:
            return y, True, hist
        try:
            dy = dyn.solve_linear(dyn.jacobian(y, P), -F)
        except (np.linalg.LinAlgError, RuntimeError):
            return y, done(), hist
        if not np.all(np.isfinite(dy)):
            return y, done(), hist
        lam = 1.0
        for _ in range(MAX_HALVINGS + 1):
            y_try = y + lam * dy
            if dyn.is_valid(y_try, tol_n=0.0, tol_f=1e-12):
                F_try = dyn.rates(y_try, P)
                phi_try = np.linalg.norm(F_try / dyn.residual_weights(y_try, P))
                if phi_try < phi or phi_try == 0.0:
                    break
            lam *= 0.5
        else:
            return y, done(), hist
        step = np.max(np.abs(lam * dy) / (np.abs(y) + 1e-30))
        y, F, phi = y_try, F_try, phi_try
        hist.append(relative_residual(F, y))
        if done() and step <= 1e-10:
            return y, True, hist
    return y, done(), hist


def _pseudo_transient(dyn, y, P, max_iter=400, dt=1.0):
    """Implicit-Euler steps with a growing step size until the step is effectively infinite.

    Follows the stable branch of the dynamics but needs far fewer linear
    solves than resolving the transient; ends in the Newton regime.
    """
    F = dyn.rates(y, P)
    phi = np.linalg.norm(F / dyn.residual_weights(y, P))
    for _ in range(max_iter):
        if phi == 0.0:
            return y
        J = dyn.jacobian(y, P)
        shift = sp.identity(dyn.size, format="csc") / dt if dyn.basis is None else np.eye(dyn.size) / dt
        try:
            dy = dyn.solve_linear(shift - J, F)
        except (np.linalg.LinAlgError, RuntimeError):
            dt *= 0.25
            continue
        y_try = y + dy
        if not (np.all(np.isfinite(dy)) and dyn.is_valid(y_try, tol_n=0.0, tol_f=1e-12)):
            dt *= 0.25
            if dt < 1e-8:
                return y
            continue
        F_try = dyn.rates(y_try, P)
        phi_try = np.linalg.norm(F_try / dyn.residual_weights(y_try, P))
        dt *= GROW if phi_try < phi else 1.2
        y, F, phi = y_try, F_try, phi_try
        if dt > 1e14:
            break
    return y


def _steady_from(dyn, y0, P, settings):
    y, ok, hist = _newton(dyn, y0, P)
    iters = len(hist) - 1
    if ok:
        return y, hist, iters
    y_n, ok, hist = _newton(dyn, _pseudo_transient(dyn, y0, P), P)
    iters += len(hist) - 1
    if ok:
        return y_n, hist, iters
    # fall back to relaxing the dynamics for progressively longer times
    y = y0.copy()
    t_total = 0.0
    relax = IntegratorSettings(rel_tol=max(settings.rel_tol, 1e-9), abs_tol_n=settings.abs_tol_n,
                               abs_tol_f=settings.abs_tol_f, dense_output=False)
    for T in (30.0, 300.0, 3e3, 3e4, 3e5, 1e6):
        try:
            tr = integrate(dyn.state(y, 0.0), P, T, relax, dynamics=dyn, max_steps=FALLBACK_STEPS)
        except SolverError as exc:
            raise SolverError(f"steady state not found at P={P:.6g}: {exc}", exc.state, P) from exc
        y = tr.final.to_vector()
        t_total += T
        y_n, ok, hist = _newton(dyn, y, P)
        iters += len(hist) - 1
        if ok:
            log.debug("steady state at P=%g after %g of relaxation", P, t_total)
            return y_n, hist, iters
    raise SolverError(f"steady state did not converge at P={P:.6g}", dyn.state(y_n), P)


def find_steady(P, guess=None, scene=None, basis=None, settings=None, dynamics=None):
    dyn = dynamics or Dynamics(scene, basis)
    settings = settings or IntegratorSettings()
    if not P >= 0:
        raise SolverError(f"pump must be >= 0, got {P}", P=P)
    if guess is None:
        guess = kernel.vacuum(dyn.scene, dyn.basis)
    y0 = dyn.vector(guess)
    if P == 0 and not np.any(y0):
        return SteadyState(dyn.state(y0), 0.0, 0.0, True, 0, [0.0])
    y, hist, iters = _steady_from(dyn, y0, P, settings)
    return SteadyState(dyn.state(y), float(P), hist[-1], True, iters, hist)


RAMP_PER_DECADE = 8


def steady_from_vacuum(P, dynamics, settings, P_low=1e-4, per_decade=RAMP_PER_DECADE):
    """Steady state reached from the empty cavity.

    Relaxes at a low pump first, then ramps up through closely spaced
    continuation steps; solving far above threshold straight from vacuum
    is much slower and less reliable.
    """
    y0 = np.zeros(dynamics.size)
    if P == 0:
        return SteadyState(dynamics.state(y0), 0.0, 0.0, True)
    P0 = min(P, P_low)
    tr = integrate(dynamics.state(y0), P0, 50.0, IntegratorSettings(
        rel_tol=max(settings.rel_tol, 1e-9), abs_tol_n=settings.abs_tol_n,
        abs_tol_f=settings.abs_tol_f, dense_output=False), dynamics=dynamics)
    ss = find_steady(P0, tr.final, settings=settings, dynamics=dynamics)
    if P > P0:
        k = int(math.ceil(per_decade * math.log10(P / P0)))
        for Pk in np.geomspace(P0, P, k + 1)[1:]:
            ss = find_steady(float(Pk), ss.state, settings=settings, dynamics=dynamics)
        ss.P = float(P)
    return ss


def continuation_sweep(P_grid, scene=None, basis=None, settings=None, dynamics=None):
    dyn = dynamics or Dynamics(scene, basis)
    settings = settings or IntegratorSettings()
    P_grid = [float(p) for p in P_grid]
    d = np.diff(P_grid)
    if len(P_grid) > 1 and not (np.all(d > 0) or np.all(d < 0)):
        raise ValueError("P_grid must be strictly ascending or descending")
    out = []
    prev = None
    for P in P_grid:
        try:
            if prev is None:
                ss = steady_from_vacuum(P, dyn, settings)
            else:
                # ramp through intermediate pumps across wide gaps
                k = max(1, int(math.ceil(RAMP_PER_DECADE * abs(math.log10(P / prev.P))))) if prev.P > 0 else 1
                ss = prev
                for Pk in np.geomspace(prev.P, P, k + 1)[1:-1] if k > 1 else ():
                    ss = find_steady(float(Pk), ss.state, settings=settings, dynamics=dyn)
                ss = find_steady(P, ss.state, settings=settings, dynamics=dyn)
        except SolverError as e:
            raise SolverError(f"continuation failed at P={P:.6g}: {e}", e.state, P) from e
        out.append(ss)
        prev = ss
    return out
