"""Physical scene: cavity modes, dye grid, mode-bin couplings and rate constants.

Units: kappa = 1 sets time, the harmonic-oscillator length sets length.
"""
from dataclasses import dataclass, field
import math

import numpy as np


class ConfigError(Exception):
    """Invalid scene or run configuration."""


@dataclass(frozen=True, order=True)
class ModeIndex:
    mx: int
    my: int

    def __post_init__(self):
        if self.mx < 0 or self.my < 0:
            raise ConfigError(f"mode indices must be non-negative, got {self.mx},{self.my}")

    @property
    def level(self):
        return self.mx + self.my

    def swapped(self):
        return ModeIndex(self.my, self.mx)

    def label(self):
        return f"[{self.mx},{self.my}]"


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModeSet:
    modes: tuple
    A: np.ndarray
    E: np.ndarray
    kappa: float = 1.0

    def __len__(self):
        return len(self.modes)

    def index_of(self, mode):
        if isinstance(mode, (tuple, list)):
            mode = ModeIndex(*mode)
        return self.modes.index(mode)

    def labels(self):
        return [m.label() for m in self.modes]

    def swap_permutation(self):
        """Permutation p with modes[p[i]] == modes[i].swapped()."""
        return np.array([self.index_of(m.swapped()) for m in self.modes])


@dataclass(frozen=True)
class MoleculeGrid:
    x: np.ndarray  # bin-centre coordinates along one axis
    N: np.ndarray  # molecules per bin, flattened row-major over (ix, iy)
    cell_area: float
    extent: float
    spacing: float

    @property
    def n_side(self):
        return len(self.x)

    @property
    def n_bins(self):
        return len(self.N)

    @property
    def positions(self):
        X, Y = np.meshgrid(self.x, self.x, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def metadata(self):
        return {"n_side": self.n_side, "n_bins": self.n_bins, "spacing": self.spacing,
                "cell_area": self.cell_area, "extent": self.extent,
                "covered_half_width": self.n_side * self.spacing / 2,
                "quadrature": "midpoint"}


@dataclass(frozen=True)
class CouplingMatrix:
    g: np.ndarray  # (modes, bins)


@dataclass(frozen=True)
class RateConstants:
    Gamma_down: float
    kappa: float = 1.0

    def __post_init__(self):
        if not self.Gamma_down >= 0:
            raise ConfigError("Gamma_down must be >= 0")


@dataclass(frozen=True)
class PumpSchedule:
    """Piecewise-constant pump: segments of (start_time, P)."""
    segments: tuple

    def __post_init__(self):
        segs = tuple((float(t), float(p)) for t, p in self.segments)
        if not segs:
            raise ConfigError("pump schedule needs at least one segment")
        if segs[0][0] != 0.0:
            raise ConfigError("first pump segment must start at t=0")
        for (t0, _), (t1, _) in zip(segs, segs[1:]):
            if not t1 > t0:
                raise ConfigError("pump segment start times must increase strictly")
        if any(not p >= 0 for _, p in segs):
            raise ConfigError("pump rates must be >= 0")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def constant(cls, P):
        return cls(((0.0, P),))

    @property
    def final_pump(self):
        return self.segments[-1][1]

    @property
    def last_switch(self):
        return self.segments[-1][0]

    def pump_at(self, t):
        P = self.segments[0][1]
        for t0, p in self.segments:
            if t >= t0:
                P = p
        return P


def build_mode_set(max_level, A_per_level, E_per_level, kappa=1.0):
    if int(max_level) != max_level or max_level < 1:
        raise ConfigError(f"max_level must be an integer >= 1, got {max_level}")
    max_level = int(max_level)
    if len(A_per_level) != max_level or len(E_per_level) != max_level:
        raise ConfigError(
            f"rate lists must have length max_level={max_level} "
            f"(got A: {len(A_per_level)}, E: {len(E_per_level)})")
    if any(not a > 0 for a in A_per_level) or any(not e > 0 for e in E_per_level):
        raise ConfigError("absorption and emission rates must be positive")
    modes = tuple(ModeIndex(mx, lev - mx) for lev in range(max_level) for mx in range(lev + 1))
    A = [A_per_level[m.level] for m in modes]
    E = [E_per_level[m.level] for m in modes]
    return ModeSet(modes, _frozen(A), _frozen(E), float(kappa))


def hermite_functions(m_max, x):
    """Unit-normalised 1D oscillator eigenfunctions psi_0..psi_m_max at x.

    Three-term recurrence on the normalised functions, which stays finite
    where the Hermite polynomials and the Gaussian separately would not.
    """
    x = np.asarray(x, dtype=float)
    psi = np.empty((m_max + 1,) + x.shape)
    psi[0] = math.pi ** -0.25 * np.exp(-0.5 * x * x)
    if m_max >= 1:
        psi[1] = math.sqrt(2.0) * x * psi[0]
    for m in range(1, m_max):
        psi[m + 1] = math.sqrt(2.0 / (m + 1)) * x * psi[m] - math.sqrt(m / (m + 1)) * psi[m - 1]
    return psi


def mode_intensity(mode, position):
    """|psi_mx(x)|^2 |psi_my(y)|^2 at a point (or array of points, last axis = 2)."""
    p = np.asarray(position, dtype=float)
    hx = hermite_functions(mode.mx, p[..., 0])[mode.mx]
    hy = hermite_functions(mode.my, p[..., 1])[mode.my]
    return hx * hx * hy * hy


def build_grid(density, N_per_bin, extent):
    for name, v in (("density", density), ("N_per_bin", N_per_bin), ("extent", extent)):
        if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
            raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
    h = math.sqrt(N_per_bin / density)
    nb = max(1, int(round(2 * extent / h)))
    x = (np.arange(nb) - (nb - 1) / 2) * h
    N = np.full(nb * nb, float(N_per_bin))
    return MoleculeGrid(_frozen(x), _frozen(N), h * h, float(extent), h)


def build_coupling(modes, grid, scale=1.0):
    """g_ij = intensity of mode i at bin j times the cell area (times an optional scale)."""
    m_max = max(max(m.mx, m.my) for m in modes.modes)
    psi2 = hermite_functions(m_max, grid.x) ** 2
    g = np.empty((len(modes), grid.n_bins))
    for i, m in enumerate(modes.modes):
        g[i] = np.outer(psi2[m.mx], psi2[m.my]).ravel()
    return CouplingMatrix(_frozen(g * grid.cell_area * scale))


@dataclass(frozen=True)
class Scene:
    modes: ModeSet
    grid: MoleculeGrid
    coupling: CouplingMatrix
    rates: RateConstants
    coupling_scale: float = 1.0
    # derived arrays, filled in __post_init__
    W: np.ndarray = field(init=False, repr=False)       # g_ij N_j
    Wsum: np.ndarray = field(init=False, repr=False)    # sum_j g_ij N_j
    gamma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        W = self.coupling.g * self.grid.N[None, :]
        Wsum = np.array([math.fsum(row) for row in W])
        object.__setattr__(self, "W", _frozen(W))
        object.__setattr__(self, "Wsum", _frozen(Wsum))
        object.__setattr__(self, "gamma", _frozen(self.modes.A * Wsum + self.rates.kappa))

    @property
    def g(self):
        return self.coupling.g

    @property
    def A(self):
        return self.modes.A

    @property
    def E(self):
        return self.modes.E

    @property
    def kappa(self):
        return self.rates.kappa

    @property
    def Gamma_down(self):
        return self.rates.Gamma_down

    @property
    def n_modes(self):
        return len(self.modes)

    @property
    def n_bins(self):
        return self.grid.n_bins

    @property
    def u_crit(self):
        return self.gamma / (self.E + self.A)

    def metadata(self):
        return {"n_modes": self.n_modes, "modes": self.modes.labels(),
                "grid": self.grid.metadata(), "coupling_scale": self.coupling_scale,
                "normalisation_max_error": float(np.max(np.abs(self.g.sum(axis=1) / self.coupling_scale - 1)))}


def build_scene(max_level=5, A_per_level=None, E_per_level=None, density=1e13, N_per_bin=1e12,
                extent=5.0, Gamma_down=0.25, coupling_scale=1.0, kappa=1.0):
    if A_per_level is None or E_per_level is None:
        raise ConfigError("A_per_level and E_per_level are required")
    if not coupling_scale > 0:
        raise ConfigError("coupling_scale must be positive")
    modes = build_mode_set(max_level, A_per_level, E_per_level, kappa)
    grid = build_grid(density, N_per_bin, extent)
    return Scene(modes, grid, build_coupling(modes, grid, coupling_scale),
                 RateConstants(Gamma_down, kappa), float(coupling_scale))
