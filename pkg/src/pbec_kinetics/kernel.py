"""Right-hand side and Jacobian of the photon/dye rate equations.

State vectors are laid out as [n_0 .. n_{M-1}, excitation...]. The
excitation block is either the full field f_j (one entry per bin) or the
hierarchical coefficients [s, c] where s is a uniform background and c the
coordinates in the orthonormal hierarchy basis (see hierarchy.py).

Photon equation, with u_i = sum_j g_ij N_j f_j:
    dn_i = E_i (n_i + 1) u_i - A_i n_i (sum_j g_ij N_j - u_i) - kappa n_i
         = -eta_i n_i + E_i u_i,      eta_i = gamma_i - (E_i + A_i) u_i
Molecular equation:
    df_j = -Gd f_j + P (1 - f_j) + sum_i g_ij [A_i n_i (1 - f_j) - E_i (n_i + 1) f_j]

In operator language the last sum is x + sum_i n_i Ahat_i f with the static
source x_j = sum_i g_ij A_i n_i and the diagonal operators
Ahat_i = -(E_i + A_i) g_i (plus the n-independent spontaneous part -E_i g_i).
Source and relaxation enter with these signs so that pumping from an empty
cavity drives f upward and f stays inside [0, 1].
"""
from dataclasses import dataclass
from typing import Optional
import math

import numpy as np
import scipy.sparse as sp


class StateValidityError(Exception):
    """State left the physical box n >= 0, 0 <= f <= 1."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass
class SystemState:
    n: np.ndarray
    excitation: np.ndarray
    t: float = 0.0
    depth: Optional[int] = None  # None: full field; L: hierarchy of depth L

    @property
    def representation(self):
        return "full" if self.depth is None else "hierarchical"

    def to_vector(self):
        return np.concatenate([self.n, self.excitation])

    @classmethod
    def from_vector(cls, y, n_modes, t=0.0, depth=None):
        y = np.asarray(y, dtype=float)
        return cls(y[:n_modes].copy(), y[n_modes:].copy(), float(t), depth)

    def copy(self):
        return SystemState(self.n.copy(), self.excitation.copy(), self.t, self.depth)


@dataclass
class Derivative:
    dn: np.ndarray
    dexcitation: np.ndarray

    def to_vector(self):
        return np.concatenate([self.dn, self.dexcitation])


@dataclass
class EffectiveModeView:
    u: np.ndarray
    u_crit: np.ndarray
    eta: np.ndarray


def vacuum(scene, basis=None):
    size = scene.n_bins if basis is None else basis.size
    return SystemState(np.zeros(scene.n_modes), np.zeros(size), 0.0,
                       None if basis is None else basis.depth)


def check_validity(state, tol_n=1e-6, tol_f=1e-8, basis=None, n_max=math.inf):
    """Raise StateValidityError if the state is outside the box by more than the margins.

    Hierarchical states are checked on photon numbers only, against n_max as
    a runaway guard (a truncated hierarchy can lose gain saturation).
    """
    if np.any(~np.isfinite(state.n)) or np.any(~np.isfinite(state.excitation)):
        raise StateValidityError("non-finite state", state)
    if np.min(state.n, initial=0.0) < -tol_n:
        raise StateValidityError(f"negative photon number {np.min(state.n):.3e}", state)
    if np.max(state.n, initial=0.0) > n_max:
        raise StateValidityError(f"photon number {np.max(state.n):.3e} above bound {n_max:.3e}", state)
    if state.depth is not None:
        # a truncated hierarchy does not preserve the box for the lifted field
        return
    f = state.excitation
    if f.size and (f.min() < -tol_f or f.max() > 1 + tol_f):
        raise StateValidityError(f"excitation outside [0,1]: [{f.min():.3e}, {f.max():.3e}]", state)


# ---- full field ---------------------------------------------------------------

def _photon_rates(n, u, scene):
    eta = scene.gamma - (scene.E + scene.A) * u
    return -eta * n + scene.E * u, eta


def full_rates(y, P, scene):
    """Flat full-field RHS."""
    M = scene.n_modes
    n, f = y[:M], y[M:]
    u = scene.W @ f
    dn, _ = _photon_rates(n, u, scene)
    An = scene.A * n
    a = (scene.A + scene.E) * n + scene.E
    g = scene.g
    df = P - (scene.Gamma_down + P) * f + An @ g - f * (a @ g)
    return np.concatenate([dn, df])


def full_jacobian(y, P, scene):
    """Analytic Jacobian of full_rates as a CSC matrix."""
    M = scene.n_modes
    n, f = y[:M], y[M:]
    u = scene.W @ f
    eta = scene.gamma - (scene.E + scene.A) * u
    a = (scene.A + scene.E) * n + scene.E
    g = scene.g
    dn_dn = sp.diags(-eta)
    dn_df = sp.csr_matrix(a[:, None] * scene.W)
    df_dn = sp.csr_matrix((g * (scene.A[:, None] - (scene.A + scene.E)[:, None] * f[None, :])).T)
    df_df = sp.diags(-(scene.Gamma_down + P) - a @ g)
    return sp.bmat([[dn_dn, dn_df], [df_dn, df_df]], format="csc")


def rhs_full(state, P, scene):
    if state.depth is not None:
        raise ValueError("rhs_full needs a full-field state")
    check_validity(state)
    r = full_rates(state.to_vector(), P, scene)
    M = scene.n_modes
    return Derivative(r[:M], r[M:])


def jacobian_full(state, P, scene):
    if state.depth is not None:
        raise ValueError("jacobian_full needs a full-field state")
    return full_jacobian(state.to_vector(), P, scene)


# ---- hierarchical -----------------------------------------------------------

def hier_rates(y, P, scene, basis):
    """Flat RHS in hierarchy coordinates y = [n, s, c]."""
    M = scene.n_modes
    n, s, c = y[:M], y[M], y[M + 1:]
    u = scene.Wsum * s + basis.WQ @ c
    dn, _ = _photon_rates(n, u, scene)
    a = (scene.A + scene.E) * n + scene.E
    ds = P - (scene.Gamma_down + P) * s
    dc = (-(scene.Gamma_down + P) * c
          + basis.G @ (scene.A * n - a * s)
          - (a @ basis.Kf).reshape(basis.rank, basis.rank) @ c)
    return np.concatenate([dn, [ds], dc])


def hier_jacobian(y, P, scene, basis):
    """Dense analytic Jacobian of hier_rates."""
    M, r = scene.n_modes, basis.rank
    n, s, c = y[:M], y[M], y[M + 1:]
    u = scene.Wsum * s + basis.WQ @ c
    AE = scene.A + scene.E
    eta = scene.gamma - AE * u
    a = AE * n + scene.E
    J = np.zeros((M + 1 + r, M + 1 + r))
    J[np.arange(M), np.arange(M)] = -eta
    J[:M, M] = a * scene.Wsum
    J[:M, M + 1:] = a[:, None] * basis.WQ
    J[M, M] = -(scene.Gamma_down + P)
    Kc = (basis.Kc2 @ c).reshape(M, r)  # row i: K_i c
    J[M + 1:, :M] = basis.G * (scene.A - AE * s)[None, :] - (AE[:, None] * Kc).T
    J[M + 1:, M] = -basis.G @ a
    J[M + 1:, M + 1:] = -(a @ basis.Kf).reshape(r, r)
    J[M + 1 + np.arange(r), M + 1 + np.arange(r)] -= scene.Gamma_down + P
    return J


def rhs_hier(state, P, scene, basis):
    if state.depth != basis.depth or state.excitation.shape != (basis.size,):
        raise ValueError(f"state shape/depth {state.depth},{state.excitation.shape} "
                         f"does not match hierarchy depth {basis.depth} size {basis.size}")
    r = hier_rates(state.to_vector(), P, scene, basis)
    M = scene.n_modes
    return Derivative(r[:M], r[M:])


def jacobian_hier(state, P, scene, basis):
    return hier_jacobian(state.to_vector(), P, scene, basis)


# ---- effective single-mode form -------------------------------------------------

def drive(state, scene, basis=None):
    """u_i = sum_j g_ij N_j f_j in either representation."""
    if state.depth is None:
        return scene.W @ state.excitation
    return scene.Wsum * state.excitation[0] + basis.WQ @ state.excitation[1:]


def effective_view(state, scene, basis=None):
    u = drive(state, scene, basis)
    u_crit = scene.u_crit
    eta = scene.gamma - (scene.E + scene.A) * u
    return EffectiveModeView(u, u_crit, eta)
