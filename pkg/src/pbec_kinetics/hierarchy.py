"""Hierarchy of molecular-excitation components.

Level 0 spans the coupling weight vectors w_i = g_i N. Level k+1 collects
what the diagonal mode-profile operators (multiplication by g_i) generate
from level k, orthogonalised against all lower levels. Because the photon
drive only sees level 0 and each operator moves a level-k vector into levels
k-1..k+1, the reduced operators are block tridiagonal and truncating after
level L only drops the coupling into level L+1.

The pump source P(1 - f) has a uniform part that is not in the span of the
weight vectors, so the field is written f = s 1 + Q c with s a uniform
background obeying ds = P (1 - s) - Gd s. With uniform molecule density the
couplings g_i lie in level 0, so this split is exact for any pump history.

Mode profiles are even under the grid mirrors and the x<->y swap permutes
them, so every level is built inside exact symmetry sectors (mirror-even,
swap-even or swap-odd). Otherwise the rank cut on near-threshold directions
breaks the symmetry of the span at the 1e-4 level by level 2.
"""
from dataclasses import dataclass, field

import numpy as np

from .kernel import SystemState

RANK_TOL = 1e-10


class HierarchyError(Exception):
    pass


def _orth(V, rel_tol, ref=None):
    """Orthonormal basis of range(V), dropping directions below rel_tol of ref.

    ref defaults to the largest singular value of V; pass the scale of the
    vectors before projection so that pure roundoff residues are dropped.
    """
    if V.shape[1] == 0:
        return V
    U, sv, _ = np.linalg.svd(V, full_matrices=False)
    if ref is None:
        ref = sv[0] if sv.size else 0.0
    if sv.size == 0 or ref == 0:
        return V[:, :0]
    return U[:, sv > rel_tol * ref]


def _symmetries(scene, tol=1e-13):
    """Bin permutations fixing every g_i (mirrors), and the swap if it permutes the g_i.

    Returns (mirrors, swap, mode_perm); swap and mode_perm are None without swap symmetry.
    """
    nb = scene.grid.n_side
    grid = np.arange(nb * nb).reshape(nb, nb)
    g, N = scene.g, scene.grid.N
    scale = np.abs(g).max()

    def same(a, b):
        return np.max(np.abs(a - b)) <= tol * scale

    mirrors = [m for m in (grid[::-1, :].ravel(), grid[:, ::-1].ravel())
               if np.array_equal(N[m], N) and same(g[:, m], g)]
    swap = grid.T.ravel()
    if not np.array_equal(N[swap], N):
        return mirrors, None, None
    p = np.array([scene.modes.index_of(m.swapped()) if m.swapped() in scene.modes.modes else -1
                  for m in scene.modes.modes])
    if np.any(p < 0) or not same(g[:, swap], g[p]):
        return mirrors, None, None
    return mirrors, swap, p


def _sectors(V, sym):
    """Split the columns of V into exactly symmetric parts, as (sign, block) pairs."""
    mirrors, swap, _ = sym
    for m in mirrors:
        V = (V + V[m]) / 2
    if swap is None:
        return [(0, V)]
    return [(1, (V + V[swap]) / 2), (-1, (V - V[swap]) / 2)]


def _clean(U, sign, sym):
    # restore exact symmetry lost to roundoff in the factorisation
    mirrors, swap, _ = sym
    for m in mirrors:
        U = (U + U[m]) / 2
    if sign:
        U = (U + sign * U[swap]) / 2
    if U.shape[1]:
        # combinations of symmetric columns stay symmetric
        R = np.linalg.cholesky(U.T @ U).T
        U = np.linalg.solve(R.T, U.T).T
    return U


def _project_out(V, blocks):
    for _ in range(2):
        for B in blocks:
            V = V - B @ (B.T @ V)
    return V


@dataclass(frozen=True)
class HierarchyBasis:
    levels: tuple           # orthonormal blocks (bins x r_k)
    depth: int
    rank_tol: float
    Q: np.ndarray = field(repr=False)        # concatenated levels
    K: np.ndarray = field(repr=False)        # (modes, r, r): Q^T diag(g_i) Q
    G: np.ndarray = field(repr=False)        # (r, modes): Q^T g_i
    WQ: np.ndarray = field(repr=False)       # (modes, r): w_i^T Q, zero outside level 0
    ones_Q: np.ndarray = field(repr=False)   # Q^T 1
    ones_residual: np.ndarray = field(repr=False)  # 1 - Q Q^T 1

    @property
    def rank(self):
        return self.Q.shape[1]

    @property
    def size(self):
        """Length of the excitation block: background plus level coefficients."""
        return 1 + self.rank

    @property
    def level_ranks(self):
        return [b.shape[1] for b in self.levels]

    @property
    def level_slices(self):
        out, start = [], 0
        for r in self.level_ranks:
            out.append(slice(start, start + r))
            start += r
        return out

    @property
    def Kf(self):
        return self._Kf

    @property
    def Kc2(self):
        return self._Kc2

    def __post_init__(self):
        M, r, _ = self.K.shape
        object.__setattr__(self, "_Kf", self.K.reshape(M, r * r))
        object.__setattr__(self, "_Kc2", self.K.reshape(M * r, r))

    def projected_op(self, i, j, k):
        """Block P_j diag(g_i) P_k of the reduced operator for mode i."""
        sl = self.level_slices
        return self.K[i][sl[j], sl[k]]

    @property
    def projected_source(self):
        """Per-level blocks of Q^T g_i (columns = modes) and of Q^T 1."""
        return [(self.G[s], self.ones_Q[s]) for s in self.level_slices]

    def blocks(self, excitation):
        """Split hierarchical coefficients into (background, [level blocks])."""
        c = excitation[1:]
        return excitation[0], [c[s] for s in self.level_slices]

    def lift_vector(self, coeffs):
        return coeffs[0] + self.Q @ coeffs[1:]

    def project_vector(self, f):
        f = np.asarray(f, dtype=float)
        q1 = self.ones_residual
        denom = q1.sum()
        if denom > RANK_TOL * len(q1):
            s = (q1 @ f) / denom
        else:
            # constant already inside the span: keep no separate background
            s = 0.0
        c = self.Q.T @ f - s * self.ones_Q
        return np.concatenate([[s], c])

    def span_residual(self, f):
        """Norm of the part of f outside span{1, Q}, relative to |f|."""
        f = np.asarray(f, dtype=float)
        nf = np.linalg.norm(f)
        if nf == 0:
            return 0.0
        return float(np.linalg.norm(f - self.lift_vector(self.project_vector(f))) / nf)

    def metadata(self):
        return {"depth": self.depth, "level_ranks": self.level_ranks, "rank_tol": self.rank_tol,
                "inner_product": "euclidean", "background": "uniform"}


def build_hierarchy(scene, depth, rank_tol=RANK_TOL):
    if int(depth) != depth or depth < 0:
        raise HierarchyError(f"depth must be a non-negative integer, got {depth}")
    depth = int(depth)
    g = scene.g
    M = scene.n_modes
    sym = _symmetries(scene)

    signs = []

    def new_level(V, levels):
        scale = np.linalg.norm(V, 2)
        out = []
        for sign, Vs in _sectors(V, sym):
            Qs = _orth(_project_out(Vs, levels), rank_tol, scale)
            if Qs.shape[1]:
                Qs = _orth(_project_out(Qs, levels), rank_tol, 1.0)
                out.append(_clean(Qs, sign, sym))
                signs.append(np.full(Qs.shape[1], sign))
        return np.hstack(out) if out else V[:, :0]

    Q0 = new_level(scene.W.T, [])
    if Q0.shape[1] < M:
        raise HierarchyError(f"weight vectors are degenerate on this grid: rank {Q0.shape[1]} < {M} modes")
    levels = [Q0]
    for _ in range(depth):
        prev = levels[-1]
        V = (g[:, :, None] * prev[None, :, :]).transpose(1, 0, 2).reshape(g.shape[1], -1)
        Qn = new_level(V, levels)
        if Qn.shape[1] == 0:
            break
        levels.append(Qn)
    signs = np.concatenate(signs)
    Q = np.hstack(levels)
    K = np.einsum("ja,ij,jb->iab", Q, g, Q)
    G = Q.T @ g.T
    WQ = scene.W @ Q
    WQ[:, Q0.shape[1]:] = 0.0
    ones = np.ones(Q.shape[0])
    ones_Q = Q.T @ ones
    if sym[1] is not None:
        _equivariant(K, G, WQ, ones_Q, signs, sym[2])
    ones_res = ones - Q @ ones_Q
    for a in (Q, K, G, WQ, ones_Q, ones_res):
        a.setflags(write=False)
    return HierarchyBasis(tuple(levels), len(levels) - 1, rank_tol, Q, K, G, WQ, ones_Q, ones_res)


def _equivariant(K, G, WQ, ones_Q, D, p):
    # copy each swap partner from its twin so the reduced equations commute
    # with the swap bitwise; sector-mixing entries vanish exactly
    odd = D < 0
    mixed = D[:, None] != D[None, :]
    ones_Q[odd] = 0.0
    for i, j in enumerate(p):
        if j == i:
            K[i][mixed] = 0.0
            G[odd, i] = 0.0
            WQ[i, odd] = 0.0
        elif j > i:
            K[j] = D[:, None] * K[i] * D[None, :]
            G[:, j] = D * G[:, i]
            WQ[j] = WQ[i] * D


def lift(state, basis):
    if state.depth is None:
        raise ValueError("lift expects a hierarchical state")
    return SystemState(state.n.copy(), basis.lift_vector(state.excitation), state.t, None)


def project(state, basis):
    if state.depth is not None:
        raise ValueError("project expects a full-field state")
    return SystemState(state.n.copy(), basis.project_vector(state.excitation), state.t, basis.depth)
