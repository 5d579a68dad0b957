"""Pseudo-expectation SDPs: the fine program, its pinned variant and the coarse program.

Each program is a moment relaxation: the free variables are pseudo-moments,
the PSD blocks are moment (or localizing) matrices whose entries are affine
in those moments, and constraints/objective are linear in them.

Two solve paths exist for the fine programs.  ``build_sdp``/``build_sdp_val``
give the literal single-block formulation, solved by the generic dense
interior-point method in :func:`solve_sdp`.  The value queries
(:func:`sdp_value`, :func:`sdp_val`) instead use an equivalent formulation
with one (d+2)x(d+2) block per bucket: the off-diagonal entries B_ij of the
fine moment matrix are unconstrained, the specified pattern is chordal, so
the big block is PSD-completable iff every per-bucket block is PSD.  That
keeps the cost linear in k.  Both paths are checked against each other in
the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ._ipm import ConeProgram, ConeVec, solve_cone

TOL_GAP = 1e-6
TOL_FEAS = 1e-7
TOL_PSD = 1e-7
TOL_DUAL = 1e-4
MAX_ITER = 200

COARSE_RADIUS_SLACK = 1.0 / 1000.0
UNIT_SPHERE_TOL = 1e-9
GAP_BUCKETS = 100
COARSE_ACCEPT_GAP = 1e-3
COARSE_SCORE_SENSITIVITY = 1.0 + 4.0 * COARSE_ACCEPT_GAP


class SdpError(RuntimeError):
    """Raised when a value query cannot be certified by the solver."""


# ---------------------------------------------------------------------------
# Problem / solution containers


@dataclass
class BucketMeans:
    """k bucket averages in dimension d."""

    Z: np.ndarray

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if self.Z.shape[0] < 1 or self.Z.shape[1] < 1:
            raise ValueError("bucket means need k >= 1 and d >= 1")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("bucket means must be finite")

    @property
    def k(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]


@dataclass
class PsdBlock:
    """A symmetric matrix whose upper-triangular entries are affine in x.

    Entry ``(rows[t], cols[t])`` equals ``const[t] + coef[t] @ x``.
    """

    size: int
    rows: np.ndarray
    cols: np.ndarray
    coef: sp.csr_matrix
    const: np.ndarray
    labels: list | None = None

    def matrix(self, x):
        vals = self.const + self.coef @ x
        M = np.zeros((self.size, self.size))
        M[self.rows, self.cols] = vals
        M[self.cols, self.rows] = vals
        return M


@dataclass
class SdpProblem:
    """maximize objective @ x  s.t.  blocks PSD, eq_A x = eq_b, ineq_G x <= ineq_h."""

    n_vars: int
    var_labels: list
    objective: np.ndarray
    blocks: list
    eq_A: sp.csr_matrix
    eq_b: np.ndarray
    ineq_G: sp.csr_matrix
    ineq_h: np.ndarray
    metadata: dict = field(default_factory=dict)
    x0: np.ndarray | None = None

    def validate(self):
        for blk in self.blocks:
            if blk.rows.max() >= blk.size or blk.cols.max() >= blk.size:
                raise ValueError("block entry out of range")
            if blk.coef.shape != (blk.rows.shape[0], self.n_vars):
                raise ValueError("block coefficient shape mismatch")
        if self.eq_A.shape[1] != self.n_vars or self.ineq_G.shape[1] != self.n_vars:
            raise ValueError("constraint width mismatch")
        if self.eq_A.shape[0] + self.ineq_G.shape[0] == 0:
            raise ValueError("constraint lists are empty")

    def to_json(self) -> str:
        """Debug dump: dimensions, objective and constraints by variable label."""

        def row_terms(row):
            row = row.tocoo()
            return {self.var_labels[j]: float(v) for j, v in zip(row.col, row.data)}

        blocks = []
        for blk in self.blocks:
            entries = []
            for t in range(blk.rows.shape[0]):
                terms = row_terms(blk.coef.getrow(t))
                if blk.const[t] != 0.0:
                    terms["1"] = float(blk.const[t])
                if terms:
                    entries.append({"row": int(blk.rows[t]), "col": int(blk.cols[t]), "terms": terms})
            blocks.append({"size": blk.size, "labels": blk.labels, "entries": entries})
        out = {
            "program": self.metadata.get("kind"),
            "n_vars": self.n_vars,
            "psd_dimensions": [blk.size for blk in self.blocks],
            "objective": {self.var_labels[j]: float(v) for j, v in enumerate(self.objective) if v},
            "eq_constraints": [{"terms": row_terms(self.eq_A.getrow(i)), "bound": float(self.eq_b[i])}
                               for i in range(self.eq_A.shape[0])],
            "ineq_constraints": [{"terms": row_terms(self.ineq_G.getrow(i)), "bound": float(self.ineq_h[i])}
                                 for i in range(self.ineq_G.shape[0])],
            "blocks": blocks,
            "metadata": {k: v for k, v in self.metadata.items() if isinstance(v, (int, float, str))},
        }
        return json.dumps(out, indent=1)


@dataclass
class SdpSolution:
    value: float
    primal: np.ndarray | None
    dual_residual: float
    gap: float
    status: str
    iterations: int = 0
    v_block: tuple = (0, 0)
    v_scale: float = 1.0
    parts: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def pe_mean_v(sol: SdpSolution) -> np.ndarray:
    """The linear rounding pE[v]: the v block of the first moment-matrix row."""
    if sol.primal is not None:
        a, b = sol.v_block
        return sol.v_scale * np.asarray(sol.primal[0, a:b], dtype=float)
    return sol.v_scale * np.asarray(sol.parts["v"], dtype=float)


# ---------------------------------------------------------------------------
# Generic dense program


def _svec_weights(rows, cols):
    # sqrt(2) off the diagonal, 1/sqrt(2) on it: makes <P E_t P, E_u> a
    # product of weights times P_ac P_bd + P_ad P_bc.
    return np.where(rows == cols, 1.0 / np.sqrt(2.0), np.sqrt(2.0))


class _DenseProgram(ConeProgram):
    _CHUNK = 768

    def __init__(self, prob: SdpProblem):
        self.prob = prob
        self.n = prob.n_vars
        self.c = -np.asarray(prob.objective, dtype=float)
        self.b = np.asarray(prob.eq_b, dtype=float)
        self.Aeq = prob.eq_A.toarray()
        self.Gl = prob.ineq_G.tocsr()
        self.groups = [(1, blk.size) for blk in prob.blocks]
        self.h = ConeVec([blk.matrix(np.zeros(self.n))[None] for blk in prob.blocks],
                         np.asarray(prob.ineq_h, dtype=float))
        self._gw = [sp.diags(_svec_weights(blk.rows, blk.cols)) @ blk.coef for blk in prob.blocks]
        self._offdiag = [np.where(blk.rows == blk.cols, 1.0, 2.0) for blk in prob.blocks]

    def G(self, x):
        psd = []
        for blk in self.prob.blocks:
            vals = -(blk.coef @ x)
            M = np.zeros((blk.size, blk.size))
            M[blk.rows, blk.cols] = vals
            M[blk.cols, blk.rows] = vals
            psd.append(M[None])
        return ConeVec(psd, self.Gl @ x)

    def GT(self, u):
        out = self.Gl.T @ u.lin
        for blk, w, U in zip(self.prob.blocks, self._offdiag, u.psd):
            out = out - blk.coef.T @ (U[0][blk.rows, blk.cols] * w)
        return np.asarray(out, dtype=float)

    def A(self, x):
        return self.Aeq @ x

    def AT(self, y):
        return self.Aeq.T @ y

    def schur(self, P, dlin):
        H = np.asarray((self.Gl.T @ sp.diags(dlin) @ self.Gl).todense())
        for blk, gw, Pg in zip(self.prob.blocks, self._gw, P):
            Pm = Pg[0]
            a, c = blk.rows, blk.cols
            npos = a.shape[0]
            gwT = gw.T.tocsr()
            for i0 in range(0, npos, self._CHUNK):
                sl = slice(i0, min(npos, i0 + self._CHUNK))
                Pa, Pb = Pm[a[sl]], Pm[c[sl]]
                K = Pa[:, a] * Pb[:, c] + Pa[:, c] * Pb[:, a]
                KG = np.asarray((gwT @ K.T).T)
                H += np.asarray(gw[sl].T @ KG)
        return H

    def factor(self, P, dlin):
        H = self.schur(P, dlin)
        p = self.b.shape[0]
        K = np.zeros((self.n + p, self.n + p))
        K[: self.n, : self.n] = H
        K[: self.n, self.n:] = self.Aeq.T
        K[self.n:, : self.n] = self.Aeq
        lu = scipy.linalg.lu_factor(K, check_finite=True)
        if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
            raise np.linalg.LinAlgError("singular Newton system")

        def solve(rx, ry):
            sol = scipy.linalg.lu_solve(lu, np.concatenate([rx, ry]))
            return sol[: self.n], sol[self.n:]

        return solve


def solve_sdp(p: SdpProblem, tol_gap: float = TOL_GAP, max_iter: int = MAX_ITER,
              x0=None, tol_feas: float = TOL_FEAS, accept_gap: float | None = None) -> SdpSolution:
    """Solve a problem with the dense primal-dual interior-point method.

    The solver always aims for ``tol_gap``.  If it stalls first, the best
    iterate is still accepted when feasible with gap at most ``accept_gap``
    (default: ``COARSE_ACCEPT_GAP`` for coarse programs, else ``tol_gap``);
    coarse programs also get the same looser dual residual.
    Unselected samples make the coarse program degenerate (their covering
    rows are active at 0 = 0) and its last gap digits are often out of reach.
    """
    p.validate()
    prog = _DenseProgram(p)
    start = x0 if x0 is not None else p.x0
    meta = p.metadata
    coarse = str(meta.get("kind", "")).startswith("coarse")
    if accept_gap is None:
        accept_gap = max(tol_gap, COARSE_ACCEPT_GAP) if coarse else tol_gap
    tol_dual = max(TOL_DUAL, accept_gap) if coarse else TOL_DUAL
    res = solve_cone(prog, x0=start, tol_gap=tol_gap, tol_feas=tol_feas, max_iter=max_iter,
                     accept_gap=accept_gap, tol_dual=tol_dual)
    primal = p.blocks[0].matrix(res.x)
    return SdpSolution(
        value=-res.pcost,
        primal=primal,
        dual_residual=res.dres,
        gap=res.gap,
        status=res.status,
        iterations=res.iterations,
        v_block=tuple(meta.get("v_block", (0, 0))),
        v_scale=float(meta.get("v_scale", 1.0)),
        parts={"x": res.x, "blocks": [blk.matrix(res.x) for blk in p.blocks], "pres": res.pres},
    )


class _Builder:
    """Accumulates variables, block entries and constraints."""

    def __init__(self):
        self.labels = []
        self.index = {}

    def var(self, label):
        if label not in self.index:
            self.index[label] = len(self.labels)
            self.labels.append(label)
        return self.index[label]

    @staticmethod
    def rows_to_csr(rows, n):
        data, ri, ci = [], [], []
        for i, terms in enumerate(rows):
            for j, v in terms.items():
                ri.append(i)
                ci.append(j)
                data.append(v)
        return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))

    def block(self, size, entries, labels=None):
        """entries: list of (row, col, const, {var: coef})."""
        n = len(self.labels)
        rows = np.array([e[0] for e in entries], dtype=int)
        cols = np.array([e[1] for e in entries], dtype=int)
        const = np.array([e[2] for e in entries], dtype=float)
        coef = self.rows_to_csr([e[3] for e in entries], n)
        return PsdBlock(size, rows, cols, coef, const, labels)


def _check_fine_inputs(mu_tilde, r, Z):
    Z = Z if isinstance(Z, BucketMeans) else BucketMeans(Z)
    mu_tilde = np.asarray(mu_tilde, dtype=float).reshape(-1)
    if mu_tilde.shape[0] != Z.d:
        raise ValueError(f"mu_tilde has dimension {mu_tilde.shape[0]}, bucket means have {Z.d}")
    if not np.isfinite(r) or r < 0:
        raise ValueError("r must be a finite non-negative real")
    return mu_tilde, float(r), Z


def _check_y(y, d):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != d:
        raise ValueError(f"y has dimension {y.shape[0]}, expected {d}")
    if float(np.linalg.norm(y)) > 1.0 + 1e-12:
        raise ValueError("SDP-VAL requires ||y|| <= 1")
    return y


def _build_fine(mu_tilde, r, Z, y=None):
    mu_tilde, r, Z = _check_fine_inputs(mu_tilde, r, Z)
    k, d = Z.k, Z.d
    C = Z.Z - mu_tilde
    bld = _Builder()
    b = [bld.var(f"b{i}") for i in range(k)]
    Boff = {(i, j): bld.var(f"B{i},{j}") for i, j in combinations(range(k), 2)}
    W = [[bld.var(f"W{i},{a}") for a in range(d)] for i in range(k)]
    v = [bld.var(f"v{a}") for a in range(d)]
    V = {(a, c): bld.var(f"V{a},{c}") for a in range(d) for c in range(a, d)}
    n = len(bld.labels)
    ov, oV = 1 + k, 1 + k
    entries = [(0, 0, 1.0, {})]
    for i in range(k):
        entries.append((0, 1 + i, 0.0, {b[i]: 1.0}))
        entries.append((1 + i, 1 + i, 0.0, {b[i]: 1.0}))  # B_ii = b_i
        for j in range(i + 1, k):
            entries.append((1 + i, 1 + j, 0.0, {Boff[i, j]: 1.0}))
        for a in range(d):
            entries.append((1 + i, ov + a, 0.0, {W[i][a]: 1.0}))
    for a in range(d):
        entries.append((0, ov + a, 0.0, {v[a]: 1.0}))
        for c in range(a, d):
            entries.append((oV + a, oV + c, 0.0, {V[a, c]: 1.0}))
    labels = ["1"] + [f"b{i}" for i in range(k)] + [f"v{a}" for a in range(d)]
    block = bld.block(1 + k + d, entries, labels)

    eq_rows = [{V[a, a]: 1.0 for a in range(d)}]
    eq_b = [1.0]
    if y is not None:
        for a in range(d):
            eq_rows.append({v[a]: 1.0})
            eq_b.append(float(y[a]))
    ineq_rows = []
    for i in range(k):
        row = {b[i]: r}
        for a in range(d):
            row[W[i][a]] = row.get(W[i][a], 0.0) - C[i, a]
        ineq_rows.append(row)
    objective = np.zeros(n)
    objective[b] = 1.0
    x0 = None
    if y is not None:
        x0 = np.zeros(n)
        Vs = np.outer(y, y) + (1.0 - float(y @ y)) / d * np.eye(d)
        for a in range(d):
            x0[v[a]] = y[a]
            for c in range(a, d):
                x0[V[a, c]] = Vs[a, c]
        assert np.linalg.eigvalsh(block.matrix(x0)).min() >= -1e-9, "warm start must be feasible"
    meta = {"kind": "sdp_val" if y is not None else "sdp", "k": k, "d": d, "r": r,
            "v_block": (ov, ov + d), "v_scale": 1.0}
    prob = SdpProblem(n, bld.labels, objective, [block], _Builder.rows_to_csr(eq_rows, n),
                      np.array(eq_b), _Builder.rows_to_csr(ineq_rows, n), np.zeros(k), meta, x0)
    prob.validate()
    return prob


def build_sdp(mu_tilde, r, Z) -> SdpProblem:
    """Fine relaxation: max Tr B over the (1+k+d) moment matrix.

    B_ii = b_i is imposed by aliasing both entries to one variable; Tr V = 1
    is an explicit equality; B_ii r <= <Z_i - mu_tilde, W_i> are inequalities.
    """
    return _build_fine(mu_tilde, r, Z)


def build_sdp_val(y, mu_tilde, r, Z) -> SdpProblem:
    """Fine relaxation with the v block pinned to y (||y|| <= 1)."""
    Z = Z if isinstance(Z, BucketMeans) else BucketMeans(Z)
    y = _check_y(y, Z.d)
    return _build_fine(mu_tilde, r, Z, y)


# ---------------------------------------------------------------------------
# Structured fine program: one (d+2)-block per bucket sharing (v, V)


def _equilibrated_inv(D):
    """Batched inverse of SPD matrices after symmetric diagonal scaling."""
    sc = 1.0 / np.sqrt(np.maximum(np.einsum("kii->ki", D), np.finfo(float).tiny))
    Dh = D * sc[:, :, None] * sc[:, None, :]
    return np.linalg.inv(Dh) * sc[:, :, None] * sc[:, None, :]


class _FineProgram(ConeProgram):
    """Variables: per bucket (b_i, W_i); shared (v, svec V)."""

    def __init__(self, C, r, y=None):
        self.C = np.asarray(C, dtype=float)
        self.k, self.d = self.C.shape
        self.r = float(r)
        k, d = self.k, self.d
        self.p = 1 + d
        self.ntri = d * (d + 1) // 2
        self.nsh = d + self.ntri
        self.n = k * self.p + self.nsh
        self.s = d + 2
        self.groups = [(k, self.s)]
        self.tri = np.array([(a, c) for a in range(d) for c in range(a, d)], dtype=int).reshape(-1, 2)
        c = np.zeros(self.n)
        c[0: k * self.p: self.p] = -1.0
        self.c = c
        Arows = [np.concatenate([np.zeros(d), (self.tri[:, 0] == self.tri[:, 1]).astype(float)])]
        b = [1.0]
        if y is not None:
            for a in range(d):
                row = np.zeros(self.nsh)
                row[a] = 1.0
                Arows.append(row)
                b.append(float(y[a]))
        self.Ash = np.array(Arows)
        self.b = np.array(b)
        H0 = np.zeros((k, self.s, self.s))
        H0[:, 0, 0] = 1.0
        self.h = ConeVec([H0], np.zeros(k))
        # upper-triangular positions of a block and the slot feeding each one
        pos, slot = [], []
        for i in range(self.s):
            for j in range(i, self.s):
                if i == 0 and j == 0:
                    continue
                if i <= 1 and j == 1:
                    sl = 0                                   # b
                elif i == 0:
                    sl = self.p + (j - 2)                    # v
                elif i == 1:
                    sl = 1 + (j - 2)                         # W
                else:
                    a, cc = i - 2, j - 2
                    sl = self.p + d + self._tri_index(a, cc)  # V
                pos.append((i, j))
                slot.append(sl)
        pos = np.array(pos)
        self.pa, self.pb = pos[:, 0], pos[:, 1]
        q = self.p + self.nsh
        T = np.zeros((len(slot), q))
        T[np.arange(len(slot)), slot] = 1.0
        self.Tw = _svec_weights(self.pa, self.pb)[:, None] * T

    def _tri_index(self, a, c):
        a, c = min(a, c), max(a, c)
        return a * self.d - a * (a - 1) // 2 + (c - a)

    def split(self, x):
        loc = x[: self.k * self.p].reshape(self.k, self.p)
        sh = x[self.k * self.p:]
        return loc, sh

    def _vmat(self, svec):
        d = self.d
        V = np.zeros((d, d))
        V[self.tri[:, 0], self.tri[:, 1]] = svec
        V[self.tri[:, 1], self.tri[:, 0]] = svec
        return V

    def block_linear(self, x):
        loc, sh = self.split(x)
        k, d = self.k, self.d
        M = np.zeros((k, self.s, self.s))
        M[:, 0, 1] = M[:, 1, 0] = M[:, 1, 1] = loc[:, 0]
        M[:, 0, 2:] = M[:, 2:, 0] = sh[:d]
        M[:, 1, 2:] = loc[:, 1:]
        M[:, 2:, 1] = loc[:, 1:]
        M[:, 2:, 2:] = self._vmat(sh[d:])
        return M

    def G(self, x):
        loc, _ = self.split(x)
        lin = self.r * loc[:, 0] - np.einsum("ka,ka->k", self.C, loc[:, 1:])
        return ConeVec([-self.block_linear(x)], lin)

    def GT(self, u):
        U = u.psd[0]
        ul = u.lin
        d = self.d
        loc = np.empty((self.k, self.p))
        loc[:, 0] = -(2.0 * U[:, 0, 1] + U[:, 1, 1]) + self.r * ul
        loc[:, 1:] = -2.0 * U[:, 1, 2:] - self.C * ul[:, None]
        sh = np.empty(self.nsh)
        sh[:d] = -2.0 * U[:, 0, 2:].sum(axis=0)
        Us = U[:, 2:, 2:].sum(axis=0)
        w = np.where(self.tri[:, 0] == self.tri[:, 1], 1.0, 2.0)
        sh[d:] = -w * Us[self.tri[:, 0], self.tri[:, 1]]
        return np.concatenate([loc.reshape(-1), sh])

    def A(self, x):
        return self.Ash @ x[self.k * self.p:]

    def AT(self, y):
        out = np.zeros(self.n)
        out[self.k * self.p:] = self.Ash.T @ y
        return out

    def factor(self, P, dlin):
        Pm = P[0]
        a, b = self.pa, self.pb
        Pa = Pm[:, a, :]
        Pb = Pm[:, b, :]
        K = Pa[:, :, a] * Pb[:, :, b] + Pa[:, :, b] * Pb[:, :, a]
        H = np.swapaxes(self.Tw, 0, 1)[None] @ K @ self.Tw[None]
        p = self.p
        D = H[:, :p, :p].copy()
        g = np.concatenate([np.full((self.k, 1), self.r), -self.C], axis=1)
        D += dlin[:, None, None] * g[:, :, None] * g[:, None, :]
        E = H[:, :p, p:]
        S = H[:, p:, p:].sum(axis=0)
        Dinv = _equilibrated_inv(D)
        DinvE = Dinv @ E
        St = S - np.einsum("kpi,kpj->ij", E, DinvE)
        neq = self.Ash.shape[0]
        Kmat = np.zeros((self.nsh + neq, self.nsh + neq))
        Kmat[: self.nsh, : self.nsh] = St
        Kmat[: self.nsh, self.nsh:] = self.Ash.T
        Kmat[self.nsh:, : self.nsh] = self.Ash
        lu = scipy.linalg.lu_factor(Kmat)
        if np.min(np.abs(np.diag(lu[0]))) == 0.0:
            raise np.linalg.LinAlgError("singular shared system")
        kp = self.k * p

        def solve(rx, ry):
            rl = rx[:kp].reshape(self.k, p)
            t = np.einsum("kpq,kq->kp", Dinv, rl)
            rs = rx[kp:] - np.einsum("kpi,kp->i", E, t)
            sol = scipy.linalg.lu_solve(lu, np.concatenate([rs, ry]))
            dsh, dy = sol[: self.nsh], sol[self.nsh:]
            dloc = t - DinvE @ dsh
            return np.concatenate([dloc.reshape(-1), dsh]), dy

        return solve


def _fine_on_sphere(mu_tilde, r, Z, y):
    # With ||v|| = 1 and Tr V = 1, V = vv' is forced and every block is rank
    # one (W_i = b_i v), so the feasible set has no interior.  Solve the
    # reduced problem in closed form instead of running the IPM on that face.
    y = y / np.linalg.norm(y)
    proj = (Z.Z - mu_tilde) @ y
    b = (proj >= r).astype(float)
    parts = {"b": b, "W": b[:, None] * y[None, :], "v": y.copy(), "V": np.outer(y, y), "pres": 0.0}
    return SdpSolution(value=float(b.sum()), primal=None, dual_residual=0.0, gap=0.0,
                       status="optimal", iterations=0, parts=parts)


def fine_gap_tolerance(k: int, tol_gap: float = TOL_GAP) -> float:
    """Absolute gap target for k buckets: tol_gap up to k = 100, then growing linearly in k."""
    return tol_gap * max(1.0, k / GAP_BUCKETS)


def fine_score_sensitivity(k: int) -> float:
    """Sensitivity handed to the mechanisms for fine scores: 1 plus the solver slack on both sides."""
    return 1.0 + 4.0 * fine_gap_tolerance(k)


def solve_fine(mu_tilde, r, Z, y=None, tol_gap=None, max_iter=MAX_ITER,
               tol_feas=TOL_FEAS) -> SdpSolution:
    """Solve the fine program (pinned to y when given) in per-bucket form."""
    mu_tilde, r, Z = _check_fine_inputs(mu_tilde, r, Z)
    if tol_gap is None:
        tol_gap = fine_gap_tolerance(Z.k)
    if y is not None:
        y = _check_y(y, Z.d)
    if y is not None and float(y @ y) >= 1.0 - UNIT_SPHERE_TOL:
        return _fine_on_sphere(mu_tilde, r, Z, y)
    prog = _FineProgram(Z.Z - mu_tilde, r, y)
    res = solve_cone(prog, x0=None, tol_gap=tol_gap, tol_feas=tol_feas, max_iter=max_iter)
    loc, sh = prog.split(res.x)
    d = Z.d
    parts = {"b": loc[:, 0].copy(), "W": loc[:, 1:].copy(), "v": sh[:d].copy(),
             "V": prog._vmat(sh[d:]), "pres": res.pres}
    return SdpSolution(value=-res.pcost, primal=None, dual_residual=res.dres, gap=res.gap,
                       status=res.status, iterations=res.iterations, parts=parts)


# ---------------------------------------------------------------------------
# Coarse program


def _mono_mul(m1, m2):
    bs = tuple(sorted(set(m1[0]) | set(m2[0])))  # b_i^2 = b_i
    vs = tuple(sorted(m1[1] + m2[1]))
    return bs, vs


def _mono_label(m):
    parts = [f"b{i}" for i in m[0]] + [f"v{j}" for j in m[1]]
    return "*".join(parts) if parts else "1"


ONE = ((), ())


def coarse_basis(n, d, basis="compact"):
    """Monomial index sets for the coarse moment and localizing matrices.

    ``compact``: moment basis {1, b_i, v_j, b_i v_j}; localizing basis {1, b_i}.
    ``full``: adds b_i b_l and v_j v_l to the moment basis and v_j to the
    localizing basis (every monomial of degree <= 2).
    """
    mom = [ONE] + [((i,), ()) for i in range(n)] + [((), (j,)) for j in range(d)]
    mom += [((i,), (j,)) for i in range(n) for j in range(d)]
    loc = [ONE] + [((i,), ()) for i in range(n)]
    if basis == "full":
        mom += [((i, l), ()) for i, l in combinations(range(n), 2)]
        mom += [((), (j, l)) for j in range(d) for l in range(j, d)]
        loc += [((), (j,)) for j in range(d)]
    elif basis != "compact":
        raise ValueError(f"unknown basis {basis!r}")
    return mom, loc


def build_coarse_sdp(y, R, r, X, basis="compact", scale=None) -> SdpProblem:
    """Coarse relaxation with pE v = y (``y=None`` leaves v free).

    Works in the rescaled variable u = v / scale (default r), which keeps the
    dual multipliers of the covering constraints moderate.
    ``pe_mean_v`` of the solution undoes the scaling.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")
    if not (R > r > 0):
        raise ValueError("need R > r > 0")
    if y is not None:
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != d:
            raise ValueError(f"y has dimension {y.shape[0]}, expected {d}")
        if float(np.linalg.norm(y)) > R * (1.0 + COARSE_RADIUS_SLACK) * (1 + 1e-12):
            raise ValueError("y lies outside the ball of radius R + R/1000")
    scale = float(r) if scale is None else float(scale)
    Xs, rs = X / scale, r / scale
    ys = None if y is None else y / scale
    cap = ((2.0 + COARSE_RADIUS_SLACK) * R / scale) ** 2
    mom, loc = coarse_basis(n, d, basis)

    bld = _Builder()
    entries = []
    for p in range(len(mom)):
        for q in range(p, len(mom)):
            m = _mono_mul(mom[p], mom[q])
            if m == ONE:
                entries.append((p, q, 1.0, {}))
            else:
                entries.append((p, q, 0.0, {bld.var(m): 1.0}))

    def moment(m):
        if m == ONE:
            return None
        if m not in bld.index:
            raise AssertionError(f"monomial {_mono_label(m)} missing from the moment matrix")
        return bld.index[m]

    def add(terms, const, m, coef):
        j = moment(m)
        if j is None:
            return const + coef
        terms[j] = terms.get(j, 0.0) + coef
        return const

    loc_entries = []
    for p in range(len(loc)):
        for q in range(p, len(loc)):
            base = _mono_mul(loc[p], loc[q])
            terms, const = {}, 0.0
            const = add(terms, const, base, cap)
            for j in range(d):
                const = add(terms, const, _mono_mul(base, ((), (j, j))), -1.0)
            loc_entries.append((p, q, const, terms))

    ineq_rows, ineq_h = [], []
    for i in range(n):
        bi = ((i,), ())
        terms = {}
        const = 0.0
        const = add(terms, const, bi, -(rs**2 - float(Xs[i] @ Xs[i])))
        for j in range(d):
            const = add(terms, const, ((i,), (j,)), -2.0 * Xs[i, j])
            const = add(terms, const, ((i,), (j, j)), 1.0)
        ineq_rows.append(terms)
        ineq_h.append(-const)
    n_vars = len(bld.labels)
    eq_rows = [] if ys is None else [{moment(((), (j,))): 1.0} for j in range(d)]
    objective = np.zeros(n_vars)
    for i in range(n):
        objective[moment(((i,), ()))] = 1.0

    mom_block = bld.block(len(mom), entries, [_mono_label(m) for m in mom])
    loc_block = bld.block(len(loc), loc_entries, [_mono_label(m) for m in loc])
    # integral warm start b = 0, v = y (v = 0 when free)
    x0 = np.zeros(n_vars)
    for m, j in bld.index.items():
        if not m[0]:
            x0[j] = 0.0 if ys is None else float(np.prod(ys[list(m[1])]))
    v_cols = [mom.index(((), (j,))) for j in range(d)]
    meta = {"kind": "coarse_sdp" if ys is not None else "coarse_sdp_free", "n": n, "d": d, "R": float(R), "r": float(r), "basis": basis,
            "v_block": (v_cols[0], v_cols[-1] + 1), "v_scale": scale}
    prob = SdpProblem(n_vars, [_mono_label(m) for m in bld.labels], objective,
                      [mom_block, loc_block], _Builder.rows_to_csr(eq_rows, n_vars),
                      np.zeros(0) if ys is None else ys.copy(),
                      _Builder.rows_to_csr(ineq_rows, n_vars), np.array(ineq_h), meta, x0)
    prob.validate()
    return prob


# ---------------------------------------------------------------------------
# Value queries


def _certified(sol: SdpSolution, what: str) -> float:
    if sol.status != "optimal":
        raise SdpError(f"{what}: solver status {sol.status} (gap={sol.gap:.3g}, "
                       f"dual residual={sol.dual_residual:.3g})")
    return float(sol.value)


def sdp_value(mu_tilde, r, Z, method="structured") -> float:
    """Optimum of the fine relaxation at radius r around mu_tilde."""
    if method == "dense":
        return _certified(solve_sdp(build_sdp(mu_tilde, r, Z)), "SDP")
    return _certified(solve_fine(mu_tilde, r, Z), "SDP")


def sdp_val(y, mu_tilde, r, Z, method="structured") -> float:
    """Optimum of the fine relaxation with v pinned to y."""
    if method == "dense":
        return _certified(solve_sdp(build_sdp_val(y, mu_tilde, r, Z)), "SDP-VAL")
    return _certified(solve_fine(mu_tilde, r, Z, y=y), "SDP-VAL")


def coarse_sdp_value(y, R, r, X, basis="compact") -> float:
    """Optimum of the coarse relaxation with pE v = y."""
    return _certified(solve_sdp(build_coarse_sdp(y, R, r, X, basis)), "coarse-sdp")


def quad_val(y, mu_tilde, r, Z) -> int:
    """Integral count |{i : <Z_i - mu_tilde, y> >= r}| (equals QUAD-VAL at ||y|| = 1)."""
    Z = Z if isinstance(Z, BucketMeans) else BucketMeans(Z)
    proj = (Z.Z - np.asarray(mu_tilde, dtype=float)) @ np.asarray(y, dtype=float)
    return int(np.sum(proj >= r))


def fine_lipschitz(k, d, zeta) -> float:
    """Lipschitz constant of SDP-VAL over the ball of radius 1 - zeta."""
    return np.sqrt(d) * k / zeta


def coarse_lipschitz(n, d, R) -> float:
    """Lipschitz constant of the coarse value over the ball of radius R + R/1000."""
    return n * np.sqrt(d) / R


def null_bucket_witness(primal, k, d, i=0):
    """Zero the row and column of b_i in a fine moment matrix (nulling witness)."""
    N = np.array(primal, dtype=float, copy=True)
    N[1 + i, :] = 0.0
    N[:, 1 + i] = 0.0
    return N
