"""Primal-dual interior-point method for block-structured conic programs.

Solves

    minimize    c'x
    subject to  G x + s = h,   A x = b,   s in K

where K is a product of positive semidefinite cones and a nonnegative
orthant.  PSD blocks are stored in groups of equal size as stacked arrays of
shape (g, n, n) so that many small blocks can be handled with batched linear
algebra.  The method uses Nesterov-Todd scaling recomputed from (s, z) at
every iteration and a Mehrotra predictor-corrector step.

A concrete program supplies the maps G, G', A, A' and a routine that factors
the reduced Newton system ``G' W^{-1} G dx + A' dy = rx, A dx = ry`` for
given scaling blocks.  Everything else lives here.
"""

from __future__ import annotations

from dataclasses import dataclass

import os

import numpy as np


STALL_ITERS = 4
STEP_FRACTION = 0.98
_TRACE = bool(os.environ.get("DPSOS_IPM_TRACE"))


class ConeVec:
    """Element of the cone space: a list of stacked PSD groups and a vector."""

    __slots__ = ("psd", "lin")

    def __init__(self, psd, lin):
        self.psd = list(psd)
        self.lin = np.asarray(lin, dtype=float)

    def copy(self):
        return ConeVec([u.copy() for u in self.psd], self.lin.copy())

    def __add__(self, other):
        return ConeVec([u + w for u, w in zip(self.psd, other.psd)], self.lin + other.lin)

    def __sub__(self, other):
        return ConeVec([u - w for u, w in zip(self.psd, other.psd)], self.lin - other.lin)

    def scale(self, a):
        return ConeVec([a * u for u in self.psd], a * self.lin)

    def axpy(self, a, other):
        """In place: self += a * other."""
        for u, w in zip(self.psd, other.psd):
            u += a * w
        self.lin += a * other.lin

    def dot(self, other):
        tot = float(self.lin @ other.lin)
        for u, w in zip(self.psd, other.psd):
            tot += float(np.einsum("kij,kij->", u, w))
        return tot

    def norm(self):
        return np.sqrt(max(self.dot(self), 0.0))


class ConeProgram:
    """Interface for programs accepted by :func:`solve_cone`.

    Subclasses set ``n``, ``c``, ``b``, ``h`` (a ConeVec), ``groups`` (list of
    ``(count, size)``) and implement the linear maps and ``factor``.
    """

    n: int
    c: np.ndarray
    b: np.ndarray
    h: ConeVec
    groups: list

    def G(self, x):
        raise NotImplementedError

    def GT(self, u):
        raise NotImplementedError

    def A(self, x):
        raise NotImplementedError

    def AT(self, y):
        raise NotImplementedError

    def factor(self, P, dlin):
        """Factor the Newton system for scaling blocks ``P`` and orthant weights.

        ``P[j]`` has shape (g, n, n) and holds W^{-1} for every block of group
        j; the Schur term of a block is ``x -> G'(P (G x) P)``.  ``dlin`` holds
        z/s for the orthant.  Returns ``solve(rx, ry) -> (dx, dy)``.
        """
        raise NotImplementedError

    @property
    def n_lin(self):
        return self.h.lin.shape[0]

    @property
    def degree(self):
        return self.n_lin + sum(g * m for g, m in self.groups)

    def identity(self):
        return ConeVec([np.broadcast_to(np.eye(m), (g, m, m)).copy() for g, m in self.groups],
                       np.ones(self.n_lin))


@dataclass
class IpmResult:
    x: np.ndarray
    y: np.ndarray
    s: ConeVec
    z: ConeVec
    status: str
    iterations: int
    pcost: float
    dcost: float
    gap: float
    pres: float
    dres: float


class _Scaling:
    """Nesterov-Todd scaling at a strictly interior pair (s, z)."""

    def __init__(self, s: ConeVec, z: ConeVec):
        self.R, self.Rinv, self.lam, self.P = [], [], [], []
        for sg, zg in zip(s.psd, z.psd):
            Ls = np.linalg.cholesky(sg)
            Lz = np.linalg.cholesky(zg)
            U, lam, Vt = np.linalg.svd(np.swapaxes(Lz, -1, -2) @ Ls)
            Lsinv = np.linalg.inv(Ls)
            isq = 1.0 / np.sqrt(lam)
            R = Ls @ (np.swapaxes(Vt, -1, -2) * isq[:, None, :])
            Rinv = (np.sqrt(lam)[:, :, None] * Vt) @ Lsinv
            self.R.append(R)
            self.Rinv.append(Rinv)
            self.lam.append(lam)
            self.P.append(np.swapaxes(Rinv, -1, -2) @ Rinv)
        self.dl = np.sqrt(s.lin / z.lin)
        self.laml = np.sqrt(s.lin * z.lin)
        self.Pl = z.lin / s.lin

    def scale_s(self, ds: ConeVec) -> ConeVec:
        return ConeVec([Ri @ u @ np.swapaxes(Ri, -1, -2) for Ri, u in zip(self.Rinv, ds.psd)],
                       ds.lin / self.dl)

    def scale_z(self, dz: ConeVec) -> ConeVec:
        return ConeVec([np.swapaxes(R, -1, -2) @ u @ R for R, u in zip(self.R, dz.psd)],
                       dz.lin * self.dl)

    def lam_sq(self) -> ConeVec:
        return ConeVec([np.einsum("ki,ij->kij", lam**2, np.eye(lam.shape[1])) for lam in self.lam],
                       self.laml**2)

    def lam_inv(self, r: ConeVec) -> ConeVec:
        """Solve lambda o q = r (Jordan product) for q."""
        out = []
        for lam, u in zip(self.lam, r.psd):
            out.append(2.0 * u / (lam[:, :, None] + lam[:, None, :]))
        return ConeVec(out, r.lin / self.laml)

    def unscale_q(self, q: ConeVec) -> ConeVec:
        """R q R' for PSD blocks, d*q for the orthant."""
        return ConeVec([R @ u @ np.swapaxes(R, -1, -2) for R, u in zip(self.R, q.psd)],
                       self.dl * q.lin)

    def apply_P(self, u: ConeVec) -> ConeVec:
        return ConeVec([P @ w @ P for P, w in zip(self.P, u.psd)], self.Pl * u.lin)

    def max_step(self, du: ConeVec) -> float:
        """Largest a with lambda + a*du in the cone (inf if unbounded)."""
        worst = 0.0
        for lam, u in zip(self.lam, du.psd):
            isq = 1.0 / np.sqrt(lam)
            m = u * isq[:, :, None] * isq[:, None, :]
            ev = np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))
            worst = max(worst, float(-ev.min()))
        if self.laml.size:
            worst = max(worst, float(-(du.lin / self.laml).min()))
        return np.inf if worst <= 0 else 1.0 / worst


def _jordan(a: ConeVec, b: ConeVec) -> ConeVec:
    psd = []
    for u, w in zip(a.psd, b.psd):
        uw = u @ w
        psd.append(0.5 * (uw + np.swapaxes(uw, -1, -2)))
    return ConeVec(psd, a.lin * b.lin)


def _min_eig(u: ConeVec) -> float:
    vals = [np.inf]
    for g in u.psd:
        vals.append(float(np.linalg.eigvalsh(g).min()))
    if u.lin.size:
        vals.append(float(u.lin.min()))
    return min(vals)


def _shift_interior(u: ConeVec, e: ConeVec) -> ConeVec:
    t = -_min_eig(u)
    if t >= -1e-8 * max(u.norm(), 1.0):
        u = u.copy()
        u.axpy(1.0 + t, e)
    return u


def _sym(u: ConeVec) -> ConeVec:
    return ConeVec([0.5 * (g + np.swapaxes(g, -1, -2)) for g in u.psd], u.lin)


def solve_cone(prog: ConeProgram, x0=None, tol_gap=1e-6, tol_feas=1e-7, max_iter=200,
               refine=2, tol_dual=1e-4, accept_gap=None) -> IpmResult:
    """Run the predictor-corrector method on ``prog``.

    Optimality means primal residual <= tol_feas, complementarity gap and
    primal-dual objective difference <= tol_gap, and relative dual residual
    <= tol_dual.  The dual tolerance is looser because on degenerate faces
    the Newton systems lose accuracy in the dual first; the reported value is
    the primal objective, whose accuracy is governed by the gap.
    If the method stalls first, the best iterate is still reported optimal
    when its gap is at most ``accept_gap`` (default ``tol_gap``).
    ``x0`` is an optional primal warm start; otherwise the primal and dual
    starting points are least-squares solutions shifted into the cone.
    """
    accept_gap = tol_gap if accept_gap is None else max(float(accept_gap), tol_gap)
    e = prog.identity()
    p = prog.b.shape[0]
    eye_P = [np.broadcast_to(np.eye(m), (g, m, m)).copy() for g, m in prog.groups]
    solve0 = prog.factor(eye_P, np.ones(prog.n_lin))
    if x0 is None:
        x, _ = solve0(prog.GT(prog.h), prog.b)
    else:
        x = np.asarray(x0, dtype=float).copy()
    s = _shift_interior(prog.h - prog.G(x), e)
    lam_, y = solve0(-prog.c, np.zeros(p))
    z = _shift_interior(prog.G(lam_), e)

    nu = prog.degree
    resx0 = max(1.0, float(np.linalg.norm(prog.c)))
    resy0 = max(1.0, float(np.linalg.norm(prog.b)))
    resz0 = max(1.0, prog.h.norm())
    status = "max_iter"
    pcost = dcost = gap = pres = dres = np.nan
    best, best_merit, since_best = None, np.inf, 0
    it = 0
    for it in range(max_iter + 1):
        rx = prog.c + prog.GT(z) + prog.AT(y)
        ry = prog.A(x) - prog.b
        rz = prog.G(x) + s - prog.h
        gap = s.dot(z)
        pcost = float(prog.c @ x)
        dcost = -prog.h.dot(z) - float(prog.b @ y)
        pres = max(float(np.linalg.norm(ry)) / resy0, rz.norm() / resz0)
        dres = float(np.linalg.norm(rx)) / resx0
        err_gap = max(gap, abs(pcost - dcost))
        if max(pres / tol_feas, err_gap / tol_gap, dres / tol_feas) <= 1.0:
            status = "optimal"
            break
        merit = max(pres / tol_feas, err_gap / accept_gap, dres / tol_dual)
        if merit < best_merit:
            best, best_merit, since_best = (x, y, s, z, it, pcost, dcost, gap, pres, dres), merit, 0
        elif pres <= 1e-4 and gap <= 1e-3:
            since_best += 1
        if it == max_iter or since_best >= STALL_ITERS:
            break
        try:
            W = _Scaling(s, z)
            solve = prog.factor(W.P, W.Pl)
        except np.linalg.LinAlgError:
            status = "numerical"
            break
        mu = gap / nu

        def direction(rc):
            term = W.unscale_q(W.lam_inv(rc))
            u = W.apply_P(rz + term)
            dx, dy = solve(-rx - prog.GT(u), -ry)
            Gdx = prog.G(dx)
            dz = W.apply_P(Gdx + rz + term)
            # iterative refinement against the unreduced equations
            for _ in range(refine):
                ex = prog.GT(dz) + prog.AT(dy) + rx
                ey = prog.A(dx) + ry
                if max(np.abs(ex).max(initial=0.0), np.abs(ey).max(initial=0.0)) < 1e-14 * resx0:
                    break
                cx, cy = solve(-ex, -ey)
                dx, dy = dx + cx, dy + cy
                Gdx = prog.G(dx)
                dz = W.apply_P(Gdx + rz + term)
            ds = (rz + Gdx).scale(-1.0)
            return dx, dy, ds, dz

        lsq = W.lam_sq()
        try:
            dxa, dya, dsa, dza = direction(lsq.scale(-1.0))
        except np.linalg.LinAlgError:
            status = "numerical"
            break
        dsa_t, dza_t = W.scale_s(dsa), W.scale_z(dza)
        a_aff = min(1.0, W.max_step(dsa_t), W.max_step(dza_t))
        sigma = min(1.0, max(0.0, 1.0 - a_aff)) ** 3
        rc = lsq.scale(-1.0) - _jordan(dsa_t, dza_t)
        rc.axpy(sigma * mu, e)
        try:
            dx, dy, ds, dz = direction(rc)
        except np.linalg.LinAlgError:
            status = "numerical"
            break
        ds_t, dz_t = W.scale_s(ds), W.scale_z(dz)
        amax = min(W.max_step(ds_t), W.max_step(dz_t))
        alpha = min(1.0, STEP_FRACTION * amax)
        if not np.isfinite(alpha) or alpha < 1e-12:
            status = "numerical"
            break
        if _TRACE:
            print(f"{it:3d} pres={pres:.2e} dres={dres:.2e} gap={gap:.2e} pc={pcost:.9f} a_aff={a_aff:.3f} a={alpha:.3f}")
        x = x + alpha * dx
        y = y + alpha * dy
        s = s.copy()
        s.axpy(alpha, ds)
        z = z.copy()
        z.axpy(alpha, dz)
        s, z = _sym(s), _sym(z)
    if status != "optimal" and best is not None:
        # the dual residual is the first thing to degrade on degenerate faces;
        # fall back to the best iterate and accept it if within tolerance
        if best[4] != it:
            x, y, s, z = best[:4]
            pcost, dcost, gap, pres, dres = best[5:]
        if best_merit <= 1.0:
            status = "optimal"
        elif status == "max_iter" and it < max_iter:
            status = "numerical"
    return IpmResult(x=x, y=y, s=s, z=z, status=status, iterations=it, pcost=pcost,
                     dcost=dcost, gap=gap, pres=pres, dres=dres)
