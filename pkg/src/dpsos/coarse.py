"""Phase 1: private coarse localisation of the mean.

Two strategies are available: a per-coordinate exponential mechanism over
a grid (run lazily, so the grid may be astronomically fine relative to R),
and the iterative SDP-scored exponential mechanism that shrinks the search
radius by a factor 5 per round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .mechanisms import (Ball, PrivacyBudget, RngSeed, as_generator, lazy_exponential_mechanism,
                         sample_logconcave)
from .sdp_core import (COARSE_RADIUS_SLACK, COARSE_SCORE_SENSITIVITY, SdpError, build_coarse_sdp,
                       coarse_lipschitz, coarse_sdp_value, pe_mean_v, solve_sdp)

COORD_ALPHA_DEFAULT = 0.01
SOS_ALPHA_DEFAULT = 5e-5
SOS_MAX_N = 30
SOS_MAX_D = 5
SHRINK = 0.2


class CoarseError(RuntimeError):
    pass


def _dataset(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("dataset must be a non-empty (n, d) array")
    if not np.all(np.isfinite(X)):
        raise ValueError("dataset entries must be finite")
    return X


# ---------------------------------------------------------------------------
# One dimension


def score_1d(y: float, X, R_star: float) -> int:
    """Number of points within 2 R_star of y."""
    x = np.asarray(X, dtype=float).reshape(-1)
    return int(np.count_nonzero(np.abs(x - float(y)) <= 2.0 * R_star))


def grid_range(R: float, R_star: float) -> tuple[int, int]:
    """Integer range [k_lo, k_hi] of the grid {R_star * k}."""
    if not R_star > 0:
        raise ValueError("R_star must be positive")
    if not R > 0:
        raise ValueError("R must be positive")
    k_lo, k_hi = math.floor(-R / R_star), math.ceil(R / R_star)
    if k_hi - k_lo + 1 < 1:
        raise ValueError("grid is empty")
    return k_lo, k_hi


def _bins_of_1d(x: float, R_star: float, k_lo: int, k_hi: int) -> list[int]:
    # grid indices k with |x - R_star k| <= 2 R_star (at most 5 of them)
    a = math.ceil((x - 2.0 * R_star) / R_star)
    b = math.floor((x + 2.0 * R_star) / R_star)
    out = []
    for k in range(max(a, k_lo), min(b, k_hi) + 1):
        if abs(x - R_star * k) <= 2.0 * R_star:
            out.append(k - k_lo)
    return out


def coarse_1d_estimate(X, R: float, R_star: float, eps: float, beta: float, rng) -> float:
    """Exponential mechanism over the grid {R_star k} scored by :func:`score_1d`.

    Runs lazily: only bins within 2 R_star of some point are weighted
    explicitly.  ``beta`` enters only the accuracy analysis.
    """
    x = np.asarray(X, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("dataset entries must be finite")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    k_lo, k_hi = grid_range(R, R_star)
    m = k_hi - k_lo + 1
    b = lazy_exponential_mechanism(m, x.tolist(), lambda v: _bins_of_1d(v, R_star, k_lo, k_hi),
                                   eps, rng)
    return R_star * (b + k_lo)


def coordinatewise_radius(alpha_frac: float = COORD_ALPHA_DEFAULT) -> float:
    return math.sqrt(2.0 / alpha_frac)


def coarse_estimate_coordinatewise(X, R: float, eps: float, beta: float, rng,
                                   alpha_frac: float = COORD_ALPHA_DEFAULT,
                                   budget: PrivacyBudget | None = None,
                                   R_star: float | None = None,
                                   noiseless: bool = False) -> np.ndarray:
    """Run the 1-d mechanism on every coordinate with eps/d and beta/d.

    ``noiseless`` books the shares but selects the argmax bin.
    """
    X = _dataset(X)
    n, d = X.shape
    if not 0 < alpha_frac < 1.0 / 3.0:
        raise ValueError("alpha_frac must lie in (0, 1/3)")
    R_star = coordinatewise_radius(alpha_frac) if R_star is None else float(R_star)
    budget = PrivacyBudget(eps) if budget is None else budget
    share = _share(eps, d)
    seed = rng if isinstance(rng, RngSeed) else None
    g = None if seed is not None else as_generator(rng)
    out = np.empty(d)
    for j in range(d):
        e_j = budget.spend(f"coarse/coordinate[{j}]", share)
        stream = seed.child("coord", j).generator() if seed is not None else g
        out[j] = coarse_1d_estimate(X[:, j], R, R_star, math.inf if noiseless else e_j,
                                    beta / d, stream)
    return out


def _share(eps, parts: int):
    if math.isinf(float(eps)):
        return math.inf
    return (eps if isinstance(eps, Fraction) else Fraction(float(eps))) / parts


# ---------------------------------------------------------------------------
# SoS rounds


def sos_rounds(R: float, R_star: float) -> int:
    """floor(log_5(R / (1000 R_star))), computed without floating-point drift at powers of 5."""
    ratio = R / (1000.0 * R_star)
    if ratio < 1:
        return 0
    t = int(math.floor(math.log(ratio, 5)))
    while 5 ** (t + 1) <= ratio:
        t += 1
    while t > 0 and 5**t > ratio:
        t -= 1
    return t


def sos_default_radius(d: int, alpha_frac: float = SOS_ALPHA_DEFAULT) -> float:
    return math.sqrt(2.0 * d / alpha_frac)


def _argmax_round(Xc: np.ndarray, R_t: float, body: Ball) -> np.ndarray:
    # maximiser of the pinned score over y equals pE v of the unpinned program
    sol = solve_sdp(build_coarse_sdp(None, R_t, R_t / 100.0, Xc))
    if not sol.optimal:
        raise SdpError(f"coarse argmax oracle: solver status {sol.status}")
    return body.project(pe_mean_v(sol))


def coarse_estimate_sos(X, R: float, R_star: float, eps: float, beta: float, rng,
                        budget: PrivacyBudget | None = None, force: bool = False,
                        noiseless: bool = False, rounds: int | None = None,
                        diagnostics: list | None = None) -> np.ndarray:
    """Iterated SDP-scored exponential mechanism, shrinking the radius by 5 each round.

    Round t uses radius R_t = R 0.2^t, score ``coarse_sdp_value`` with
    r = R_t / 100 on the recentred data, and spends eps / rounds through the
    lattice sampler (half to the target exponent, a quarter as deviation
    counted on each side).  ``noiseless`` replaces the sampler by the exact
    maximiser.  ``beta`` enters only the accuracy analysis.
    """
    X = _dataset(X)
    n, d = X.shape
    if not force and (n > SOS_MAX_N or d > SOS_MAX_D):
        raise CoarseError(f"SoS path limited to n <= {SOS_MAX_N}, d <= {SOS_MAX_D} without force")
    if not R >= 1000.0 * R_star:
        raise ValueError("the SoS path needs R >= 1000 R_star")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    m = sos_rounds(R, R_star) if rounds is None else int(rounds)
    budget = PrivacyBudget(eps) if budget is None else budget
    seed = rng if isinstance(rng, RngSeed) else RngSeed(int(as_generator(rng).integers(0, 2**63)))
    Xc = X.copy()
    total = np.zeros(d)
    if m == 0:
        budget.record_unused("coarse/sos unused (no rounds)", eps)
        return total
    share = _share(eps, m)
    for t in range(m):
        R_t = R * SHRINK**t
        r_t = R_t / 100.0
        body = Ball(np.zeros(d), R_t * (1.0 + COARSE_RADIUS_SLACK))
        e_t = budget.spend(f"coarse/sos round[{t}]", share)
        if noiseless or math.isinf(e_t):
            y_t = _argmax_round(Xc, R_t, body)
        else:
            stats: dict = {}

            def score(y, Xc=Xc, R_t=R_t, r_t=r_t):
                return coarse_sdp_value(y, R_t, r_t, Xc)

            y_t = sample_logconcave(score, body, e_t / (2.0 * COARSE_SCORE_SENSITIVITY), e_t / 4.0,
                                    seed.child("sos", t).generator(),
                                    lipschitz=coarse_lipschitz(n, d, R_t), stats=stats)
        if diagnostics is not None:
            rec = {"round": t, "radius": R_t, "r": r_t, "epsilon": e_t, "y": y_t.tolist()}
            try:
                rec["score"] = coarse_sdp_value(y_t, R_t, r_t, Xc)
            except SdpError as exc:
                rec["score_error"] = str(exc)
            diagnostics.append(rec)
        total = total + y_t
        Xc = Xc - y_t
    return total


# ---------------------------------------------------------------------------
# Dispatch


@dataclass
class CoarseConfig:
    R: float
    eps: float
    beta: float = 0.05
    strategy: str = "auto"
    alpha_frac: float | None = None
    R_star: float | None = None
    force: bool = False
    noiseless: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in ("auto", "coordinatewise", "sos"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.R > 0:
            raise ValueError("R must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")

    def resolve(self, d: int) -> str:
        if self.strategy != "auto":
            return self.strategy
        # coordinatewise wins when log R >= d
        return "coordinatewise" if math.log(self.R) >= d else "sos"


def coarse_estimate(X, config: CoarseConfig, budget: PrivacyBudget, rng,
                    diagnostics: dict | None = None) -> np.ndarray:
    X = _dataset(X)
    d = X.shape[1]
    strategy = config.resolve(d)
    if diagnostics is not None:
        diagnostics["strategy"] = strategy
    eps = budget.remaining if config.eps is None else config.eps
    if strategy == "coordinatewise":
        alpha = COORD_ALPHA_DEFAULT if config.alpha_frac is None else config.alpha_frac
        R_star = coordinatewise_radius(alpha) if config.R_star is None else config.R_star
        if diagnostics is not None:
            diagnostics["R_star"] = R_star
        return coarse_estimate_coordinatewise(X, config.R, eps, config.beta, rng, alpha,
                                              budget, R_star, noiseless=config.noiseless)
    alpha = SOS_ALPHA_DEFAULT if config.alpha_frac is None else config.alpha_frac
    R_star = sos_default_radius(d, alpha) if config.R_star is None else config.R_star
    rounds_log: list = []
    out = coarse_estimate_sos(X, config.R, R_star, eps, config.beta, rng, budget=budget,
                              force=config.force, noiseless=config.noiseless,
                              diagnostics=rounds_log)
    if diagnostics is not None:
        diagnostics["R_star"] = R_star
        diagnostics["rounds"] = rounds_log
    return out
