"""Phase 2: private median-of-means gradient descent, and the full two-phase estimator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from .coarse import CoarseConfig, coarse_estimate
from .mechanisms import (Ball, PrivacyBudget, RngSeed, SamplerError, as_generator,
                         exponential_mechanism_finite, laplace_mechanism, private_binary_search,
                         resolve_seed, sample_logconcave, walk_parameters)
from .sdp_core import (BucketMeans, SdpError, fine_lipschitz, fine_score_sensitivity, pe_mean_v,
                       sdp_val, sdp_value, solve_fine)

SUBCALLS_PER_ROUND = 4
HALT_BAND = 0.91
SEARCH_BAND = (0.92, 0.93)
DIST_DOMAIN = 1.14
GRAD_RADIUS_DIVISOR = 1.2
MAX_SAMPLER_STEPS = 10_000_000


class FineError(RuntimeError):
    pass


class EstimationError(RuntimeError):
    """A child failure tagged with the phase it came from."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class FineConfig:
    M: float = 1000.0
    eta: float = 0.075
    T: int | None = None
    m: int | None = None
    C0_dist: float = 10.0
    eps: float = 1.0
    beta: float = 0.05
    noiseless: bool = False
    sampler_steps: int | None = None
    max_sampler_steps: int = MAX_SAMPLER_STEPS
    debug: bool = False

    def __post_init__(self):
        if not self.M >= 1:
            raise ValueError("M must be at least 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.m is not None and int(self.m) < 1:
            raise ValueError("bucket size m must be at least 1")
        if self.T is not None and int(self.T) < 1:
            raise ValueError("T must be at least 1")
        if not self.C0_dist > 0:
            raise ValueError("C0_dist must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")

    @classmethod
    def full(cls, **kw) -> "FineConfig":
        return cls(M=1000.0, **kw)

    @classmethod
    def test(cls, **kw) -> "FineConfig":
        return cls(M=5.0, **kw)

    @property
    def zeta(self) -> float:
        return 1.0 / (2.0 * self.M)

    @property
    def N_halt(self) -> float:
        M = self.M
        return 4.0 * M * (5.0 * M + 1.0) + 10.0 * M

    @property
    def r_star(self) -> float:
        return 2.0 / math.sqrt(self._m())

    def _m(self) -> int:
        if self.m is None:
            raise ValueError("bucket size m is not set")
        return int(self.m)

    def rounds(self, d: int) -> int:
        if self.T is not None:
            return int(self.T)
        return max(1, math.ceil(math.log2(d * self._m())))

    def subcall_share(self, d: int):
        """Budget of one subcall: eps / (4 T)."""
        if math.isinf(float(self.eps)):
            return math.inf
        e = self.eps if isinstance(self.eps, Fraction) else Fraction(float(self.eps))
        return e / (SUBCALLS_PER_ROUND * self.rounds(d))


@dataclass
class FineOracle:
    """Idealised subroutines that meet their success contracts exactly, given the true mean.

    ``dist_factor`` scales the reported distance, ``inner`` is the component
    of the returned direction along the true direction and ``norm`` its length.
    """

    mu: np.ndarray
    dist_factor: float = 0.99
    inner: float = 0.1
    norm: float | None = None
    halt_radius: float | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)

    def halt(self, mu_tilde, cfg: FineConfig) -> bool:
        rad = cfg.M * (5 * cfg.M + 1) * cfg.r_star if self.halt_radius is None else self.halt_radius
        return bool(np.linalg.norm(self.mu - mu_tilde) <= rad)

    def distance(self, mu_tilde) -> float:
        return self.dist_factor * float(np.linalg.norm(self.mu - mu_tilde))

    def gradient(self, mu_tilde, cfg: FineConfig) -> np.ndarray:
        diff = self.mu - mu_tilde
        delta = diff / np.linalg.norm(diff)
        norm = 1.0 - cfg.zeta if self.norm is None else self.norm
        if not abs(self.inner) <= norm:
            raise ValueError("inner product exceeds the direction norm")
        d = delta.shape[0]
        if d == 1:
            return np.sign(self.inner) * norm * delta
        # an orthogonal unit vector, deterministic
        e = np.zeros(d)
        e[int(np.argmin(np.abs(delta)))] = 1.0
        perp = e - (e @ delta) * delta
        perp /= np.linalg.norm(perp)
        return self.inner * delta + math.sqrt(norm**2 - self.inner**2) * perp


def step_contraction(dist_factor: float, inner: float, norm: float, eta: float) -> float:
    """Exact ratio |mu_t - mu| / |mu_{t-1} - mu| of one step with the given oracle answers."""
    c = dist_factor
    return math.sqrt(1.0 - 2.0 * eta * c * inner + (eta * c * norm) ** 2)


def step_contraction_bound(eta: float = 0.075, lo: float = 0.99, hi: float = 1.15,
                           inner: float = 0.1) -> float:
    """Worst-case squared factor 1 + hi^2 eta^2 - 2 lo inner eta."""
    return 1.0 + hi**2 * eta**2 - 2.0 * lo * inner * eta


# ---------------------------------------------------------------------------
# Subroutines


def _stream(rng, *names):
    return rng.child(*names).generator() if isinstance(rng, RngSeed) else as_generator(rng)


def bucket_means(X, k: int, rng) -> BucketMeans:
    """Average k disjoint buckets of m = floor(n/k) samples under a seeded permutation.

    ``rng=None`` uses the identity order.  Leftover samples are dropped.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    k = int(k)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k = {k} exceeds n = {n}")
    m = n // k
    order = np.arange(n) if rng is None else as_generator(rng).permutation(n)
    used = X[order[: k * m]]
    return BucketMeans(used.reshape(k, m, d).mean(axis=1))


def halt_estimation(Z: BucketMeans, mu_tilde, cfg: FineConfig, budget: PrivacyBudget, rng,
                    label: str = "fine/halt", info: dict | None = None) -> bool:
    """1[SDP(mu_tilde, N r*, Z) + Lap <= 0.91 k], spending one subcall share."""
    eps = budget.spend(label, cfg.subcall_share(Z.d))
    r = cfg.N_halt * cfg.r_star
    val = sdp_value(mu_tilde, r, Z)
    noisy = laplace_mechanism(val, fine_score_sensitivity(Z.k), eps, as_generator(rng))
    h = bool(noisy <= HALT_BAND * Z.k)
    if info is not None:
        info.update(halt_radius=r, halt_value=val, halt_noisy=noisy, halt=h, halt_eps=eps)
    return h


def distance_estimation(Z: BucketMeans, mu_tilde, cfg: FineConfig, budget: PrivacyBudget, rng,
                        label: str = "fine/distance", info: dict | None = None) -> float:
    """Private binary search of r -> SDP(mu_tilde, r, Z) over [0, 1.14 C0 sqrt d] for the band [0.92k, 0.93k]."""
    eps = budget.spend(label, cfg.subcall_share(Z.d))
    D = DIST_DOMAIN * cfg.C0_dist * math.sqrt(Z.d)
    probes: list = []
    s, e = SEARCH_BAND
    out = private_binary_search(lambda r: sdp_value(mu_tilde, r, Z), D, s, e, cfg.r_star, eps,
                                as_generator(rng), scale=Z.k, probes=probes,
                                sensitivity=fine_score_sensitivity(Z.k))
    if info is not None:
        info.update(distance=out, distance_probes=[[float(x), float(u)] for x, u in probes],
                    distance_eps=eps)
    return out


def fine_argmax_direction(Z: BucketMeans, mu_tilde, r: float, radius: float) -> np.ndarray:
    """Noiseless stand-in for stage 1: pE v of the unpinned program, projected to the ball."""
    sol = solve_fine(mu_tilde, r, Z)
    if not sol.optimal:
        raise SdpError(f"fine argmax oracle: solver status {sol.status}")
    return Ball(np.zeros(Z.d), radius).project(pe_mean_v(sol))


def direction_score(y, Z: BucketMeans, mu_tilde) -> int:
    return int(np.sum((Z.Z - np.asarray(mu_tilde, dtype=float)) @ np.asarray(y, dtype=float) > 0))


def _midpoint_check(score, body: Ball, g: np.random.Generator, tol: float) -> bool:
    a, b = (body.project(body.center + body.radius * g.uniform(-1, 1, body.dim)) for _ in range(2))
    return score(0.5 * (a + b)) >= 0.5 * (score(a) + score(b)) - tol


def gradient_estimation(Z: BucketMeans, mu_tilde, d_t: float, cfg: FineConfig,
                        budget: PrivacyBudget, rng, label: str = "fine/gradient",
                        info: dict | None = None) -> np.ndarray:
    """Two-stage direction choice: SDP-VAL exponential mechanism on the (1 - zeta)-ball, then a sign vote."""
    d, k = Z.d, Z.k
    mu_tilde = np.asarray(mu_tilde, dtype=float)
    share = cfg.subcall_share(d)
    eps1 = budget.spend(label + "/stage1", share)
    r = d_t / GRAD_RADIUS_DIVISOR
    body = Ball(np.zeros(d), 1.0 - cfg.zeta)
    g1, g2 = _stream(rng, "stage1"), _stream(rng, "stage2")
    if cfg.noiseless or math.isinf(eps1):
        y0 = fine_argmax_direction(Z, mu_tilde, r, body.radius)
        n_steps = 0
    else:
        L = fine_lipschitz(k, d, cfg.zeta)
        eps_score = eps1 / (2.0 * fine_score_sensitivity(k))
        wp = walk_parameters(d, L, body.diameter, eps_score, eps1 / 4.0)
        n_steps = wp.n_steps if cfg.sampler_steps is None else int(cfg.sampler_steps)
        if n_steps > cfg.max_sampler_steps:
            raise SamplerError(f"stage-1 walk needs {n_steps} steps (limit {cfg.max_sampler_steps}); "
                               "raise max_sampler_steps or set sampler_steps")

        def score(y):
            return sdp_val(y, mu_tilde, r, Z)

        if cfg.debug and not _midpoint_check(score, body, g1, 2e-6 * max(1.0, k / 100)):
            raise FineError("SDP-VAL midpoint concavity check failed")
        y0 = sample_logconcave(score, body, eps_score, eps1 / 4.0, g1, lipschitz=L,
                               n_steps=n_steps)
    eps2 = budget.spend(label + "/stage2", share)
    scores = [direction_score(y0, Z, mu_tilde), direction_score(-y0, Z, mu_tilde)]
    pick = exponential_mechanism_finite([0, 1], scores, 1.0, eps2, g2)
    y = y0 if pick == 0 else -y0
    if info is not None:
        info.update(gradient_radius=r, y0=y0.tolist(), sign_scores=scores, gradient=y.tolist(),
                    sampler_steps=n_steps)
    return y


# ---------------------------------------------------------------------------
# Driver


def fine_estimation(X, mu0, cfg: FineConfig, budget: PrivacyBudget, rng,
                    oracle: FineOracle | None = None, rounds_log: list | None = None) -> np.ndarray:
    """Run up to T rounds of halt test, distance search and gradient step from ``mu0``.

    ``X`` is either raw samples (bucketed here with m = cfg.m) or a
    ``BucketMeans``.  With an ``oracle`` the three subroutines are replaced by
    their idealised contracts; budget shares are still booked so the ledger
    shape matches a private run.
    """
    seed = rng if isinstance(rng, RngSeed) else RngSeed(int(as_generator(rng).integers(0, 2**63)))
    if isinstance(X, BucketMeans):
        Z = X
        if cfg.m is None:
            raise ValueError("cfg.m must be set when passing bucket means")
    else:
        X = np.asarray(X, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        k = X.shape[0] // cfg._m()
        if k < 1:
            raise ValueError(f"n = {X.shape[0]} is below the bucket size m = {cfg.m}")
        Z = bucket_means(X, k, seed.child("buckets"))
    mu = np.asarray(mu0, dtype=float).copy()
    if mu.shape != (Z.d,):
        raise ValueError("mu0 has the wrong dimension")
    T = cfg.rounds(Z.d)
    share = cfg.subcall_share(Z.d)
    start = budget.spent
    for t in range(1, T + 1):
        info: dict = {"round": t, "mu_tilde": mu.tolist()}
        if rounds_log is not None:
            rounds_log.append(info)
        rs = seed.child("round", t)
        if oracle is not None:
            for part in ("halt", "distance", "gradient/stage1", "gradient/stage2"):
                if part == "distance" and info.get("halt"):
                    break
                budget.spend(f"fine/round[{t}]/{part}", share)
                if part == "halt":
                    info["halt"] = oracle.halt(mu, cfg)
            if info["halt"]:
                break
            d_t = oracle.distance(mu)
            g_t = oracle.gradient(mu, cfg)
            info.update(distance=d_t, gradient=g_t.tolist())
        else:
            if halt_estimation(Z, mu, cfg, budget, rs.child("halt"), f"fine/round[{t}]/halt", info):
                break
            d_t = distance_estimation(Z, mu, cfg, budget, rs.child("distance"),
                                      f"fine/round[{t}]/distance", info)
            if not (math.isfinite(d_t) and d_t > 0):
                info["aborted"] = "degenerate distance"
                break
            g_t = gradient_estimation(Z, mu, d_t, cfg, budget, rs.child("gradient"),
                                      f"fine/round[{t}]/gradient", info)
        mu = mu + cfg.eta * d_t * g_t
        info["step"] = (cfg.eta * d_t * g_t).tolist()
    if not math.isinf(float(cfg.eps)):
        left = Fraction(float(cfg.eps)) if not isinstance(cfg.eps, Fraction) else cfg.eps
        left -= budget.spent - start
        if left > 0:
            budget.record_unused("fine/unused (early halt)", left)
    return mu


@dataclass
class EstimationReport:
    estimate: list
    phases: list
    ledger: list
    seed: int | None
    config: dict
    epsilon_total: float = 0.0
    epsilon_spent: str = "0"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, allow_nan=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Fraction):
        return str(obj)
    return obj


def bucket_size(alpha: float) -> int:
    """m = ceil(1 / alpha^2)."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    return math.ceil(1.0 / alpha**2 - 1e-12)


def private_mean_estimate(X, R: float, alpha: float, eps: float, beta: float, rng=None,
                          fine: FineConfig | None = None, strategy: str = "auto",
                          coarse: CoarseConfig | None = None, noiseless: bool = False,
                          oracle: FineOracle | None = None, skip_fine: bool = False,
                          force: bool = False) -> EstimationReport:
    """Coarse localisation with eps/2, then private gradient descent with eps/2.

    ``rng`` may be an int seed, an ``RngSeed`` or None (falls back to
    ``DPSOS_SEED``, then fresh entropy).  ``noiseless`` sets eps = inf.
    """
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    if X.ndim != 2 or X.shape[0] < 1 or not np.all(np.isfinite(X)):
        raise ValueError("dataset must be a finite non-empty (n, d) array")
    if isinstance(rng, RngSeed):
        seed = rng
    else:
        seed = RngSeed(resolve_seed(rng))
    n, d = X.shape
    eps_total = math.inf if noiseless else eps
    budget = PrivacyBudget(eps_total)
    half = budget.epsilon_total / 2
    m = bucket_size(alpha)
    fine = FineConfig.test() if fine is None else fine
    fine = replace(fine, m=m, eps=half, beta=beta / 2, noiseless=fine.noiseless or noiseless)
    if coarse is None:
        coarse = CoarseConfig(R=R, eps=half, beta=beta / 2, strategy=strategy, force=force,
                              noiseless=noiseless)
    else:
        coarse = replace(coarse, eps=half, noiseless=coarse.noiseless or noiseless)
    phases: list = []
    cdiag: dict = {"phase": "coarse"}
    try:
        mu0 = coarse_estimate(X, coarse, budget, seed.child("coarse"), diagnostics=cdiag)
    except (SdpError, SamplerError, FineError, ArithmeticError) as exc:
        raise EstimationError("coarse", exc) from exc
    cdiag["estimate"] = mu0.tolist()
    phases.append(cdiag)
    fdiag: dict = {"phase": "fine", "m": m, "k": n // m, "M": fine.M}
    if skip_fine or n // m < 1:
        budget.record_unused("fine/skipped", half)
        fdiag["skipped"] = True
        est = mu0
    else:
        fdiag["T"] = fine.rounds(d)
        rounds: list = []
        fdiag["rounds"] = rounds
        try:
            est = fine_estimation(X, mu0, fine, budget, seed.child("fine"), oracle=oracle,
                                  rounds_log=rounds)
        except (SdpError, SamplerError, FineError, ArithmeticError) as exc:
            raise EstimationError("fine", exc) from exc
        fdiag["halt_round"] = next((r["round"] for r in rounds if r.get("halt")), None)
    phases.append(fdiag)
    config = {"R": R, "alpha": alpha, "eps": eps, "beta": beta, "n": n, "d": d,
              "strategy": coarse.strategy, "noiseless": noiseless, "fine": asdict(fine),
              "coarse": asdict(coarse)}
    return EstimationReport(estimate=np.asarray(est).tolist(), phases=phases,
                            ledger=budget.as_records(), seed=seed.seed, config=config,
                            epsilon_total=float(budget.epsilon_total),
                            epsilon_spent=str(budget.spent))
