"""Privacy primitives: budget ledger, seeded RNG streams, Laplace and
exponential mechanisms (finite and lazy), private binary search and a
lattice Metropolis sampler for exponential mechanisms over convex bodies.

Every mechanism accepts ``eps = math.inf`` as a noiseless mode: Laplace adds
no noise, exponential mechanisms return an argmax (uniform over ties).
"""

from __future__ import annotations

import math
import os
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

SEED_ENV = "DPSOS_SEED"
SAMPLER_C0 = 64
MAX_DENSE_CELLS = 10_000_000


# ---------------------------------------------------------------------------
# RNG streams


@dataclass(frozen=True)
class RngSeed:
    """A 64-bit seed plus a stream path; equal seeds replay identically."""

    seed: int
    stream: tuple = ()

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be an unsigned 64-bit integer")

    def child(self, *names: Hashable) -> "RngSeed":
        return RngSeed(self.seed, self.stream + tuple(_stream_id(n) for n in names))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def _stream_id(name: Hashable) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    # stable across processes (unlike hash())
    return int.from_bytes(str(name).encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(str(name))


def resolve_seed(seed: int | None) -> int:
    """Explicit seed, else the DPSOS_SEED environment variable, else fresh entropy."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env.strip(), 0)
        except ValueError as exc:
            raise ValueError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return int(np.random.SeedSequence().entropy % 2**64)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngSeed):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngSeed(resolve_seed(rng)).generator()
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")


# ---------------------------------------------------------------------------
# Budget


class BudgetExceeded(RuntimeError):
    pass


def _exact(eps) -> Fraction | float:
    if isinstance(eps, Fraction):
        return eps
    eps = float(eps)
    if math.isinf(eps):
        return math.inf
    return Fraction(eps)


@dataclass
class PrivacyBudget:
    """Basic-composition ledger with exact rational arithmetic.

    ``epsilon_total`` may be ``math.inf`` (noiseless runs); the ledger still
    records every call.
    """

    epsilon_total: Fraction | float
    ledger: list = field(default_factory=list)

    def __post_init__(self):
        self.epsilon_total = _exact(self.epsilon_total)
        if not self.epsilon_total > 0:
            raise ValueError("epsilon_total must be positive")

    @property
    def spent(self) -> Fraction | float:
        tot: Fraction | float = Fraction(0)
        for _, e in self.ledger:
            tot = tot + e
        return tot

    @property
    def remaining(self) -> Fraction | float:
        return self.epsilon_total - self.spent

    def spend(self, label: str, eps) -> float:
        """Record a spend and return it as a float for the mechanism call."""
        e = _exact(eps)
        if not e > 0:
            raise ValueError(f"{label}: spend must be positive")
        if e > self.remaining:
            raise BudgetExceeded(f"{label}: requested {float(e):.6g}, remaining {float(self.remaining):.6g}")
        self.ledger.append((label, e))
        return float(e)

    def record_unused(self, label: str, eps=None) -> None:
        """Book ``eps`` (default: everything left) as an explicit unused entry."""
        rest = self.remaining if eps is None else min(_exact(eps), self.remaining)
        if rest > 0 and not math.isinf(rest):
            self.ledger.append((label, rest))

    def as_records(self) -> list:
        return [{"label": lab, "epsilon": float(e), "exact": str(e)} for lab, e in self.ledger]


# ---------------------------------------------------------------------------
# Laplace


def _check_eps(eps: float, what: str = "eps") -> float:
    eps = float(eps)
    if not eps > 0 or math.isnan(eps):
        raise ValueError(f"{what} must be positive")
    return eps


def _uniform_open(rng: np.random.Generator, size=None):
    # 64 random bits, top 53 used, mapped to the open interval (0, 1)
    k = rng.integers(0, 2**64, size=size, dtype=np.uint64, endpoint=False) >> np.uint64(11)
    return (k.astype(float) + 0.5) * 2.0**-53


def laplace_noise(scale: float, rng, size=None):
    """Lap(scale) by inverse CDF on a 64-bit uniform draw."""
    rng = as_generator(rng)
    w = _uniform_open(rng, size) - 0.5
    return -scale * np.sign(w) * np.log1p(-2.0 * np.abs(w))


def laplace_mechanism(value: float, sensitivity: float, eps: float, rng) -> float:
    sensitivity = _check_eps(sensitivity, "sensitivity")
    eps = _check_eps(eps)
    value = float(value)
    if not math.isfinite(value):
        raise ValueError("value must be finite")
    if math.isinf(eps):
        return value
    return value + float(laplace_noise(sensitivity / eps, rng))


# ---------------------------------------------------------------------------
# Exponential mechanisms


def _sample_log_weights(logw: np.ndarray, rng: np.random.Generator) -> int:
    logw = np.asarray(logw, dtype=float)
    top = logw.max()
    p = np.exp(logw - top)
    cdf = np.cumsum(p)
    u = float(_uniform_open(rng)) * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def _argmax_uniform(scores: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(scores == scores.max())
    return int(best[rng.integers(len(best))])


def exponential_mechanism_index(scores: Sequence[float], sensitivity: float, eps: float, rng) -> int:
    """Index sampled with probability proportional to exp(eps * score / (2 * sensitivity))."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("empty candidate set")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    sensitivity = _check_eps(sensitivity, "sensitivity")
    eps = _check_eps(eps)
    rng = as_generator(rng)
    if math.isinf(eps):
        return _argmax_uniform(s, rng)
    return _sample_log_weights(eps * s / (2.0 * sensitivity), rng)


def exponential_mechanism_finite(candidates: Sequence, score, sensitivity: float, eps: float, rng):
    """Finite exponential mechanism; ``score`` is a callable or a sequence aligned with candidates."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate set")
    scores = [score(c) for c in candidates] if callable(score) else list(score)
    if len(scores) != len(candidates):
        raise ValueError("scores and candidates differ in length")
    return candidates[exponential_mechanism_index(scores, sensitivity, eps, rng)]


def nth_empty_bin(i: int, occupied_sorted: Sequence[int]) -> int:
    """The i-th (0-based) bin not in ``occupied_sorted``.

    Returns i + k for the smallest k with k equal to the number of occupied
    bins at index <= i + k.
    """
    k = 0
    for j in occupied_sorted:
        if j <= i + k:
            k += 1
        else:
            break
    return i + k


def lazy_exponential_mechanism(m: int, objects: Iterable, bins_of: Callable, eps: float, rng,
                               sensitivity: float = 1.0) -> int:
    """Exponential mechanism over bins 0..m-1 scored by occupancy, touching only occupied bins.

    ``m`` is an arbitrary-precision int.  ``bins_of(obj)`` yields the bins
    (ints in [0, m)) containing ``obj``; duplicates within one object count once.
    """
    m = int(m)
    if m < 1:
        raise ValueError("need at least one bin")
    sensitivity = _check_eps(sensitivity, "sensitivity")
    eps = _check_eps(eps)
    counts: dict[int, int] = {}
    for obj in objects:
        for b in set(bins_of(obj)):
            b = int(b)
            if not 0 <= b < m:
                raise OverflowError(f"bin index {b} outside [0, {m})")
            counts[b] = counts.get(b, 0) + 1
    J = sorted(counts)
    n_empty = m - len(J)
    g = as_generator(rng)
    if math.isinf(eps):
        if not J:
            return _uniform_bigint(n_empty, g)
        return J[_argmax_uniform(np.array([counts[b] for b in J], dtype=float), g)]
    logw = [eps * counts[b] / (2.0 * sensitivity) for b in J]
    if n_empty > 0:
        logw.append(math.log(n_empty))  # the empty-bin class
    pick = _sample_log_weights(np.array(logw), g)
    if pick < len(J):
        return J[pick]
    return nth_empty_bin(_uniform_bigint(n_empty, g), J)


def _uniform_bigint(n: int, rng: np.random.Generator) -> int:
    # exact uniform integer in [0, n) at any width, seeded from the stream
    seed = int(rng.integers(0, 2**63))
    return random.Random(seed).randrange(n)


# ---------------------------------------------------------------------------
# Private binary search


def binary_search_steps(D: float, a: float) -> int:
    return max(1, math.ceil(math.log2(D / a)))


def binary_search_margin(S: int, eps: float, beta: float) -> float:
    """Noise margin Delta = S log(S / beta) / eps covering all S probes w.p. 1 - beta."""
    if math.isinf(eps):
        return 0.0
    return S * math.log(S / beta) / eps


def private_binary_search(f: Callable[[float], float], D: float, s: float, e: float, a: float,
                          eps: float, rng, scale: float = 1.0, probes: list | None = None,
                          sensitivity: float = 1.0) -> float:
    """Noisy bisection of [0, D] for a point where a decreasing f sits in [s*scale, e*scale].

    Each of the S = ceil(log2(D / a)) probes adds Lap(S * sensitivity / eps)
    to f (total budget eps).  A probe above e*scale moves right, below s*scale moves
    left, and inside the band (or on a boundary) moves left.
    """
    if not D > 0:
        raise ValueError("D must be positive")
    if not a > 0:
        raise ValueError("a must be positive")
    if not s < e:
        raise ValueError("need s < e")
    eps = _check_eps(eps)
    g = as_generator(rng)
    S = binary_search_steps(D, a)
    lo, hi = 0.0, float(D)
    for _ in range(S):
        x = 0.5 * (lo + hi)
        u = laplace_mechanism(f(x), sensitivity, eps / S, g)
        if probes is not None:
            probes.append((x, u))
        if u > e * scale:
            lo = x
        else:
            hi = x
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Convex bodies and the lattice sampler


@dataclass(frozen=True)
class Ball:
    """Euclidean ball; the only body kind the estimators need."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def diameter(self) -> float:
        return 2.0 * float(self.radius)

    def contains(self, x) -> np.ndarray | bool:
        x = np.asarray(x, dtype=float)
        dist2 = np.sum((x - self.center) ** 2, axis=-1)
        return dist2 <= self.radius**2

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        off = x - self.center
        nrm = np.linalg.norm(off, axis=-1, keepdims=True)
        fac = np.where(nrm > self.radius, self.radius / np.maximum(nrm, 1e-300), 1.0)
        return self.center + off * fac


ConvexBody = Ball


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class WalkParams:
    delta: float
    n_steps: int
    log_density_lipschitz: float


def walk_parameters(dim: int, lipschitz: float, diameter: float, eps_target: float,
                    eps_sampler: float) -> WalkParams:
    """Cell width and step count of the lattice walk.

    The walk targets exp((eps_target / 2) * score), whose log-density is
    Lf = (eps_target / 2) * lipschitz Lipschitz.  delta = min(1/(4 Lf),
    diam/(8 sqrt d)) and N = ceil(64 d (Lf diam + d)^2 max(1, log(1/eps_sampler))).
    """
    Lf = 0.5 * float(eps_target) * float(lipschitz)
    cap = diameter / (8.0 * math.sqrt(dim))
    delta = cap if Lf <= 0 else min(1.0 / (4.0 * Lf), cap)
    slack = max(1.0, math.log(1.0 / eps_sampler)) if eps_sampler < 1 else 1.0
    n = math.ceil(SAMPLER_C0 * dim * (Lf * diameter + dim) ** 2 * slack)
    return WalkParams(delta=delta, n_steps=n, log_density_lipschitz=Lf)


def _check_sampler_args(body, eps_target, eps_sampler, lipschitz):
    if not isinstance(body, Ball):
        raise TypeError("body must be a Ball")
    _check_eps(eps_target, "eps_target")
    _check_eps(eps_sampler, "eps_sampler")
    if math.isinf(eps_target):
        raise ValueError("the sampler needs a finite eps_target; use an argmax oracle in noiseless mode")
    if lipschitz is None or not lipschitz >= 0:
        raise ValueError("a non-negative Lipschitz bound is required")


def sample_logconcave(score: Callable[[np.ndarray], float], body: Ball, eps_target: float,
                      eps_sampler: float, rng, lipschitz: float, stats: dict | None = None,
                      n_steps: int | None = None) -> np.ndarray:
    """Approximate sample from density proportional to exp((eps_target/2) * score) on ``body``.

    Metropolis walk over the cells of a delta-lattice: the proposal stays in
    the current cell or moves to one of its 2d neighbours (probability 1/2
    each way) and draws a fresh uniform point there; points outside the body
    are rejected.  Its exact stationary law has density proportional to
    exp((eps_target/2) * score(proj(cell centre))) on the body.  Scores are
    memoised per cell, so each cell costs one evaluation.
    """
    _check_sampler_args(body, eps_target, eps_sampler, lipschitz)
    g = as_generator(rng)
    d = body.dim
    wp = walk_parameters(d, lipschitz, body.diameter, eps_target, eps_sampler)
    N = wp.n_steps if n_steps is None else int(n_steps)
    delta = wp.delta
    memo: dict[tuple, float] = {}

    def logf(cell: np.ndarray) -> float:
        key = tuple(int(c) for c in cell)
        val = memo.get(key)
        if val is None:
            ctr = body.project((cell + 0.5) * delta)
            sc = float(score(ctr))
            if not math.isfinite(sc):
                raise SamplerError(f"non-finite score {sc} at {ctr.tolist()}")
            val = 0.5 * eps_target * sc
            memo[key] = val
        return val

    cell = np.floor(body.center / delta).astype(np.int64)
    x = body.center.copy()
    cur = logf(cell)
    moves = g.integers(0, 4 * d, size=N)       # < 2d: stay, else neighbour
    us = g.random(size=(N, d))
    acc_u = g.random(size=N)
    accepted = 0
    for t in range(N):
        mv = int(moves[t])
        nc = cell.copy()
        if mv >= 2 * d:
            j = mv - 2 * d
            nc[j // 2] += 1 if j % 2 == 0 else -1
        nx = (nc + us[t]) * delta
        if not body.contains(nx):
            continue
        new = logf(nc) if mv >= 2 * d else cur
        if new >= cur or acc_u[t] < math.exp(new - cur):
            cell, x, cur = nc, nx, new
            accepted += 1
    if stats is not None:
        stats.update({"delta": delta, "n_steps": N, "cells_evaluated": len(memo),
                      "acceptance": accepted / max(N, 1)})
    return x


def sample_logconcave_many(score_batch: Callable[[np.ndarray], np.ndarray], body: Ball,
                           eps_target: float, eps_sampler: float, rng, lipschitz: float,
                           n_chains: int, n_steps: int | None = None) -> np.ndarray:
    """Run ``n_chains`` independent copies of the lattice walk in lockstep.

    ``score_batch`` maps an (m, d) array of points to m scores.  The
    distribution of each returned row equals that of :func:`sample_logconcave`.
    """
    _check_sampler_args(body, eps_target, eps_sampler, lipschitz)
    g = as_generator(rng)
    d = body.dim
    wp = walk_parameters(d, lipschitz, body.diameter, eps_target, eps_sampler)
    N = wp.n_steps if n_steps is None else int(n_steps)
    delta = wp.delta
    lo = np.floor((body.center - body.radius) / delta).astype(np.int64) - 1
    hi = np.floor((body.center + body.radius) / delta).astype(np.int64) + 1
    shape = tuple(int(v) for v in hi - lo + 1)
    if math.prod(shape) > MAX_DENSE_CELLS:
        raise SamplerError(f"lattice of {math.prod(shape)} cells exceeds the dense memo limit")
    memo = np.full(shape, np.nan)

    def logf(cells: np.ndarray) -> np.ndarray:
        idx = tuple((cells - lo).T)
        vals = memo[idx]
        miss = np.isnan(vals)
        if miss.any():
            todo = np.unique(cells[miss], axis=0)
            sc = np.asarray(score_batch(body.project((todo + 0.5) * delta)), dtype=float)
            if not np.all(np.isfinite(sc)):
                raise SamplerError("non-finite score in batch evaluation")
            memo[tuple((todo - lo).T)] = 0.5 * eps_target * sc
            vals = memo[idx]
        return vals

    cells = np.tile(np.floor(body.center / delta).astype(np.int64), (n_chains, 1))
    x = np.tile(body.center, (n_chains, 1))
    cur = logf(cells)
    rows = np.arange(n_chains)
    for _ in range(N):
        mv = g.integers(0, 4 * d, size=n_chains)
        u = g.random(size=(n_chains, d))
        au = g.random(size=n_chains)
        nc = cells.copy()
        step = mv >= 2 * d
        j = mv[step] - 2 * d
        nc[rows[step], j // 2] += np.where(j % 2 == 0, 1, -1)
        nx = (nc + u) * delta
        inside = body.contains(nx)
        new = cur.copy()
        if inside.any():
            new[inside] = logf(nc[inside])
        ok = inside & ((new >= cur) | (au < np.exp(np.minimum(new - cur, 0.0))))
        cells[ok], x[ok], cur[ok] = nc[ok], nx[ok], new[ok]
    return x


__all__ = [
    "SEED_ENV", "RngSeed", "resolve_seed", "as_generator", "BudgetExceeded", "PrivacyBudget",
    "laplace_noise", "laplace_mechanism", "exponential_mechanism_index",
    "exponential_mechanism_finite", "nth_empty_bin", "lazy_exponential_mechanism",
    "binary_search_steps", "binary_search_margin", "private_binary_search", "Ball", "ConvexBody",
    "SamplerError", "WalkParams", "walk_parameters", "sample_logconcave",
    "sample_logconcave_many",
]
