"""Quick invariant suites behind ``dpsos verify``.

Each check returns a :class:`Check` with a signed margin (positive means
the property holds with room to spare).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .coarse import coarse_1d_estimate, coarse_estimate_coordinatewise, score_1d
from .fine import (FineConfig, FineOracle, bucket_means, fine_estimation, halt_estimation,
                   step_contraction, step_contraction_bound)
from .harness import brute_force_quad
from .mechanisms import (PrivacyBudget, RngSeed, exponential_mechanism_index, laplace_noise,
                         lazy_exponential_mechanism, private_binary_search)
from .sdp_core import (TOL_GAP, BucketMeans, coarse_sdp_value, quad_val, sdp_val, sdp_value)

SUITES = ("sdp", "mechanisms", "coarse", "fine")
INJECTIONS = ("sensitivity",)


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    margin: float
    detail: str = ""


def _neighbor(Z: np.ndarray, g: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    Z2 = Z.copy()
    Z2[g.integers(len(Z))] = scale * g.standard_normal(Z.shape[1])
    return Z2


def suite_sdp(seed: RngSeed, inject: str | None = None) -> list[Check]:
    g = seed.child("sdp").generator()
    out = []
    factor = 2.0 if inject == "sensitivity" else 1.0
    worst = -math.inf
    for _ in range(5):
        Z = g.standard_normal((6, 2))
        mt, r = 0.3 * g.standard_normal(2), float(g.uniform(0.2, 1.0))
        Z2 = _neighbor(Z, g)
        worst = max(worst, factor * abs(sdp_value(mt, r, BucketMeans(Z)) - sdp_value(mt, r, BucketMeans(Z2))))
    out.append(Check("sdp", "SDP sensitivity <= 1", worst <= 1 + 2 * TOL_GAP, 1 + 2 * TOL_GAP - worst))
    worst = -math.inf
    for _ in range(3):
        Z = BucketMeans(g.standard_normal((6, 2)))
        vals = [sdp_value(np.zeros(2), r, Z) for r in (0.1, 0.4, 0.8, 1.5)]
        worst = max(worst, max(b - a for a, b in zip(vals, vals[1:])))
    out.append(Check("sdp", "SDP non-increasing in r", worst <= 2 * TOL_GAP, 2 * TOL_GAP - worst))
    worst = math.inf
    for _ in range(3):
        Z = BucketMeans(g.standard_normal((6, 2)))
        y = g.standard_normal(2)
        y *= 0.8 / np.linalg.norm(y)
        u = y / np.linalg.norm(y)
        worst = min(worst, sdp_val(y, np.zeros(2), 0.5, Z) - quad_val(u, np.zeros(2), 0.5 / 0.8, Z))
        worst = min(worst, sdp_value(np.zeros(2), 0.5, Z) - brute_force_quad(np.zeros(2), 0.5, Z))
    out.append(Check("sdp", "relaxation dominates integral counts", worst >= -2 * TOL_GAP, worst))
    return out


def suite_mechanisms(seed: RngSeed, inject: str | None = None) -> list[Check]:
    out = []
    g = seed.child("laplace").generator()
    tail = float(np.mean(np.abs(laplace_noise(1.0, g, size=200_000)) >= 3.0))
    sd = math.sqrt(math.exp(-3) * (1 - math.exp(-3)) / 200_000)
    out.append(Check("mechanisms", "Laplace tail", abs(tail - math.exp(-3)) <= 4 * sd,
                     4 * sd - abs(tail - math.exp(-3)), f"tail={tail:.4f}"))
    g = seed.child("expmech").generator()
    picks = np.array([exponential_mechanism_index([0, 1, 2], 1.0, 1.0, g) for _ in range(30_000)])
    p = np.bincount(picks, minlength=3) / len(picks)
    w = np.exp(0.5 * np.arange(3))
    err = float(np.max(np.abs(p - w / w.sum())))
    out.append(Check("mechanisms", "exponential mechanism frequencies", err < 0.015, 0.015 - err))
    g = seed.child("lazy").generator()
    objs = [3, 3, 4, 10]
    picks = [lazy_exponential_mechanism(20, objs, lambda o: [o], 2.0, g) for _ in range(20_000)]
    freq = np.bincount(picks, minlength=20) / len(picks)
    cnt = np.bincount(objs, minlength=20)
    w = np.exp(cnt.astype(float))
    tv = 0.5 * float(np.abs(freq - w / w.sum()).sum())
    out.append(Check("mechanisms", "lazy = finite exponential mechanism", tv < 0.02, 0.02 - tv))
    b = PrivacyBudget(1.0)
    for i in range(7):
        b.spend(f"part{i}", Fraction(1, 7))
    out.append(Check("mechanisms", "budget composes exactly", b.remaining == 0, 0.0))
    g = seed.child("bsearch").generator()
    x = private_binary_search(lambda r: 100.0 if r < 3.3 else 0.0, 10.0, 0.92, 0.93, 0.01, 50.0, g,
                              scale=100.0)
    out.append(Check("mechanisms", "private binary search lands on the step", abs(x - 3.3) <= 0.02,
                     0.02 - abs(x - 3.3), f"x={x:.4f}"))
    return out


def suite_coarse(seed: RngSeed, inject: str | None = None) -> list[Check]:
    out = []
    ok = score_1d(0, [0, 0.5, 3], 1) == 2 and score_1d(100, [0, 0.5, 3], 1) == 0
    out.append(Check("coarse", "score_1d examples", ok, 0.0))
    y = coarse_1d_estimate([0.3] * 200, 1e6, 1.0, math.inf, 0.05, seed.child("c1d").generator())
    out.append(Check("coarse", "1-d point mass within 3 R*", abs(y - 0.3) <= 3, 3 - abs(y - 0.3)))
    b = PrivacyBudget(2.0)
    X = np.tile([5.0, -7.0, 1.0], (50, 1))
    est = coarse_estimate_coordinatewise(X, 100.0, 2.0, 0.05, seed.child("cw"), budget=b)
    bound = 3 * math.sqrt(2 / 0.01) * math.sqrt(3)
    err = float(np.linalg.norm(est - X[0]))
    out.append(Check("coarse", "coordinatewise ledger has d entries", len(b.ledger) == 3, 0.0))
    out.append(Check("coarse", "coordinatewise point mass", err <= bound, bound - err))
    g = seed.child("csens").generator()
    X = g.standard_normal((5, 2))
    yv = 0.3 * g.standard_normal(2)
    delta = abs(coarse_sdp_value(yv, 10.0, 1.0, X) - coarse_sdp_value(yv, 10.0, 1.0, _neighbor(X, g)))
    out.append(Check("coarse", "coarse score sensitivity <= 1", delta <= 1 + 2 * TOL_GAP,
                     1 + 2 * TOL_GAP - delta))
    return out


def suite_fine(seed: RngSeed, inject: str | None = None) -> list[Check]:
    out = []
    cfg = FineConfig.test(m=100, eps=1.0)
    out.append(Check("fine", "halt radius constant", cfg.N_halt == 4 * 5 * 26 + 50, 0.0))
    bound = step_contraction_bound()
    out.append(Check("fine", "step identity factor^2 <= 0.993", bound <= 0.9931, 0.9931 - bound,
                     f"factor^2={bound:.6f}"))
    f = step_contraction(0.99, 0.1, 1.0, 0.075)
    out.append(Check("fine", "per-round factor <= 0.999", f <= 0.999, 0.999 - f))
    mu = np.array([1.0, 2.0])
    orc = FineOracle(mu, halt_radius=0.0)
    Z = BucketMeans(np.tile(mu, (10, 1)))
    cfg = FineConfig.test(m=100, eps=1.0, T=20)
    start = mu + np.array([3.0, -4.0])
    end = fine_estimation(Z, start, cfg, PrivacyBudget(1.0), seed.child("oracle"), oracle=orc)
    ratio = float(np.linalg.norm(end - mu) / 5.0)
    out.append(Check("fine", "oracle-mode contraction over T rounds", ratio <= 0.999**20,
                     0.999**20 - ratio, f"ratio={ratio:.4f}"))
    h = halt_estimation(Z, mu, FineConfig.test(m=100, eps=math.inf), PrivacyBudget(math.inf),
                        seed.child("halt").generator())
    out.append(Check("fine", "halt fires at the mean", h, 0.0))
    X = np.array([[1.0, 0], [1, 0], [0, 1], [0, 1], [0, 0], [0, 0]])
    Zb = bucket_means(X, 3, None)
    out.append(Check("fine", "bucket means by direct averaging",
                     np.allclose(Zb.Z, [[1, 0], [0, 1], [0, 0]]), 0.0))
    return out


RUNNERS: dict[str, Callable] = {"sdp": suite_sdp, "mechanisms": suite_mechanisms,
                                "coarse": suite_coarse, "fine": suite_fine}


def run_suites(names, seed: int, inject: str | None = None) -> list[Check]:
    root = RngSeed(int(seed))
    checks: list[Check] = []
    for name in names:
        checks.extend(RUNNERS[name](root.child(name), inject))
    return checks
