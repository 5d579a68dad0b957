import math
from fractions import Fraction

import numpy as np
import pytest

import dpsos.fine as fine_mod
from dpsos.fine import (EstimationError, FineConfig, FineOracle, bucket_means, bucket_size,
                        direction_score, distance_estimation, fine_argmax_direction,
                        fine_estimation, gradient_estimation, halt_estimation,
                        private_mean_estimate, step_contraction, step_contraction_bound)
from dpsos.harness import unit_directions
from dpsos.mechanisms import (PrivacyBudget, RngSeed, SamplerError, exponential_mechanism_finite,
                              laplace_mechanism)
from dpsos.sdp_core import BucketMeans, SdpError, sdp_val, sdp_value


def planted(k=40, d=2, m=10**6, dist=3.0, seed=0):
    """Buckets within r*/10 of mu = 0 and a start point at the given distance."""
    g = np.random.default_rng(seed)
    r_star = 2 / math.sqrt(m)
    xi = g.standard_normal((k, d))
    xi *= (r_star / 10) * g.uniform(0, 1, (k, 1)) / np.linalg.norm(xi, axis=1, keepdims=True)
    u = g.standard_normal(d)
    u /= np.linalg.norm(u)
    return BucketMeans(xi), dist * u, r_star


def test_config_constants():
    cfg = FineConfig.test(m=4)
    assert cfg.eta == 0.075
    assert cfg.zeta == 1 / 10
    assert cfg.N_halt == 4 * 5 * 26 + 50
    assert cfg.r_star == 1.0
    assert cfg.rounds(4) == 4
    assert FineConfig.full(m=1).N_halt == 4 * 1000 * 5001 + 10_000
    assert FineConfig.full().zeta == 1 / 2000
    with pytest.raises(ValueError):
        FineConfig(eta=0.0)


def test_subcall_share_is_exact():
    cfg = FineConfig.test(m=4, eps=Fraction(1))
    assert cfg.subcall_share(4) == Fraction(1, 16)


def test_bucket_means_point_mass():
    Z = bucket_means(np.tile([1.5, -2.0], (30, 1)), 6, RngSeed(0))
    assert np.allclose(Z.Z, [1.5, -2.0])


def test_bucket_means_identity_order():
    X = np.repeat(np.eye(3), 2, axis=0)
    assert np.allclose(bucket_means(X, 3, None).Z, np.eye(3))


def test_bucket_means_telescoping_and_leftovers():
    g = np.random.default_rng(1)
    X = g.standard_normal((103, 3))
    Z = bucket_means(X, 10, RngSeed(4))
    order = RngSeed(4).generator().permutation(103)[:100]
    assert np.allclose(Z.Z.mean(axis=0), X[order].mean(axis=0))
    with pytest.raises(ValueError):
        bucket_means(X, 104, RngSeed(0))


def test_bucket_invariance_within_bucket():
    X = np.random.default_rng(2).standard_normal((12, 2))
    Z1 = bucket_means(X, 3, None).Z
    Xp = X.copy()
    Xp[0:4] = Xp[[3, 1, 0, 2]]
    assert np.allclose(bucket_means(Xp, 3, None).Z, Z1, atol=1e-15)


def test_halt_fires_when_buckets_sit_at_estimate():
    Z = BucketMeans(np.zeros((4, 2)))
    cfg = FineConfig.test(m=100, eps=math.inf)
    info = {}
    assert halt_estimation(Z, np.zeros(2), cfg, PrivacyBudget(math.inf), RngSeed(0), info=info)
    assert info["halt_value"] == pytest.approx(0.0, abs=1e-5)


def test_halt_holds_off_when_far():
    cfg = FineConfig.test(m=100, eps=math.inf)
    u = np.array([0.6, 0.8])
    Z = BucketMeans(np.tile(2 * cfg.N_halt * cfg.r_star * u, (5, 1)))
    info = {}
    assert not halt_estimation(Z, np.zeros(2), cfg, PrivacyBudget(math.inf), RngSeed(0), info=info)
    assert info["halt_value"] == pytest.approx(5.0, abs=1e-4)


def test_halt_noise_band_frequency():
    T, beta, eps = 4, 0.05, 1.0
    k = math.ceil(100 * T * math.log(T / beta) / eps)
    g = RngSeed(3).generator()
    ok = sum(abs(laplace_mechanism(0.0, 1.0, eps / T, g)) <= 0.1 * k for _ in range(1000))
    assert ok >= 1000 * (1 - beta)


def test_distance_estimation_planted():
    Z, mt, r_star = planted()
    m = 10**6
    cfg = FineConfig.test(m=m, eps=math.inf)
    dist = float(np.linalg.norm(mt))
    out = distance_estimation(Z, mt, cfg, PrivacyBudget(math.inf), RngSeed(1))
    assert 0.99 * dist <= out <= 1.15 * dist
    assert sdp_value(mt, 1.14 * dist, Z) <= 0.9 * Z.k
    assert sdp_value(mt, (1 - 1 / cfg.M) * dist, Z) >= (1 - 1 / cfg.M) * Z.k - 1e-5


def test_gradient_grid_argmax_correlates():
    Z, mt, _ = planted(seed=2)
    cfg = FineConfig.test(m=10**6)
    delta = -mt / np.linalg.norm(mt)
    r = np.linalg.norm(mt) / 1.2
    dirs = (1 - cfg.zeta) * unit_directions(2, 0.05)
    vals = [sdp_val(y, mt, r, Z) for y in dirs]
    y0 = dirs[int(np.argmax(vals))]
    assert abs(y0 @ delta) >= 0.1
    y1 = fine_argmax_direction(Z, mt, r, 1 - cfg.zeta)
    assert abs(y1 @ delta) >= 0.1 and np.linalg.norm(y1) <= 1 - cfg.zeta + 1e-12


def test_gradient_stage_two_prefers_true_sign():
    Z, mt, _ = planted(seed=3)
    delta = -mt / np.linalg.norm(mt)
    y0 = 0.5 * delta
    M = 5
    assert direction_score(y0, Z, mt) >= (1 - 1 / M) * Z.k
    assert direction_score(-y0, Z, mt) <= Z.k / M
    rates = []
    for eps in (0.05, 0.2, 1.0):
        g = RngSeed(4).generator()
        picks = [exponential_mechanism_finite([0, 1], [direction_score(y0, Z, mt),
                                                       direction_score(-y0, Z, mt)], 1.0, eps, g)
                 for _ in range(2000)]
        rates.append(1 - np.mean(picks))
    assert rates[0] < rates[1] < rates[2] and rates[2] > 0.999


def test_gradient_estimation_noiseless_output():
    Z, mt, _ = planted(seed=5)
    cfg = FineConfig.test(m=10**6, eps=math.inf, noiseless=True)
    b = PrivacyBudget(math.inf)
    y = gradient_estimation(Z, mt, 1.0 * np.linalg.norm(mt), cfg, b, RngSeed(0))
    assert np.linalg.norm(y) <= 1 - cfg.zeta + 1e-12
    assert y @ (-mt) / np.linalg.norm(mt) >= 0.1
    assert [lab for lab, _ in b.ledger] == ["fine/gradient/stage1", "fine/gradient/stage2"]


def test_gradient_private_small_instance():
    # tiny instance so the lattice walk is short; checks wiring and the body constraint
    Z = BucketMeans(np.tile([1.0, 0.0], (3, 1)))
    cfg = FineConfig.test(m=4, eps=0.02, T=1, debug=True)
    b = PrivacyBudget(0.02)
    y = gradient_estimation(Z, np.zeros(2), 1.0, cfg, b, RngSeed(7))
    assert np.linalg.norm(y) <= 1 - cfg.zeta + 1e-12
    assert b.spent == Fraction(0.02) / 2


def test_sampler_step_guard():
    Z, mt, _ = planted(k=40)
    cfg = FineConfig.full(m=10**6, eps=1.0)
    with pytest.raises(SamplerError):
        gradient_estimation(Z, mt, 3.0, cfg, PrivacyBudget(1.0), RngSeed(0))


def test_fine_halts_immediately_at_the_mean():
    X = np.random.default_rng(0).standard_normal((400, 2)) * 0.1
    cfg = FineConfig.test(m=4, eps=math.inf, noiseless=True)
    mu0 = np.zeros(2)
    log = []
    out = fine_estimation(X, mu0, cfg, PrivacyBudget(math.inf), RngSeed(0), rounds_log=log)
    assert np.array_equal(out, mu0) and len(log) == 1 and log[0]["halt"]


def test_noiseless_descent_and_step_identity():
    Z, mt, _ = planted(dist=8.0, seed=6)
    cfg = FineConfig.test(m=10**6, eps=math.inf, noiseless=True, T=4, C0_dist=10)
    log = []
    out = fine_estimation(Z, mt, cfg, PrivacyBudget(math.inf), RngSeed(0), rounds_log=log)
    dists = [np.linalg.norm(r["mu_tilde"]) for r in log] + [np.linalg.norm(out)]
    assert all(b < a for a, b in zip(dists, dists[1:]))
    for a, b in zip(log, log[1:] + [{"mu_tilde": out.tolist()}]):
        step = cfg.eta * a["distance"] * np.asarray(a["gradient"])
        assert np.array_equal(np.asarray(a["mu_tilde"]) + step, np.asarray(b["mu_tilde"]))


def test_oracle_contraction_per_round():
    mu = np.array([0.5, -1.0, 2.0])
    Z = BucketMeans(np.tile(mu, (8, 1)))
    for factor in (0.99, 1.15):
        cfg = FineConfig.test(m=100, eps=1.0, T=30)
        orc = FineOracle(mu, dist_factor=factor, inner=0.1, norm=1.0, halt_radius=0.0)
        log = []
        start = mu + np.array([4.0, 0.0, -3.0])
        out = fine_estimation(Z, start, cfg, PrivacyBudget(1.0), RngSeed(0), oracle=orc,
                              rounds_log=log)
        pts = [np.asarray(r["mu_tilde"]) for r in log] + [out]
        ratios = [np.linalg.norm(b - mu) / np.linalg.norm(a - mu) for a, b in zip(pts, pts[1:])]
        expected = step_contraction(factor, 0.1, 1.0, cfg.eta)
        assert max(ratios) <= 0.999
        assert np.allclose(ratios, expected, rtol=1e-12)
    assert step_contraction(0.99, 0.1, 1.0, 0.075) ** 2 <= step_contraction_bound() <= 0.993


def test_ledger_sums_to_eps_with_and_without_halt():
    Z, mt, _ = planted(seed=8)
    for start in (mt, np.zeros(2)):
        cfg = FineConfig.test(m=10**6, eps=Fraction(1, 2), T=2, noiseless=False)
        b = PrivacyBudget(Fraction(1, 2))
        orc = FineOracle(np.zeros(2))
        fine_estimation(Z, start, cfg, b, RngSeed(1), oracle=orc)
        assert b.spent == Fraction(1, 2)


def test_private_mean_estimate_point_mass_and_ledger():
    c = np.array([3.0, -4.0])
    X = np.tile(c, (400, 1))
    rep = private_mean_estimate(X, 100.0, 0.5, 2.0, 0.05, rng=11)
    assert sum(Fraction(e["exact"]) for e in rep.ledger) == 2
    assert rep.epsilon_spent == "2"
    assert np.linalg.norm(np.asarray(rep.estimate) - c) <= 3 * math.sqrt(200) * math.sqrt(2)
    assert [p["phase"] for p in rep.phases] == ["coarse", "fine"]
    again = private_mean_estimate(X, 100.0, 0.5, 2.0, 0.05, rng=11)
    assert rep.to_json() == again.to_json()


def test_bucket_size_rule():
    assert bucket_size(0.5) == 4
    assert bucket_size(1.0) == 1
    assert bucket_size(0.3) == 12
    with pytest.raises(ValueError):
        bucket_size(0.0)


def test_child_failure_is_phase_tagged(monkeypatch):
    def boom(*a, **k):
        raise SdpError("synthetic")

    monkeypatch.setattr(fine_mod, "sdp_value", boom)
    with pytest.raises(EstimationError) as exc:
        private_mean_estimate(np.zeros((40, 2)), 100.0, 0.5, 1.0, 0.05, rng=0)
    assert exc.value.phase == "fine"
