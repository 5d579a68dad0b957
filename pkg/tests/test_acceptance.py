"""Acceptance suite: one test per criterion, each asserting its own runtime limit."""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import stats

from dpsos.cli import main as cli_main
from dpsos.fine import (FineConfig, FineOracle, fine_estimation, private_mean_estimate,
                        step_contraction, step_contraction_bound)
from dpsos.harness import (AdversarySpec, GeneratorSpec, brute_force_quad, corrupt, dp_audit,
                           dp_violation, gen_dataset, grid_cells)
from dpsos.mechanisms import (Ball, PrivacyBudget, RngSeed, binary_search_margin,
                              binary_search_steps, exponential_mechanism_finite,
                              exponential_mechanism_index, laplace_mechanism, laplace_noise,
                              lazy_exponential_mechanism, private_binary_search,
                              sample_logconcave_many)
from dpsos.sdp_core import (TOL_GAP, BucketMeans, build_coarse_sdp, coarse_lipschitz,
                            coarse_sdp_value, fine_lipschitz, pe_mean_v, quad_val, sdp_val,
                            sdp_value, solve_sdp)


@contextmanager
def within(seconds):
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    print(f"runtime {elapsed:.1f}s (limit {seconds}s)")
    assert elapsed < seconds, f"took {elapsed:.1f}s, limit {seconds}s"


def in_ball(g, d, radius):
    u = g.standard_normal(d)
    return radius * g.uniform() ** (1 / d) * u / np.linalg.norm(u)


def clustered(g, k, d, spread=0.3):
    # buckets near a random centre, so one replacement can move the value
    c = g.standard_normal(d)
    return c + spread * g.standard_normal((k, d))


def replace_one(g, Z, far=False):
    Z2 = Z.copy()
    Z2[g.integers(len(Z))] = (5.0 if far else 1.0) * g.standard_normal(Z.shape[1])
    return Z2


def test_criterion_01_score_sensitivity():
    g = RngSeed(101).generator()
    bound = 1 + 2 * TOL_GAP
    worst = {"SDP": 0.0, "SDP-VAL": 0.0, "coarse": 0.0}
    with within(120):
        for t in range(50):
            k, d = int(g.integers(3, 9)), int(g.integers(1, 4))
            Z = clustered(g, k, d)
            Z2 = replace_one(g, Z, far=t % 2 == 0)
            mt, r = 0.3 * g.standard_normal(d), float(g.uniform(0.05, 1.0))
            a = sdp_value(mt, r, BucketMeans(Z))
            b = sdp_value(mt, r, BucketMeans(Z2))
            worst["SDP"] = max(worst["SDP"], abs(a - b))
            y = in_ball(g, d, 0.9)
            a = sdp_val(y, mt, r, BucketMeans(Z))
            b = sdp_val(y, mt, r, BucketMeans(Z2))
            worst["SDP-VAL"] = max(worst["SDP-VAL"], abs(a - b))
        for t in range(50):
            n, d = int(g.integers(3, 9)), int(g.integers(1, 4))
            R = 10.0
            X = 2.0 * clustered(g, n, d, spread=0.5)
            X2 = replace_one(g, X, far=t % 2 == 0)
            y = in_ball(g, d, R)
            a = coarse_sdp_value(y, R, R / 100, X)
            b = coarse_sdp_value(y, R, R / 100, X2)
            worst["coarse"] = max(worst["coarse"], abs(a - b))
    print("largest neighbour change:", worst)
    assert all(v <= bound for v in worst.values())
    assert max(worst.values()) >= 0.5  # the instances do exercise the bound


def test_criterion_02_monotonicity_and_dominance():
    g = RngSeed(102).generator()
    slack = 2 * TOL_GAP
    radii = [0.05, 0.2, 0.5, 1.0, 2.0]
    with within(120):
        for inst in range(20):
            d = 2 if inst % 2 == 0 else 3
            Z = BucketMeans(clustered(g, 6, d, spread=0.8))
            mt = 0.3 * g.standard_normal(d)
            vals = [sdp_value(mt, r, Z) for r in radii]
            assert all(b <= a + slack for a, b in zip(vals, vals[1:])), vals
            for r, v in zip(radii[:3], vals):
                y = in_ball(g, d, 0.95)
                assert sdp_val(y, mt, r, Z) >= quad_val(y, mt, r, Z) - slack
                if d <= 2:
                    assert v >= brute_force_quad(mt, r, Z) - slack


def test_criterion_03_lipschitz_and_concavity():
    g = RngSeed(103).generator()
    slack = 2 * TOL_GAP
    zeta = FineConfig.test().zeta
    with within(180):
        k, d = 8, 3
        Z = BucketMeans(clustered(g, k, d, spread=0.6))
        mt, r = 0.2 * g.standard_normal(d), 0.3
        L = fine_lipschitz(k, d, zeta)
        f = lambda y: sdp_val(y, mt, r, Z)  # noqa: E731
        for i in range(100):
            y = in_ball(g, d, 1 - zeta)
            yp = in_ball(g, d, 1 - zeta) if i % 2 else (y + 0.05 * g.standard_normal(d))
            yp *= min(1.0, (1 - zeta) / np.linalg.norm(yp))
            fy, fyp = f(y), f(yp)
            assert abs(fy - fyp) <= L * np.linalg.norm(y - yp) + slack
            assert f(0.5 * (y + yp)) >= 0.5 * (fy + fyp) - slack
        n, d, R = 6, 2, 10.0
        X = 3.0 * clustered(g, n, d, spread=0.4)
        Lc = coarse_lipschitz(n, d, R)
        h = lambda y: coarse_sdp_value(y, R, R / 100, X)  # noqa: E731
        for i in range(100):
            y = in_ball(g, d, R)
            yp = in_ball(g, d, R) if i % 2 else y + 0.5 * g.standard_normal(d)
            yp *= min(1.0, R / np.linalg.norm(yp))
            hy, hyp = h(y), h(yp)
            assert abs(hy - hyp) <= Lc * np.linalg.norm(y - yp) + slack
            assert h(0.5 * (y + yp)) >= 0.5 * (hy + hyp) - slack


def test_criterion_04_coarse_rounding():
    g = RngSeed(104).generator()
    n, d, alpha, R = 20, 3, 0.05, 100.0
    r = R / 100
    n_out = round(alpha * n)
    bound = 10 * (r + math.sqrt(alpha) * R)
    tested = 0
    with within(120):
        for _ in range(3):
            x0 = in_ball(g, d, 0.8 * R)
            inl = x0 + (R / 1000) * g.standard_normal((n - n_out, d))
            X = np.vstack([inl, [in_ball(g, d, R) for _ in range(n_out)]])
            sol = solve_sdp(build_coarse_sdp(None, R, r, X))
            assert sol.optimal
            if sol.value >= (1 - 2 * alpha) * n:
                tested += 1
                err = float(np.linalg.norm(pe_mean_v(sol) - x0))
                print(f"value {sol.value:.4f}  |pE v - x0| = {err:.4f}  bound {bound:.1f}")
                assert err < bound
    assert tested >= 1


def test_criterion_05_fine_rounding():
    g = RngSeed(105).generator()
    M, k, d, m = 5, 40, 3, 10**6
    cfg = FineConfig.test(m=m)
    r_star = 2 / math.sqrt(m)
    premise = 0
    with within(180):
        for seed in range(3):
            xi = g.standard_normal((k, d))
            xi *= (r_star / 10) * g.uniform(0, 1, (k, 1)) / np.linalg.norm(xi, axis=1, keepdims=True)
            Z = BucketMeans(xi)
            for dist in (2.0, 5.0):
                u = g.standard_normal(d)
                mt = dist * u / np.linalg.norm(u)
                delta = -mt / dist
                for factor in (0.99, 1.15):
                    r = factor * dist / 1.2
                    for j in range(60):
                        if j % 3 == 0:
                            y = (1 - cfg.zeta) * g.uniform(0.5, 1) * np.sign(g.uniform(-1, 1)) * delta
                            y = y + 0.2 * g.standard_normal(d)
                            y *= min(1.0, (1 - cfg.zeta) / np.linalg.norm(y))
                        else:
                            y = in_ball(g, d, 1 - cfg.zeta)
                        if sdp_val(y, mt, r, Z) >= 0.9 * k:
                            premise += 1
                            assert abs(y @ delta) >= 0.1, (y, delta)
    print(f"{premise} directions met the value threshold")
    assert premise > 0


def test_criterion_06_oracle_contraction():
    eta = 0.075
    identity = 1 + 1.15**2 * eta**2 - 2 * 0.99 * 0.1 * eta
    with within(60):
        assert step_contraction_bound() == pytest.approx(identity, rel=1e-15, abs=0)
        assert identity <= 0.993
        mu = np.array([1.0, -2.0, 0.5, 3.0])
        Z = BucketMeans(np.tile(mu, (10, 1)))
        T = 40
        for factor in (0.99, 1.15):
            cfg = FineConfig.test(m=100, eps=1.0, T=T)
            orc = FineOracle(mu, dist_factor=factor, inner=0.1, norm=1.0, halt_radius=0.0)
            log = []
            start = mu + np.array([7.0, 1.0, -2.0, 4.0])
            end = fine_estimation(Z, start, cfg, PrivacyBudget(1.0), RngSeed(6), oracle=orc,
                                  rounds_log=log)
            pts = [np.asarray(e["mu_tilde"]) for e in log] + [end]
            assert len(pts) == T + 1
            errs = [np.linalg.norm(p - mu) for p in pts]
            ratios = [b / a for a, b in zip(errs, errs[1:])]
            assert max(ratios) <= 0.999
            assert errs[-1] / errs[0] <= 0.999**T
            assert np.allclose(ratios, step_contraction(factor, 0.1, 1.0, eta), rtol=1e-12, atol=0)
            assert step_contraction(factor, 0.1, 1.0, eta) ** 2 <= 0.993


def test_criterion_07_mechanism_distributions():
    with within(120):
        g = RngSeed(107).generator()
        scores, eps = [0.0, 1.0, 3.0], 1.0
        N = 100_000
        picks = np.array([exponential_mechanism_index(scores, 1.0, eps, g) for _ in range(N)])
        w = np.exp(0.5 * eps * np.asarray(scores))
        chi = stats.chisquare(np.bincount(picks, minlength=3), N * w / w.sum())
        print(f"chi-square p = {chi.pvalue:.3f}")
        assert chi.pvalue > 0.01

        m, eps = 50, 2.0
        objs = [7] * 6 + [8] * 5 + [30] * 3 + [44]
        cnt = np.bincount(objs, minlength=m).astype(float)
        N = 200_000
        lazy = np.bincount([lazy_exponential_mechanism(m, objs, lambda o: [o], eps, g)
                            for _ in range(N)], minlength=m) / N
        fin = np.bincount([exponential_mechanism_finite(list(range(m)), cnt, 1.0, eps, g)
                           for _ in range(N)], minlength=m) / N
        tv = 0.5 * float(np.abs(lazy - fin).sum())
        print(f"lazy vs finite TV = {tv:.4f}")
        assert tv <= 0.01

        eps, N = 0.5, 1_000_000
        x = laplace_noise(1 / eps, g, size=N)
        p = math.exp(-3)
        tail = float(np.mean(np.abs(x) >= 3 / eps))
        sigma = math.sqrt(p * (1 - p) / N)
        print(f"Laplace tail {tail:.5f} vs {p:.5f} (sigma {sigma:.5f})")
        assert abs(tail - p) <= 3 * sigma


def test_criterion_08_private_binary_search():
    beta, k, D, a = 0.1, 1000.0, 10.0, 0.01
    S = binary_search_steps(D, a)
    gap = 0.07 * k  # f jumps from k straight past the band to 0
    eps = S * math.log(S / beta) / (gap / 2)
    assert binary_search_margin(S, eps, beta) <= gap / 2 + 1e-9
    hits = 0
    with within(60):
        g = RngSeed(108).generator()
        for run in range(100):
            r0 = float(g.uniform(1.0, 9.0))
            out = private_binary_search(lambda r: k if r < r0 else 0.0, D, 0.92, 0.93, a, eps,
                                        RngSeed(108).child(run), scale=k)
            hits += r0 - a <= out <= r0 + a
    print(f"{hits}/100 runs inside [r0 - a, r0 + a]")
    assert hits >= 90


def test_criterion_09_sampler_fidelity():
    with within(300):
        body = Ball(np.zeros(2), 1.0)
        xs = sample_logconcave_many(lambda Y: np.zeros(len(Y)), body, 1.0, 0.5,
                                    RngSeed(109).generator(), lipschitz=0.0, n_chains=10_000)
        p_rad = stats.kstest(np.sum(xs**2, axis=1), "uniform").pvalue
        p_ang = stats.kstest(np.arctan2(xs[:, 1], xs[:, 0]), stats.uniform(-math.pi, 2 * math.pi).cdf).pvalue
        print(f"uniform ball KS p: radius {p_rad:.3f}, angle {p_ang:.3f}")
        assert p_rad > 0.01 and p_ang > 0.01

        c = 3.0
        line = Ball(np.zeros(1), 1.0)
        xs = sample_logconcave_many(lambda Y: Y[:, 0], line, 2 * c, 0.5, RngSeed(110).generator(),
                                    lipschitz=1.0, n_chains=20_000)[:, 0]
        qs = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
        exact = np.log(np.exp(-c) + qs * (np.exp(c) - np.exp(-c))) / c
        dev = np.abs(np.quantile(xs, qs) - exact)
        print("1-d quantile deviations:", np.round(dev, 4))
        assert dev.max() <= 0.02

        w = np.array([2.0, -1.0])
        xs = sample_logconcave_many(lambda Y: Y @ w, body, 2.0, 0.5, RngSeed(111).generator(),
                                    lipschitz=float(np.linalg.norm(w)), n_chains=10_000)
        cells = grid_cells(body, 0.005)
        logw = cells @ w
        pw = np.exp(logw - logw.max())
        pw /= pw.sum()

        def coarse_bin(P):
            ij = np.clip(np.floor((P + 1.0) / 0.5).astype(int), 0, 3)
            return ij[:, 0] * 4 + ij[:, 1]

        oracle = np.bincount(coarse_bin(cells), weights=pw, minlength=16)
        emp = np.bincount(coarse_bin(xs), minlength=16) / len(xs)
        tv = 0.5 * float(np.abs(oracle - emp).sum())
        print(f"d = 2 TV against grid oracle = {tv:.4f}")
        assert tv <= 0.05


def test_criterion_10_empirical_dp_audit():
    trials = 100_000
    data = [0, 0, 1, 2, 2]
    neighbour = [0, 2, 1, 2, 2]
    with within(180):
        for eps in (0.5, 1.0):
            def expmech(X, g, eps=eps):
                cnt = np.bincount(X, minlength=3)
                return exponential_mechanism_index(cnt, 1.0, eps, g)

            def laplace(X, g, eps=eps):
                return laplace_mechanism(float(sum(X)) / 2, 1.0, eps, g)

            for name, mech, bins in (("expmech", expmech, "discrete"),
                                     ("laplace", laplace, np.linspace(-4 / eps, 6 + 4 / eps, 13))):
                audit = dp_audit(mech, data, neighbour, trials, bins=bins,
                                 rng=RngSeed(110).child(name, eps))
                print(f"{name} eps={eps}: log-ratio {audit['value']:.4f} slack {audit['slack']:.4f}")
                assert not dp_violation(audit, eps)


@pytest.mark.slow
def test_criterion_11_end_to_end_monte_carlo():
    n, d, R = 100_000, 4, 100.0
    eta = 0.005
    bounds = {"clean": 1.0, "corrupted": 1.0 + 10 * math.sqrt(eta)}
    need = {"clean": 90, "corrupted": 85}
    errors = {"clean": [], "corrupted": []}
    with within(3600):
        for seed in range(100):
            root = RngSeed(1100 + seed)
            mu = in_ball(root.child("mu").generator(), d, R)
            X = gen_dataset(GeneratorSpec("gaussian", n=n, d=d, mu=mu.tolist(), cov_scale=0.25,
                                          seed=1100 + seed))
            for tag in ("clean", "corrupted"):
                data = X
                if tag == "corrupted":
                    data, _ = corrupt(X, AdversarySpec(eta, "replace_far"), root.child("adv"))
                rep = private_mean_estimate(data, R, 0.5, 2.0, 0.05, rng=root.child(tag),
                                            fine=FineConfig.test())
                errors[tag].append(float(np.linalg.norm(np.asarray(rep.estimate) - mu)))
    for tag in errors:
        e = np.asarray(errors[tag])
        ok = int(np.sum(e <= bounds[tag]))
        print(f"{tag}: {ok}/100 within {bounds[tag]:.3f} (median error {np.median(e):.3f}, "
              f"max {e.max():.3f})")
    assert sum(e <= bounds["clean"] for e in errors["clean"]) >= need["clean"]
    assert sum(e <= bounds["corrupted"] for e in errors["corrupted"]) >= need["corrupted"]


def test_criterion_12_determinism(tmp_path, capsys):
    def twice(args, out_name):
        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / tag / out_name
            out.parent.mkdir(exist_ok=True)
            assert cli_main([a.replace("@OUT", str(out)) for a in args]) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]
        return blobs[0]

    with within(60):
        twice(["gen-data", "--kind", "gaussian", "--n", "3000", "--d", "3", "--seed", "12",
               "--mu", "4,-2,1", "--eta", "0.005", "--out", "@OUT"], "data.csv")
        data = tmp_path / "a" / "data.csv"
        rep = twice(["estimate", "--input", str(data), "--R", "100", "--alpha", "0.5", "--eps", "2",
                     "--seed", "12", "--out", "@OUT"], "report.json")
        assert json.loads(rep)["seed"] == 12
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({"generator": {"kind": "gaussian", "n": 2000, "d": 2,
                                                 "mu": [1.0, 2.0], "cov_scale": 0.25},
                                   "algorithm": {"eps": 2.0, "R": 50.0}, "seeds": [1, 2]}))
        for tag in ("a", "b"):
            assert cli_main(["bench", "--config", str(cfg), "--out-dir", str(tmp_path / tag / "bench")]) == 0
        for name in ("report.jsonl",):
            assert (tmp_path / "a" / "bench" / name).read_bytes() == \
                (tmp_path / "b" / "bench" / name).read_bytes()
        capsys.readouterr()
        outs = []
        for _ in range(2):
            cli_main(["verify", "--suite", "mechanisms", "--seed", "3"])
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]
