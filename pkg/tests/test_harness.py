import json
import math

import numpy as np
import pytest

from dpsos.harness import (AdversarySpec, ExperimentConfig, GeneratorSpec, brute_force_quad,
                           corrupt, dp_audit, dp_violation, empirical_dp_check, gen_dataset,
                           grid_cells, grid_exponential_sampler, packing_moment, read_dataset,
                           run_experiment, write_dataset)
from dpsos.mechanisms import Ball, RngSeed, exponential_mechanism_finite, laplace_mechanism
from dpsos.sdp_core import BucketMeans, sdp_value


def test_point_mass_rows():
    X = gen_dataset(GeneratorSpec("point_mass", n=10, d=3, c=[1.0, 2.0, 3.0]))
    assert np.all(X == [1.0, 2.0, 3.0])


def test_packing_hard_masses_and_atom():
    spec = GeneratorSpec("packing_hard", n=200_000, d=3, alpha=0.04, kmoment=2, seed=1)
    X = gen_dataset(spec)
    atom = X[X[:, 0] > 0]
    assert np.allclose(atom[0], [1 / 6 / 0.04, 0, 0])
    assert abs(len(atom) / len(X) - 0.04) < 0.002
    assert np.allclose(spec.true_mean(), [25 / 6 * 0.04, 0, 0])
    assert packing_moment(0.04, 2) <= 1


@pytest.mark.parametrize("alpha,k", [(0.01, 2), (0.001, 3), (0.005, 4)])
def test_packing_moment_bound(alpha, k):
    assert packing_moment(alpha, k) <= 1


def test_gaussian_covariance_spectrum():
    X = gen_dataset(GeneratorSpec("gaussian", n=10_000, d=4, mu=[1, 2, 3, 4], cov_scale=1.0, seed=2))
    top = np.linalg.eigvalsh(np.cov(X.T)).max()
    assert top <= 1 + 5 / math.sqrt(10_000)


def test_generator_invariants():
    with pytest.raises(ValueError):
        GeneratorSpec("gaussian", n=5, d=2, cov_scale=1.5)
    with pytest.raises(ValueError):
        GeneratorSpec("uniform", n=5, d=2)


def test_mixture_mean():
    spec = GeneratorSpec("mixture", n=50_000, d=2, seed=3, components=[
        {"weight": 1, "mu": [0, 0], "cov_scale": 0.1}, {"weight": 3, "mu": [4, 0], "cov_scale": 0.1}])
    assert np.allclose(gen_dataset(spec).mean(axis=0), spec.true_mean(), atol=0.05)


def test_corrupt_exact_rows():
    X = np.zeros((1000, 2))
    Y, idx = corrupt(X, AdversarySpec(0.007, "replace_far", radius=50.0), RngSeed(0))
    assert len(idx) == 7
    changed = np.flatnonzero(np.any(Y != X, axis=1))
    assert np.array_equal(changed, idx)
    assert np.allclose(np.linalg.norm(Y[idx], axis=1), 50.0)
    Y2, idx2 = corrupt(X, AdversarySpec(0.0), RngSeed(0))
    assert len(idx2) == 0 and np.array_equal(Y2, X)
    Y3, idx3 = corrupt(X, AdversarySpec(0.01, "cluster_decoy", point=[9, 9]), RngSeed(1))
    assert np.all(Y3[idx3] == 9) and len(idx3) == 10


def test_adversary_invariant():
    with pytest.raises(ValueError):
        AdversarySpec(1.0)


def test_csv_roundtrip(tmp_path):
    X = np.random.default_rng(0).standard_normal((5, 3))
    p = tmp_path / "x.csv"
    write_dataset(p, X)
    assert "," in p.read_text().splitlines()[0]
    assert np.array_equal(read_dataset(p), X)
    p.write_text("1,2\n3,x\n")
    with pytest.raises(ValueError):
        read_dataset(p)


def test_brute_force_quad_examples():
    Z = np.tile([2.0, 0.0], (6, 1))
    assert brute_force_quad(np.zeros(2), 1.0, Z) == 6
    assert brute_force_quad(np.zeros(2), 5.0, Z) == 0
    with pytest.raises(ValueError):
        brute_force_quad(np.zeros(3), 1.0, np.zeros((2, 3)))


def test_brute_force_dominated_by_relaxation():
    g = np.random.default_rng(4)
    for _ in range(20):
        Z = BucketMeans(g.standard_normal((6, 2)))
        r = float(g.uniform(0.1, 1.5))
        assert brute_force_quad(np.zeros(2), r, Z) <= sdp_value(np.zeros(2), r, Z) + 2e-6


def test_grid_sampler_uniform_and_limits():
    body = Ball(np.zeros(2), 1.0)
    pts = grid_exponential_sampler(lambda p: 0.0, body, 1.0, 0.25, RngSeed(0).generator(),
                                   size=40_000)
    cells = grid_cells(body, 0.25)
    _, counts = np.unique(pts, axis=0, return_counts=True)
    assert len(counts) == len(cells)
    assert np.allclose(counts / counts.sum(), 1 / len(cells), atol=0.01)
    with pytest.raises(ValueError):
        grid_cells(Ball(np.zeros(2), 1000.0), 1e-3)


def test_grid_sampler_linear_score_matches_truncated_exponential():
    body = Ball(np.zeros(1), 1.0)
    xs = grid_exponential_sampler(lambda P: 4.0 * P[:, 0], body, 1.0, 0.001,
                                  RngSeed(1).generator(), size=50_000, vectorized=True)
    c = 2.0  # density exp(c x) on [-1, 1]
    mean = 1 / math.tanh(c) - 1 / c
    assert abs(xs.mean() - mean) < 0.01


def test_grid_sampler_matches_finite_mechanism():
    body = Ball(np.zeros(1), 1.0)
    cells = grid_cells(body, 0.5)
    score = lambda p: float(p[0])  # noqa: E731
    a = grid_exponential_sampler(score, body, 2.0, 0.5, RngSeed(2).generator(), size=20_000)[:, 0]
    g = RngSeed(3).generator()
    b = [exponential_mechanism_finite(list(cells[:, 0]), lambda x: x, 1.0, 2.0, g) for _ in range(20_000)]
    for c in cells[:, 0]:
        assert abs(np.mean(a == c) - np.mean(np.asarray(b) == c)) < 0.015


def test_dp_check_identical_inputs_near_zero():
    mech = lambda X, g: laplace_mechanism(sum(X), 1.0, 1.0, g)  # noqa: E731
    audit = dp_audit(mech, [0.0], [0.0], 20_000, bins=np.linspace(-4, 4, 9), rng=RngSeed(0))
    assert audit["value"] <= 3 * audit["slack"] + 0.05
    assert not dp_violation(audit, 0.0)


def test_dp_check_flags_broken_mechanism():
    # Laplace calibrated to sensitivity 1 on a query with sensitivity 3
    mech = lambda X, g: laplace_mechanism(3 * sum(X), 1.0, 1.0, g)  # noqa: E731
    audit = dp_audit(mech, [0.0], [1.0], 20_000, bins=np.linspace(-3, 6, 10), rng=RngSeed(1))
    assert dp_violation(audit, 1.0)
    with pytest.raises(ValueError):
        empirical_dp_check(mech, [0.0], [1.0], 0)


def _grid(tmp_path, seeds):
    cfg = {"generator": {"kind": "point_mass", "n": 300, "d": 2, "c": [1.0, 1.0]},
           "algorithm": {"eps": 1.0, "R": 50.0, "fine": False}, "seeds": seeds}
    return [cfg, {**cfg, "algorithm": {"eps": 2.0, "R": 50.0, "fine": False}}]


def test_run_experiment_shapes_and_determinism(tmp_path):
    assert run_experiment([], tmp_path / "empty") == []
    reps = run_experiment(_grid(tmp_path, [1, 2]), tmp_path / "a")
    assert len(reps) == 4
    run_experiment(_grid(tmp_path, [1, 2]), tmp_path / "b")
    a = (tmp_path / "a" / "report.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "report.jsonl").read_bytes()
    lines = [json.loads(x) for x in a.decode().splitlines()]
    assert {x["config_index"] for x in lines} == {0, 1}
    summary = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("config_index,runs")
    assert len(summary) == 3


def test_run_experiment_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"generator": {}, "bogus": 1})


def test_run_experiment_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        run_experiment(_grid(tmp_path, [1]), blocker / "sub")


def test_spherical_cap_mass():
    # fraction of the unit sphere in d = 3 within distance 0.5 of a pole
    g = np.random.default_rng(5)
    u = g.standard_normal((200_000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    mass = np.mean(np.linalg.norm(u - [1, 0, 0], axis=1) <= 0.5)
    assert mass >= 0.5 * (0.5 / 2) ** 2
