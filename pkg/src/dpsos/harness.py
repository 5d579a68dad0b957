"""Synthetic data, adversaries, brute-force oracles, empirical DP audits and the experiment runner."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .fine import EstimationError, FineConfig, private_mean_estimate
from .mechanisms import Ball, RngSeed, as_generator
from .sdp_core import BucketMeans

GEN_KINDS = ("gaussian", "point_mass", "packing_hard", "mixture")
ADV_MODES = ("replace_far", "cluster_decoy")
MAX_ETA = 0.01
MAX_GRID_CELLS = 10_000_000


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class GeneratorSpec:
    kind: str
    n: int
    d: int
    seed: int = 0
    mu: list | None = None
    cov_scale: float = 1.0
    c: list | None = None
    alpha: float = 0.04
    kmoment: int = 2
    direction: list | None = None
    components: list = field(default_factory=list)  # mixture: [{"weight", "mu", "cov_scale"}]

    def __post_init__(self):
        if self.kind not in GEN_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if int(self.n) < 1 or int(self.d) < 1:
            raise ValueError("n and d must be positive")
        if not 0 < self.cov_scale <= 1:
            raise ValueError("cov_scale must lie in (0, 1]")
        if self.kind == "packing_hard":
            if not 0 < self.alpha < 1 or int(self.kmoment) < 2:
                raise ValueError("packing_hard needs alpha in (0, 1) and kmoment >= 2")
            if packing_atom_mass(self.alpha, self.kmoment) > 1:
                raise ValueError("packing_hard atom mass exceeds 1")
            if packing_moment(self.alpha, self.kmoment) > 1 + 1e-12:
                raise ValueError("packing_hard violates the k-th moment bound")
        if self.kind == "mixture":
            if not self.components:
                raise ValueError("mixture needs components")
            for comp in self.components:
                if not 0 < comp.get("cov_scale", 1.0) <= 1:
                    raise ValueError("component cov_scale must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)

    def _vec(self, v, default=0.0) -> np.ndarray:
        if v is None:
            return np.full(self.d, default)
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.shape != (self.d,):
            raise ValueError(f"vector of length {v.size} given for d = {self.d}")
        return v

    def _direction(self) -> np.ndarray:
        v = self._vec(self.direction) if self.direction is not None else np.eye(self.d)[0]
        return v / np.linalg.norm(v)

    def true_mean(self) -> np.ndarray:
        if self.kind == "gaussian":
            return self._vec(self.mu)
        if self.kind == "point_mass":
            return self._vec(self.c)
        if self.kind == "packing_hard":
            return packing_atom_mass(self.alpha, self.kmoment) * packing_atom_norm(
                self.alpha, self.kmoment) * self._direction()
        w = np.array([c["weight"] for c in self.components], dtype=float)
        mus = np.array([self._vec(c.get("mu")) for c in self.components])
        return (w / w.sum()) @ mus


def packing_atom_mass(alpha: float, k: int) -> float:
    return 25.0 * alpha ** (k / (k - 1))


def packing_atom_norm(alpha: float, k: int) -> float:
    return alpha ** (-1.0 / (k - 1)) / 6.0


def packing_moment(alpha: float, k: int) -> float:
    """k-th central moment along v of the two-point distribution (must be <= 1)."""
    p = packing_atom_mass(alpha, k)
    mean = 25.0 * alpha / 6.0
    return (1 - p) * mean**k + p * (packing_atom_norm(alpha, k)) ** k


def gen_dataset(spec: GeneratorSpec) -> np.ndarray:
    g = RngSeed(int(spec.seed)).child("gen").generator()
    n, d = int(spec.n), int(spec.d)
    if spec.kind == "gaussian":
        return spec._vec(spec.mu) + math.sqrt(spec.cov_scale) * g.standard_normal((n, d))
    if spec.kind == "point_mass":
        return np.tile(spec._vec(spec.c), (n, 1))
    if spec.kind == "packing_hard":
        p = packing_atom_mass(spec.alpha, spec.kmoment)
        atom = packing_atom_norm(spec.alpha, spec.kmoment) * spec._direction()
        hit = g.random(n) < p
        return np.where(hit[:, None], atom[None, :], 0.0)
    w = np.array([c["weight"] for c in spec.components], dtype=float)
    lab = g.choice(len(w), size=n, p=w / w.sum())
    mus = np.array([spec._vec(c.get("mu")) for c in spec.components])
    sc = np.sqrt([c.get("cov_scale", 1.0) for c in spec.components])
    return mus[lab] + sc[lab][:, None] * g.standard_normal((n, d))


@dataclass
class AdversarySpec:
    eta: float
    mode: str = "replace_far"
    radius: float = 1000.0
    point: list | None = None

    def __post_init__(self):
        if self.mode not in ADV_MODES:
            raise ValueError(f"unknown adversary mode {self.mode!r}")
        if not 0 <= self.eta <= MAX_ETA:
            raise ValueError(f"eta must lie in [0, {MAX_ETA}]")

    @classmethod
    def from_dict(cls, d: dict) -> "AdversarySpec":
        return cls(**d)


def corrupt(X, spec: AdversarySpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Replace floor(eta n) rows; returns the new data and the sorted replaced indices."""
    X = np.array(X, dtype=float, copy=True)
    n, d = X.shape
    c = int(math.floor(spec.eta * n))
    if c >= n and n > 0:
        raise ValueError("cannot corrupt every sample")
    g = as_generator(rng)
    idx = np.sort(g.choice(n, size=c, replace=False)) if c else np.zeros(0, dtype=int)
    if c:
        if spec.mode == "replace_far":
            u = g.standard_normal((c, d))
            X[idx] = spec.radius * u / np.linalg.norm(u, axis=1, keepdims=True)
        else:
            pt = np.zeros(d) if spec.point is None else np.asarray(spec.point, dtype=float)
            X[idx] = pt
    return X, idx


def read_dataset(path) -> np.ndarray:
    """CSV, one sample per row, no header."""
    path = Path(path)
    with path.open() as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: no samples")
    try:
        X = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from exc
    if X.ndim != 2:
        raise ValueError(f"{path}: rows have differing lengths")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite entry")
    return X


def write_dataset(path, X) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in X])
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# Oracles


def unit_directions(d: int, grid_res: float) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d != 2:
        raise ValueError("direction grids are limited to d <= 2")
    th = np.arange(0.0, 2.0 * math.pi, grid_res)
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def brute_force_quad(mu_tilde, r: float, Z, grid_res: float = 0.01) -> int:
    """Best count of buckets with <Z_i - mu_tilde, v> >= r over a grid of unit directions v."""
    Z = Z if isinstance(Z, BucketMeans) else BucketMeans(Z)
    if Z.d > 2:
        raise ValueError("brute_force_quad supports d <= 2")
    if not 0 < grid_res <= 0.01:
        raise ValueError("grid_res must lie in (0, 0.01]")
    V = unit_directions(Z.d, grid_res)
    proj = (Z.Z - np.asarray(mu_tilde, dtype=float)) @ V.T
    return int((proj >= r).sum(axis=0).max())


def grid_cells(body: Ball, grid_res: float) -> np.ndarray:
    """Centres of the grid_res-lattice cells whose centres lie in the body."""
    d = body.dim
    if d > 2:
        raise ValueError("grid sampler supports d <= 2")
    if not grid_res > 0:
        raise ValueError("grid_res must be positive")
    per_axis = math.ceil(2 * body.radius / grid_res)
    if per_axis**d > MAX_GRID_CELLS:
        raise ValueError(f"grid has {per_axis ** d} cells (limit {MAX_GRID_CELLS})")
    ax = (np.arange(per_axis) + 0.5) * grid_res - per_axis * grid_res / 2.0
    pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d) + body.center
    return pts[body.contains(pts)]


def grid_exponential_sampler(score: Callable, body: Ball, eps: float, grid_res: float, rng,
                             size: int | None = None, vectorized: bool = False):
    """Exact categorical draw over cell centres with weight exp((eps / 2) score(centre))."""
    pts = grid_cells(body, grid_res)
    s = np.asarray(score(pts) if vectorized else [score(p) for p in pts], dtype=float)
    logw = 0.5 * eps * s
    p = np.exp(logw - logw.max())
    p /= p.sum()
    g = as_generator(rng)
    idx = g.choice(len(pts), size=size, p=p)
    return pts[idx]


# ---------------------------------------------------------------------------
# Empirical DP audit


def _binned(outputs, bins) -> tuple[np.ndarray, list]:
    out = np.asarray(outputs)
    if bins is None or (isinstance(bins, str) and bins == "discrete"):
        keys = sorted(set(out.tolist()))
        return np.array([keys.index(v) for v in out.tolist()]), keys
    edges = np.asarray(bins, dtype=float)
    # outer bins absorb the tails
    return np.clip(np.searchsorted(edges, out.astype(float), side="right") - 1, 0, len(edges) - 2), list(edges)


def dp_audit(mechanism: Callable, X, X_neighbor, trials: int, bins=None, rng=None) -> dict:
    """Estimate max_bin |log(p / p')| between outputs on neighbouring inputs.

    ``mechanism(data, generator)`` returns one output.  ``bins`` is "discrete"
    (exact output values) or a sequence of edges.  Counts get add-one
    smoothing; ``slack`` is the standard error of the log ratio at the worst bin.
    """
    if int(trials) < 1:
        raise ValueError("need at least one trial")
    seed = rng if isinstance(rng, RngSeed) else RngSeed(int(as_generator(rng).integers(0, 2**63)))
    ga, gb = seed.child("a").generator(), seed.child("b").generator()
    a = [mechanism(X, ga) for _ in range(int(trials))]
    b = [mechanism(X_neighbor, gb) for _ in range(int(trials))]
    if bins is None or isinstance(bins, str):
        keys = sorted(set(np.asarray(a).tolist()) | set(np.asarray(b).tolist()))
        pos = {k: i for i, k in enumerate(keys)}
        ia = np.array([pos[v] for v in np.asarray(a).tolist()])
        ib = np.array([pos[v] for v in np.asarray(b).tolist()])
        nb = len(keys)
    else:
        ia, _ = _binned(a, bins)
        ib, _ = _binned(b, bins)
        nb = len(bins) - 1
    ca = np.bincount(ia, minlength=nb) + 1.0
    cb = np.bincount(ib, minlength=nb) + 1.0
    lr = np.abs(np.log((ca / ca.sum()) / (cb / cb.sum())))
    j = int(np.argmax(lr))
    slack = math.sqrt(1.0 / ca[j] + 1.0 / cb[j])
    return {"value": float(lr[j]), "slack": slack, "bin": j, "counts": [ca.tolist(), cb.tolist()]}


def empirical_dp_check(mechanism: Callable, X, X_neighbor, trials: int, bins=None, rng=None) -> float:
    return dp_audit(mechanism, X, X_neighbor, trials, bins, rng)["value"]


def dp_violation(audit: dict, eps: float) -> bool:
    return audit["value"] > eps + 3.0 * audit["slack"]


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class ExperimentConfig:
    generator: dict
    algorithm: dict = field(default_factory=dict)
    adversary: dict | None = None
    seeds: list = field(default_factory=lambda: [0])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"generator", "algorithm", "adversary", "seeds"}
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        return cls(**d)


ALGO_DEFAULTS = {"eps": 1.0, "alpha": 0.5, "beta": 0.05, "R": 100.0, "strategy": "auto",
                 "profile": "test", "coarse": True, "fine": True, "noiseless": False,
                 "force": False, "accuracy_bound": None}


def _fine_profile(name: str) -> FineConfig:
    if name == "full":
        return FineConfig.full()
    if name == "test":
        return FineConfig.test()
    raise ValueError(f"unknown profile {name!r}")


def run_one(cfg: ExperimentConfig, seed: int) -> tuple[dict, float]:
    algo = {**ALGO_DEFAULTS, **cfg.algorithm}
    unknown = set(algo) - set(ALGO_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown algorithm keys {sorted(unknown)}")
    root = RngSeed(int(seed))
    gen = dict(cfg.generator)
    gen.setdefault("seed", int(root.child("data").generator().integers(0, 2**63)))
    spec = GeneratorSpec.from_dict(gen)
    X = gen_dataset(spec)
    corrupted = 0
    if cfg.adversary:
        X, idx = corrupt(X, AdversarySpec.from_dict(cfg.adversary), root.child("adversary"))
        corrupted = len(idx)
    mu = spec.true_mean()
    t0 = time.perf_counter()
    rec: dict = {"seed": int(seed), "generator": asdict(spec), "adversary": cfg.adversary,
                 "corrupted": corrupted, "true_mean": mu.tolist()}
    try:
        rep = private_mean_estimate(X, algo["R"], algo["alpha"], algo["eps"], algo["beta"],
                                    rng=root.child("estimate"), fine=_fine_profile(algo["profile"]),
                                    strategy=algo["strategy"], noiseless=algo["noiseless"],
                                    skip_fine=not algo["fine"], force=algo["force"])
        rec["report"] = json.loads(rep.to_json())
        rec["error"] = float(np.linalg.norm(np.asarray(rep.estimate) - mu))
        rec["halt_round"] = rep.phases[-1].get("halt_round")
    except EstimationError as exc:
        rec["failure"] = str(exc)
    return rec, time.perf_counter() - t0


def _quantile(xs, q):
    return float(np.quantile(xs, q)) if xs else float("nan")


def run_experiment(configs, out_dir=None) -> list:
    """Run every (config, seed) pair; optionally write report.jsonl and summary.csv to out_dir."""
    if isinstance(configs, (ExperimentConfig, dict)):
        configs = [configs]
    configs = [c if isinstance(c, ExperimentConfig) else ExperimentConfig.from_dict(c) for c in configs]
    reports: list = []
    summary: list = []
    for ci, cfg in enumerate(configs):
        errs, halts, walls, fails = [], [], [], 0
        bound = cfg.algorithm.get("accuracy_bound")
        profile = cfg.algorithm.get("profile", "test")
        for s in cfg.seeds:
            rec, wall = run_one(cfg, s)
            rec["config_index"] = ci
            reports.append(rec)
            walls.append(wall)
            if "error" in rec:
                errs.append(rec["error"])
                if rec["halt_round"] is not None:
                    halts.append(rec["halt_round"])
            else:
                fails += 1
        row = {"config_index": ci, "runs": len(cfg.seeds), "failures": fails,
               "error_q50": _quantile(errs, 0.5), "error_q90": _quantile(errs, 0.9),
               "error_max": max(errs) if errs else float("nan"),
               "halt_round_median": _quantile(halts, 0.5),
               "epsilon": cfg.algorithm.get("eps", ALGO_DEFAULTS["eps"]),
               "wall_seconds": round(sum(walls), 3)}
        # accuracy claims only under the reduced-constant profile
        if bound is not None and profile == "test":
            row["within_bound"] = sum(e <= bound for e in errs)
        summary.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in reports)
            (out / "report.jsonl").write_text(lines)
            keys = list(dict.fromkeys(k for r in summary for k in r))
            with (out / "summary.csv").open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
                w.writeheader()
                w.writerows(summary)
        except OSError as exc:
            raise OSError(f"{exc.filename or out}: {exc.strerror or exc}") from exc
    return reports
