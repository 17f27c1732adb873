"""Acceptance criteria, one test each, run at their full sizes and tolerances.

Each test records a one-line detail; conftest prints a PASS/FAIL line per
criterion in the terminal summary.
"""
from __future__ import annotations

import csv
import itertools
import json
import time

import numpy as np
import pytest

import gradcases
from conftest import criterion
from shade_lab import cli, consistency, data, evaluation, style, train
from shade_lab.train import TrainConfig, Trainer

EPS = 1e-6


# -- 1 ---------------------------------------------------------------------------

@criterion("1", "gradient suite")
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    worst, bad, total = 0.0, {}, 0
    for name in sorted(gradcases.ALL_CASES):
        w, failures, _ = gradcases.run_suite(name, n_cases=100, base_seed=2024, tol=1e-5)
        worst = max(worst, w)
        total += 100
        if failures:
            bad[name] = failures[:2]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(gradcases.ALL_CASES)} ops x 100 cases, worst rel err "
                              f"{worst:.2e}, {elapsed:.0f}s")
    assert not bad, bad
    assert worst < 1e-5
    assert elapsed < 120


# -- 2 ---------------------------------------------------------------------------

def _random_features(rng):
    n, c = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    scale = np.exp(rng.uniform(np.log(0.05), np.log(20.0), (n, c, 1, 1)))
    return rng.standard_normal((n, c, h, w)) * scale + rng.uniform(-10, 10, (n, c, 1, 1))


@criterion("2", "style algebra")
def test_style_algebra(record_property):
    rng = np.random.default_rng(7)
    ident = trip = hull = 0.0
    for _ in range(10_000):
        x = _random_features(rng)
        n, c = x.shape[:2]
        # identity restyle
        out = style.apply_style(x, style.style_stats(x, EPS), EPS).data
        ident = max(ident, np.abs(out - x).max())
        # extract o apply round trip for sigma >= 1e-3
        mu_t = rng.uniform(-10, 10, (n, c))
        sig_t = np.exp(rng.uniform(np.log(1e-3), np.log(100.0), (n, c)))
        mu, sig = style.style_stats(style.apply_style(x, (mu_t, sig_t), EPS).data, EPS)
        trip = max(trip, np.abs(mu - mu_t).max(), np.abs(sig - sig_t).max())
        # hallucinated styles are exact convex combinations of the basis
        k = int(rng.integers(1, 8))
        basis = style.BasisStyles(rng.uniform(-5, 5, (k, c)), rng.uniform(1e-3, 5, (k, c)))
        wts = style.sample_dirichlet(k, rng, size=n)
        hm, hs = style.hallucinate(basis, wts)
        ref_m = np.einsum("nk,kc->nc", wts, basis.mu_base)
        ref_s = np.einsum("nk,kc->nc", wts, basis.sigma_base)
        over = max(np.abs(hm - ref_m).max(), np.abs(hs - ref_s).max(),
                   (hm - basis.mu_base.max(0)).max(), (basis.mu_base.min(0) - hm).max(),
                   (hs - basis.sigma_base.max(0)).max(), (basis.sigma_base.min(0) - hs).max())
        hull = max(hull, over)
    record_property("detail", f"10^4 cases: identity {ident:.1e}, round trip {trip:.1e}, "
                              f"hull excess {hull:.1e}")
    assert ident < 1e-8 and trip < 1e-6 and hull <= 1e-12


# -- 3 ---------------------------------------------------------------------------

def _greedy_ok(pts, idx, gaps):
    d = np.sqrt(((pts - pts[idx[0]]) ** 2).sum(-1))
    centroid = pts.mean(0)
    first = np.sqrt(((pts - centroid) ** 2).sum(-1))
    if not np.isclose(first[idx[0]], first.max(), rtol=0, atol=1e-12):
        return False
    for step in range(1, len(idx)):
        if not (np.isclose(d[idx[step]], d.max(), rtol=0, atol=1e-12)
                and np.isclose(gaps[step], d.max(), rtol=0, atol=1e-12)):
            return False
        d = np.minimum(d, np.sqrt(((pts - pts[idx[step]]) ** 2).sum(-1)))
    return True


@criterion("3", "FPS correctness")
def test_fps_correctness(record_property):
    rng = np.random.default_rng(11)
    greedy_bad = 0
    for _ in range(500):
        n, dim = int(rng.integers(2, 120)), int(rng.integers(1, 12))
        pts = rng.standard_normal((n, dim)) * rng.uniform(0.1, 10)
        if rng.random() < 0.2:            # duplicates and ties
            pts = np.round(pts)
        k = int(rng.integers(1, min(n, 16) + 1))
        idx, gaps = style.fps_order(pts, k)
        greedy_bad += not _greedy_ok(pts, idx, gaps)
    worst_ratio, approx_bad = 0.0, 0
    for _ in range(200):
        n = int(rng.integers(2, 11))
        k = int(rng.integers(1, min(3, n) + 1))
        pts = rng.standard_normal((n, int(rng.integers(1, 5))))
        sel = style.fps_select(pts, k)
        r = style.coverage_radius(pts, pts[sel.indices])
        opt = min(style.coverage_radius(pts, pts[list(c)])
                  for c in itertools.combinations(range(n), k))
        approx_bad += r > 2 * opt + 1e-12
        if opt > 0:
            worst_ratio = max(worst_ratio, r / opt)
    record_property("detail", f"greedy violations {greedy_bad}/500, 2-approx violations "
                              f"{approx_bad}/200 (worst ratio {worst_ratio:.3f})")
    assert greedy_bad == 0 and approx_bad == 0


# -- 4 ---------------------------------------------------------------------------

@criterion("4", "distributions")
def test_distributions(record_property):
    rng = np.random.default_rng(13)
    c, n = 16, 100_000
    w = style.sample_dirichlet(c, rng, size=n)
    on_simplex = bool(np.all(w >= 0) and np.allclose(w.sum(1), 1.0, atol=1e-12))
    z_dir = np.abs(w.mean(0) - 1 / c) / (w.std(0, ddof=1) / np.sqrt(n))
    # the MixStyle generator's lambda draws
    lam = train.StyleGenerator("mixstyle", 4, EPS).draw(n, rng)["lam"]
    z_beta = abs(lam.mean() - 0.5) / (lam.std(ddof=1) / np.sqrt(n))
    record_property("detail", f"simplex {on_simplex}, Dirichlet max |z| {z_dir.max():.2f}, "
                              f"Beta |z| {z_beta:.2f}")
    assert on_simplex and z_dir.max() <= 3 and z_beta <= 3


# -- 5 ---------------------------------------------------------------------------

@criterion("5", "JSD")
def test_jsd(record_property):
    rng = np.random.default_rng(17)
    asym, lo, hi = 0.0, np.inf, -np.inf
    for _ in range(10_000):
        k = int(rng.integers(2, 10))
        alpha = np.exp(rng.uniform(-3, 2))
        p, q = rng.dirichlet(np.full(k, alpha), size=2)
        a, b = consistency.jsd(p, q), consistency.jsd(q, p)
        asym = max(asym, abs(a - b))
        lo, hi = min(lo, a), max(hi, a)
    edge = consistency.jsd([1.0, 0.0], [0.0, 1.0])
    record_property("detail", f"asymmetry {asym:.0e}, range [{lo:.2e}, {hi:.6f}], "
                              f"|jsd(e1,e2) - ln2| {abs(edge - np.log(2)):.0e}")
    assert asym == 0.0 and lo >= 0.0 and hi <= np.log(2)
    assert abs(edge - np.log(2)) <= 1e-12


# -- 6 ---------------------------------------------------------------------------

@criterion("6", "determinism and replay")
def test_determinism_and_replay(record_property, tmp_path):
    bm = data.make_benchmark(3, n_train=96, n_val=24, n_target=24)
    checks = []
    for task, row in (("classification", "shade"), ("segmentation", "shade"),
                      ("segmentation", "shm_sc_ema")):
        cfg = TrainConfig(task=task, epochs=3, interval_k=2, pool_size=96,
                          batch_size=16).with_row(row, seed=4)
        teacher = train.pretrain_teacher(bm, cfg, epochs=1) if cfg.needs_frozen_teacher else None
        a = Trainer(bm, cfg, teacher).run()
        b = Trainer(bm, cfg, teacher).run()
        same = a.metrics_csv() == b.metrics_csv()
        cut = a.steps_per_epoch + 2               # mid-epoch, after one basis selection
        Trainer(bm, cfg, teacher).run(cut).save_checkpoint(tmp_path / "c.bin")
        r = Trainer.from_checkpoint(tmp_path / "c.bin", bm, teacher).run()
        replay = r.metrics_csv() == a.metrics_csv() and r.params.digest() == a.params.digest()
        checks.append((f"{task}/{row}", same, replay))
    record_property("detail", "; ".join(f"{n}: csv {'=' if s else '!='} resume "
                                        f"{'=' if r else '!='}" for n, s, r in checks))
    assert all(s and r for _, s, r in checks)


# -- 7 ---------------------------------------------------------------------------

# Regression values established on the default benchmark (seed 0 data, seeds
# 0-4 for training) and frozen: the required margins are about half of what
# was measured, so the check is about direction and rough size, not digits.
FROZEN = {
    "classification": {"min_gain": 0.06, "min_gap_drop": 0.05},  # measured +0.134, -0.101
    "segmentation": {"min_gain": 0.03, "min_gap_drop": 0.07},    # measured +0.059, -0.143
}
SEEDS = range(5)
PER_SEED_SLACK = 0.01      # one point


def _directional(task):
    bm = data.make_benchmark(0)
    base = TrainConfig(task=task)
    t0 = time.perf_counter()
    teacher = train.pretrain_teacher(bm, base)
    rows = []
    for seed in SEEDS:
        out = {}
        for row in ("erm", "shade"):
            m = train.train_student(bm, teacher, base.with_row(row, seed=seed)).final_metrics()
            tgt = float(np.mean([v for k, v in m.items() if k != "source_val"]))
            out[row] = (tgt, m["source_val"] - tgt)
        rows.append(out)
    return rows, time.perf_counter() - t0


@pytest.mark.parametrize("task", ["classification", "segmentation"])
def test_directional_experiment(record_property, task):
    rows, elapsed = _directional(task)
    erm_t = np.mean([r["erm"][0] for r in rows])
    sh_t = np.mean([r["shade"][0] for r in rows])
    erm_g = np.mean([r["erm"][1] for r in rows])
    sh_g = np.mean([r["shade"][1] for r in rows])
    worst = min(r["shade"][0] - r["erm"][0] for r in rows)
    frozen = FROZEN[task]
    record_property("detail", f"{task}: target ERM {erm_t:.4f} SHADE {sh_t:.4f} "
                              f"(+{sh_t - erm_t:.4f}); gap ERM {erm_g:.4f} SHADE {sh_g:.4f}; "
                              f"worst paired seed {worst:+.4f}; {elapsed / 60:.1f} min")
    assert sh_t - erm_t >= frozen["min_gain"]
    assert erm_g - sh_g >= frozen["min_gap_drop"]
    assert worst >= -PER_SEED_SLACK


test_directional_experiment.criterion = ("7", "directional experiment")


# -- 8 ---------------------------------------------------------------------------

@criterion("8", "table structure")
def test_table_structure(record_property, tmp_path):
    expected_ablation = [  # shm, sc, rc, rc teacher, task loss on stylized, generator
        ("0", "0", "0", "", "0", ""),
        ("1", "0", "0", "", "1", "shm_fps"),
        ("1", "1", "0", "", "0", "shm_fps"),
        ("1", "0", "1", "frozen", "0", "shm_fps"),
        ("1", "1", "1", "ema", "0", "shm_fps"),
        ("1", "1", "1", "frozen", "0", "shm_fps"),
    ]
    generators = ["random", "mixstyle", "crossnorm", "shm_kmeans", "shm_fps"]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_train": 48, "n_val": 16, "n_target": 16, "epochs": 1,
                               "batch_size": 16, "pool_size": 48, "task": "segmentation",
                               "teacher_epochs": 1, "teacher_samples": 48}))
    assert cli.main(["gen-data", "--config", str(cfg), "--seed", "5",
                     "--out", str(tmp_path / "data")]) == 0
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(tmp_path / "data"),
                     "--seeds", "0,1", "--out", str(tmp_path / "abl")]) == 0

    def rows(name):
        with open(tmp_path / "abl" / name, newline="") as fh:
            return list(csv.DictReader(fh))

    flag_cols = ("shm", "sc", "rc", "rc_teacher", "ce_on_stylized", "style_generator")
    abl, sty = rows("ablation.csv"), rows("style_variation.csv")
    got = [tuple(r[c] for c in flag_cols) for r in abl]
    full = [tuple(r[c] for c in flag_cols[:5]) for r in sty[1:]]
    gens = [r["style_generator"] for r in sty[1:]]
    per_seed = rows("ablation_per_seed.csv")
    value_cols = [c for c in per_seed[0] if c not in ("table", "row", "method")]
    erm = {(r["table"], r["seed"]): [r[c] for c in value_cols] for r in per_seed
           if r["row"] in ("1", "baseline")}
    erm_equal = all(erm[("ablation", s)] == erm[("style_variation", s)] for s in ("0", "1"))
    failed = [r for r in abl + sty if r["n_failed"] != "0"]
    record_property("detail", f"ablation rows {len(got)}, style rows {len(gens)} + baseline, "
                              f"ERM bit-equal across tables {erm_equal}, failed cells "
                              f"{len(failed)}")
    assert got == expected_ablation
    assert gens == generators and all(f == ("1", "1", "1", "frozen", "0") for f in full)
    assert sty[0]["shm"] == "0" and erm_equal and not failed


# -- 9 ---------------------------------------------------------------------------

@criterion("9", "style-space export")
def test_style_space_export(record_property):
    bm = data.make_benchmark(0, n_train=300, n_val=16, n_target=100)
    teacher = train.pretrain_teacher(bm, TrainConfig(), epochs=1, n_samples=200)
    doc = evaluation.export_style_space(teacher, bm, pool_size=300, n_generated=50)
    d = doc["diagnostics"]
    keys = ("min_pairwise_distance", "coverage_radius")
    emitted = all(np.isfinite(d[s][k]) for s in ("fps", "kmeans") for k in keys)
    src = {(p["x"], p["y"]) for p in doc["points"] if p["kind"] == "source"}
    fps_pts = [(p["x"], p["y"]) for p in doc["points"] if p["kind"] == "fps_basis"]
    subset = bool(fps_pts) and all(p in src for p in fps_pts) and d["fps"]["subset_of_source_pool"]
    record_property("detail", f"fps min-pair {d['fps']['min_pairwise_distance']:.3f} cover "
                              f"{d['fps']['coverage_radius']:.3f}; kmeans min-pair "
                              f"{d['kmeans']['min_pairwise_distance']:.3f} cover "
                              f"{d['kmeans']['coverage_radius']:.3f}; subset {subset}")
    assert emitted and subset
