"""Acceptance gate: eight end-to-end criteria, one test (and one pass/fail
line in the -v output) per criterion."""

import csv
import math
import os
import time

import numpy as np

from mixscene import pipeline
from mixscene import tensor as T
from mixscene.alignment import a2a_loss, a2v_loss, alignment_loss_matrices, infonce
from mixscene.encoders import SplitEmbedding
from mixscene.generation import combine_halves, decode
from mixscene.metrics import ROW_ORDER

import oracles

GRAD_TOL = 1e-4
LOSS_TOL = 1e-10


def _unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def test_criterion_1_gradient_correctness():
    """Finite differences confirm every loss gradient at 5 random points."""
    t0 = time.perf_counter()
    worst = 0.0
    for point in range(5):
        rng = np.random.default_rng(1000 + point)
        b, d = 3, 4

        # InfoNCE (single anchor against candidates, normalization included)
        cand = T.Tensor(_unit_rows(rng, b, d))
        worst = max(worst, T.finite_diff_check(
            lambda x: infonce(1, T.l2_normalize(x), cand), rng.normal(size=(b, d))))

        # two-stream losses on raw matrices (audio and image targets)
        h2 = T.Tensor(rng.normal(size=(b, d)))
        g1 = T.Tensor(rng.normal(size=(b, d)))
        g2 = T.Tensor(rng.normal(size=(b, d)))
        worst = max(worst, T.finite_diff_check(
            lambda x: alignment_loss_matrices(x, h2, g1, g2), rng.normal(size=(b, d))))
        worst = max(worst, T.finite_diff_check(
            lambda x: alignment_loss_matrices(h2, x, g2, g1), rng.normal(size=(b, d))))

        # full separator forward: affine -> relu -> affine -> split -> loss,
        # probing the deepest weight matrix
        n_in, n_hid, two_d = 10, 6, 8
        x_in = T.Tensor(rng.normal(size=(b, n_in)))
        w2 = T.Tensor(rng.normal(size=(two_d, n_hid)) * 0.5)
        b1 = T.Tensor(rng.normal(size=n_hid))
        b2 = T.Tensor(rng.normal(size=two_d))
        ga = (T.Tensor(rng.normal(size=(b, two_d // 2))),
              T.Tensor(rng.normal(size=(b, two_d // 2))))

        def forward(w1):
            h = T.relu(T.add(T.matmul(x_in, T.transpose(w1)), b1))
            out = T.add(T.matmul(h, T.transpose(w2)), b2)
            half1 = T.narrow(out, 1, 0, two_d // 2)
            half2 = T.narrow(out, 1, two_d // 2, two_d)
            return alignment_loss_matrices(half1, half2, *ga)

        worst = max(worst, T.finite_diff_check(forward, rng.normal(size=(n_hid, n_in)) * 0.5))
    elapsed = time.perf_counter() - t0
    assert worst < GRAD_TOL, f"worst relative error {worst:.3e}"
    assert elapsed < 30.0, f"gradient checks took {elapsed:.1f}s"


def test_criterion_2_loss_oracle_equivalence():
    """Batched losses match a term-by-term scalar evaluation to 1e-10."""
    t0 = time.perf_counter()
    for b in range(2, 9):
        rng = np.random.default_rng(2000 + b)
        d = 6
        batch = [SplitEmbedding(T.Tensor(rng.normal(size=2 * d))) for _ in range(b)]
        h1 = [se.half1.data.tolist() for se in batch]
        h2 = [se.half2.data.tolist() for se in batch]
        for loss_fn in (a2a_loss, a2v_loss):
            gts = [(rng.normal(size=d), rng.normal(size=d)) for _ in range(b)]
            want = oracles.alignment_loss_scalar(
                h1, h2, [g[0].tolist() for g in gts], [g[1].tolist() for g in gts])
            got = loss_fn(batch, gts).item()
            assert abs(got - want) < LOSS_TOL, (loss_fn.__name__, b, got, want)
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"oracle comparison took {elapsed:.1f}s"


def test_criterion_3_analytic_infonce_value():
    """N=2 orthonormal case equals log(1 + exp(-sqrt(2))); N=1 is exactly 0."""
    rows = T.Tensor(np.eye(4)[:2])
    want = math.log(1.0 + math.exp(-math.sqrt(2.0)))
    for j in (0, 1):
        assert abs(infonce(j, rows, rows).item() - want) < LOSS_TOL
    single = T.Tensor(_unit_rows(np.random.default_rng(3), 1, 4))
    assert infonce(0, single, single).item() == 0.0


def test_criterion_4_end_to_end_separation(desk_cfg, desk_world, a2a_runs):
    """Desk-scale training separates held-out mixes at >= 0.90 on all seeds."""
    for seed, run in a2a_runs.items():
        m = run["metrics"]
        assert m["fg_r1"] >= 0.90, (seed, m)
        assert m["bg_r1"] >= 0.90, (seed, m)
        assert m["fg_crs"] >= 0.90, (seed, m)
        assert m["bg_crs"] >= 0.90, (seed, m)
    total = desk_world["setup_seconds"] + sum(r["seconds"] for r in a2a_runs.values())
    assert total < 600.0, f"desk run took {total:.0f}s"


def test_criterion_5_mixed_generation_ordering(ablation):
    """The split-embedding model beats the single-head baseline per seed."""
    ours = ablation["per_seed"][("ours", "A2A")]
    base = ablation["per_seed"][("baseline", "baseline")]
    for i in range(3):
        assert ours["mixed_crs"][i] > base["mixed_crs"][i], (i, ours, base)
        assert ours["mixed_r2star"][i] > base["mixed_r2star"][i], (i, ours, base)


def test_criterion_6_lambda_limits_and_monotonicity(desk_world, a2a_runs):
    """lam=1/0 reproduce the halves exactly; the sweep moves monotonically."""
    model = a2a_runs[0]["result"].model
    encoders = desk_world["encoders"]
    table = desk_world["table"]
    mixes = desk_world["splits"]["test"][:50]
    assert len(mixes) == 50
    grid = [k / 10.0 for k in range(11)]
    monotone = 0
    for t in mixes:
        split = pipeline.split_for(model, encoders, t.a_mix)
        assert np.array_equal(combine_halves(split, 1.0), split.half1.data)
        assert np.array_equal(combine_halves(split, 0.0), split.half2.data)
        top1 = decode(split.half1.data, table)[0][0]
        top2 = decode(split.half2.data, table)[0][0]
        assert decode(combine_halves(split, 1.0), table)[0][0] == top1
        assert decode(combine_halves(split, 0.0), table)[0][0] == top2
        # similarity to half1's class must not decrease as lam grows
        idx = table.class_ids.index(top1)
        sims = []
        for lam in grid:
            c = combine_halves(split, lam)
            sims.append(float(table.centroids[idx] @ (c / np.linalg.norm(c))))
        if all(b - a >= -1e-9 for a, b in zip(sims, sims[1:])):
            monotone += 1
    assert monotone >= 0.95 * len(mixes), f"{monotone}/{len(mixes)} monotone sweeps"


def test_criterion_7_determinism(mini_runs):
    """Repeating the pipeline reproduces every key artifact byte for byte."""
    first, second = mini_runs["roots"]

    def read(root, rel):
        with open(os.path.join(root, rel), "rb") as fh:
            return fh.read()

    assert read(first, "data/manifest.csv") == read(second, "data/manifest.csv")
    for mode in pipeline.MODES:
        for seed in (0, 1, 2):
            rel = f"runs/{mode}/seed_{seed}/best.ckpt"
            assert read(first, rel) == read(second, rel), rel
    for name in ("results.csv", "table1.csv", "table2.csv", "table3.csv"):
        assert read(first, f"results/{name}") == read(second, f"results/{name}"), name


def test_criterion_8_ablation_harness(desk_cfg, ablation, tmp_path):
    """All modes plus the baseline populate the three result tables."""
    pipeline.write_tables(ablation["report"], str(tmp_path))
    for name in ("table1.csv", "table2.csv", "table3.csv"):
        lines = (tmp_path / name).read_text().splitlines()
        assert lines[0] == f"# config_hash={desk_cfg.config_hash()}"
        rows = list(csv.DictReader(lines[1:]))
        assert [r["mode"] for r in rows] == list(ROW_ORDER), name
        for row in rows:
            assert int(row["n_seeds"]) == 3
            for col in ("crs_mean", "crs_std", "recall_mean", "recall_std"):
                value = float(row[col])
                assert math.isfinite(value) and 0.0 <= value <= 1.0
        methods = {r["mode"]: r["method"] for r in rows}
        assert methods["baseline"] == "baseline"
        assert all(methods[m] == "ours" for m in ("A2A", "A2V", "A2A_plus_A2V"))
