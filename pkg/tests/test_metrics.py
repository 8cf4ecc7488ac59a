"""Exact detector, scene-level scores, ranking recall, and aggregation."""

import csv

import numpy as np
import pytest

from mixscene.encoders import Mlp, encode_image
from mixscene.errors import ConfigurationError, EvaluationError
from mixscene.generation import build_prototypes
from mixscene.metrics import (
    DetectionResult,
    ROW_ORDER,
    aggregate,
    crs,
    detect,
    r_at_k,
    rank_classes,
)
from mixscene.world import default_roster, render_image

RNG = np.random.default_rng(4242)


@pytest.fixture(scope="module")
def roster():
    return default_roster()


@pytest.fixture(scope="module")
def image_encoder(roster):
    return Mlp([roster.image_size**2 * 3, 32, 12], seed=6)


@pytest.fixture(scope="module")
def table(roster, image_encoder):
    images = {spec.class_id: [render_image([spec.class_id], roster, s) for s in range(8)]
              for spec in roster.classes}
    return build_prototypes(image_encoder, images, roster)


def test_detect_exact_on_clean_renders(roster):
    # every (fg, bg) render must be detected exactly: no misses, no extras
    for fg, bg in roster.all_combinations():
        for seed in (0, 1):
            img = render_image([fg, bg], roster, seed)
            assert detect(img, roster).detected == {fg, bg}, (fg, bg, seed)


def test_detect_single_class_scenes(roster):
    for spec in roster.classes:
        img = render_image([spec.class_id], roster, 5)
        assert detect(img, roster).detected == {spec.class_id}


def test_detect_shape_contract(roster):
    img = render_image([0], roster, 0)
    small = default_roster()
    object.__setattr__(small, "image_size", 16)
    with pytest.raises(ConfigurationError):
        detect(img, small)


def test_detection_result_threshold():
    r = DetectionResult({0: 0.95, 1: 0.9, 2: 0.89}, threshold=0.9)
    assert r.detected == {0, 1}


def test_crs_counts_full_matches(roster):
    good = render_image([0, 4], roster, 1)
    items = [(good, {0, 4}), (good, {0}), (good, {1, 4})]
    # first two fully detected, third requires a class that is not present
    assert crs(items, roster) == pytest.approx(2.0 / 3.0)
    with pytest.raises(EvaluationError):
        crs([], roster)


def test_rank_classes_brute_force(roster, image_encoder, table):
    img = render_image([2], roster, 3)
    candidates = [c.class_id for c in roster.classes]
    ranked = rank_classes(img, candidates, image_encoder, table)
    e = encode_image(image_encoder, img).data
    e = e / np.linalg.norm(e)
    index = {cid: i for i, cid in enumerate(table.class_ids)}
    sims = {cid: float(table.centroids[index[cid]] @ e) for cid in candidates}
    assert ranked == sorted(candidates, key=lambda c: (-sims[c], c))


def test_r_at_k_contracts(roster, image_encoder, table):
    img = render_image([2], roster, 3)
    candidates = [c.class_id for c in roster.classes]
    assert isinstance(r_at_k(img, candidates, 1, {2}, image_encoder, table), bool)
    with pytest.raises(ConfigurationError):
        r_at_k(img, candidates, 8, {2}, image_encoder, table)  # k > pool
    with pytest.raises(ConfigurationError):
        r_at_k(img, candidates, 1, {2, 4}, image_encoder, table)  # k < |required|
    with pytest.raises(ConfigurationError):
        r_at_k(img, candidates[:3], 2, {5}, image_encoder, table)  # missing label


def test_r_at_k_on_trained_prototypes(roster, image_encoder, table):
    # prototypes built from the same renderer should rank their class first
    candidates = [c.class_id for c in roster.classes]
    hits = sum(r_at_k(render_image([cid], roster, 77), candidates, 1, {cid},
                      image_encoder, table) for cid in candidates)
    assert hits >= 5  # untrained encoder, but prototypes still separate most


def _per_seed(values):
    return {("ours", "A2A"): {"fg_r1": values}}


def test_aggregate_mean_std_population():
    report = aggregate(_per_seed([0.5, 0.7, 0.9]), [0, 1, 2], "f" * 16)
    (row,) = report.rows
    assert row["mean"] == pytest.approx(0.7)
    assert row["std"] == pytest.approx(np.std([0.5, 0.7, 0.9]))  # population std
    assert row["n_seeds"] == 3


def test_aggregate_contracts():
    with pytest.raises(EvaluationError):
        aggregate(_per_seed([0.5, 0.7]), [0, 1], "f" * 16)  # < 3 seeds
    with pytest.raises(EvaluationError):
        aggregate(_per_seed([0.5, 0.7, 1.2]), [0, 1, 2], "f" * 16)  # rate > 1


def test_report_csv_layout(tmp_path):
    per_seed = {
        ("baseline", "baseline"): {"mixed_crs": [0.1, 0.2, 0.3], "mixed_r2star": [0.0, 0.1, 0.2]},
        ("ours", "A2A"): {"mixed_crs": [0.7, 0.8, 0.9], "mixed_r2star": [0.5, 0.6, 0.7]},
        ("ours", "A2V"): {"mixed_crs": [0.4, 0.5, 0.6], "mixed_r2star": [0.3, 0.4, 0.5]},
        ("ours", "A2A_plus_A2V"): {"mixed_crs": [0.4, 0.5, 0.6], "mixed_r2star": [0.3, 0.4, 0.5]},
    }
    report = aggregate(per_seed, [0, 1, 2], "c" * 16)
    results = tmp_path / "results.csv"
    table1 = tmp_path / "table1.csv"
    report.write_results_csv(str(results))
    report.write_table_csv(str(table1), "mixed_crs", "mixed_r2star")
    text = results.read_text().splitlines()
    assert text[0] == "# config_hash=" + "c" * 16
    rows = list(csv.DictReader(text[1:]))
    assert all(r["config_hash"] == "c" * 16 for r in rows)
    assert len(rows) == 8  # 4 method rows x 2 metrics
    t1 = list(csv.DictReader(table1.read_text().splitlines()[1:]))
    assert [r["mode"] for r in t1] == list(ROW_ORDER)
    a2a = next(r for r in t1 if r["mode"] == "A2A")
    assert float(a2a["crs_mean"]) == pytest.approx(0.8)
    assert a2a["recall_metric"] == "mixed_r2star"
