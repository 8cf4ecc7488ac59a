"""Evaluation: exact glyph detector, class-representation score, retrieval
metrics, and multi-seed aggregation into the ablation-table CSV layout.

The detector is pixel-only: it never reads an image's truth metadata, so it
serves as an honest oracle for scenes the renderer produced.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .encoders import Mlp, encode_image
from .errors import ConfigurationError, EvaluationError
from .generation import PrototypeTable
from .world import BACKGROUND, FRAME, GLYPH, GLYPH_MASKS, GlyphImage, Roster

DETECT_THRESHOLD = 0.9


@dataclass
class DetectionResult:
    scores: dict[int, float]
    threshold: float = DETECT_THRESHOLD

    @property
    def detected(self) -> frozenset[int]:
        return frozenset(c for c, s in self.scores.items() if s >= self.threshold)


def _foreground_score(pix: np.ndarray, mask: np.ndarray, color) -> float:
    """Best spatial NCC of the glyph's shape mask over all placements.

    The image is first collapsed to a per-pixel similarity to the class
    color, so the correlation is shape-selective rather than dominated by
    overall color level; an exact glyph scores 1.0.
    """
    sim = 1.0 - np.abs(pix - np.asarray(color)).mean(axis=2)  # H x W
    windows = sliding_window_view(sim, (GLYPH, GLYPH))
    patches = windows.reshape(-1, GLYPH * GLYPH)
    t = mask.astype(float).ravel()
    t = t - t.mean()
    tn = np.linalg.norm(t)
    centered = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    ok = norms > 1e-12
    scores = np.zeros(len(patches))
    scores[ok] = (centered[ok] @ t) / (norms[ok] * tn)
    return float(scores.max())


def _background_score(pix: np.ndarray, color) -> float:
    """Backdrop signature match on the top/bottom frame strips."""
    strips = [pix[:FRAME], pix[-FRAME:]]
    return max(1.0 - float(np.abs(s - np.asarray(color)).mean()) for s in strips)


def detect(image: GlyphImage, roster: Roster, threshold: float = DETECT_THRESHOLD) -> DetectionResult:
    pix = image.pixels.data
    if pix.shape != (roster.image_size, roster.image_size, 3):
        raise ConfigurationError(
            f"detect: image shape {pix.shape} does not match roster size {roster.image_size}")
    scores = {}
    for spec in roster.classes:
        if spec.role == BACKGROUND:
            scores[spec.class_id] = _background_score(pix, spec.color)
        else:
            scores[spec.class_id] = _foreground_score(pix, GLYPH_MASKS[spec.shape], spec.color)
    return DetectionResult(scores, threshold)


def crs(items, roster: Roster) -> float:
    """Fraction of (image, required class set) items fully detected."""
    items = list(items)
    if not items:
        raise EvaluationError("crs: empty evaluation set")
    hits = sum(1 for image, required in items
               if set(required) <= detect(image, roster).detected)
    return hits / len(items)


def rank_classes(image: GlyphImage, candidates, f_image: Mlp, table: PrototypeTable):
    """Candidates ordered by cosine similarity to the image embedding."""
    e = encode_image(f_image, image).data
    norm = np.linalg.norm(e)
    sims = {}
    index = {cid: i for i, cid in enumerate(table.class_ids)}
    for cid in candidates:
        if cid not in index:
            raise ConfigurationError(f"rank_classes: class {cid} has no prototype")
        c = table.centroids[index[cid]]
        sims[cid] = float(e @ c / norm) if norm > 0 else 0.0
    return sorted(candidates, key=lambda cid: (-sims[cid], cid))


def r_at_k(image: GlyphImage, candidates, k: int, required,
           f_image: Mlp, table: PrototypeTable) -> bool:
    """Star-variant hit test: required labels all ranked within the top k."""
    required = set(required)
    candidates = list(candidates)
    if k > len(candidates):
        raise ConfigurationError(f"r_at_k: K={k} exceeds {len(candidates)} candidates")
    if k < len(required):
        raise ConfigurationError(f"r_at_k: K={k} cannot cover {len(required)} required labels")
    if not required <= set(candidates):
        raise ConfigurationError("r_at_k: required labels missing from candidates")
    ranked = rank_classes(image, candidates, f_image, table)
    return required <= set(ranked[:k])


# ---------------------------------------------------------------------------
# aggregation

ROW_ORDER = ("baseline", "A2A", "A2V", "A2A_plus_A2V")


@dataclass
class MetricsReport:
    rows: list[dict]  # method, mode, metric, mean, std, n_seeds
    seeds: list[int]
    config_hash: str
    metadata: dict = field(default_factory=dict)

    def write_results_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(["method", "mode", "metric", "mean", "std", "n_seeds", "config_hash"])
            for row in self.rows:
                writer.writerow([row["method"], row["mode"], row["metric"],
                                 f"{row['mean']:.6f}", f"{row['std']:.6f}",
                                 row["n_seeds"], self.config_hash])

    def write_table_csv(self, path: str, crs_metric: str, recall_metric: str) -> None:
        """One ablation table: CRS plus a recall column per mode."""
        cells = {(r["mode"], r["metric"]): r for r in self.rows}
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(["method", "mode", "crs_mean", "crs_std",
                             "recall_metric", "recall_mean", "recall_std",
                             "n_seeds", "config_hash"])
            for mode in ROW_ORDER:
                c = cells.get((mode, crs_metric))
                r = cells.get((mode, recall_metric))
                if c is None or r is None:
                    continue
                writer.writerow([c["method"], mode, f"{c['mean']:.6f}", f"{c['std']:.6f}",
                                 recall_metric, f"{r['mean']:.6f}", f"{r['std']:.6f}",
                                 c["n_seeds"], self.config_hash])


def aggregate(per_seed, seeds, config_hash: str = "0" * 16, metadata=None) -> MetricsReport:
    """per_seed: {(method, mode): {metric: [value per seed]}} -> mean/std rows."""
    rows = []
    for method, mode in sorted(per_seed, key=lambda key: (ROW_ORDER.index(key[1])
                                                          if key[1] in ROW_ORDER else 99, key)):
        metrics = per_seed[(method, mode)]
        for metric in sorted(metrics):
            values = np.asarray(metrics[metric], dtype=float)
            if values.size < 3:
                raise EvaluationError(
                    f"{method}/{mode}/{metric}: {values.size} seeds, need >= 3")
            if np.any((values < 0) | (values > 1)):
                raise EvaluationError(f"{method}/{mode}/{metric}: rate outside [0, 1]")
            rows.append({"method": method, "mode": mode, "metric": metric,
                         "mean": float(values.mean()), "std": float(values.std()),
                         "n_seeds": int(values.size)})
    return MetricsReport(rows, list(seeds), config_hash, metadata or {})
