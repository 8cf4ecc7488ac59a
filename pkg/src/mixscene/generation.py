"""Deterministic generator stand-in: decode embeddings against per-class
prototype centroids and render the winning classes as a glyph scene.

Mixed generation combines the two halves linearly with a control parameter
(``lam * half1 + (1 - lam) * half2``); separated generation renders the
top-ranked class of each half on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import Mlp, SplitEmbedding, encode_image
from .errors import ConfigurationError, DegenerateVectorError
from .tensor import NORM_FLOOR, Tensor
from .world import (
    BACKGROUND,
    GlyphImage,
    LAYOUT_CAPACITY,
    MAX_BACKGROUNDS,
    Roster,
    render_image,
)


@dataclass
class GenerationConfig:
    lam: float = 0.5
    tau: float = 0.35  # cosine threshold for multi-class rendering
    noise_seed: int = 0  # layout jitter source

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda {self.lam} outside [0, 1]")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau {self.tau} outside (0, 1)")


class PrototypeTable:
    """Unit-norm class centroids in the frozen image-embedding space."""

    def __init__(self, class_ids, centroids: np.ndarray, roster: Roster):
        self.class_ids = list(class_ids)
        self.centroids = centroids  # len(class_ids) x d, unit rows
        self.roster = roster

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


def build_prototypes(f_image: Mlp, images_by_class: dict, roster: Roster) -> PrototypeTable:
    class_ids = sorted(images_by_class)
    short = {cid: len(imgs) for cid, imgs in images_by_class.items() if len(imgs) < 5}
    if short:
        raise ConfigurationError(f"need >= 5 images per class, got {short}")
    centroids = []
    for cid in class_ids:
        embs = np.stack([encode_image(f_image, img).data for img in images_by_class[cid]])
        mean = embs.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm <= NORM_FLOOR:
            raise DegenerateVectorError(f"class {cid}: centroid collapsed")
        centroids.append(mean / norm)
    return PrototypeTable(class_ids, np.stack(centroids), roster)


def _as_unit(e, what: str) -> np.ndarray:
    v = e.data if isinstance(e, Tensor) else np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= NORM_FLOOR:
        raise DegenerateVectorError(f"{what}: norm {norm:.3e} at/below the floor")
    return v / norm


def decode(e, table: PrototypeTable) -> list[tuple[int, float]]:
    """All classes ranked by cosine similarity, ties broken by class id."""
    v = _as_unit(e, "decode")
    sims = table.centroids @ v
    order = sorted(range(len(table.class_ids)), key=lambda i: (-sims[i], table.class_ids[i]))
    return [(table.class_ids[i], float(sims[i])) for i in order]


def combine_halves(split: SplitEmbedding, lam: float) -> np.ndarray:
    """The generator's conditioning vector; exact at the lam=0/1 limits."""
    if lam == 1.0:
        return split.half1.data
    if lam == 0.0:
        return split.half2.data
    return lam * split.half1.data + (1.0 - lam) * split.half2.data


def generate_mixed(split: SplitEmbedding, table: PrototypeTable,
                   config: GenerationConfig) -> GlyphImage:
    """Render one scene with every class whose similarity clears tau."""
    combined = combine_halves(split, config.lam)
    ranked = decode(combined, table)
    selected = [cid for cid, sim in ranked if sim > config.tau]
    if not selected:
        selected = [ranked[0][0]]
    # cap at renderer capacity, keeping the best-ranked classes
    fgs = [c for c in selected if table.roster.spec(c).role != BACKGROUND][:LAYOUT_CAPACITY]
    bgs = [c for c in selected if table.roster.spec(c).role == BACKGROUND][:MAX_BACKGROUNDS]
    chosen = (fgs + bgs)[:LAYOUT_CAPACITY]
    return render_image(chosen, table.roster, config.noise_seed)


def generate_separated(split: SplitEmbedding, table: PrototypeTable,
                       config: GenerationConfig) -> tuple[GlyphImage, GlyphImage]:
    """One single-class scene per half (top-ranked class only)."""
    top1 = decode(split.half1.data, table)[0][0]
    top2 = decode(split.half2.data, table)[0][0]
    img1 = render_image([top1], table.roster, config.noise_seed)
    img2 = render_image([top2], table.roster, config.noise_seed)
    return img1, img2


def write_truth_sidecar(path: str, image: GlyphImage, extra: dict | None = None) -> None:
    """Documented key=value audit record for a generated image."""
    lines = [f"classes={','.join(str(c) for c in sorted(image.classes()))}"]
    for cid, bbox in image.truth:
        if bbox is not None:
            lines.append(f"bbox_{cid}={bbox[0]},{bbox[1]},{bbox[2]},{bbox[3]}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
