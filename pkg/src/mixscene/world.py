"""Synthetic multimodal universe: class roster, harmonic signals, glyph
scenes, additive mixing, and training-tuple construction with stratified
splits.

Everything here is a pure function of (roster, seed): per-tuple randomness
derives from ``SeedSequence([seed, tuple_index])`` so generation order never
matters.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    ShapeMismatchError,
    StratificationError,
)
from .tensor import Tensor, load_tensor, save_tensor

FOREGROUND = "foreground"
BACKGROUND = "background"

SIGNAL_LENGTH = 256
IMAGE_SIZE = 32

# scene geometry: a 3-px frame strip top/bottom carries the backdrop
# signature; the interior holds a 2x2 grid of 13x13 cells for 11x11 glyphs
FRAME = 3
CELL = 13
GLYPH = 11
JITTER = 3  # jitter offsets 0..2 per axis
CELL_ORIGINS = [(FRAME + r * CELL, FRAME + c * CELL) for r in range(2) for c in range(2)]
LAYOUT_CAPACITY = 4
MAX_BACKGROUNDS = 2

# harmonic pattern id -> (multiplier, weight) stack; fundamental dominates
HARMONIC_PATTERNS = {
    0: ((1, 1.0),),
    1: ((1, 1.0), (2, 0.5)),
    2: ((1, 1.0), (3, 0.4)),
    3: ((1, 1.0), (2, 0.4), (4, 0.25)),
    4: ((1, 1.0), (3, 0.5), (5, 0.3)),
    5: ((1, 1.0), (2, 0.6), (3, 0.3)),
    6: ((1, 1.0), (5, 0.4)),
}

SHAPES = ("circle", "triangle", "square", "cross", "ring", "bar")


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    role: str  # foreground | background
    base_freq: int
    harmonic_pattern: int
    shape: str
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.role not in (FOREGROUND, BACKGROUND):
            raise ConfigurationError(f"class {self.name}: bad role {self.role!r}")
        if self.shape not in SHAPES:
            raise ConfigurationError(f"class {self.name}: unknown shape {self.shape!r}")
        if self.harmonic_pattern not in HARMONIC_PATTERNS:
            raise ConfigurationError(f"class {self.name}: unknown pattern {self.harmonic_pattern}")


@dataclass(frozen=True)
class Roster:
    classes: tuple[ClassSpec, ...]
    signal_length: int = SIGNAL_LENGTH
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("roster: duplicate class_id")
        looks = [(c.shape, c.color) for c in self.classes]
        if len(set(looks)) != len(looks):
            raise ConfigurationError("roster: duplicate (shape, color) pair")

    def spec(self, class_id: int) -> ClassSpec:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise ConfigurationError(f"roster: unknown class_id {class_id}")

    @property
    def foregrounds(self) -> list[ClassSpec]:
        return [c for c in self.classes if c.role == FOREGROUND]

    @property
    def backgrounds(self) -> list[ClassSpec]:
        return [c for c in self.classes if c.role == BACKGROUND]

    def all_combinations(self) -> list[tuple[int, int]]:
        return [(f.class_id, b.class_id) for f in self.foregrounds for b in self.backgrounds]


def default_roster() -> Roster:
    """Desk roster: 4 foregrounds x 3 backgrounds, 12 combinations.

    Base frequencies are chosen so no two classes share a harmonic bin,
    keeping clean signals near-orthogonal.
    """
    fg = [
        ClassSpec(0, "chirp", FOREGROUND, 5, 3, "circle", (0.85, 0.15, 0.15)),
        ClassSpec(1, "knock", FOREGROUND, 9, 6, "triangle", (0.15, 0.80, 0.20)),
        ClassSpec(2, "bell", FOREGROUND, 13, 2, "square", (0.20, 0.25, 0.85)),
        ClassSpec(3, "horn", FOREGROUND, 17, 1, "cross", (0.90, 0.85, 0.15)),
    ]
    bg = [
        ClassSpec(4, "waves", BACKGROUND, 29, 5, "ring", (0.15, 0.25, 0.60)),
        ClassSpec(5, "wind", BACKGROUND, 37, 2, "bar", (0.75, 0.60, 0.20)),
        ClassSpec(6, "rain", BACKGROUND, 43, 1, "circle", (0.30, 0.10, 0.30)),
    ]
    return Roster(tuple(fg + bg))


# ---------------------------------------------------------------------------
# signals


@dataclass(frozen=True)
class Signal:
    samples: Tensor
    provenance: frozenset[int]

    def __post_init__(self):
        if self.samples.data.ndim != 1:
            raise ShapeMismatchError("signal", self.samples.shape)
        peak = float(np.abs(self.samples.data).max()) if self.samples.data.size else 0.0
        if peak > 1.0 + 1e-12:
            raise DataError(f"signal: peak amplitude {peak} exceeds 1")

    def __len__(self) -> int:
        return self.samples.data.size


def synth_signal(spec: ClassSpec, seed: int, noise_level: float = 0.0,
                 length: int = SIGNAL_LENGTH) -> Signal:
    if noise_level >= 0.5:
        raise ConfigurationError(f"noise_level {noise_level} >= 0.5 drowns the class signature")
    if noise_level < 0.0:
        raise ConfigurationError("noise_level must be >= 0")
    n = np.arange(length)
    s = np.zeros(length)
    for mult, weight in HARMONIC_PATTERNS[spec.harmonic_pattern]:
        phase = 0.7 * spec.class_id + 1.3 * mult
        s += weight * np.sin(2.0 * np.pi * spec.base_freq * mult * n / length + phase)
    if noise_level > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), spec.class_id]))
        s = s + noise_level * rng.standard_normal(length)
    s = s / max(1.0, float(np.abs(s).max()))
    return Signal(Tensor(s), frozenset({spec.class_id}))


def scale_signal(s: Signal, gain: float) -> Signal:
    if not 0.0 < gain <= 1.0:
        raise ConfigurationError(f"gain {gain} outside (0, 1]")
    return Signal(Tensor(s.samples.data * gain), s.provenance)


def mix(a1: Signal, a2: Signal) -> Signal:
    if len(a1) != len(a2):
        raise ShapeMismatchError("mix", a1.samples.shape, a2.samples.shape)
    total = a1.samples.data + a2.samples.data
    total = total / max(1.0, float(np.abs(total).max()))
    return Signal(Tensor(total), a1.provenance | a2.provenance)


# ---------------------------------------------------------------------------
# glyph scenes


def _glyph_masks() -> dict[str, np.ndarray]:
    g = GLYPH
    yy, xx = np.mgrid[0:g, 0:g]
    c = (g - 1) / 2.0
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    masks = {
        "circle": r2 <= 20.5,
        "ring": (r2 <= 24.5) & (r2 >= 8.0),
        "square": (yy >= 1) & (yy <= g - 2) & (xx >= 1) & (xx <= g - 2),
        "cross": ((yy >= 4) & (yy <= 6)) | ((xx >= 4) & (xx <= 6)),
        "bar": (yy >= 3) & (yy <= 7),
        "triangle": np.abs(xx - c) <= (yy / 2.0) + 0.01,
    }
    return masks


GLYPH_MASKS = _glyph_masks()


@dataclass(frozen=True)
class GlyphImage:
    pixels: Tensor  # H x W x 3 in [0, 1]
    truth: tuple  # ((class_id, bbox-or-None), ...)

    def __post_init__(self):
        p = self.pixels.data
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeMismatchError("glyph image", p.shape)
        if p.min() < -1e-12 or p.max() > 1.0 + 1e-12:
            raise DataError("glyph image: pixel values outside [0, 1]")

    def classes(self) -> frozenset[int]:
        return frozenset(cid for cid, _ in self.truth)


def render_image(classes, roster: Roster, seed: int) -> GlyphImage:
    """Paint backdrop(s) plus foreground glyphs at seeded jittered cells."""
    specs = [roster.spec(c) for c in classes]
    if not 1 <= len(specs) <= LAYOUT_CAPACITY:
        raise ConfigurationError(f"render: {len(specs)} classes exceeds layout capacity {LAYOUT_CAPACITY}")
    bgs = sorted((s for s in specs if s.role == BACKGROUND), key=lambda s: s.class_id)
    fgs = sorted((s for s in specs if s.role == FOREGROUND), key=lambda s: s.class_id)
    if len(bgs) > MAX_BACKGROUNDS:
        raise ConfigurationError(f"render: {len(bgs)} backgrounds exceeds {MAX_BACKGROUNDS}")
    if len(fgs) > len(CELL_ORIGINS):
        raise ConfigurationError(f"render: {len(fgs)} foregrounds exceed {len(CELL_ORIGINS)} cells")

    size = roster.image_size
    pix = np.full((size, size, 3), 0.5)
    truth = []
    if len(bgs) == 1:
        pix[:, :, :] = bgs[0].color
        truth.append((bgs[0].class_id, (0, 0, size, size)))
    elif len(bgs) == 2:
        half = size // 2
        pix[:half] = bgs[0].color
        pix[half:] = bgs[1].color
        truth.append((bgs[0].class_id, (0, 0, half, size)))
        truth.append((bgs[1].class_id, (half, 0, size, size)))

    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    cells = rng.permutation(len(CELL_ORIGINS))[: len(fgs)]
    for spec, cell in zip(fgs, cells):
        oy, ox = CELL_ORIGINS[cell]
        jy, jx = rng.integers(0, JITTER, size=2)
        y0, x0 = oy + int(jy), ox + int(jx)
        mask = GLYPH_MASKS[spec.shape]
        region = pix[y0:y0 + GLYPH, x0:x0 + GLYPH]
        region[mask] = spec.color
        truth.append((spec.class_id, (y0, x0, y0 + GLYPH, x0 + GLYPH)))

    return GlyphImage(Tensor(np.clip(pix, 0.0, 1.0)), tuple(truth))


# ---------------------------------------------------------------------------
# tuples and datasets


@dataclass(frozen=True)
class TrainingTuple:
    v1: GlyphImage
    v2: GlyphImage
    a1: Signal
    a2: Signal
    a_mix: Signal
    fg_class: int
    bg_class: int

    def __post_init__(self):
        if self.a1.provenance != {self.fg_class} or self.a2.provenance != {self.bg_class}:
            raise DataError("tuple: single-source provenance mismatch")
        if self.a_mix.provenance != {self.fg_class, self.bg_class}:
            raise DataError("tuple: mix provenance mismatch")
        if self.v1.classes() != {self.fg_class} or self.v2.classes() != {self.bg_class}:
            raise DataError("tuple: image truth mismatch")

    @property
    def combo(self) -> tuple[int, int]:
        return (self.fg_class, self.bg_class)


def build_dataset(roster: Roster, combinations, per_combo: int, seed: int,
                  noise_level: float = 0.05, gains: tuple[float, float] = (1.0, 1.0)):
    for fg, bg in combinations:
        if roster.spec(fg).role != FOREGROUND or roster.spec(bg).role != BACKGROUND:
            raise ConfigurationError(f"combination ({fg}, {bg}) violates foreground/background roles")
    tuples = []
    for ci, (fg, bg) in enumerate(combinations):
        fg_spec, bg_spec = roster.spec(fg), roster.spec(bg)
        for k in range(per_combo):
            index = ci * per_combo + k
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), index]))
            s_a1, s_a2, s_v1, s_v2 = (int(x) for x in rng.integers(0, 2**62, size=4))
            a1 = synth_signal(fg_spec, s_a1, noise_level, roster.signal_length)
            a2 = synth_signal(bg_spec, s_a2, noise_level, roster.signal_length)
            a_mix = mix(scale_signal(a1, gains[0]), scale_signal(a2, gains[1]))
            v1 = render_image([fg], roster, s_v1)
            v2 = render_image([bg], roster, s_v2)
            tuples.append(TrainingTuple(v1, v2, a1, a2, a_mix, fg, bg))
    return tuples


def split_dataset(tuples, ratios: tuple[float, float, float], seed: int):
    """Per-combination stratified (train, val, test) partition."""
    if any(r <= 0 for r in ratios):
        raise ConfigurationError(f"split ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios sum to {sum(ratios)}, expected 1")
    by_combo: dict[tuple[int, int], list[int]] = {}
    for i, t in enumerate(tuples):
        by_combo.setdefault(t.combo, []).append(i)
    train, val, test = [], [], []
    for gi, combo in enumerate(sorted(by_combo)):
        idx = by_combo[combo]
        if len(idx) < 3:
            raise StratificationError(f"combination {combo} has {len(idx)} tuples; need >= 3")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_003 + gi]))
        order = [idx[j] for j in rng.permutation(len(idx))]
        n = len(order)
        n_tr = max(1, int(n * ratios[0]))
        n_va = max(1, int(n * ratios[1]))
        if n_tr + n_va >= n:
            n_tr = n - n_va - 1
        train += order[:n_tr]
        val += order[n_tr:n_tr + n_va]
        test += order[n_tr + n_va:]
    return ([tuples[i] for i in sorted(train)],
            [tuples[i] for i in sorted(val)],
            [tuples[i] for i in sorted(test)])


# ---------------------------------------------------------------------------
# on-disk dataset: manifest.csv + per-tuple tensors in the flat binary format

MANIFEST_COLUMNS = ["tuple_id", "fg_class", "bg_class", "split",
                    "v1_path", "v2_path", "a1_path", "a2_path", "amix_path"]


def save_dataset(splits: dict, roster: Roster, out_dir: str, config_hash: str) -> str:
    """Write ``manifest.csv`` plus tensor files; returns the manifest path."""
    tensor_dir = os.path.join(out_dir, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)
    rows = []
    tuple_id = 0
    for split_name in ("train", "val", "test"):
        for t in splits[split_name]:
            names = {}
            parts = {"v1": t.v1.pixels, "v2": t.v2.pixels, "a1": t.a1.samples,
                     "a2": t.a2.samples, "amix": t.a_mix.samples}
            for tag, tensor in parts.items():
                rel = os.path.join("tensors", f"t{tuple_id:05d}_{tag}.bin")
                save_tensor(tensor, os.path.join(out_dir, rel))
                names[tag] = rel
            rows.append([tuple_id, t.fg_class, t.bg_class, split_name,
                         names["v1"], names["v2"], names["a1"], names["a2"], names["amix"]])
            tuple_id += 1
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest


def read_config_hash(path: str) -> str:
    try:
        with open(path) as fh:
            first = fh.readline().strip()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not first.startswith("# config_hash="):
        raise FormatError(f"{path}: missing config_hash header (got {first!r})")
    return first.split("=", 1)[1]


def load_dataset(data_dir: str):
    """Rebuild (train, val, test) tuples from a dataset directory."""
    manifest = os.path.join(data_dir, "manifest.csv")
    config_hash = read_config_hash(manifest)
    splits = {"train": [], "val": [], "test": []}
    with open(manifest) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        fg, bg = int(row["fg_class"]), int(row["bg_class"])
        load = lambda key: load_tensor(os.path.join(data_dir, row[key]))
        t = TrainingTuple(
            v1=GlyphImage(load("v1_path"), ((fg, None),)),
            v2=GlyphImage(load("v2_path"), ((bg, None),)),
            a1=Signal(load("a1_path"), frozenset({fg})),
            a2=Signal(load("a2_path"), frozenset({bg})),
            a_mix=Signal(load("amix_path"), frozenset({fg, bg})),
            fg_class=fg, bg_class=bg)
        if row["split"] not in splits:
            raise DataError(f"manifest: unknown split {row['split']!r}")
        splits[row["split"]].append(t)
    return splits, config_hash


def write_ppm(image: GlyphImage, path: str) -> None:
    """Binary PPM (P6, 8-bit) export."""
    p = image.pixels.data
    h, w, _ = p.shape
    body = np.round(p * 255.0).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(body)


def write_png(image: GlyphImage, path: str) -> None:
    import matplotlib.image

    matplotlib.image.imsave(path, image.pixels.data)
