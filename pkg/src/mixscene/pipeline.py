"""End-to-end orchestration shared by the CLI and the test suite.

Every stage is a pure function of the run configuration, so artifacts can be
rebuilt from scratch (or loaded from disk) interchangeably.
"""

from __future__ import annotations

import os

import numpy as np

from .alignment import AlignmentConfig
from .config import RunConfig
from .encoders import (
    Mlp,
    PretrainConfig,
    ReferenceEncoders,
    SplitEmbedding,
    pretrain_reference_encoders,
    separate,
)
from .errors import ConfigurationError
from .generation import (
    GenerationConfig,
    PrototypeTable,
    build_prototypes,
    generate_mixed,
    generate_separated,
)
from .metrics import MetricsReport, aggregate, crs, r_at_k
from .tensor import Tensor
from .trainer import (
    BASELINE_HIDDEN,
    SEPARATOR_HIDDEN,
    TrainConfig,
    TrainResult,
    train,
    train_baseline,
)
from .world import (
    Roster,
    build_dataset,
    default_roster,
    render_image,
    split_dataset,
    synth_signal,
)

MODES = ("baseline", "A2A", "A2V", "A2A_plus_A2V")


def build_roster(cfg: RunConfig) -> Roster:
    return default_roster()


def make_data(cfg: RunConfig, roster: Roster | None = None) -> dict:
    roster = roster or build_roster(cfg)
    tuples = build_dataset(roster, roster.all_combinations(), cfg.per_combo,
                           cfg.dataset_seed, cfg.noise_level, (cfg.gain_fg, cfg.gain_bg))
    train_t, val_t, test_t = split_dataset(tuples, cfg.ratios(), cfg.dataset_seed)
    return {"train": train_t, "val": val_t, "test": test_t}


def make_single_class_pairs(cfg: RunConfig, roster: Roster):
    """(signal, image, class_id) pairs for pretraining and prototypes."""
    pairs = []
    for spec in roster.classes:
        for i in range(cfg.pretrain_pairs_per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.pretrain_seed, spec.class_id, i]))
            s_sig, s_img = (int(x) for x in rng.integers(0, 2**62, size=2))
            signal = synth_signal(spec, s_sig, cfg.noise_level, roster.signal_length)
            image = render_image([spec.class_id], roster, s_img)
            pairs.append((signal, image, spec.class_id))
    return pairs


def pretrain(cfg: RunConfig, roster: Roster | None = None,
             pairs=None) -> ReferenceEncoders:
    roster = roster or build_roster(cfg)
    pairs = pairs if pairs is not None else make_single_class_pairs(cfg, roster)
    pconfig = PretrainConfig(d=cfg.embed_dim, epochs=cfg.pretrain_epochs,
                             batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                             seed=cfg.pretrain_seed)
    return pretrain_reference_encoders(pairs, pconfig)


def make_prototypes(cfg: RunConfig, encoders: ReferenceEncoders,
                    roster: Roster | None = None, pairs=None) -> PrototypeTable:
    roster = roster or build_roster(cfg)
    pairs = pairs if pairs is not None else make_single_class_pairs(cfg, roster)
    by_class: dict[int, list] = {}
    for _, image, cid in pairs:
        by_class.setdefault(cid, []).append(image)
    return build_prototypes(encoders.image, by_class, roster)


def train_config_for(cfg: RunConfig, mode: str, seed: int) -> TrainConfig:
    alignment = AlignmentConfig(mode if mode != "baseline" else "A2A",
                                cfg.alignment_weight, cfg.cross_half_negatives)
    return TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs,
                       learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                       seed=seed, alignment=alignment)


def new_separator(cfg: RunConfig, roster: Roster, seed: int) -> Mlp:
    return Mlp([roster.signal_length, *SEPARATOR_HIDDEN, 2 * cfg.embed_dim], seed=seed)


def new_baseline(cfg: RunConfig, roster: Roster, seed: int) -> Mlp:
    return Mlp([roster.signal_length, *BASELINE_HIDDEN, cfg.embed_dim], seed=seed)


def train_run(cfg: RunConfig, mode: str, seed: int, splits: dict,
              encoders: ReferenceEncoders, roster: Roster | None = None,
              out_dir: str | None = None) -> TrainResult:
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    roster = roster or build_roster(cfg)
    tconfig = train_config_for(cfg, mode, seed)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if mode == "baseline":
        model = new_baseline(cfg, roster, seed)
        return train_baseline(model, encoders, splits["train"], splits["val"],
                              tconfig, out_dir, cfg.config_hash())
    model = new_separator(cfg, roster, seed)
    return train(model, encoders, splits["train"], splits["val"],
                 tconfig, out_dir, cfg.config_hash())


def split_for(model: Mlp, encoders: ReferenceEncoders, a_mix) -> SplitEmbedding:
    """Separator output, or a duplicated-halves wrapper for the baseline."""
    if model.out_width == 2 * encoders.d:
        return separate(model, a_mix)
    emb = model.forward_np(a_mix.samples.data)
    return SplitEmbedding(Tensor(np.concatenate([emb, emb])))


def evaluate_model(cfg: RunConfig, model: Mlp, encoders: ReferenceEncoders,
                   table: PrototypeTable, test_tuples, roster: Roster | None = None) -> dict:
    """Task-1 (mixed) and task-2 (separated) metrics on held-out tuples."""
    roster = roster or build_roster(cfg)
    candidates = [c.class_id for c in roster.classes]
    # the single-head baseline has no halves to combine: it renders one
    # image of its top-decoded class (single image generation from a mix)
    is_baseline = model.out_width == encoders.d
    mixed_items, fg_items, bg_items = [], [], []
    mixed_hits = fg_hits = bg_hits = 0
    for idx, t in enumerate(test_tuples):
        split = split_for(model, encoders, t.a_mix)
        gen_cfg = GenerationConfig(cfg.lam, cfg.tau, cfg.noise_seed + idx)
        img_fg, img_bg = generate_separated(split, table, gen_cfg)
        mixed = img_fg if is_baseline else generate_mixed(split, table, gen_cfg)
        mixed_items.append((mixed, {t.fg_class, t.bg_class}))
        fg_items.append((img_fg, {t.fg_class}))
        bg_items.append((img_bg, {t.bg_class}))
        mixed_hits += r_at_k(mixed, candidates, 2, {t.fg_class, t.bg_class},
                             encoders.image, table)
        fg_hits += r_at_k(img_fg, candidates, 1, {t.fg_class}, encoders.image, table)
        bg_hits += r_at_k(img_bg, candidates, 1, {t.bg_class}, encoders.image, table)
    n = len(test_tuples)
    return {
        "mixed_crs": crs(mixed_items, roster),
        "mixed_r2star": mixed_hits / n,
        "fg_crs": crs(fg_items, roster),
        "fg_r1": fg_hits / n,
        "bg_crs": crs(bg_items, roster),
        "bg_r1": bg_hits / n,
    }


def run_ablation(cfg: RunConfig, splits: dict, encoders: ReferenceEncoders,
                 table: PrototypeTable, roster: Roster | None = None,
                 modes=MODES, runs_dir: str | None = None) -> MetricsReport:
    """Train (or reuse) every (mode, seed) run and aggregate the metrics."""
    from .trainer import load_checkpoint

    roster = roster or build_roster(cfg)
    seeds = cfg.seed_list()
    per_seed: dict = {}
    for mode in modes:
        method = "baseline" if mode == "baseline" else "ours"
        for seed in seeds:
            if runs_dir is not None:
                ckpt = os.path.join(runs_dir, mode, f"seed_{seed}", "best.ckpt")
                if not os.path.exists(ckpt):
                    raise ConfigurationError(f"missing trained run: {ckpt}")
                model = load_checkpoint(ckpt)
            else:
                model = train_run(cfg, mode, seed, splits, encoders, roster).model
            metrics = evaluate_model(cfg, model, encoders, table, splits["test"], roster)
            bucket = per_seed.setdefault((method, mode), {})
            for name, value in metrics.items():
                bucket.setdefault(name, []).append(value)
    return aggregate(per_seed, seeds, cfg.config_hash(),
                     {"n_classes": len(roster.classes), "candidate_pool": len(roster.classes)})


def write_tables(report: MetricsReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    report.write_results_csv(os.path.join(out_dir, "results.csv"))
    report.write_table_csv(os.path.join(out_dir, "table1.csv"), "mixed_crs", "mixed_r2star")
    report.write_table_csv(os.path.join(out_dir, "table2.csv"), "fg_crs", "fg_r1")
    report.write_table_csv(os.path.join(out_dir, "table3.csv"), "bg_crs", "bg_r1")
