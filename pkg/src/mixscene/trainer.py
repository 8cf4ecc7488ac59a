"""Separator optimization: Adam with coupled weight decay, seeded epoch
shuffles, lowest-validation-loss model selection, per-epoch checkpoints.

Ground-truth embeddings come from the frozen reference encoders and are
precomputed once per dataset; only the separator is on the tape.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .alignment import AlignmentConfig, total_loss_matrices, symmetric_infonce_sum
from .encoders import Mlp, ReferenceEncoders, save_encoder
from .errors import ConfigurationError, ContractViolationError, NumericError
from .tensor import GradGraph, Tensor

logger = logging.getLogger(__name__)

SEPARATOR_HIDDEN = (256, 128)
BASELINE_HIDDEN = (256, 128)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30  # the reference full-scale setting uses 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (contrastive negatives)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


class AdamState:
    """First/second moments plus step counter; betas fixed at (0.9, 0.999)."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0


def adam_step(params, grads, state: AdamState, lr: float, wd: float):
    """One bias-corrected Adam update; weight decay as a coupled L2 term."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolationError("adam_step: parameter/gradient count mismatch")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ContractViolationError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        g = g + wd * p
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def select_best_epoch(val_losses) -> int:
    """1-based epoch index with minimum validation loss."""
    return int(np.argmin(val_losses)) + 1


@dataclass
class TrainResult:
    model: Mlp
    best_epoch: int
    train_losses: list[float]
    val_losses: list[float]
    steps: int


def _precompute_gt(encoders: ReferenceEncoders, tuples):
    """Frozen-encoder embeddings for every tuple, stacked per stream."""
    xa_mix = np.stack([t.a_mix.samples.data for t in tuples])
    ga1 = encoders.audio.forward_np(np.stack([t.a1.samples.data for t in tuples]))
    ga2 = encoders.audio.forward_np(np.stack([t.a2.samples.data for t in tuples]))
    gv1 = encoders.image.forward_np(np.stack([t.v1.pixels.data.ravel() for t in tuples]))
    gv2 = encoders.image.forward_np(np.stack([t.v2.pixels.data.ravel() for t in tuples]))
    return xa_mix, ga1, ga2, gv1, gv2


def _batch_loss(separator: Mlp, x: np.ndarray, gts, config: TrainConfig,
                graph: GradGraph | None):
    _, ga1, ga2, gv1, gv2 = gts
    d = separator.out_width // 2
    if graph is None:
        out = Tensor(separator.forward_np(x))
        h1 = T.narrow(out, 1, 0, d)
        h2 = T.narrow(out, 1, d, 2 * d)
        loss = total_loss_matrices(config.alignment, h1, h2,
                                   (Tensor(ga1), Tensor(ga2)), (Tensor(gv1), Tensor(gv2)))
        return loss, None
    leaves = separator.tracked_leaves(graph)
    out = separator.forward_tracked(x, leaves)
    h1 = T.narrow(out, 1, 0, d)
    h2 = T.narrow(out, 1, d, 2 * d)
    loss = total_loss_matrices(config.alignment, h1, h2,
                               (Tensor(ga1), Tensor(ga2)), (Tensor(gv1), Tensor(gv2)))
    return loss, leaves


def _split_loss(separator: Mlp, gts, config: TrainConfig) -> float:
    """Mean loss over a whole split, evaluated in validation batches."""
    xa = gts[0]
    n = xa.shape[0]
    losses, weights = [], []
    for start in range(0, n, config.batch_size):
        sel = slice(start, start + config.batch_size)
        if min(n, start + config.batch_size) - start < 2:
            continue
        batch_gts = tuple(g[sel] for g in gts)
        loss, _ = _batch_loss(separator, xa[sel], batch_gts, config, None)
        losses.append(float(loss.data))
        weights.append(batch_gts[0].shape[0])
    return float(np.average(losses, weights=weights))


def train(separator: Mlp, encoders: ReferenceEncoders, train_tuples, val_tuples,
          config: TrainConfig, out_dir: str | None = None,
          config_hash: str = "0" * 16) -> TrainResult:
    """Train the separator; returns the lowest-validation-loss checkpoint."""
    if not encoders.gate_passed():
        raise ConfigurationError(
            f"reference encoders failed the retrieval gate (R@1={encoders.holdout_r1:.3f})")
    if not train_tuples or not val_tuples:
        raise ConfigurationError("train and val splits must be non-empty")
    if separator.in_width != train_tuples[0].a_mix.samples.data.size:
        raise ConfigurationError("separator input width does not match signal length")
    if separator.out_width != 2 * encoders.d:
        raise ConfigurationError(
            f"separator output width {separator.out_width} != 2*d ({2 * encoders.d})")

    gts_train = _precompute_gt(encoders, train_tuples)
    gts_val = _precompute_gt(encoders, val_tuples)
    frozen_probe = encoders.audio.forward_np(gts_train[0][:4])

    params = separator.params()
    state = AdamState(params)
    n = len(train_tuples)
    train_losses, val_losses, wall_ms = [], [], []
    best: tuple[float, int, list[np.ndarray]] | None = None
    steps = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 51 + epoch]))
        order = rng.permutation(n)
        epoch_losses, epoch_weights = [], []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            if len(batch) < 2:
                continue  # InfoNCE degenerates without negatives
            graph = GradGraph()
            batch_gts = tuple(g[batch] for g in gts_train)
            loss, leaves = _batch_loss(separator, gts_train[0][batch], batch_gts, config, graph)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"NaN loss at epoch {epoch}, step {steps}; recent losses: "
                    f"{epoch_losses[-5:]}")
            graph.backward(loss)
            grads = [graph.grad(l) for l in leaves]
            params = adam_step(params, grads, state, config.learning_rate, config.weight_decay)
            separator.set_params(params)
            epoch_losses.append(loss_val)
            epoch_weights.append(len(batch))
            steps += 1
        train_losses.append(float(np.average(epoch_losses, weights=epoch_weights)))
        val_losses.append(_split_loss(separator, gts_val, config))
        wall_ms.append((time.monotonic() - t0) * 1000.0)
        if best is None or val_losses[-1] < best[0]:
            best = (val_losses[-1], epoch, [p.copy() for p in params])
        if out_dir is not None:
            save_encoder(separator, os.path.join(out_dir, f"epoch_{epoch}.ckpt"), config_hash)

    if not np.allclose(frozen_probe, encoders.audio.forward_np(gts_train[0][:4])):
        raise ContractViolationError("frozen encoder outputs changed during training")

    best_epoch = select_best_epoch(val_losses)
    if best_epoch > 1 and train_losses[best_epoch - 1] > train_losses[best_epoch - 2]:
        logger.warning("best epoch %d has increasing train loss", best_epoch)
    best_model = separator.clone()
    best_model.set_params(best[2])
    if out_dir is not None:
        save_encoder(best_model, os.path.join(out_dir, "best.ckpt"), config_hash)
        _write_training_log(os.path.join(out_dir, "training_log.csv"),
                            train_losses, val_losses, wall_ms, config_hash)
    return TrainResult(best_model, best_epoch, train_losses, val_losses, steps)


def train_baseline(baseline: Mlp, encoders: ReferenceEncoders, train_tuples, val_tuples,
                   config: TrainConfig, out_dir: str | None = None,
                   config_hash: str = "0" * 16) -> TrainResult:
    """Single-head reference model: align single-source audio with image
    embeddings, so mixed audio at test time yields one embedding."""
    if not encoders.gate_passed():
        raise ConfigurationError(
            f"reference encoders failed the retrieval gate (R@1={encoders.holdout_r1:.3f})")
    if baseline.out_width != encoders.d:
        raise ConfigurationError("baseline head width must equal d")

    def stream(tuples):
        xs = [t.a1.samples.data for t in tuples] + [t.a2.samples.data for t in tuples]
        vs = [t.v1.pixels.data.ravel() for t in tuples] + [t.v2.pixels.data.ravel() for t in tuples]
        return np.stack(xs), encoders.image.forward_np(np.stack(vs))

    x_train, g_train = stream(train_tuples)
    x_val, g_val = stream(val_tuples)

    params = baseline.params()
    state = AdamState(params)
    n = x_train.shape[0]
    train_losses, val_losses, wall_ms = [], [], []
    best = None
    steps = 0

    def batch_loss(x, g, graph):
        if graph is None:
            za = Tensor(baseline.forward_np(x))
            leaves = None
        else:
            leaves = baseline.tracked_leaves(graph)
            za = baseline.forward_tracked(x, leaves)
        b = x.shape[0]
        loss = T.scale(symmetric_infonce_sum(T.l2_normalize(za),
                                             T.l2_normalize(Tensor(g))), 1.0 / (2 * b))
        return loss, leaves

    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 51 + epoch]))
        order = rng.permutation(n)
        epoch_losses, epoch_weights = [], []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            if len(batch) < 2:
                continue
            graph = GradGraph()
            loss, leaves = batch_loss(x_train[batch], g_train[batch], graph)
            if not np.isfinite(float(loss.data)):
                raise NumericError(f"NaN baseline loss at epoch {epoch}, step {steps}")
            graph.backward(loss)
            grads = [graph.grad(l) for l in leaves]
            params = adam_step(params, grads, state, config.learning_rate, config.weight_decay)
            baseline.set_params(params)
            epoch_losses.append(float(loss.data))
            epoch_weights.append(len(batch))
            steps += 1
        train_losses.append(float(np.average(epoch_losses, weights=epoch_weights)))
        val_losses.append(float(batch_loss(x_val, g_val, None)[0].data))
        wall_ms.append((time.monotonic() - t0) * 1000.0)
        if best is None or val_losses[-1] < best[0]:
            best = (val_losses[-1], epoch, [p.copy() for p in params])
        if out_dir is not None:
            save_encoder(baseline, os.path.join(out_dir, f"epoch_{epoch}.ckpt"), config_hash)

    best_epoch = select_best_epoch(val_losses)
    best_model = baseline.clone()
    best_model.set_params(best[2])
    if out_dir is not None:
        save_encoder(best_model, os.path.join(out_dir, "best.ckpt"), config_hash)
        _write_training_log(os.path.join(out_dir, "training_log.csv"),
                            train_losses, val_losses, wall_ms, config_hash)
    return TrainResult(best_model, best_epoch, train_losses, val_losses, steps)


def _write_training_log(path, train_losses, val_losses, wall_ms, config_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_ms"])
        for i, (tr, va, ms) in enumerate(zip(train_losses, val_losses, wall_ms), start=1):
            writer.writerow([i, f"{tr:.12g}", f"{va:.12g}", f"{ms:.1f}"])


def save_checkpoint(separator: Mlp, path, config_hash: str = "0" * 16) -> None:
    save_encoder(separator, path, config_hash)


def load_checkpoint(path, expect_widths=None) -> Mlp:
    from .encoders import load_encoder

    model, _ = load_encoder(path, expect_widths)
    return model
