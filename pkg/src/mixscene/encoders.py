"""Reference encoders and the trainable split-embedding separator.

The frozen audio/image encoders are small dense ReLU stacks pretrained
in-repo with a symmetric contrastive objective on single-class
(signal, image) pairs. The separator maps a mixed signal to one vector of
width 2d whose halves carry the two sources.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ConfigurationError,
    ContractViolationError,
    FormatError,
    ShapeMismatchError,
)
from .tensor import GradGraph, Tensor
from .world import GlyphImage, Signal

RETRIEVAL_GATE = 0.95  # holdout audio->image R@1 required before separator training


class Mlp:
    """Dense ReLU stack; Kaiming-style scaled-uniform init from a seed."""

    def __init__(self, widths, seed: int = 0, frozen: bool = False):
        widths = list(widths)
        if len(widths) < 2:
            raise ConfigurationError("mlp: need at least one layer")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE17C0DE]))
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.frozen = frozen

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, flat: list[np.ndarray]) -> None:
        if self.frozen:
            raise ContractViolationError("mlp: frozen parameters cannot be replaced")
        for i in range(len(self.weights)):
            self.weights[i] = np.array(flat[2 * i])
            self.biases[i] = np.array(flat[2 * i + 1])

    def clone(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.frozen = self.frozen
        return other

    def freeze(self) -> "Mlp":
        self.frozen = True
        return self

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Untracked forward pass on a (batch, in) matrix or (in,) vector."""
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.in_width:
            raise ShapeMismatchError("mlp forward", h.shape, (self.in_width,))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h[0] if squeeze else h

    def tracked_leaves(self, graph: GradGraph) -> list[Tensor]:
        if self.frozen:
            raise ContractViolationError("mlp: frozen encoders cannot be tracked on a graph")
        leaves = []
        for w, b in zip(self.weights, self.biases):
            leaves += [graph.leaf(w), graph.leaf(b)]
        return leaves

    def forward_tracked(self, x: np.ndarray, leaves: list[Tensor]) -> Tensor:
        """Tracked forward on a (batch, in) matrix using pre-made leaves."""
        h = Tensor(np.atleast_2d(x))
        if h.shape[1] != self.in_width:
            raise ShapeMismatchError("mlp forward", h.shape, (self.in_width,))
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            w, b = leaves[2 * i], leaves[2 * i + 1]
            h = T.add(T.matmul(h, T.transpose(w)), b)
            if i != last:
                h = T.relu(h)
        return h


class SplitEmbedding:
    """A 2d-wide embedding whose halves carry the two separated sources."""

    def __init__(self, full: Tensor):
        if full.data.ndim != 1:
            raise ConfigurationError(f"split embedding: expected a vector, got {full.shape}")
        n = full.data.size
        if n % 2 != 0:
            raise ConfigurationError(f"split embedding: width {n} is not even")
        self.full = full
        self.d = n // 2
        self.half1 = T.narrow(full, 0, 0, self.d)
        self.half2 = T.narrow(full, 0, self.d, n)


def encode_audio(params: Mlp, a: Signal) -> Tensor:
    if params.in_width != len(a):
        raise ShapeMismatchError("encode_audio", (len(a),), (params.in_width,))
    return Tensor(params.forward_np(a.samples.data))


def encode_image(params: Mlp, v: GlyphImage) -> Tensor:
    flat = v.pixels.data.ravel()
    if params.in_width != flat.size:
        raise ShapeMismatchError("encode_image", (flat.size,), (params.in_width,))
    return Tensor(params.forward_np(flat))


def separate(params: Mlp, a_mix: Signal, graph: GradGraph | None = None,
             leaves: list[Tensor] | None = None) -> SplitEmbedding:
    if params.out_width % 2 != 0:
        raise ConfigurationError(f"separator output width {params.out_width} is odd")
    if params.in_width != len(a_mix):
        raise ShapeMismatchError("separate", (len(a_mix),), (params.in_width,))
    x = a_mix.samples.data
    if graph is None:
        return SplitEmbedding(Tensor(params.forward_np(x)))
    if leaves is None:
        leaves = params.tracked_leaves(graph)
    out = params.forward_tracked(x, leaves)
    return SplitEmbedding(T.reshape(out, (params.out_width,)))


# ---------------------------------------------------------------------------
# checkpoint format: magic "MSLE", version, config hash, widths, tensors

_MAGIC = b"MSLE"
_VERSION = 1
_HASH_LEN = 16


def encoder_to_bytes(params: Mlp, config_hash: str = "0" * _HASH_LEN) -> bytes:
    h = config_hash.encode()
    if len(h) != _HASH_LEN:
        raise ConfigurationError(f"config hash must be {_HASH_LEN} chars, got {config_hash!r}")
    widths = params.widths
    out = _MAGIC + bytes([_VERSION]) + h + bytes([1 if params.frozen else 0])
    out += struct.pack("<Q", len(widths)) + struct.pack(f"<{len(widths)}Q", *widths)
    for w, b in zip(params.weights, params.biases):
        out += T.tensor_to_bytes(Tensor(w)) + T.tensor_to_bytes(Tensor(b))
    return out


def _take_tensor(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    if len(buf) < off + 13 or buf[off:off + 4] != b"MSLT":
        raise FormatError("checkpoint: truncated parameter tensor")
    (rank,) = struct.unpack_from("<Q", buf, off + 5)
    shape = struct.unpack_from(f"<{rank}Q", buf, off + 13)
    size = 13 + 8 * rank + 8 * int(np.prod(shape))
    t = T.tensor_from_bytes(buf[off:off + size])
    return t.data, off + size


def encoder_from_bytes(buf: bytes) -> tuple[Mlp, str]:
    if len(buf) < 4 + 1 + _HASH_LEN + 1 + 8 or buf[:4] != _MAGIC:
        raise FormatError("checkpoint: bad magic")
    if buf[4] != _VERSION:
        raise FormatError(f"checkpoint: unsupported version {buf[4]}")
    config_hash = buf[5:5 + _HASH_LEN].decode()
    off = 5 + _HASH_LEN
    frozen = bool(buf[off])
    off += 1
    (n_widths,) = struct.unpack_from("<Q", buf, off)
    off += 8
    widths = list(struct.unpack_from(f"<{n_widths}Q", buf, off))
    off += 8 * n_widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths, widths[1:]):
        w, off = _take_tensor(buf, off)
        b, off = _take_tensor(buf, off)
        if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise FormatError("checkpoint: parameter shape disagrees with descriptor")
        weights.append(w)
        biases.append(b)
    if off != len(buf):
        raise FormatError("checkpoint: trailing bytes")
    mlp = Mlp.__new__(Mlp)
    mlp.weights = weights
    mlp.biases = biases
    mlp.frozen = frozen
    return mlp, config_hash


def save_encoder(params: Mlp, path, config_hash: str = "0" * _HASH_LEN) -> None:
    with open(path, "wb") as fh:
        fh.write(encoder_to_bytes(params, config_hash))


def load_encoder(path, expect_widths=None) -> tuple[Mlp, str]:
    with open(path, "rb") as fh:
        mlp, config_hash = encoder_from_bytes(fh.read())
    if expect_widths is not None and mlp.widths != list(expect_widths):
        raise ConfigurationError(
            f"checkpoint widths {mlp.widths} do not match configured {list(expect_widths)}")
    return mlp, config_hash


# ---------------------------------------------------------------------------
# reference-encoder pretraining


@dataclass
class PretrainConfig:
    d: int = 64
    audio_hidden: tuple[int, int] = (128, 96)
    image_hidden: tuple[int, int] = (256, 96)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.25


@dataclass
class ReferenceEncoders:
    audio: Mlp
    image: Mlp
    d: int
    holdout_r1: float
    final_val_loss: float

    def gate_passed(self, gate: float = RETRIEVAL_GATE) -> bool:
        return self.holdout_r1 >= gate


def save_reference_encoders(enc: ReferenceEncoders, out_dir: str,
                            config_hash: str = "0" * _HASH_LEN) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    save_encoder(enc.audio, os.path.join(out_dir, "f_audio.ckpt"), config_hash)
    save_encoder(enc.image, os.path.join(out_dir, "f_image.ckpt"), config_hash)
    with open(os.path.join(out_dir, "encoders_meta.txt"), "w") as fh:
        fh.write(f"config_hash={config_hash}\n")
        fh.write(f"d={enc.d}\n")
        fh.write(f"holdout_r1={enc.holdout_r1!r}\n")
        fh.write(f"final_val_loss={enc.final_val_loss!r}\n")


def load_reference_encoders(in_dir: str) -> tuple[ReferenceEncoders, str]:
    import os

    audio, hash_a = load_encoder(os.path.join(in_dir, "f_audio.ckpt"))
    image, hash_v = load_encoder(os.path.join(in_dir, "f_image.ckpt"))
    meta = {}
    with open(os.path.join(in_dir, "encoders_meta.txt")) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.strip().split("=", 1)
                meta[key] = value
    if hash_a != hash_v or meta.get("config_hash") != hash_a:
        raise FormatError(f"{in_dir}: encoder artifacts carry mismatched config hashes")
    if not (audio.frozen and image.frozen):
        raise FormatError(f"{in_dir}: reference encoders must be frozen")
    enc = ReferenceEncoders(audio, image, int(meta["d"]),
                            float(meta["holdout_r1"]), float(meta["final_val_loss"]))
    return enc, hash_a


def _class_partition(items, holdout_fraction: float, seed: int):
    by_class: dict[int, list[int]] = {}
    for i, (_, _, cid) in enumerate(items):
        by_class.setdefault(cid, []).append(i)
    train_idx, hold_idx = [], []
    for gi, cid in enumerate(sorted(by_class)):
        idx = by_class[cid]
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 77 + gi]))
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_hold = max(1, int(len(order) * holdout_fraction))
        hold_idx += order[:n_hold]
        train_idx += order[n_hold:]
    return sorted(train_idx), sorted(hold_idx)


def _symmetric_nce(za: Tensor, zv: Tensor) -> Tensor:
    """Mean symmetric distance-softmax contrastive loss over a batch."""
    from .alignment import symmetric_infonce_sum

    b = za.shape[0]
    return T.scale(symmetric_infonce_sum(T.l2_normalize(za), T.l2_normalize(zv)), 1.0 / (2 * b))


def pretrain_reference_encoders(single_class_data, config: PretrainConfig) -> ReferenceEncoders:
    """Jointly train f_A and f_V with symmetric InfoNCE, then freeze them."""
    from .trainer import AdamState, adam_step

    items = list(single_class_data)
    classes: dict[int, int] = {}
    for _, _, cid in items:
        classes[cid] = classes.get(cid, 0) + 1
    if len(classes) < 2:
        raise ConfigurationError("pretraining needs at least 2 classes")
    thin = [c for c, n in classes.items() if n < 10]
    if thin:
        raise ConfigurationError(f"pretraining needs >= 10 pairs per class; thin classes: {thin}")

    sig_len = len(items[0][0])
    img_len = items[0][1].pixels.data.size
    f_a = Mlp([sig_len, *config.audio_hidden, config.d], seed=config.seed)
    f_v = Mlp([img_len, *config.image_hidden, config.d], seed=config.seed + 1)

    xa = np.stack([s.samples.data for s, _, _ in items])
    xv = np.stack([v.pixels.data.ravel() for _, v, _ in items])
    labels = np.array([cid for _, _, cid in items])
    train_idx, hold_idx = _class_partition(items, config.holdout_fraction, config.seed)

    params = f_a.params() + f_v.params()
    state = AdamState(params)
    n_a = len(f_a.params())
    final_val_loss = float("nan")
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 31 + epoch]))
        order = [train_idx[j] for j in rng.permutation(len(train_idx))]
        for start in range(0, len(order) - 1, config.batch_size):
            batch = order[start:start + config.batch_size]
            if len(batch) < 2:
                continue
            graph = GradGraph()
            leaves_a = f_a.tracked_leaves(graph)
            leaves_v = f_v.tracked_leaves(graph)
            za = f_a.forward_tracked(xa[batch], leaves_a)
            zv = f_v.forward_tracked(xv[batch], leaves_v)
            loss = _symmetric_nce(za, zv)
            graph.backward(loss)
            grads = [graph.grad(l) for l in leaves_a + leaves_v]
            params = adam_step(params, grads, state, config.learning_rate, 0.0)
            f_a.set_params(params[:n_a])
            f_v.set_params(params[n_a:])
        ha = Tensor(f_a.forward_np(xa[hold_idx]))
        hv = Tensor(f_v.forward_np(xv[hold_idx]))
        final_val_loss = float(_symmetric_nce(ha, hv).data)

    f_a.freeze()
    f_v.freeze()

    ea = f_a.forward_np(xa[hold_idx])
    ev = f_v.forward_np(xv[hold_idx])
    ea /= np.linalg.norm(ea, axis=1, keepdims=True)
    ev /= np.linalg.norm(ev, axis=1, keepdims=True)
    hits = 0
    hold_labels = labels[hold_idx]
    sims = ea @ ev.T
    for i in range(len(hold_idx)):
        hits += int(hold_labels[np.argmax(sims[i])] == hold_labels[i])
    r1 = hits / len(hold_idx)
    return ReferenceEncoders(f_a, f_v, config.d, r1, final_val_loss)
