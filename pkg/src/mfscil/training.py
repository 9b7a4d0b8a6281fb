"""Prompt optimization: session cross-entropy, the stimulation-weighted
anchor penalty, per-entry stimulation rates, and the session training
driver that accumulates them.

The anchor is the prompt snapshot taken when the base session finishes;
later sessions pay a quadratic cost for moving entries in proportion to
how strongly past image embeddings stimulated them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import interpreter as interp
from .embeddings import ImageEmbedding
from .errors import DataError, NumericError
from .model import MemoryPrompt, build_bank_traced

MFCK_MAGIC = b"MFCK"  # 4D 46 43 4B
MFCK_VERSION = 1
_CK_HEADER = struct.Struct("<4sIIIII")
_FLAG_ANCHOR = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 256
    epochs_base: int = 50
    epochs_incremental: int = 100
    alpha: float = 1.0
    beta: float = 1.0
    normalize_gamma: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.alpha < 0 or self.beta <= 0:
            raise DataError("learning_rate and beta must be > 0, alpha >= 0")
        if self.epochs_base < 1 or self.epochs_incremental < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")


@dataclass
class TrainingState:
    prompt: MemoryPrompt
    gamma_acc: np.ndarray
    theta_star: np.ndarray | None = None
    session_index: int = 0
    learned_labels: dict[int, str] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)


def new_state(prompt: MemoryPrompt) -> TrainingState:
    return TrainingState(prompt=prompt, gamma_acc=np.zeros_like(prompt.matrix))


def _normalized_images(batch: list[ImageEmbedding], dtype) -> np.ndarray:
    mat = np.stack([s.vector for s in batch]).astype(dtype)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm image embedding in batch")
    return mat / norms


def session_cross_entropy(batch, leaf, class_ids, bank_tensor, beta: float) -> ad.Tensor:
    """Mean negative log-softmax over ALL learned classes.

    batch: (ImageEmbedding, class_id) pairs whose targets must be among
    class_ids. Logits are beta-scaled cosine similarities.
    """
    if not batch:
        raise DataError("empty training batch")
    col = {cid: i for i, cid in enumerate(class_ids)}
    targets = []
    for _, cid in batch:
        if cid not in col:
            raise DataError(f"batch label {cid} not among learned classes")
        targets.append(col[cid])
    images = _normalized_images([s for s, _ in batch], bank_tensor.dtype)
    bank_hat = ad.normalize_rows(bank_tensor)
    logits = ad.mul(ad.matmul(ad.as_tensor(images), ad.transpose(bank_hat)), float(beta))
    picked = ad.pick(ad.log_softmax(logits), targets)
    return ad.mul(ad.mean_all(picked), -1.0)


def consolidation_penalty(leaf, theta_star: np.ndarray, gamma_acc: np.ndarray,
                          alpha: float, normalize_gamma: bool = True) -> ad.Tensor:
    """(alpha/|prompt|) * sum of |gamma|-weighted squared drift from the anchor."""
    if theta_star is None:
        raise DataError("anchor is absent; penalty only applies after the base session")
    if theta_star.shape != leaf.data.shape or gamma_acc.shape != leaf.data.shape:
        raise DataError("anchor/gamma shape mismatch with prompt")
    weights = np.abs(gamma_acc).astype(leaf.dtype)
    peak = weights.max() if weights.size else 0.0
    if normalize_gamma and peak > 0.0:
        weights = weights / peak
    diff = ad.sub(leaf, theta_star.astype(leaf.dtype))
    weighted = ad.mul(ad.mul(diff, diff), weights)
    scale = float(alpha) / max(1, leaf.data.size)
    return ad.mul(ad.sum_all(weighted), scale)


def total_loss(batch, leaf, frozen, learned_labels, state: TrainingState,
               config: TrainConfig, suffix: str | None = None) -> ad.Tensor:
    """Session cross-entropy plus the anchor penalty once an anchor exists."""
    class_ids, bank_tensor = build_bank_traced(frozen, leaf, learned_labels, suffix)
    loss = session_cross_entropy(batch, leaf, class_ids, bank_tensor, config.beta)
    if state.theta_star is not None:
        penalty = consolidation_penalty(
            leaf, state.theta_star, state.gamma_acc, config.alpha, config.normalize_gamma
        )
        loss = ad.add(loss, penalty)
    return loss


def stimulation_rate(frozen, prompt: MemoryPrompt, label: str, image_vector: np.ndarray,
                     suffix: str | None = None) -> np.ndarray:
    """Per-prompt-entry sensitivity of the image/label inner product.

    The gradient of <image, class embedding> with respect to the prompt,
    i.e. the class-embedding Jacobian contracted against the image.
    """
    image_vector = np.asarray(image_vector)
    if image_vector.shape != (prompt.dim,):
        raise DataError(
            f"image dim {image_vector.shape} does not match embedding dim {prompt.dim}"
        )
    leaf = prompt.as_leaf()
    tokens = interp.tokenize(interp.apply_suffix(label, suffix), frozen.config, prompt.length)
    m = interp.interpret(frozen, leaf, tokens)
    inner = ad.dot(ad.Tensor(image_vector, dtype=leaf.dtype), m)
    return ad.grad(inner, leaf)


def sgd_step(prompt: MemoryPrompt, gradient: np.ndarray, learning_rate: float) -> None:
    if gradient.shape != prompt.matrix.shape:
        raise DataError("gradient shape mismatch")
    if not np.all(np.isfinite(gradient)):
        raise NumericError("non-finite gradient in SGD step")
    prompt.matrix = prompt.matrix - learning_rate * gradient.astype(prompt.matrix.dtype)


def accumulate_gamma(state: TrainingState, frozen, session_labels: dict[int, str],
                     train_samples: list[ImageEmbedding], suffix: str | None = None) -> None:
    """Review one sample per just-trained class and add its stimulation rate."""
    by_class: dict[int, ImageEmbedding] = {}
    for s in train_samples:
        best = by_class.get(s.class_id)
        if best is None or s.sample_id < best.sample_id:
            by_class[s.class_id] = s
    for cid in sorted(session_labels):
        if cid not in by_class:
            raise DataError(f"class {cid} has no training sample to review")
        rate = stimulation_rate(frozen, state.prompt, session_labels[cid],
                                by_class[cid].vector, suffix)
        state.gamma_acc = state.gamma_acc + rate.astype(state.gamma_acc.dtype)


def train_session(state: TrainingState, frozen, session_labels: dict[int, str],
                  train_samples: list[ImageEmbedding], config: TrainConfig,
                  suffix: str | None = None) -> TrainingState:
    """One session of minibatch SGD on this session's data only.

    After the epochs finish, stimulation rates are accumulated and, if
    this was the base session, the anchor snapshot is taken.
    """
    config.validate()
    if not session_labels or not train_samples:
        raise DataError("empty session")
    overlap = set(session_labels) & set(state.learned_labels)
    if overlap:
        raise DataError(f"session classes overlap earlier sessions: {sorted(overlap)}")
    for s in train_samples:
        if s.class_id not in session_labels:
            raise DataError(f"training sample of class {s.class_id} outside this session")

    t = state.session_index + 1
    learned = dict(state.learned_labels)
    learned.update(session_labels)
    epochs = config.epochs_base if t == 1 else config.epochs_incremental
    final_epoch_losses: list[float] = []
    for epoch in range(epochs):
        rng = np.random.default_rng([config.seed, t, epoch])
        order = rng.permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [(train_samples[i], train_samples[i].class_id) for i in idx]
            leaf = state.prompt.as_leaf()
            loss = total_loss(batch, leaf, frozen, learned, state, config, suffix)
            gradient = ad.grad(loss, leaf)
            sgd_step(state.prompt, gradient, config.learning_rate)
            epoch_losses.append(loss.item())
        final_epoch_losses = epoch_losses

    state.learned_labels = learned
    state.session_index = t
    accumulate_gamma(state, frozen, session_labels, train_samples, suffix)
    if t == 1:
        state.theta_star = state.prompt.matrix.copy()
    state.metrics.append({
        "session": t,
        "classes": len(learned),
        "loss": float(np.mean(final_epoch_losses)),
    })
    return state


# -- checkpoint format ------------------------------------------------------


def save_checkpoint(path, state: TrainingState) -> None:
    L, D = state.prompt.matrix.shape
    flags = _FLAG_ANCHOR if state.theta_star is not None else 0
    with open(path, "wb") as fh:
        fh.write(_CK_HEADER.pack(MFCK_MAGIC, MFCK_VERSION, L, D, state.session_index, flags))
        fh.write(state.prompt.matrix.astype("<f4").tobytes())
        if state.theta_star is not None:
            fh.write(state.theta_star.astype("<f4").tobytes())
        fh.write(state.gamma_acc.astype("<f4").tobytes())


def load_checkpoint(path) -> TrainingState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CK_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, L, D, session, flags = _CK_HEADER.unpack_from(raw, 0)
    if magic != MFCK_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != MFCK_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    block = 4 * L * D
    blocks = 2 + (1 if flags & _FLAG_ANCHOR else 0)
    if len(raw) != _CK_HEADER.size + blocks * block:
        raise DataError(f"{path}: truncated checkpoint body")
    offset = _CK_HEADER.size

    def read_block():
        nonlocal offset
        arr = np.frombuffer(raw, dtype="<f4", count=L * D, offset=offset).reshape(L, D).copy()
        offset += block
        return arr

    prompt = MemoryPrompt(read_block())
    theta_star = read_block() if flags & _FLAG_ANCHOR else None
    gamma_acc = read_block()
    return TrainingState(prompt=prompt, gamma_acc=gamma_acc, theta_star=theta_star,
                         session_index=session)
