"""Frozen text transformer that turns (memory prompt, class label) into a
class-label embedding.

The transformer is a small seeded stand-in with frozen weights: labels are
hash-tokenized, embedded, prepended with the trainable prompt rows, pushed
through post-norm encoder layers, and pooled at the last token. Only the
prompt receives gradients.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

PAD_ID = 0
UNKNOWN_ID = 1
_RESERVED_IDS = 2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_WORD_SPLIT = re.compile(r"[^a-z0-9]+")


def fnv1a_64(word: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of a word."""
    h = _FNV_OFFSET
    for b in word.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class InterpreterConfig:
    model_dim: int = 512
    layers: int = 2
    heads: int = 4
    feed_forward_dim: int | None = None  # defaults to 4 * model_dim
    vocab_size: int = 4096
    max_sequence_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.feed_forward_dim is None:
            object.__setattr__(self, "feed_forward_dim", 4 * self.model_dim)

    def validate(self, prompt_len: int = 0) -> None:
        if self.model_dim < 1 or self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.vocab_size < _RESERVED_IDS:
            raise ConfigError(f"vocab_size must be >= {_RESERVED_IDS}")
        if self.layers < 0 or self.feed_forward_dim < 1:
            raise ConfigError("layers must be >= 0 and feed_forward_dim >= 1")
        if self.max_sequence_len < prompt_len + 1:
            raise ConfigError(
                f"max_sequence_len {self.max_sequence_len} leaves no room after a "
                f"{prompt_len}-row prompt"
            )


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self):
        return len(self.ids)


def tokenize(label: str, config: InterpreterConfig, prompt_len: int = 0) -> TokenSequence:
    """Hash-tokenize a label: lowercase words mapped through FNV-1a.

    Ids 0 (pad) and 1 (unknown) are reserved; hashed ids land in
    [2, vocab_size). The sequence is truncated so prompt + tokens fit.
    """
    words = [w for w in _WORD_SPLIT.split(label.lower()) if w]
    if not words:
        raise DataError(f"label {label!r} is empty after normalization")
    span = config.vocab_size - _RESERVED_IDS
    ids = [_RESERVED_IDS + fnv1a_64(w) % span for w in words]
    limit = config.max_sequence_len - prompt_len
    if limit < 1:
        raise ConfigError("prompt leaves no room for label tokens")
    return TokenSequence(tuple(ids[:limit]))


@dataclass
class EncoderLayer:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass
class FrozenInterpreter:
    config: InterpreterConfig
    token_embedding: np.ndarray = field(repr=False)
    positional_embedding: np.ndarray = field(repr=False)
    layers: list[EncoderLayer] = field(repr=False)
    projection: np.ndarray = field(repr=False)

    def weight_arrays(self):
        yield self.token_embedding
        yield self.positional_embedding
        for layer in self.layers:
            for name in layer.__dataclass_fields__:
                yield getattr(layer, name)
        yield self.projection

    def checksum(self) -> float:
        """Cheap mutation detector over all frozen weights."""
        return float(sum(np.abs(w).sum() for w in self.weight_arrays()))

    def parameter_count(self) -> int:
        return sum(w.size for w in self.weight_arrays())


def build_frozen(config: InterpreterConfig, dtype=np.float32,
                 weight_std: float | None = None) -> FrozenInterpreter:
    """Deterministically initialize frozen weights from the config seed.

    Normal matrices, unit layer-norm gains, zero biases. The draw order
    is fixed, so (config, seed) pins every byte. The default std scales
    with model width so attention stays selective at small dims; at a
    768-wide model it coincides with the conventional 0.02.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, ff = config.model_dim, config.feed_forward_dim
    if weight_std is None:
        weight_std = 0.02 * math.sqrt(768.0 / d)

    def normal(*shape):
        return rng.normal(0.0, weight_std, size=shape).astype(dtype)

    token_embedding = normal(config.vocab_size, d)
    positional_embedding = normal(config.max_sequence_len, d)
    layers = []
    for _ in range(config.layers):
        layers.append(
            EncoderLayer(
                wq=normal(d, d), bq=np.zeros(d, dtype=dtype),
                wk=normal(d, d), bk=np.zeros(d, dtype=dtype),
                wv=normal(d, d), bv=np.zeros(d, dtype=dtype),
                wo=normal(d, d), bo=np.zeros(d, dtype=dtype),
                ln1_gain=np.ones(d, dtype=dtype), ln1_bias=np.zeros(d, dtype=dtype),
                w_ff1=normal(d, ff), b_ff1=np.zeros(ff, dtype=dtype),
                w_ff2=normal(ff, d), b_ff2=np.zeros(d, dtype=dtype),
                ln2_gain=np.ones(d, dtype=dtype), ln2_bias=np.zeros(d, dtype=dtype),
            )
        )
    projection = normal(d, d)
    frozen = FrozenInterpreter(
        config=config,
        token_embedding=token_embedding,
        positional_embedding=positional_embedding,
        layers=layers,
        projection=projection,
    )
    for w in frozen.weight_arrays():
        w.setflags(write=False)
    return frozen


def _encoder_layer(x: Tensor, layer: EncoderLayer, heads: int) -> Tensor:
    d = x.shape[1]
    dh = d // heads
    q = ad.add(ad.matmul(x, layer.wq), layer.bq)
    k = ad.add(ad.matmul(x, layer.wk), layer.bk)
    v = ad.add(ad.matmul(x, layer.wv), layer.bv)
    head_outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        head_outs.append(
            ad.attention(ad.slice_cols(q, lo, hi), ad.slice_cols(k, lo, hi), ad.slice_cols(v, lo, hi))
        )
    attn = ad.add(ad.matmul(ad.concat_cols(head_outs), layer.wo), layer.bo)
    x = ad.layer_norm(ad.add(x, attn), layer.ln1_gain, layer.ln1_bias)
    ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, layer.w_ff1), layer.b_ff1)), layer.w_ff2), layer.b_ff2)
    return ad.layer_norm(ad.add(x, ff), layer.ln2_gain, layer.ln2_bias)


def interpret(frozen: FrozenInterpreter, prompt, tokens: TokenSequence) -> Tensor:
    """Run [prompt rows..., token embeddings...] through the encoder.

    Returns the projected hidden state at the last token position as a
    rank-1 tensor of model_dim entries; differentiable with respect to
    the prompt when it is a traced tensor.
    """
    cfg = frozen.config
    prompt_t = ad.as_tensor(prompt)
    if prompt_t.data.ndim != 2 or (prompt_t.data.shape[0] > 0 and prompt_t.data.shape[1] != cfg.model_dim):
        raise ConfigError(
            f"prompt shape {prompt_t.data.shape} incompatible with model_dim {cfg.model_dim}"
        )
    if len(tokens) == 0:
        raise DataError("token sequence is empty")
    prompt_len = prompt_t.data.shape[0]
    seq_len = prompt_len + len(tokens)
    if seq_len > cfg.max_sequence_len:
        raise ConfigError(f"sequence length {seq_len} exceeds max {cfg.max_sequence_len}")
    ids = np.asarray(tokens.ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError("token id outside vocabulary")
    tok = frozen.token_embedding[ids]
    if prompt_len > 0:
        x = ad.concat_rows(prompt_t, ad.as_tensor(tok))
    else:
        x = ad.as_tensor(tok)
    x = ad.add(x, frozen.positional_embedding[:seq_len])
    for layer in frozen.layers:
        x = _encoder_layer(x, layer, cfg.heads)
    pooled = ad.take_row(x, seq_len - 1)
    w = frozen.projection
    return ad.take_row(ad.matmul(ad.stack_rows([pooled]), w), 0)


def apply_suffix(label: str, suffix: str | None) -> str:
    return label if not suffix else f"{label}, {suffix}"


def interpret_class_set(frozen, prompt, labels, suffix: str | None = None) -> list[Tensor]:
    """Interpret every label independently; order preserved."""
    if not labels:
        raise DataError("no labels to interpret")
    if len(set(labels)) != len(labels):
        raise DataError("duplicate labels in class set")
    prompt_len = ad.as_tensor(prompt).data.shape[0]
    out = []
    for label in labels:
        try:
            toks = tokenize(apply_suffix(label, suffix), frozen.config, prompt_len)
            out.append(interpret(frozen, prompt, toks))
        except Exception as exc:
            raise type(exc)(f"class {label!r}: {exc}") from exc
    return out


def load_labels(path) -> dict[int, str]:
    """Read the class-label TSV: ``class_id<TAB>label`` per line.

    Lines starting with '#' are comments. Ids must be unique and
    contiguous from 0.
    """
    labels: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'class_id<TAB>label'")
            try:
                cid = int(parts[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: class_id {parts[0]!r} is not an integer")
            if cid < 0 or cid in labels:
                raise DataError(f"{path}:{lineno}: bad or duplicate class_id {cid}")
            if not parts[1].strip():
                raise DataError(f"{path}:{lineno}: empty label")
            labels[cid] = parts[1]
    if not labels:
        raise DataError(f"{path}: no label records")
    if sorted(labels) != list(range(len(labels))):
        raise DataError(f"{path}: class ids not contiguous from 0")
    return labels


def write_labels(path, labels: dict[int, str], header_comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        for cid in sorted(labels):
            fh.write(f"{cid}\t{labels[cid]}\n")
