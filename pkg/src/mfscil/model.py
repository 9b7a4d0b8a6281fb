"""Trainable memory prompt and the cosine-similarity classification head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import interpreter as interp
from .errors import NumericError

PROMPT_INIT_STD = 0.02


@dataclass
class MemoryPrompt:
    """The L x D trainable matrix; values change, shape never does."""

    matrix: np.ndarray

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def as_leaf(self) -> ad.Tensor:
        """Fresh traced leaf for one training step's tape."""
        return ad.Tensor(self.matrix, requires_grad=True)

    def copy(self) -> "MemoryPrompt":
        return MemoryPrompt(self.matrix.copy())


def init_prompt(length: int, dim: int, seed: int, dtype=np.float32) -> MemoryPrompt:
    if length < 0 or dim < 1:
        raise ValueError(f"bad prompt shape ({length}, {dim})")
    rng = np.random.default_rng(seed)
    matrix = rng.normal(0.0, PROMPT_INIT_STD, size=(length, dim)).astype(dtype)
    return MemoryPrompt(matrix)


@dataclass
class ClassEmbeddingBank:
    """One label embedding per learned class, in class-id order."""

    class_ids: list[int]
    matrix: np.ndarray  # [classes x D]

    def __len__(self):
        return len(self.class_ids)


def build_bank(frozen, prompt, labels: dict[int, str], suffix: str | None = None) -> ClassEmbeddingBank:
    """Interpret every learned class once; pure given (prompt, labels)."""
    class_ids = sorted(labels)
    texts = [labels[cid] for cid in class_ids]
    prompt_arr = prompt.matrix if isinstance(prompt, MemoryPrompt) else prompt
    outs = interp.interpret_class_set(frozen, prompt_arr, texts, suffix)
    return ClassEmbeddingBank(class_ids=class_ids, matrix=np.stack([o.data for o in outs]))


def build_bank_traced(frozen, prompt_leaf: ad.Tensor, labels: dict[int, str], suffix: str | None = None):
    """Bank as a traced tensor for loss construction.

    Returns (class_ids, [classes x D] tensor) differentiable with
    respect to the prompt leaf.
    """
    class_ids = sorted(labels)
    texts = [labels[cid] for cid in class_ids]
    outs = interp.interpret_class_set(frozen, prompt_leaf, texts, suffix)
    return class_ids, ad.stack_rows(outs)


def score(image_vector: np.ndarray, bank: ClassEmbeddingBank) -> np.ndarray:
    """Cosine similarity of one image embedding against every bank row."""
    v = np.asarray(image_vector)
    vn = np.linalg.norm(v)
    row_norms = np.linalg.norm(bank.matrix, axis=1)
    if vn == 0.0 or np.any(row_norms == 0.0):
        raise NumericError("zero-norm embedding in similarity scoring")
    return (bank.matrix @ v) / (row_norms * vn)


def classify(image_vector: np.ndarray, bank: ClassEmbeddingBank) -> int:
    """Argmax of raw cosine similarity; ties go to the smallest class id."""
    sims = score(image_vector, bank)
    return bank.class_ids[int(np.argmax(sims))]
