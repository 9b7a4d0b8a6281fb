"""Image-embedding provision: the .mfse binary format and a seeded
synthetic generator of class-clustered vectors.

Images never appear in pixel form here; a dataset is a bag of
D-dimensional float32 vectors keyed by (class_id, sample_id).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MFSE_MAGIC = b"MFSE"  # 4D 46 53 45
MFSE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_RECORD_HEAD = struct.Struct("<II")


@dataclass(frozen=True)
class ImageEmbedding:
    vector: np.ndarray
    class_id: int
    sample_id: int


@dataclass
class EmbeddingDataset:
    dim: int
    samples: list[ImageEmbedding]
    labels: dict[int, str]
    by_class: dict[int, list[ImageEmbedding]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.by_class:
            for s in self.samples:
                self.by_class.setdefault(s.class_id, []).append(s)
            for rows in self.by_class.values():
                rows.sort(key=lambda s: s.sample_id)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.by_class)

    def get(self, class_id: int, sample_id: int) -> ImageEmbedding:
        rows = self.by_class.get(class_id)
        if rows is None:
            raise DataError(f"unknown class_id {class_id}")
        for s in rows:
            if s.sample_id == sample_id:
                return s
        raise DataError(f"class {class_id} has no sample_id {sample_id}")

    def class_samples(self, class_id: int) -> list[ImageEmbedding]:
        rows = self.by_class.get(class_id)
        if rows is None:
            raise DataError(f"unknown class_id {class_id}")
        return rows


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    train_per_class: int
    test_per_class: int
    dim: int
    separation: float = 1.0
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise DataError("synthetic spec needs at least 2 classes")
        if self.separation <= 0 or self.noise < 0:
            raise DataError("separation must be > 0 and noise >= 0")
        if self.train_per_class < 1 or self.test_per_class < 0 or self.dim < 1:
            raise DataError("invalid synthetic counts")


def write_embeddings(path, samples: list[ImageEmbedding], dim: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MFSE_MAGIC, MFSE_VERSION, dim, len(samples)))
        for s in samples:
            vec = np.asarray(s.vector, dtype="<f4")
            if vec.shape != (dim,):
                raise DataError(f"record dim {vec.shape} does not match header dim {dim}")
            fh.write(_RECORD_HEAD.pack(s.class_id, s.sample_id))
            fh.write(vec.tobytes())


def load_embeddings(path, labels: dict[int, str]) -> EmbeddingDataset:
    """Load a .mfse file, validating against the labels map."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MFSE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != MFSE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    record_size = _RECORD_HEAD.size + 4 * dim
    expected = _HEADER.size + count * record_size
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {count} records, got {len(raw)}")
    samples = []
    offset = _HEADER.size
    for _ in range(count):
        class_id, sample_id = _RECORD_HEAD.unpack_from(raw, offset)
        offset += _RECORD_HEAD.size
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        if class_id not in labels:
            raise DataError(f"{path}: record references unknown class_id {class_id}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: non-finite values in class {class_id} sample {sample_id}")
        vec.setflags(write=False)
        samples.append(ImageEmbedding(vector=vec, class_id=class_id, sample_id=sample_id))
    return EmbeddingDataset(dim=dim, samples=samples, labels=dict(labels))


def _place_class_means(rng, classes: int, dim: int, separation: float, max_tries: int = 10000):
    """Unit-sphere means with pairwise distance >= separation, by rejection."""
    means: list[np.ndarray] = []
    tries = 0
    while len(means) < classes:
        if tries >= max_tries:
            raise DataError(
                f"could not place {classes} class means at separation {separation} in dim {dim}"
            )
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        tries += 1
        if all(np.linalg.norm(v - m) >= separation for m in means):
            means.append(v)
    return means


def synthesize(spec: SyntheticSpec) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Generate (train, test) datasets of class-clustered embeddings.

    Each class is an isotropic Gaussian around a unit-norm mean; the
    same seed reproduces every byte.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = _place_class_means(rng, spec.classes, spec.dim, spec.separation)
    labels = {cid: f"class {cid}" for cid in range(spec.classes)}

    def draw(count: int, start: int):
        out = []
        for cid, mean in enumerate(means):
            noise = rng.normal(0.0, 1.0, size=(count, spec.dim)) * spec.noise
            vecs = (mean + noise).astype(np.float32)
            for j in range(count):
                v = vecs[j]
                v.setflags(write=False)
                out.append(ImageEmbedding(vector=v, class_id=cid, sample_id=start + j))
        return out

    train = EmbeddingDataset(dim=spec.dim, samples=draw(spec.train_per_class, 0), labels=labels)
    test = EmbeddingDataset(
        dim=spec.dim,
        samples=draw(spec.test_per_class, spec.train_per_class),
        labels=labels,
    )
    return train, test
