"""Batch feature extraction from a TorchScript image encoder.

Reads a manifest of images, runs them through a frozen (evaluation-mode)
encoder checkpoint, and writes the features to a `.mfse` embedding file
plus a class-label TSV. Both formats match the consuming engine's
definitions byte for byte:

- `.mfse`: little-endian header ``magic "MFSE", version u32, dim u32,
  count u32``, then per record ``class_id u32, sample_id u32, dim x f32``.
- labels TSV: ``class_id<TAB>label`` per line, ``#`` comments allowed,
  class ids contiguous from 0.

Embeddings are written un-normalized; the preprocessing actually applied
is recorded as a provenance comment in the TSV header.
"""

from __future__ import annotations

import hashlib
import os
import struct
import sys
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

MFSE_MAGIC = b"MFSE"
MFSE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_RECORD_HEAD = struct.Struct("<II")

# Evaluation preprocessing defaults (overridden by checkpoint attributes
# `image_size`, `mean`, `std` when the scripted module declares them).
DEFAULT_IMAGE_SIZE = 224
DEFAULT_MEAN = (0.48145466, 0.4578275, 0.40821073)
DEFAULT_STD = (0.26862954, 0.26130258, 0.27577711)


class ExtractError(Exception):
    """Manifest, image, or checkpoint problem."""


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_id: int
    sample_id: int
    label: str


@dataclass
class ExtractJob:
    manifest: str
    checkpoint: str
    out: str
    labels_out: str
    batch_size: int = 16
    strict: bool = False


@dataclass
class ExtractReport:
    count: int
    dim: int
    skipped: list[str] = field(default_factory=list)


def read_manifest(path: str) -> list[ManifestEntry]:
    """Parse ``path<TAB>class_id<TAB>sample_id[<TAB>label]`` lines.

    Relative image paths are resolved against the manifest's directory.
    Class ids must be contiguous from 0 with one consistent label each.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries: list[ManifestEntry] = []
    labels: dict[int, str] = {}
    seen: set[tuple[int, int]] = set()
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ExtractError(f"cannot read manifest: {exc}")
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ExtractError(
                f"{path}:{lineno}: expected 'path<TAB>class_id<TAB>sample_id[<TAB>label]'")
        try:
            class_id, sample_id = int(parts[1]), int(parts[2])
        except ValueError:
            raise ExtractError(f"{path}:{lineno}: class_id and sample_id must be integers")
        if class_id < 0 or sample_id < 0:
            raise ExtractError(f"{path}:{lineno}: negative class_id or sample_id")
        if (class_id, sample_id) in seen:
            raise ExtractError(f"{path}:{lineno}: duplicate (class_id, sample_id) "
                               f"({class_id}, {sample_id})")
        seen.add((class_id, sample_id))
        label = parts[3] if len(parts) == 4 else f"class {class_id}"
        if not label.strip():
            raise ExtractError(f"{path}:{lineno}: empty label")
        if class_id in labels and labels[class_id] != label:
            raise ExtractError(f"{path}:{lineno}: conflicting labels for class {class_id}: "
                               f"{labels[class_id]!r} vs {label!r}")
        labels[class_id] = label
        image_path = parts[0] if os.path.isabs(parts[0]) else os.path.join(base, parts[0])
        entries.append(ManifestEntry(path=image_path, class_id=class_id,
                                     sample_id=sample_id, label=label))
    if not entries:
        raise ExtractError(f"{path}: empty manifest")
    if sorted(labels) != list(range(len(labels))):
        raise ExtractError(f"{path}: class ids not contiguous from 0")
    return entries


@dataclass(frozen=True)
class Preprocess:
    image_size: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def provenance(self) -> str:
        mean = ",".join(f"{m:.8f}" for m in self.mean)
        std = ",".join(f"{s:.8f}" for s in self.std)
        return (f"resize-shorter={self.image_size} center-crop={self.image_size} "
                f"bicubic rgb scale=1/255 normalize mean=[{mean}] std=[{std}]")


def load_encoder(path: str) -> tuple[torch.jit.ScriptModule, Preprocess]:
    """Load a TorchScript encoder and its declared preprocessing.

    The module maps a float batch [B, 3, S, S] to features [B, D]. Optional
    attributes ``image_size``, ``mean``, ``std`` override the defaults.
    """
    try:
        module = torch.jit.load(path, map_location="cpu")
    except (OSError, RuntimeError, ValueError) as exc:
        raise ExtractError(f"cannot load checkpoint {path}: {exc}")
    module.eval()
    size = int(getattr(module, "image_size", DEFAULT_IMAGE_SIZE))
    mean = tuple(float(m) for m in getattr(module, "mean", DEFAULT_MEAN))
    std = tuple(float(s) for s in getattr(module, "std", DEFAULT_STD))
    if size <= 0 or len(mean) != 3 or len(std) != 3 or any(s <= 0 for s in std):
        raise ExtractError(f"checkpoint {path}: invalid preprocessing attributes")
    return module, Preprocess(image_size=size, mean=mean, std=std)


def preprocess_image(image: Image.Image, pp: Preprocess) -> np.ndarray:
    """Evaluation-mode preprocessing: resize shorter side, center crop,
    scale to [0, 1], channel-normalize. Returns float32 [3, S, S]."""
    image = image.convert("RGB")
    w, h = image.size
    scale = pp.image_size / min(w, h)
    image = image.resize((max(pp.image_size, round(w * scale)),
                          max(pp.image_size, round(h * scale))), Image.BICUBIC)
    w, h = image.size
    left = (w - pp.image_size) // 2
    top = (h - pp.image_size) // 2
    image = image.crop((left, top, left + pp.image_size, top + pp.image_size))
    arr = np.asarray(image, dtype=np.float32) / 255.0  # [S, S, 3]
    arr = (arr - np.array(pp.mean, dtype=np.float32)) / np.array(pp.std, dtype=np.float32)
    return arr.transpose(2, 0, 1)


def _checkpoint_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]


def write_mfse(path: str, records: list[tuple[int, int, np.ndarray]], dim: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MFSE_MAGIC, MFSE_VERSION, dim, len(records)))
        for class_id, sample_id, vec in records:
            fh.write(_RECORD_HEAD.pack(class_id, sample_id))
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def write_labels_tsv(path: str, labels: dict[int, str], provenance: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {provenance}\n")
        for cid in sorted(labels):
            fh.write(f"{cid}\t{labels[cid]}\n")


def extract(job: ExtractJob) -> ExtractReport:
    """Run the job: decode, preprocess, batch-infer, write both files.

    Undecodable images abort under ``strict`` and are otherwise skipped
    with a warning on stderr. The pretrained weights are never modified.
    """
    if job.batch_size < 1:
        raise ExtractError("batch size must be >= 1")
    entries = read_manifest(job.manifest)
    module, pp = load_encoder(job.checkpoint)

    decoded: list[ManifestEntry] = []
    tensors: list[np.ndarray] = []
    skipped: list[str] = []
    for entry in entries:
        try:
            with Image.open(entry.path) as img:
                tensors.append(preprocess_image(img, pp))
        except (OSError, ValueError) as exc:
            if job.strict:
                raise ExtractError(f"undecodable image {entry.path}: {exc}")
            print(f"warning: skipping undecodable image {entry.path}: {exc}",
                  file=sys.stderr)
            skipped.append(entry.path)
            continue
        decoded.append(entry)
    if not decoded:
        raise ExtractError("no decodable images in manifest")

    features: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(tensors), job.batch_size):
            batch = torch.from_numpy(np.stack(tensors[start:start + job.batch_size]))
            out = module(batch)
            if not isinstance(out, torch.Tensor) or out.dim() != 2 or out.shape[0] != batch.shape[0]:
                raise ExtractError(
                    f"checkpoint mismatch: expected [batch, dim] features, got "
                    f"{tuple(out.shape) if isinstance(out, torch.Tensor) else type(out)}")
            features.append(out.to(torch.float32).cpu().numpy())
    matrix = np.concatenate(features, axis=0)
    if not np.all(np.isfinite(matrix)):
        raise ExtractError("checkpoint produced non-finite features")
    dim = matrix.shape[1]

    records = [(e.class_id, e.sample_id, matrix[i]) for i, e in enumerate(decoded)]
    labels = {e.class_id: e.label for e in entries}
    provenance = (f"extracted-with: checkpoint={os.path.basename(job.checkpoint)} "
                  f"sha256/12={_checkpoint_digest(job.checkpoint)} dim={dim}; "
                  f"preprocessing: {pp.provenance()}")
    write_mfse(job.out, records, dim)
    write_labels_tsv(job.labels_out, labels, provenance)
    return ExtractReport(count=len(records), dim=dim, skipped=skipped)
