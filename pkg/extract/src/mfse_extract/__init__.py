"""Image-embedding extraction into the .mfse / labels-TSV formats."""

from .extractor import (
    ExtractError,
    ExtractJob,
    ExtractReport,
    ManifestEntry,
    extract,
    read_manifest,
)

__all__ = [
    "ExtractError",
    "ExtractJob",
    "ExtractReport",
    "ManifestEntry",
    "extract",
    "read_manifest",
]
