"""Synthetic shape corpus and PNG file I/O."""

from .corpus import (
    MANIFEST,
    CorpusError,
    CorpusItem,
    load_corpus,
    scan_corpus,
    write_manifest,
    write_synthetic_corpus,
)
from .io import (
    ChannelCountError,
    NotPNGError,
    read_image_png,
    read_mask_png,
    write_image_png,
    write_mask_png,
)
from .shapes import FAMILIES, ShapeSpec, coverage, gen_sample, render, shape_spec

__all__ = [
    "MANIFEST",
    "CorpusError",
    "CorpusItem",
    "load_corpus",
    "scan_corpus",
    "write_manifest",
    "write_synthetic_corpus",
    "ChannelCountError",
    "NotPNGError",
    "read_image_png",
    "read_mask_png",
    "write_image_png",
    "write_mask_png",
    "FAMILIES",
    "ShapeSpec",
    "coverage",
    "gen_sample",
    "render",
    "shape_spec",
]
