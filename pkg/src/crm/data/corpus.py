"""On-disk corpus layout: ``<stem>.img.png``, ``<stem>.gt.png``, optional ``<stem>.coarse.png``."""

from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .io import read_image_png, read_mask_png, write_image_png, write_mask_png
from .shapes import gen_sample

log = logging.getLogger(__name__)

ROLES = {".img.png": "image", ".gt.png": "gt", ".coarse.png": "coarse"}
MANIFEST = "manifest.tsv"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusItem:
    stem: str
    image: Path
    gt: Path
    coarse: Optional[Path] = None

    @property
    def needs_perturbation(self) -> bool:
        return self.coarse is None

    def load(self) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        img = read_image_png(self.image)
        gt = read_mask_png(self.gt)
        coarse = read_mask_png(self.coarse) if self.coarse is not None else None
        return img, gt, coarse


def _split(name: str) -> tuple[str, str] | None:
    low = name.lower()
    for suffix, role in ROLES.items():
        if low.endswith(suffix) and len(name) > len(suffix):
            return name[: -len(suffix)], role
    return None


def scan_corpus(directory) -> list[CorpusItem]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory {d} does not exist")
    found: dict[str, dict[str, Path]] = {}
    for p in sorted(d.iterdir()):
        if not p.is_file():
            continue
        parts = _split(p.name)
        if parts is None:
            continue
        stem, role = parts
        # stems are compared case-insensitively so a corpus behaves the same on
        # case-folding file systems
        key = stem.lower()
        slot = found.setdefault(key, {})
        if role in slot or ("stem" in slot and slot["stem"].name != stem):
            raise CorpusError(f"duplicate stem {stem!r} in {d}")
        slot[role] = p
        slot.setdefault("stem", Path(stem))
    items = []
    for key in sorted(found):
        slot = found[key]
        stem = slot["stem"].name
        if "image" not in slot:
            continue
        if "gt" not in slot:
            log.warning("skipping %s: image without ground truth", stem)
            continue
        items.append(CorpusItem(stem, slot["image"], slot["gt"], slot.get("coarse")))
    items.sort(key=lambda it: it.stem)
    if not items:
        raise CorpusError(f"no image/gt pairs in {d}")
    return items


def write_manifest(directory, items: Iterable[CorpusItem]) -> Path:
    d = Path(directory)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["stem", "image", "gt", "coarse", "needs_perturbation"])
    for it in items:
        w.writerow([it.stem, it.image.name, it.gt.name, it.coarse.name if it.coarse else "", int(it.needs_perturbation)])
    path = d / MANIFEST
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".manifest.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_corpus(directory, write_cache: bool = True) -> list[CorpusItem]:
    """Scan ``directory`` and return its items sorted by stem; caches ``manifest.tsv``."""
    items = scan_corpus(directory)
    if write_cache:
        write_manifest(directory, items)
    return items


def write_synthetic_corpus(out, n: int, res: int, seed: int = 0, width: int = 6) -> list[CorpusItem]:
    """Render ``n`` samples with seeds ``seed .. seed + n - 1`` and write them with a manifest."""
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(n):
        s = seed + k
        img, gt = gen_sample(s, res)
        stem = f"s{s:0{width}d}"
        write_image_png(img, d / f"{stem}.img.png")
        write_mask_png(gt, d / f"{stem}.gt.png")
    return load_corpus(d)
