"""Dataset manifests: one tab-separated record per line.

File layout::

    noisyseg-manifest<TAB>1
    <image path><TAB><tag><TAB><split><TAB><truth path or ->

Paths are relative to the manifest's directory.  Truth paths are kept apart
from the records handed to training code; only :mod:`noisyseg.evaluation`
resolves them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import os
from pathlib import Path

import numpy as np

from noisyseg.data.imageio import load_image

MAGIC = "noisyseg-manifest"
VERSION = 1

ATTENTION_TRAIN = "attention-train"
FINETUNE_POOL = "finetune-pool"
EVAL = "eval"
SPLITS = (ATTENTION_TRAIN, FINETUNE_POOL, EVAL)


@dataclass(frozen=True)
class Record:
    image: str
    tag: int
    split: str


@dataclass
class Manifest:
    root: Path
    records: list[Record]
    _truth: dict[str, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"unknown split {r.split!r}")
            if r.tag < 1:
                raise ValueError(f"tag must be >= 1, got {r.tag}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> "Manifest":
        return self.subset([r for r in self.records if r.split == name])

    def subset(self, records) -> "Manifest":
        records = list(records)
        keep = {r.image for r in records}
        return Manifest(self.root, records, {k: v for k, v in self._truth.items() if k in keep})

    def without_truth(self) -> "Manifest":
        return Manifest(self.root, list(self.records))

    @property
    def has_truth(self) -> bool:
        return bool(self._truth)

    def image_path(self, record: Record) -> Path:
        return self.root / record.image

    @property
    def tags(self) -> np.ndarray:
        return np.array([r.tag for r in self.records], dtype=np.int64)

    def load_images(self) -> np.ndarray:
        """All record images stacked as ``N x C x H x W`` float64."""
        if not self.records:
            return np.zeros((0, 3, 1, 1))
        return np.stack([load_image(self.image_path(r)) for r in self.records])

    def write(self, path) -> None:
        """Write the manifest; paths are rebased onto the new file's directory."""
        path = Path(path)
        rebase = _rebaser(self.root, path.parent)
        lines = [f"{MAGIC}\t{VERSION}"]
        for r in self.records:
            truth = self._truth.get(r.image)
            lines.append(f"{rebase(r.image)}\t{r.tag}\t{r.split}\t{'-' if truth is None else rebase(truth)}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or lines[0].split("\t") != [MAGIC, str(VERSION)]:
            raise ValueError(f"{path}: missing '{MAGIC}\\t{VERSION}' header")
        records, truth = [], {}
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{n}: expected 4 tab-separated fields")
            image, tag, split, tp = parts
            records.append(Record(image, int(tag), split))
            if tp != "-":
                truth[image] = tp
        seen = set()
        for r in records:
            if r.image in seen:
                raise ValueError(f"{path}: duplicate record {r.image}")
            seen.add(r.image)
        return cls(path.parent, records, truth)


def _rebaser(old_root: Path, new_root: Path):
    old_root, new_root = Path(old_root).resolve(), Path(new_root).resolve()
    if old_root == new_root:
        return lambda rel: rel
    return lambda rel: Path(os.path.relpath(old_root / rel, new_root)).as_posix()


# -- image / pseudo-mask pair lists -------------------------------------------

PAIRS_MAGIC = "noisyseg-pairs"


def write_pairs(path, pairs) -> None:
    """``pairs`` of (image path, mask path), stored relative to the list file when possible."""
    path = Path(path)
    lines = [f"{PAIRS_MAGIC}\t{VERSION}"]
    for image, mask in pairs:
        lines.append(f"{_relative(image, path.parent)}\t{_relative(mask, path.parent)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_pairs(path) -> list[tuple[Path, Path]]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].split("\t") != [PAIRS_MAGIC, str(VERSION)]:
        raise ValueError(f"{path}: missing '{PAIRS_MAGIC}\\t{VERSION}' header")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected 2 tab-separated fields")
        out.append((path.parent / parts[0], path.parent / parts[1]))
    return out


def _relative(p, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p.resolve())
