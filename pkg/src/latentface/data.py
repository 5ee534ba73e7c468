"""Image and corpus I/O: PNG/PGM codecs, corpus indexing, batch plans."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DataError

IMAGE_SIZE = 64


def to_uint8(values) -> np.ndarray:
    """Clamp to [0, 1], scale to [0, 255] and round half to even."""
    if torch.is_tensor(values):
        values = values.detach().cpu().double().numpy()
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.rint(arr).astype(np.uint8)


def save_png(image, path) -> None:
    """Write a (3,H,W) tensor/array in [0,1] as 8-bit RGB PNG."""
    arr = to_uint8(image)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def save_pgm(single, path) -> None:
    """Write an (H,W) map already normalised to [0,1] as 8-bit binary PGM."""
    arr = to_uint8(single)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def load_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def resize_bilinear(image: torch.Tensor, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Bilinear resize with half-pixel centres, (C,H,W) -> (C,size,size)."""
    if tuple(image.shape[-2:]) == (size, size):
        return image
    return F.interpolate(image[None], size=(size, size), mode="bilinear",
                         align_corners=False, antialias=False)[0]


def load_image(path, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Read a PNG as a float32 (3, size, size) tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "1", "P", "LA"):
                im = im.convert("L")
                arr = np.asarray(im, dtype=np.float32)[None].repeat(3, axis=0)
            else:
                arr = np.transpose(np.asarray(im.convert("RGB"), dtype=np.float32), (2, 0, 1))
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return resize_bilinear(torch.from_numpy(np.ascontiguousarray(arr)) / 255.0, size)


def plan_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of range(n) for one epoch, chunked; the last batch may be short."""
    if n < 1:
        raise ValueError("cannot plan batches for an empty dataset")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class CorpusEntry:
    split: str
    identity: str
    frame: str
    path: Path


@dataclass
class Corpus:
    root: Path
    entries: list[CorpusEntry]
    labels: list[dict] | None = None
    pairs: list[dict] | None = None
    _by_rel: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.entries)

    def rel(self, entry: CorpusEntry) -> str:
        return entry.path.relative_to(self.root).as_posix()

    def select(self, split: str | None = None) -> list[CorpusEntry]:
        return [e for e in self.entries if split is None or e.split == split]

    def load(self, entries=None) -> torch.Tensor:
        entries = self.entries if entries is None else entries
        if not entries:
            return torch.empty(0, 3, IMAGE_SIZE, IMAGE_SIZE)
        return torch.stack([load_image(e.path) for e in entries])

    def label_for(self, entry: CorpusEntry) -> dict | None:
        if self.labels is None:
            return None
        if not self._by_rel:
            for row in self.labels:
                key = (row.get("split", ""), row["identity"], row["frame"])
                self._by_rel[key] = row
        return self._by_rel.get((entry.split, entry.identity, entry.frame))

    def sequences(self, split: str | None = None) -> dict[str, list[CorpusEntry]]:
        seqs: dict[str, list[CorpusEntry]] = {}
        for e in self.select(split):
            seqs.setdefault(e.identity, []).append(e)
        return seqs


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_corpus(root) -> Corpus:
    """Index every PNG under root as root/[split/]identity/frame.png, sorted by path bytes."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    paths = sorted(root.rglob("*.png"), key=lambda p: p.relative_to(root).as_posix().encode("utf-8"))
    entries = []
    for p in paths:
        parts = p.relative_to(root).parts
        if len(parts) >= 3:
            split, identity = parts[-3], parts[-2]
        elif len(parts) == 2:
            split, identity = "", parts[0]
        else:
            split, identity = "", ""
        entries.append(CorpusEntry(split, identity, p.stem, p))
    if not entries:
        raise DataError(f"no PNG images under {root}")
    labels = read_csv(root / "labels.csv") if (root / "labels.csv").exists() else None
    if labels is not None:
        for row in labels:
            row["identity"] = _norm_id(row["identity"])
            row["frame"] = _norm_frame(row["frame"])
    pairs = read_csv(root / "pairs.csv") if (root / "pairs.csv").exists() else None
    return Corpus(root, entries, labels, pairs)


def identity_dir(identity: int) -> str:
    return f"{int(identity):04d}"


def frame_name(frame: int) -> str:
    return f"{int(frame):03d}"


def _norm_id(v: str) -> str:
    return identity_dir(v) if v.isdigit() else v


def _norm_frame(v: str) -> str:
    return frame_name(v) if v.isdigit() else v
