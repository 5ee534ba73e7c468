"""Procedural synthetic faces with known identity, expression, pose and light."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import renderer
from .data import frame_name, identity_dir, save_png, to_uint8

GENERATOR_VERSION = "1"
N_CLASSES = 4
TEMPLATE_SEED = 4242
SIZE = 64

LABEL_COLUMNS = ("split", "identity", "frame", "class", "magnitude",
                 "yaw", "pitch", "roll", "tx", "ty", "tz", "ka", "kd", "lx", "ly")


@dataclass(frozen=True)
class Ranges:
    yaw: float = renderer.YAW_LIMIT
    pitch: float = renderer.PITCH_LIMIT
    roll: float = renderer.ROLL_LIMIT
    translation: float = renderer.TRANSLATION_LIMIT
    ka: tuple = (0.0, 1.0)
    kd: tuple = (0.0, 1.0)
    light_dir: float = 1.0
    magnitude: tuple = (0.3, 1.0)


@dataclass
class SyntheticIdentity:
    id: int
    albedo: torch.Tensor  # (3,H,W)
    depth: torch.Tensor   # (H,W)


@dataclass
class SyntheticSample:
    identity: int
    frame: int
    expression: int
    magnitude: float
    pose: renderer.Pose
    light: renderer.Light
    split: str = "train"
    image: torch.Tensor | None = field(default=None, repr=False)


@dataclass
class SyntheticSequence:
    identity: int
    samples: list


def _grid(size=SIZE):
    lin = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(lin, lin, indexing="xy")


def _blob(x, y, cx, cy, s):
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * s * s))


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a[..., ::-1])


def gen_identity(seed, identity: int = 0, size: int = SIZE) -> SyntheticIdentity:
    """Mirror-symmetric smooth albedo and a bumpy depth map in [0.9, 1.1]."""
    rng = np.random.default_rng(seed)
    x, y = _grid(size)
    base = rng.uniform(0.35, 0.75, size=3)
    albedo = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    for _ in range(6):
        amp = rng.uniform(-0.25, 0.25, size=3)
        cx, cy = rng.uniform(-0.8, 0.8, size=2)
        s = rng.uniform(0.15, 0.5)
        albedo += amp[:, None, None] * _blob(x, y, cx, cy, s)[None]
    albedo = np.clip(_symmetrize(albedo), 0.05, 0.95)

    height = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 5))):
        a = rng.uniform(0.4, 1.0)
        cx, cy = rng.uniform(-0.5, 0.5), rng.uniform(-0.6, 0.6)
        s = rng.uniform(0.2, 0.5)
        height += a * _blob(x, y, cx, cy, s)
    height = _symmetrize(height)
    depth = 1.0 + 0.09 * (1.0 - 2.0 * np.tanh(height))
    return SyntheticIdentity(identity, torch.from_numpy(albedo.astype(np.float32)),
                             torch.from_numpy(depth.astype(np.float32)))


def class_templates(template_seed: int = TEMPLATE_SEED, size: int = SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Identity-independent additive fields: albedo (C,3,H,W), depth (C,H,W)."""
    rng = np.random.default_rng(template_seed)
    x, y = _grid(size)
    # rough facial regions: mouth, brows, eyes, cheeks
    centres = [(0.0, 0.55), (0.35, -0.55), (0.35, -0.25), (0.5, 0.25)]
    alb = np.zeros((N_CLASSES, 3, size, size))
    dep = np.zeros((N_CLASSES, size, size))
    for c, (cx, cy) in enumerate(centres):
        colour = rng.uniform(-0.3, 0.3, size=3)
        colour[c % 3] = 0.3 * (1 if c % 2 == 0 else -1)
        blob = _blob(x, y, cx, cy, 0.22) + _blob(x, y, -cx, cy, 0.22)
        alb[c] = colour[:, None, None] * blob[None]
        dep[c] = (0.05 if c % 2 == 0 else -0.05) * blob
    return _symmetrize(alb), _symmetrize(dep)


_TEMPLATES: dict = {}


def _templates(template_seed: int):
    if template_seed not in _TEMPLATES:
        a, d = class_templates(template_seed)
        _TEMPLATES[template_seed] = (torch.from_numpy(a.astype(np.float32)), torch.from_numpy(d.astype(np.float32)))
    return _TEMPLATES[template_seed]


def expression_field(e: int, magnitude: float, template_seed: int = TEMPLATE_SEED):
    if not 0 <= int(e) < N_CLASSES:
        raise ValueError(f"unknown expression class {e}")
    alb, dep = _templates(template_seed)
    return magnitude * alb[e], magnitude * dep[e]


def gen_expression(identity: SyntheticIdentity, e: int, magnitude: float,
                   template_seed: int = TEMPLATE_SEED, clamp: bool = True):
    """Base maps plus the class field scaled by magnitude; magnitude 0 returns the base."""
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError("expression magnitude must lie in [0, 1]")
    if magnitude == 0:
        if not 0 <= int(e) < N_CLASSES:
            raise ValueError(f"unknown expression class {e}")
        return identity.albedo.clone(), identity.depth.clone()
    da, dd = expression_field(e, magnitude, template_seed)
    albedo = identity.albedo + da
    depth = identity.depth + dd
    if clamp:
        albedo = albedo.clamp(0.0, 1.0)
        depth = depth.clamp(0.9, 1.1)
    return albedo, depth


def sequence_mean_maps(identity: SyntheticIdentity, classes, magnitudes, template_seed: int = TEMPLATE_SEED):
    """Closed-form frame mean of the unclamped expression maps."""
    alb, dep = _templates(template_seed)
    w = torch.zeros(N_CLASSES)
    for e, m in zip(classes, magnitudes):
        w[int(e)] += float(m)
    w /= len(classes)
    return (identity.albedo + (w[:, None, None, None] * alb).sum(0),
            identity.depth + (w[:, None, None] * dep).sum(0))


def sample_params(seed: int, identity: int, frame: int, ranges: Ranges = Ranges()):
    rng = np.random.default_rng([int(seed), int(identity), int(frame)])
    e = int(rng.integers(0, N_CLASSES))
    m = float(rng.uniform(*ranges.magnitude))
    pose = renderer.Pose(
        yaw=float(rng.uniform(-ranges.yaw, ranges.yaw)),
        pitch=float(rng.uniform(-ranges.pitch, ranges.pitch)),
        roll=float(rng.uniform(-ranges.roll, ranges.roll)),
        tx=float(rng.uniform(-ranges.translation, ranges.translation)),
        ty=float(rng.uniform(-ranges.translation, ranges.translation)),
        tz=float(rng.uniform(-ranges.translation, ranges.translation)),
    )
    light = renderer.Light(
        ka=float(rng.uniform(*ranges.ka)),
        kd=float(rng.uniform(*ranges.kd)),
        lx=float(rng.uniform(-ranges.light_dir, ranges.light_dir)),
        ly=float(rng.uniform(-ranges.light_dir, ranges.light_dir)),
    )
    return e, m, pose, light


def identity_seed(seed: int, identity: int) -> list:
    return [int(seed), int(identity), 0xFACE]


def render_sample(ident: SyntheticIdentity, e: int, m: float, pose, light) -> torch.Tensor:
    albedo, depth = gen_expression(ident, e, m)
    return renderer.render(albedo, depth, pose, light).image


def render_batch(ident: SyntheticIdentity, params) -> torch.Tensor:
    maps = [gen_expression(ident, e, m) for e, m, _, _ in params]
    albedo = torch.stack([a for a, _ in maps])
    depth = torch.stack([d for _, d in maps])
    pose = torch.stack([p.as_tensor() for _, _, p, _ in params])
    light = torch.stack([l.as_tensor() for _, _, _, l in params])
    return renderer.render(albedo, depth, pose, light).image


def split_identities(n_identities: int, seed: int) -> dict[int, str]:
    order = np.random.default_rng([int(seed), 0x5911]).permutation(n_identities)
    n_train = int(round(0.8 * n_identities))
    return {int(i): ("train" if rank < n_train else "eval") for rank, i in enumerate(order)}


@dataclass
class SyntheticCorpus:
    seed: int
    samples: list
    sequences: list
    identities: dict
    ranges: Ranges

    def images(self, split: str | None = None) -> torch.Tensor:
        return torch.stack([s.image for s in self.samples if split is None or s.split == split])

    def select(self, split: str | None = None) -> list:
        return [s for s in self.samples if split is None or s.split == split]


def gen_dataset(n_identities: int, frames_per_identity: int, seed: int, out=None,
                ranges: Ranges = Ranges(), n_pairs_per_fold: int = 30) -> SyntheticCorpus:
    """Generate the corpus in memory; optionally write PNGs, labels.csv, pairs.csv, manifest.json.

    Stored images are the 8-bit quantised renders, so the in-memory tensors
    equal what load_image reads back.
    """
    if n_identities < 1 or frames_per_identity < 1:
        raise ValueError("identity and frame counts must be >= 1")
    split = split_identities(n_identities, seed)
    samples, sequences, identities = [], [], {}
    for i in range(n_identities):
        ident = gen_identity(identity_seed(seed, i), i)
        identities[i] = ident
        params = [sample_params(seed, i, k, ranges) for k in range(frames_per_identity)]
        # one render per sample so re-rendering a single label row is bit-identical
        images = [render_batch(ident, [p])[0] for p in params]
        seq = []
        for k, ((e, m, pose, light), img) in enumerate(zip(params, images)):
            q = torch.from_numpy(to_uint8(img).astype(np.float32) / 255.0)
            s = SyntheticSample(i, k, e, m, pose, light, split[i], q)
            seq.append(s)
            samples.append(s)
        sequences.append(SyntheticSequence(i, seq))
    corpus = SyntheticCorpus(seed, samples, sequences, identities, ranges)
    if out is not None:
        write_corpus(corpus, out, n_pairs_per_fold)
    return corpus


def sample_path(root, s: SyntheticSample) -> Path:
    return Path(root) / s.split / identity_dir(s.identity) / f"{frame_name(s.frame)}.png"


def make_pairs(corpus: SyntheticCorpus, seed: int, n_per_fold: int = 30, folds: int = 10,
               split: str = "eval") -> list[tuple[int, int, int]]:
    """Balanced same/different pairs (indices into corpus.samples) from one split."""
    idx = [k for k, s in enumerate(corpus.samples) if s.split == split]
    by_id: dict[int, list[int]] = {}
    for k in idx:
        by_id.setdefault(corpus.samples[k].identity, []).append(k)
    ids = sorted(by_id)
    if len(ids) < 2:
        return []
    rng = np.random.default_rng([int(seed), 0xFA1B])
    want = n_per_fold * folds
    pos, neg, seen = [], [], set()
    attempts = 0
    while (len(pos) < want or len(neg) < want) and attempts < 200 * want:
        attempts += 1
        if len(pos) < want:
            members = by_id[ids[int(rng.integers(len(ids)))]]
            if len(members) >= 2:
                a, b = sorted(rng.choice(members, size=2, replace=False).tolist())
                if (a, b) not in seen:
                    seen.add((a, b))
                    pos.append((a, b, 1))
        if len(neg) < want:
            i1, i2 = rng.choice(len(ids), size=2, replace=False)
            a = int(rng.choice(by_id[ids[i1]]))
            b = int(rng.choice(by_id[ids[i2]]))
            a, b = min(a, b), max(a, b)
            if (a, b) not in seen:
                seen.add((a, b))
                neg.append((a, b, 0))
    return pos + neg


def write_corpus(corpus: SyntheticCorpus, out, n_pairs_per_fold: int = 30) -> None:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for s in corpus.samples:
        save_png(s.image, sample_path(root, s))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_COLUMNS)
        for s in corpus.samples:
            p, l = s.pose, s.light
            writer.writerow([s.split, identity_dir(s.identity), frame_name(s.frame), s.expression, repr(s.magnitude),
                             repr(p.yaw), repr(p.pitch), repr(p.roll), repr(p.tx), repr(p.ty), repr(p.tz),
                             repr(l.ka), repr(l.kd), repr(l.lx), repr(l.ly)])
    pairs = make_pairs(corpus, corpus.seed, n_pairs_per_fold)
    with open(root / "pairs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("img_a", "img_b", "same"))
        for a, b, same in pairs:
            writer.writerow((sample_path("", corpus.samples[a]).as_posix(),
                             sample_path("", corpus.samples[b]).as_posix(), same))
    n_ids = len(corpus.identities)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": corpus.seed,
        "identities": n_ids,
        "frames_per_identity": len(corpus.samples) // max(n_ids, 1),
        "samples": len(corpus.samples),
        "pairs": len(pairs),
        "splits": {k: sorted({s.identity for s in corpus.samples if s.split == k}) for k in ("train", "eval")},
        "ranges": asdict(corpus.ranges),
        "template_seed": TEMPLATE_SEED,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def rerender_from_labels(row: dict, seed: int) -> torch.Tensor:
    """Re-render one sample from its labels.csv row and the corpus seed."""
    ident_no = int(row["identity"])
    ident = gen_identity(identity_seed(seed, ident_no), ident_no)
    pose = renderer.Pose(*(float(row[k]) for k in ("yaw", "pitch", "roll", "tx", "ty", "tz")))
    light = renderer.Light(*(float(row[k]) for k in ("ka", "kd", "lx", "ly")))
    params = [(int(row["class"]), float(row["magnitude"]), pose, light)]
    return render_batch(ident, params)[0]
