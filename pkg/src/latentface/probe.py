"""Linear probing of frozen features: expression classification and pair verification."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .data import plan_batches
from .errors import InvalidInputError
from .nets import init_params
from .rdm import expression_delta

FEATURE_DIM = 1024


PROBE_INIT_STD = 0.01
PROBE_BATCH = 64


class ProbeHead(nn.Module):
    """Batch normalisation followed by a single linear layer."""

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.norm = nn.BatchNorm1d(dim)
        self.linear = nn.Linear(dim, n_classes)

    def forward(self, x):
        return self.linear(self.norm(x))


@torch.no_grad()
def extract_features(images: torch.Tensor, stage1_model, rdm_texture, rdm_shape, variant: str = "fer",
                     seed: int | None = None, batch_size: int = 128) -> torch.Tensor:
    """Concatenate [Δ or Ẑ0 (texture), Δ or Ẑ0 (shape), Z_exp (texture), Z_exp (shape)] -> (N, 1024).

    `rdm_texture` / `rdm_shape` are anything with a `sample(z, seed=...)`
    method (diffusion heads or the regression baseline).
    """
    if variant not in ("fer", "verify"):
        raise InvalidInputError(f"unknown feature variant {variant!r}")
    stage1_model.eval()
    out = []
    for i in range(0, images.shape[0], batch_size):
        batch = images[i:i + batch_size]
        z_t = stage1_model.tex_enc(batch)
        z_s = stage1_model.shape_enc(batch)
        id_t = rdm_texture.sample(z_t, seed=seed)
        id_s = rdm_shape.sample(z_s, seed=seed)
        if variant == "fer":
            out.append(torch.cat([expression_delta(z_t, id_t), expression_delta(z_s, id_s), z_t, z_s], -1))
        else:
            out.append(torch.cat([id_t, id_s, z_t, z_s], -1))
    return torch.cat(out)


def train_probe(features: torch.Tensor, labels, epochs: int = 20, lr: float = 1e-3, seed: int = 0,
                batch_size: int = PROBE_BATCH, n_classes: int | None = None) -> ProbeHead:
    """Fit normalisation + linear head with cross-entropy; the features stay fixed."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if features.shape[0] == 0:
        raise InvalidInputError("no training features")
    if labels.unique().numel() < 2:
        raise InvalidInputError("probe training needs at least two classes")
    n_classes = n_classes or int(labels.max()) + 1
    features = features.detach().float()
    torch.manual_seed(seed)
    head = init_params(ProbeHead(features.shape[1], n_classes), seed)
    # small linear init as in standard linear probing; fan-in init is too slow to unlearn in 20 epochs
    nn.init.trunc_normal_(head.linear.weight, std=PROBE_INIT_STD, a=-2 * PROBE_INIT_STD, b=2 * PROBE_INIT_STD,
                          generator=torch.Generator().manual_seed(int(seed)))
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    head.train()
    for epoch in range(1, epochs + 1):
        for idx in plan_batches(features.shape[0], batch_size, seed, epoch):
            if len(idx) < 2:
                continue  # batch norm needs two samples
            idx = torch.from_numpy(idx)
            loss = F.cross_entropy(head(features[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    head.eval()
    return head


@torch.no_grad()
def predict(head: ProbeHead, features: torch.Tensor) -> torch.Tensor:
    head.eval()
    return head(features.float()).argmax(-1)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are actual classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Accuracy and macro F1; classes absent from both truth and prediction are skipped."""
    tp = np.diag(cm).astype(np.float64)
    actual = cm.sum(1).astype(np.float64)
    predicted = cm.sum(0).astype(np.float64)
    denom = actual + predicted
    present = denom > 0
    f1 = np.where(present, 2.0 * tp / np.where(present, denom, 1.0), 0.0)
    return {
        "accuracy": float(tp.sum() / cm.sum()),
        "macro_f1": float(f1[present].mean()),
        "per_class_f1": f1.tolist(),
    }


def eval_classification(head: ProbeHead, features: torch.Tensor, labels, n_classes: int | None = None) -> dict:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidInputError("no evaluation samples")
    n_classes = n_classes or head.linear.out_features
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InvalidInputError("labels out of range")
    pred = predict(head, features).numpy()
    cm = confusion_matrix(labels, pred, n_classes)
    return {**metrics_from_confusion(cm), "confusion": cm}


@dataclass
class FoldReport:
    accuracies: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def fold_partition(same, folds: int, seed: int) -> np.ndarray:
    """Fold index per pair, dealt round-robin within each class after a seeded shuffle."""
    same = np.asarray(same, dtype=np.int64)
    rng = np.random.default_rng([int(seed), 0xF01D])
    assign = np.empty(len(same), dtype=np.int64)
    for cls in (0, 1):
        members = np.flatnonzero(same == cls)
        members = members[rng.permutation(len(members))]
        assign[members] = np.arange(len(members)) % folds
    return assign


def pair_features(features: torch.Tensor, pairs) -> torch.Tensor:
    a = torch.as_tensor([p[0] for p in pairs], dtype=torch.long)
    b = torch.as_tensor([p[1] for p in pairs], dtype=torch.long)
    return (features[a] - features[b]).abs()


def verification_crossval(pairs, features: torch.Tensor, seed: int = 0, folds: int = 10,
                          epochs: int = 20, lr: float = 1e-3) -> FoldReport:
    """10-fold same/different accuracy with a fresh probe per fold on |f_a - f_b|."""
    same = np.asarray([int(p[2]) for p in pairs], dtype=np.int64)
    if min((same == 1).sum(), (same == 0).sum()) < folds:
        raise InvalidInputError(f"need at least {folds} positive and {folds} negative pairs")
    x = pair_features(features.float(), pairs)
    assign = fold_partition(same, folds, seed)
    y = torch.from_numpy(same)
    accs = []
    for k in range(folds):
        test = torch.from_numpy(assign == k)
        head = train_probe(x[~test], y[~test], epochs=epochs, lr=lr, seed=seed + k, n_classes=2)
        accs.append(float((predict(head, x[test]) == y[test]).float().mean()))
    return FoldReport(accs)


def _heat_colour(v: float) -> tuple[int, int, int]:
    # white (0) to deep blue (1)
    lo, hi = np.array([255.0, 255.0, 255.0]), np.array([8.0, 48.0, 107.0])
    return tuple(int(round(c)) for c in lo + (hi - lo) * float(np.clip(v, 0, 1)))


def confusion_png(cm: np.ndarray, path, cell: int = 32) -> None:
    """Row-normalised heat map; actual classes on the y axis, predicted on the x axis."""
    c = cm.shape[0]
    rows = cm.sum(1, keepdims=True)
    norm = np.where(rows > 0, cm / np.where(rows > 0, rows, 1), 0.0)
    img = np.zeros((c * cell, c * cell, 3), dtype=np.uint8)
    for i in range(c):
        for j in range(c):
            img[i * cell:(i + 1) * cell, j * cell:(j + 1) * cell] = _heat_colour(norm[i, j])
    Image.fromarray(img).save(path, format="PNG")


def emit_reports(out_dir, metrics: dict | None = None, confusion: np.ndarray | None = None,
                 folds: FoldReport | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if metrics is not None:
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("metric", "value"))
            for k, v in metrics.items():
                writer.writerow((k, f"{float(v):.9g}"))
        written.append(out / "metrics.csv")
    if confusion is not None:
        with open(out / "confusion.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["actual\\predicted"] + [str(j) for j in range(confusion.shape[1])])
            for i, row in enumerate(confusion):
                writer.writerow([str(i)] + [str(int(v)) for v in row])
        confusion_png(confusion, out / "confusion.png")
        written += [out / "confusion.csv", out / "confusion.png"]
    if folds is not None:
        with open(out / "folds.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("fold", "accuracy"))
            for k, a in enumerate(folds.accuracies):
                writer.writerow((k, f"{a:.9g}"))
        written.append(out / "folds.csv")
    return written
