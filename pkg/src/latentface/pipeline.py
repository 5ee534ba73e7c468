"""Glue between the stages: latents per sequence, both RDM heads, probe experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .probe import eval_classification, extract_features, train_probe, verification_crossval
from .rdm import (HEADS, RDM, IdentityBaseline, LatentSequence, Stage2Config, build_rdm_dataset,
                  train_identity_baseline, train_stage2)
from .stage1 import encode_latents


def latent_sequences(model, images: torch.Tensor, identities) -> list[LatentSequence]:
    """Encode images and group the latents by identity, keeping first-seen order."""
    tex, shp = encode_latents(model, images)
    groups: dict[str, list[int]] = {}
    for k, ident in enumerate(identities):
        groups.setdefault(str(ident), []).append(k)
    return [LatentSequence(ident, tex[idx], shp[idx]) for ident, idx in groups.items()]


def train_heads(sequences: list[LatentSequence], cfg: Stage2Config, stage1_hash: str = "",
                out_dir=None) -> dict[str, RDM]:
    heads = {}
    for head in HEADS:
        examples = build_rdm_dataset(sequences, head, cfg.n, cfg.seed)
        path = None if out_dir is None else f"{out_dir}/rdm_{head}.ckpt"
        heads[head], _ = train_stage2(examples, head, cfg, stage1_hash, path)
    return heads


def train_baselines(sequences: list[LatentSequence], cfg: Stage2Config) -> dict[str, IdentityBaseline]:
    return {head: train_identity_baseline(build_rdm_dataset(sequences, head, cfg.n, cfg.seed), head, cfg)[0]
            for head in HEADS}


@dataclass
class RecoveryReport:
    """Median L2 distances to the brute-force sequence mean, per head."""

    sampled: dict
    expression: dict
    baseline: dict | None = None


def identity_recovery(sequences: list[LatentSequence], samplers: dict, baselines: dict | None = None,
                      seed: int = 0) -> RecoveryReport:
    sampled, expression, baseline = {}, {}, {}
    for head in HEADS:
        d_s, d_e, d_b = [], [], []
        for seq in sequences:
            z = seq.head(head)
            mean = z.mean(0, keepdim=True)
            d_s.append((samplers[head].sample(z, seed=seed) - mean).norm(dim=-1))
            d_e.append((z - mean).norm(dim=-1))
            if baselines is not None:
                d_b.append((baselines[head].sample(z) - mean).norm(dim=-1))
        sampled[head] = float(torch.cat(d_s).median())
        expression[head] = float(torch.cat(d_e).median())
        if baselines is not None:
            baseline[head] = float(torch.cat(d_b).median())
    return RecoveryReport(sampled, expression, baseline if baselines is not None else None)


def fer_probe(stage1_model, samplers, train_images, train_labels, eval_images, eval_labels,
              seed: int = 0, epochs: int = 20, lr: float = 1e-3, drop_delta: bool = False,
              sample_seed: int = 0) -> dict:
    """Train a probe on FER features of one split and score it on another.

    drop_delta keeps only the Z_exp half of the feature (the ablated variant).
    """
    f_tr = extract_features(train_images, stage1_model, samplers["texture"], samplers["shape"], "fer", sample_seed)
    f_ev = extract_features(eval_images, stage1_model, samplers["texture"], samplers["shape"], "fer", sample_seed)
    if drop_delta:
        f_tr, f_ev = f_tr[:, 512:], f_ev[:, 512:]
    n_classes = int(max(np.max(train_labels), np.max(eval_labels))) + 1
    head = train_probe(f_tr, train_labels, epochs=epochs, lr=lr, seed=seed, n_classes=n_classes)
    return eval_classification(head, f_ev, eval_labels, n_classes)


def verify_pairs(stage1_model, samplers, images, pairs, seed: int = 0, sample_seed: int = 0, **kw):
    feats = extract_features(images, stage1_model, samplers["texture"], samplers["shape"], "verify", sample_seed)
    return verification_crossval(pairs, feats, seed=seed, **kw), feats
