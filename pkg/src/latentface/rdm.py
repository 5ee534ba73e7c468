"""Representation diffusion: identity latents generated from expression latents.

The denoiser predicts the clean latent directly. Training uses SNR-weighted
squared error with uniformly drawn timesteps; inference runs a deterministic
DDIM chain over a handful of timesteps.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .data import plan_batches
from .errors import InvalidInputError, NumericalAbort
from .nets import LATENT_DIM, Denoiser, DenoiserArch, IdentityRegressor, init_params, param_count

log = logging.getLogger(__name__)

HEADS = ("texture", "shape")
W_MAX = 1000.0


@dataclass
class DiffusionSchedule:
    """Index 0 holds the empty-product convention (alpha_bar = 1)."""

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    weights: torch.Tensor


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  w_max: float = W_MAX) -> DiffusionSchedule:
    if T < 1:
        raise InvalidInputError("diffusion needs T >= 1")
    betas = torch.cat([torch.zeros(1, dtype=torch.float64),
                       torch.linspace(beta_start, beta_end, T, dtype=torch.float64)])
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    snr = alpha_bars / (1.0 - alpha_bars)  # inf at index 0, clamped below
    weights = torch.clamp(snr, max=w_max)
    return DiffusionSchedule(T, betas, alphas, alpha_bars, weights)


def _check_t(t, sched: DiffusionSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if bool(((t < 1) | (t > sched.T)).any()):
        raise InvalidInputError(f"timestep outside [1, {sched.T}]")
    return t


def q_sample_ab(z0: torch.Tensor, alpha_bar, eps: torch.Tensor) -> torch.Tensor:
    alpha_bar = torch.as_tensor(alpha_bar, dtype=z0.dtype)
    if alpha_bar.dim() == 1 and z0.dim() == 2:
        alpha_bar = alpha_bar[:, None]
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Z_t = sqrt(ab_t) Z_0 + sqrt(1 - ab_t) eps."""
    t = _check_t(t, sched)
    return q_sample_ab(z0, sched.alpha_bars[t].to(z0.dtype), eps)


def rdm_loss(z0: torch.Tensor, cond: torch.Tensor, t, eps: torch.Tensor, net: nn.Module,
             sched: DiffusionSchedule) -> torch.Tensor:
    """Batch mean of w_t * ||Z_0 - net(Z_t, t, cond)||^2."""
    t = _check_t(t, sched)
    if t.dim() == 0:
        t = t.expand(z0.shape[0])
    zt = q_sample(z0, t, eps, sched)
    pred = net(zt, t, cond)
    w = sched.weights[t].to(z0.dtype)
    return (w * (z0 - pred).pow(2).sum(-1)).mean()


def ddim_timesteps(T: int, S: int) -> list[int]:
    if S < 1:
        raise InvalidInputError("DDIM needs S >= 1")
    if S > T:
        raise InvalidInputError(f"S={S} exceeds T={T}")
    return [int(v) for v in np.rint(np.linspace(T, 1, S))]


@torch.no_grad()
def ddim_sample(cond: torch.Tensor, net, sched: DiffusionSchedule, S: int = 5, seed: int = 0) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM chain from seeded noise; returns the last clean-latent prediction.

    Every row of a batch starts from the same seeded noise vector, so a
    result never depends on batch composition.
    """
    single = cond.dim() == 1
    if single:
        cond = cond[None]
    steps = ddim_timesteps(sched.T, S)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(cond.shape[-1], generator=gen, dtype=torch.float64).to(cond.dtype)
    z = z.expand_as(cond).clone()
    ab = sched.alpha_bars.to(cond.dtype)
    x0 = z
    for i, t in enumerate(steps):
        x0 = net(z, torch.full((cond.shape[0],), t, dtype=torch.long), cond)
        if i == len(steps) - 1:
            break
        eps = (z - ab[t].sqrt() * x0) / (1.0 - ab[t]).sqrt()
        nxt = steps[i + 1]
        z = ab[nxt].sqrt() * x0 + (1.0 - ab[nxt]).sqrt() * eps
    return x0[0] if single else x0


def expression_delta(z_exp: torch.Tensor, z_id: torch.Tensor) -> torch.Tensor:
    return z_exp - z_id


# ---------------------------------------------------------------- datasets

@dataclass
class LatentSequence:
    identity: str
    texture: torch.Tensor  # (K,256)
    shape: torch.Tensor    # (K,256)

    def head(self, name: str) -> torch.Tensor:
        if name not in HEADS:
            raise InvalidInputError(f"unknown head {name!r}")
        return self.texture if name == "texture" else self.shape


@dataclass
class RDMExample:
    target: torch.Tensor
    condition: torch.Tensor
    head: str
    identity: str
    frame: int


def sample_frames(k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n frame indices: without replacement if k >= n, else cycled shuffles (balanced)."""
    if k < 1:
        raise InvalidInputError("empty sequence")
    if k >= n:
        return np.sort(rng.choice(k, size=n, replace=False))
    reps = [rng.permutation(k) for _ in range(-(-n // k))]
    return np.concatenate(reps)[:n]


def build_rdm_dataset(sequences: list[LatentSequence], head: str, n: int = 16, seed: int = 0) -> list[RDMExample]:
    """Per sequence: sample n frames, target = their mean, one example per sampled frame."""
    if not sequences:
        raise InvalidInputError("no sequences")
    out = []
    for s_idx, seq in enumerate(sequences):
        lat = seq.head(head)
        rng = np.random.default_rng([int(seed), s_idx])
        idx = sample_frames(lat.shape[0], n, rng)
        target = lat[torch.from_numpy(idx)].mean(0)
        for k in idx:
            out.append(RDMExample(target, lat[int(k)], head, seq.identity, int(k)))
    return out


def save_latent_pack(sequences: list[LatentSequence], path, meta: dict | None = None) -> None:
    tensors = {}
    for seq in sequences:
        for k in range(seq.texture.shape[0]):
            for head in HEADS:
                tensors[f"seq/{seq.identity}/frame/{k}/{head}"] = seq.head(head)[k]
    meta = dict(meta or {})
    meta.setdefault("arch", "latentface-latent-pack")
    meta.setdefault("stage", "latents")
    ckpt.save_checkpoint(tensors, meta, path)


def load_latent_pack(path) -> tuple[list[LatentSequence], dict]:
    tensors, meta = ckpt.load_checkpoint(path)
    frames: dict[str, dict[int, dict[str, torch.Tensor]]] = {}
    for name, t in tensors.items():
        parts = name.split("/")
        if len(parts) != 5 or parts[0] != "seq" or parts[2] != "frame":
            raise ckpt.CorruptCheckpointError(f"unexpected tensor name {name!r} in latent pack")
        frames.setdefault(parts[1], {}).setdefault(int(parts[3]), {})[parts[4]] = t
    seqs = []
    for ident in sorted(frames):
        ks = sorted(frames[ident])
        seqs.append(LatentSequence(ident,
                                   torch.stack([frames[ident][k]["texture"] for k in ks]),
                                   torch.stack([frames[ident][k]["shape"] for k in ks])))
    return seqs, meta


# ---------------------------------------------------------------- models

@dataclass
class Stage2Config:
    T: int = 1000
    S: int = 5
    n: int = 16
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    sample_seed: int = 0
    widths: tuple = (512, 128, 256)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class Standardizer(nn.Module):
    """Per-dimension affine normalisation fitted on training latents."""

    def __init__(self, dim: int = LATENT_DIM):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    def fit(self, latents: torch.Tensor) -> "Standardizer":
        self.mean.copy_(latents.mean(0))
        self.std.copy_(latents.std(0).clamp(min=1e-6))
        return self

    def forward(self, z):
        return (z - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean


class RDM(nn.Module):
    """Denoiser plus latent standardisation for one head."""

    def __init__(self, head: str, cfg: Stage2Config = Stage2Config()):
        super().__init__()
        self.head, self.cfg = head, cfg
        self.arch = DenoiserArch(tuple(cfg.widths), T=cfg.T)
        self.net = Denoiser(widths=tuple(cfg.widths), temb_dim=self.arch.temb_dim, T=cfg.T)
        self.norm = Standardizer()
        self.sched = make_schedule(cfg.T)

    @torch.no_grad()
    def sample(self, z_exp: torch.Tensor, seed: int | None = None, S: int | None = None) -> torch.Tensor:
        seed = self.cfg.sample_seed if seed is None else seed
        out = ddim_sample(self.norm(z_exp), self.net, self.sched, S or self.cfg.S, seed)
        return self.norm.inverse(out)


class IdentityBaseline(nn.Module):
    """Deterministic regressor with the same interface as RDM.sample."""

    def __init__(self, head: str):
        super().__init__()
        self.head = head
        self.net = IdentityRegressor()
        self.norm = Standardizer()

    @torch.no_grad()
    def sample(self, z_exp: torch.Tensor, seed: int | None = None, S: int | None = None) -> torch.Tensor:
        return self.norm.inverse(self.net(self.norm(z_exp)))


def encoder_identity_baseline(z_exp: torch.Tensor, model: IdentityBaseline) -> torch.Tensor:
    return model.sample(z_exp)


def _stack(examples):
    return (torch.stack([e.target for e in examples]), torch.stack([e.condition for e in examples]))


def train_stage2(examples: list[RDMExample], head: str, cfg: Stage2Config, stage1_hash: str = "",
                 out_path=None) -> tuple[RDM, list[dict]]:
    """Train one RDM head on frozen stage-1 latents."""
    if not examples:
        raise InvalidInputError("empty RDM dataset")
    targets, conds = _stack(examples)
    model = RDM(head, cfg)
    init_params(model.net, cfg.seed)
    model.norm.fit(conds)
    zt, zc = model.norm(targets), model.norm(conds)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    gen = torch.Generator().manual_seed(int(cfg.seed) + 1)
    rows, step = [], 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        for idx in plan_batches(len(examples), cfg.batch_size, cfg.seed, epoch):
            idx = torch.from_numpy(idx)
            t = torch.randint(1, cfg.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(len(idx), LATENT_DIM, generator=gen)
            loss = rdm_loss(zt[idx], zc[idx], t, eps, model.net, model.sched)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericalAbort(step, "rdm", value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rows.append({"epoch": epoch, "step": step, "loss": value})
            step += 1
    model.eval()
    if out_path is not None:
        save_rdm(model, out_path, step, stage1_hash)
    return model, rows


def train_identity_baseline(examples: list[RDMExample], head: str, cfg: Stage2Config) -> tuple[IdentityBaseline, list]:
    targets, conds = _stack(examples)
    model = IdentityBaseline(head)
    init_params(model.net, cfg.seed)
    model.norm.fit(conds)
    zt, zc = model.norm(targets), model.norm(conds)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
    rows, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        for idx in plan_batches(len(examples), cfg.batch_size, cfg.seed, epoch):
            idx = torch.from_numpy(idx)
            loss = (zt[idx] - model.net(zc[idx])).pow(2).sum(-1).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rows.append({"epoch": epoch, "step": step, "loss": float(loss.detach())})
            step += 1
    model.eval()
    return model, rows


def rdm_meta(model: RDM, step: int, stage1_hash: str) -> dict:
    return {
        "arch": model.arch.arch_id,
        "stage": 2,
        "head": model.head,
        "step": step,
        "seed": model.cfg.seed,
        "config": model.cfg.to_dict(),
        "config_hash": ckpt.config_hash(model.cfg.to_dict()),
        "stage1_hash": stage1_hash,
        "param_count": param_count(model.net),
    }


def save_rdm(model: RDM, path, step: int = 0, stage1_hash: str = "") -> None:
    ckpt.save_checkpoint(ckpt.module_tensors(model), rdm_meta(model, step, stage1_hash), path)


def load_rdm(path) -> tuple[RDM, dict]:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("stage") != 2:
        raise ckpt.VersionMismatchError(f"{path} is not a stage-2 checkpoint")
    cfg = meta["config"]
    cfg["widths"] = tuple(cfg["widths"])
    model = RDM(meta["head"], Stage2Config(**cfg))
    if model.arch.arch_id != meta["arch"]:
        raise ckpt.VersionMismatchError(f"architecture id mismatch in {path}")
    ckpt.load_module(model, tensors)
    model.eval()
    return model, meta


def write_loss_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("epoch", "step", "loss"))
        writer.writeheader()
        for r in rows:
            writer.writerow({"epoch": r["epoch"], "step": r["step"], "loss": repr(r["loss"])})
