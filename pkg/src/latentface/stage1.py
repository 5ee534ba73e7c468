"""Stage 1: 3D-aware symmetric autoencoding trained by render-and-compare."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import checkpoint as ckpt
from . import renderer
from .data import plan_batches
from .errors import InvalidInputError, NumericalAbort
from .nets import FeatureExtractor, Stage1Arch, Stage1Model, init_params, param_count

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
LOSS_COLUMNS = ("epoch", "step", "lp", "lf", "lp_flip", "lf_flip", "total")
ABLATIONS = ("light", "pose", "shape", "texture")


@dataclass
class Stage1Config:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    lambda_f: float = 1.0
    lambda_flip: float = 0.5
    seed: int = 0
    disable_light: bool = False
    disable_pose: bool = False
    disable_shape: bool = False
    disable_texture: bool = False
    width: int = 16
    conf_width: int = 8

    def __post_init__(self):
        if self.lambda_f < 0 or self.lambda_flip < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    @property
    def arch(self) -> Stage1Arch:
        return Stage1Arch(width=self.width, conf_width=self.conf_width)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    lp: torch.Tensor
    lf: torch.Tensor
    lp_flip: torch.Tensor
    lf_flip: torch.Tensor
    total: torch.Tensor

    def items(self):
        return [(k, getattr(self, k)) for k in ("lp", "lf", "lp_flip", "lf_flip", "total")]

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self.items()}


@dataclass
class FaceLatents:
    texture: torch.Tensor   # (B,256)
    shape: torch.Tensor     # (B,256)
    pose: torch.Tensor      # (B,6), range-mapped
    light: torch.Tensor     # (B,4), range-mapped


class AutoencodeOutput(NamedTuple):
    latents: FaceLatents
    albedo: torch.Tensor
    depth: torch.Tensor
    recon: renderer.RenderOutput
    recon_flip: renderer.RenderOutput
    sigma_p: torch.Tensor
    sigma_f: torch.Tensor


def conf_loss(pred: torch.Tensor, target: torch.Tensor, sigma: torch.Tensor,
              mask: torch.Tensor | None = None) -> torch.Tensor:
    """Laplacian negative log-likelihood with per-pixel scale sigma.

    Per sample: mean over masked positions (and channels) of
    ln(sqrt(2) sigma) + sqrt(2) |pred - target| / sigma; averaged over the batch.
    Shapes: pred/target (B,C,H,W), sigma broadcastable (B,1,H,W), mask (B,H,W).
    """
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if bool((sigma <= 0).any()):
        raise InvalidInputError("confidence map must be strictly positive")
    nll = torch.log(SQRT2 * sigma) + SQRT2 * (pred - target).abs() / sigma
    nll = nll.expand_as(pred)
    if mask is None:
        return nll.flatten(1).mean(1).mean()
    m = mask[:, None].to(nll.dtype).expand_as(nll)
    counts = m.flatten(1).sum(1)
    if bool((counts == 0).any()):
        raise InvalidInputError("empty mask in conf_loss")
    return ((nll * m).flatten(1).sum(1) / counts).mean()


def reconstruction_loss(image, recon: renderer.RenderOutput, recon_flip: renderer.RenderOutput,
                        sigma_p, sigma_f, cfg: Stage1Config, feat: FeatureExtractor) -> LossReport:
    """Pixel + feature terms for the direct and the flipped reconstruction."""
    lp = conf_loss(recon.image, image, sigma_p[:, 0:1], recon.mask)
    lp_flip = conf_loss(recon_flip.image, image, sigma_p[:, 1:2], recon_flip.mask)
    f_in, f_rec, f_flip = feat(torch.cat([image, recon.image, recon_flip.image])).chunk(3)
    lf = conf_loss(f_rec, f_in, sigma_f[:, 0:1])
    lf_flip = conf_loss(f_flip, f_in, sigma_f[:, 1:2])
    total = lp + cfg.lambda_f * lf + cfg.lambda_flip * (lp_flip + cfg.lambda_f * lf_flip)
    return LossReport(lp, lf, lp_flip, lf_flip, total)


def forward_autoencode(image: torch.Tensor, model: Stage1Model, cfg: Stage1Config,
                       cam: renderer.Camera | None = None) -> AutoencodeOutput:
    """Encode, decode to a canonical face, and render it directly and flipped."""
    cam = cam or renderer.Camera(model.arch.fov)
    bsz = image.shape[0]
    z_tex = model.tex_enc(image)
    z_shape = model.shape_enc(image)
    if cfg.disable_pose:
        pose = image.new_zeros(bsz, 6)
    else:
        pose = renderer.pose_from_raw(model.pose_enc(image))
    if cfg.disable_light:
        light = renderer.NEUTRAL_LIGHT.as_tensor(image.dtype).expand(bsz, 4)
    else:
        light = renderer.light_from_raw(model.light_enc(image))
    size = image.shape[-1]
    if cfg.disable_texture:
        albedo = image.new_full((bsz, 3, size, size), 0.5)
    else:
        albedo = renderer.albedo_from_raw(model.tex_dec(z_tex))
    if cfg.disable_shape:
        depth = image.new_ones(bsz, size, size)
    else:
        depth = renderer.depth_from_raw(model.shape_dec(z_shape)[:, 0])
    recon = renderer.render(albedo, depth, pose, light, cam)
    recon_flip = renderer.render_flipped(albedo, depth, pose, light, cam)
    sigma_p, sigma_f = model.conf(image)
    return AutoencodeOutput(FaceLatents(z_tex, z_shape, pose, light), albedo, depth,
                            recon, recon_flip, sigma_p, sigma_f)


def build_model(cfg: Stage1Config) -> Stage1Model:
    return init_params(Stage1Model(cfg.arch), cfg.seed)


def stage1_meta(model: Stage1Model, cfg: Stage1Config, step: int, epoch: int) -> dict:
    return {
        "arch": model.arch.arch_id,
        "arch_params": model.arch.to_dict(),
        "stage": 1,
        "step": step,
        "epoch": epoch,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": ckpt.config_hash(cfg.to_dict()),
        "lambda_f": cfg.lambda_f,
        "lambda_flip": cfg.lambda_flip,
        "param_counts": {name: param_count(m) for name, m in model.named_children()},
    }


def save_stage1(model: Stage1Model, cfg: Stage1Config, path, step: int = 0, epoch: int = 0) -> bytes:
    return ckpt.save_checkpoint(ckpt.module_tensors(model), stage1_meta(model, cfg, step, epoch), path)


def load_stage1(path) -> tuple[Stage1Model, Stage1Config, dict]:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("stage") != 1:
        raise ckpt.VersionMismatchError(f"{path} is not a stage-1 checkpoint")
    cfg = Stage1Config(**meta["config"])
    model = Stage1Model(Stage1Arch(**meta["arch_params"]))
    if model.arch.arch_id != meta["arch"]:
        raise ckpt.VersionMismatchError(f"architecture id mismatch in {path}")
    ckpt.load_module(model, tensors)
    model.eval()
    return model, cfg, meta


@dataclass
class TrainResult:
    model: Stage1Model
    rows: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)
    last_path: Path | None = None
    best_path: Path | None = None


def _check_finite(report: LossReport, step: int) -> None:
    for name, value in report.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise NumericalAbort(step, name, v)


def train_stage1(images: torch.Tensor, cfg: Stage1Config, out_dir=None, progress=None) -> TrainResult:
    """Fit all stage-1 networks with Adam on an in-memory image tensor (N,3,64,64).

    Writes loss.csv, last.ckpt and best.ckpt (lowest epoch-mean total) into
    out_dir when given.
    """
    n = images.shape[0]
    if n == 0:
        raise InvalidInputError("empty dataset")
    model = build_model(cfg)
    model.train()
    feat = FeatureExtractor()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    result = TrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best = math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        totals = []
        for idx in plan_batches(n, cfg.batch_size, cfg.seed, epoch):
            batch = images[torch.from_numpy(idx)]
            out = forward_autoencode(batch, model, cfg)
            report = reconstruction_loss(batch, out.recon, out.recon_flip, out.sigma_p, out.sigma_f, cfg, feat)
            _check_finite(report, step)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            row = {"epoch": epoch, "step": step, **report.as_floats()}
            result.rows.append(row)
            totals.append(row["total"])
            step += 1
        mean_total = float(np.mean(totals))
        result.epoch_means.append(mean_total)
        log.info("stage1 epoch %d mean total %.5f", epoch, mean_total)
        if progress is not None:
            progress(epoch, mean_total)
        if out_dir is not None:
            save_stage1(model, cfg, out_dir / "last.ckpt", step, epoch)
            if mean_total < best:
                best = mean_total
                save_stage1(model, cfg, out_dir / "best.ckpt", step, epoch)
    model.eval()
    if out_dir is not None:
        write_loss_csv(result.rows, out_dir / "loss.csv")
        result.last_path = out_dir / "last.ckpt"
        result.best_path = out_dir / "best.ckpt"
    return result


def write_loss_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOSS_COLUMNS})


def psnr(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-image PSNR in dB for images in [0, 1]; pred is clamped first."""
    mse = (pred.clamp(0, 1) - target).pow(2).flatten(1).mean(1)
    return 10.0 * torch.log10(1.0 / mse.clamp(min=1e-12))


@torch.no_grad()
def evaluate(model: Stage1Model, images: torch.Tensor, cfg: Stage1Config, batch_size: int = 64) -> dict:
    """Reconstruction PSNR and predicted pose/light over a held-out image set."""
    model.eval()
    psnrs, poses, lights, tex, shp = [], [], [], [], []
    for i in range(0, images.shape[0], batch_size):
        batch = images[i:i + batch_size]
        out = forward_autoencode(batch, model, cfg)
        psnrs.append(psnr(out.recon.image, batch))
        poses.append(out.latents.pose)
        lights.append(out.latents.light)
        tex.append(out.latents.texture)
        shp.append(out.latents.shape)
    return {
        "psnr": torch.cat(psnrs),
        "pose": torch.cat(poses),
        "light": torch.cat(lights),
        "texture": torch.cat(tex),
        "shape": torch.cat(shp),
    }


@torch.no_grad()
def encode_latents(model: Stage1Model, images: torch.Tensor, batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Texture and shape latents (N,256) each, eval mode."""
    model.eval()
    tex, shp = [], []
    for i in range(0, images.shape[0], batch_size):
        batch = images[i:i + batch_size]
        tex.append(model.tex_enc(batch))
        shp.append(model.shape_enc(batch))
    return torch.cat(tex), torch.cat(shp)
