"""Finite-difference gradient checks and exact-property checks.

Both suites return lists of `CheckResult`; nothing here raises on a failed
check so the CLI can print a full report.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from . import renderer
from .nets import ConfidenceNet, Decoder, Denoiser, FeatureEncoder, FeatureExtractor, Stage1Arch, Stage1Model, init_params
from .rdm import ddim_sample, make_schedule
from .stage1 import Stage1Config, conf_loss, forward_autoencode, reconstruction_loss

GRAD_TOL = 1e-3
FD_STEP = 1e-3
GRAD_SIZE = 8
GRAD_SEEDS = tuple(range(10))
NET_SIZE = 16


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34s} {self.value:.3e}  (tol {self.tol:.0e})"


def _result(name: str, value: float, tol: float) -> CheckResult:
    return CheckResult(name, float(value), tol, bool(value < tol))


def central_difference(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    """Numerical gradient of a scalar function, one coordinate at a time."""
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * h)
    return grad.view_as(x)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-2) -> float:
    """max |a - n| / max(|a|, |n|, floor * max|n|).

    The floor keeps near-zero entries (where any difference looks relatively
    huge) from dominating; it is a fixed fraction of the group's largest
    numerical gradient.
    """
    a = analytic.detach().double().reshape(-1)
    n = numeric.detach().double().reshape(-1)
    scale = max(float(n.abs().max()), 1e-12)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(n, floor * scale))
    return float(((a - n).abs() / denom).max())


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


# ---------------------------------------------------------------- renderer gradients

@dataclass
class RenderProblem:
    albedo: torch.Tensor
    depth: torch.Tensor
    pose: torch.Tensor
    light: torch.Tensor
    target: torch.Tensor
    face_id: torch.Tensor
    cam: renderer.Camera


def render_problem(seed: int, size: int = GRAD_SIZE, flipped: bool = False) -> RenderProblem:
    """Random float64 scene whose L1 loss is smooth near the sampled point.

    Depth is a gentle random field so n.L stays positive under head-on-ish
    light, and the target sits at least 0.1 away from the render so no
    residual changes sign under a step of FD_STEP. The triangle assignment
    is computed once and reused: rasterization is deliberately
    non-differentiable, so silhouette effects are excluded.
    """
    g = torch.Generator().manual_seed(int(seed))
    dt = torch.float64
    albedo = 0.2 + 0.6 * torch.rand(3, size, size, generator=g, dtype=dt)
    depth = 1.0 + 0.03 * torch.randn(size, size, generator=g, dtype=dt)
    pose = (torch.rand(6, generator=g, dtype=dt) * 2 - 1) * torch.tensor(
        [0.3, 0.2, 0.2, 0.05, 0.05, 0.05], dtype=dt)
    light = torch.cat([0.3 + 0.4 * torch.rand(2, generator=g, dtype=dt),
                       (torch.rand(2, generator=g, dtype=dt) * 2 - 1) * 0.4])
    cam = renderer.Camera()
    fn = renderer.render_flipped if flipped else renderer.render
    out = fn(albedo, depth, pose, light, cam)
    signs = torch.where(torch.rand(3, size, size, generator=g, dtype=dt) < 0.5, -1.0, 1.0)
    target = out.image + signs * (0.1 + 0.2 * torch.rand(3, size, size, generator=g, dtype=dt))
    return RenderProblem(albedo, depth, pose, light, target, out.face_id, cam)


def _render_loss(p: RenderProblem, flipped: bool = False, **override) -> torch.Tensor:
    args = dict(albedo=p.albedo, depth=p.depth, pose=p.pose, light=p.light)
    args.update(override)
    fn = renderer.render_flipped if flipped else renderer.render
    out = fn(args["albedo"], args["depth"], args["pose"], args["light"], p.cam, face_id=p.face_id)
    m = out.mask[None].to(out.image.dtype)
    return ((out.image - p.target).abs() * m).sum()


def renderer_grad_errors(seed: int, flipped: bool = False, h: float = FD_STEP) -> dict[str, float]:
    """Relative error per parameter group for one seed."""
    p = render_problem(seed, flipped=flipped)
    errs = {}
    for group in ("albedo", "depth", "pose", "light"):
        x = getattr(p, group)

        def fn(v, group=group):
            return _render_loss(p, flipped=flipped, **{group: v})

        errs[group] = relative_error(analytic_gradient(fn, x), central_difference(fn, x, h))
    return errs


def renderer_grad_suite(seeds=GRAD_SEEDS, h: float = FD_STEP) -> tuple[list[CheckResult], dict]:
    worst: dict[str, float] = {}
    for flipped in (False, True):
        for seed in seeds:
            for group, err in renderer_grad_errors(seed, flipped, h).items():
                key = f"render{'_flip' if flipped else ''}/{group}"
                worst[key] = max(worst.get(key, 0.0), err)
    return [_result(f"grad {k}", v, GRAD_TOL) for k, v in worst.items()], worst


# ---------------------------------------------------------------- network and loss gradients

def _directional_check(fn, params: list[torch.Tensor], seed: int, steps=(1e-6, 1e-7)) -> float:
    """Compare grad . v with central differences along a random direction v.

    Returns the smaller error over the step sizes: a wrong gradient is off at
    every step, while a rectifier kink crossed by one step is not crossed by
    the other.
    """
    return min(_directional_error(fn, params, seed, h) for h in steps)


def _directional_error(fn, params: list[torch.Tensor], seed: int, h: float) -> float:
    g = torch.Generator().manual_seed(int(seed))
    dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
    loss = fn()
    grads = torch.autograd.grad(loss, params)
    analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs))
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(h * d)
        up = float(fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        down = float(fn())
        for p, d in zip(params, dirs):
            p.add_(h * d)
    numeric = (up - down) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def network_grad_suite(seeds=(0, 1, 2)) -> tuple[list[CheckResult], dict]:
    """Directional finite-difference checks on small float64 networks and the confidence loss.

    Inputs are 16 px: at 64 px the perturbation pushes a few of the ~1e5
    rectifier units across their kink, which swamps the comparison.
    """
    worst: dict[str, float] = {}

    def record(key, err):
        worst[key] = max(worst.get(key, 0.0), err)

    for seed in seeds:
        g = torch.Generator().manual_seed(seed)
        dt = torch.float64
        # confidence loss w.r.t. prediction and scale
        pred = torch.rand(2, 3, 6, 6, generator=g, dtype=dt)
        target = pred + 0.1 + 0.2 * torch.rand(2, 3, 6, 6, generator=g, dtype=dt)
        sigma = 0.5 + torch.rand(2, 1, 6, 6, generator=g, dtype=dt)
        mask = torch.rand(2, 6, 6, generator=g) < 0.7
        pred.requires_grad_(True)
        sigma.requires_grad_(True)
        record("conf_loss", _directional_check(lambda: conf_loss(pred, target, sigma, mask), [pred, sigma], seed))

        enc = init_params(FeatureEncoder(width=2, size=NET_SIZE), seed).double()
        img = torch.rand(2, 3, NET_SIZE, NET_SIZE, generator=g, dtype=dt).requires_grad_(True)
        w = torch.randn(2, 256, generator=g, dtype=dt)
        record("feature_encoder", _directional_check(lambda: (enc(img) * w).sum(),
                                                     list(enc.parameters()) + [img], seed))

        dec = init_params(Decoder(3, width=2, size=NET_SIZE), seed).double()
        z0 = torch.randn(2, 256, generator=g, dtype=dt).requires_grad_(True)
        wd = torch.randn(2, 3, NET_SIZE, NET_SIZE, generator=g, dtype=dt)
        record("decoder", _directional_check(lambda: (dec(z0) * wd).sum(), list(dec.parameters()) + [z0], seed))

        conf = init_params(ConfidenceNet(width=2, size=NET_SIZE, feat_size=NET_SIZE // 4), seed).double()
        record("confidence_net", _directional_check(lambda: sum(s.log().sum() for s in conf(img)),
                                                    list(conf.parameters()), seed))

        den = init_params(Denoiser(zdim=16, widths=(32, 16, 32), temb_dim=16, T=1000), seed).double()
        z = torch.randn(3, 16, generator=g, dtype=dt)
        c = torch.randn(3, 16, generator=g, dtype=dt)
        t = torch.tensor([1, 500, 1000])
        record("denoiser", _directional_check(lambda: den(z, t, c).pow(2).sum(), list(den.parameters()), seed))
    return [_result(f"grad {k}", v, GRAD_TOL) for k, v in worst.items()], worst


def pipeline_grad_error(seed: int, size: int = 16) -> float:
    """Total stage-1 loss w.r.t. the texture latent, through decoder, renderer and both loss levels.

    16 px is the smallest resolution the confidence net's short path supports.
    """
    torch.manual_seed(seed)
    cfg = Stage1Config(width=2, conf_width=2)
    model = init_params(Stage1Model(Stage1Arch(width=2, conf_width=2, size=size)), seed).double()
    feat = FeatureExtractor(width=4).double()
    g = torch.Generator().manual_seed(int(seed))
    image = torch.rand(2, 3, size, size, generator=g, dtype=torch.float64)
    with torch.no_grad():
        base = forward_autoencode(image, model, cfg)
    pose, light, depth = base.latents.pose, base.latents.light, base.depth
    sigma_p, sigma_f = base.sigma_p, base.sigma_f
    z = base.latents.texture.clone().requires_grad_(True)
    face_id = base.recon.face_id
    flip_id = base.recon_flip.face_id

    def loss():
        albedo = renderer.albedo_from_raw(model.tex_dec(z))
        recon = renderer.render(albedo, depth, pose, light, face_id=face_id)
        flip = renderer.render_flipped(albedo, depth, pose, light, face_id=flip_id)
        return reconstruction_loss(image, recon, flip, sigma_p, sigma_f, cfg, feat).total

    return _directional_check(loss, [z], seed)


def grad_suite(seeds=GRAD_SEEDS) -> list[CheckResult]:
    r, _ = renderer_grad_suite(seeds)
    n, _ = network_grad_suite()
    worst = max(pipeline_grad_error(s) for s in (0, 1, 2))
    return r + n + [_result("grad pipeline/texture_latent", worst, GRAD_TOL)]


# ---------------------------------------------------------------- exact properties

def smooth_field(seed: int, size: int = 64, channels: int | None = None) -> torch.Tensor:
    """Sum of a few random low-frequency cosines, in roughly [-1, 1]."""
    g = torch.Generator().manual_seed(int(seed))
    x, y = renderer.grid_xy(size, size, torch.float64)
    shape = (channels,) if channels else ()
    out = torch.zeros(*shape, size, size, dtype=torch.float64)
    for _ in range(4):
        kx, ky, ph = (torch.rand(3, *shape, 1, 1, generator=g, dtype=torch.float64) * torch.tensor(
            [3.0, 3.0, 6.28], dtype=torch.float64).view(3, *([1] * (len(shape) + 2))))
        out = out + 0.25 * torch.cos(kx * x + ky * y + ph)
    return out


def focal_length_error() -> float:
    return abs(renderer.Camera().f - 1.0 / (2.0 * math.tan(math.radians(5.0))))


def invariants_suite() -> list[CheckResult]:
    res = []
    dt = torch.float64
    cam = renderer.Camera()

    res.append(_result("focal length", focal_length_error(), 1e-9))

    m = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0), dtype=dt)
    res.append(_result("hflip involution", float((renderer.hflip(renderer.hflip(m)) - m).abs().max()), 1e-12))

    n = renderer.compute_normals(torch.ones(64, 64, dtype=dt))
    ez = torch.tensor([0.0, 0.0, 1.0], dtype=dt)[:, None, None]
    res.append(_result("constant-depth normals", float((n - ez).abs().max()), 1e-12))

    x, _ = renderer.grid_xy(64, 64, dt)
    n = renderer.compute_normals(1.0 + 0.1 * x)
    expect = torch.tensor([-0.1, 0.0, 1.0], dtype=dt) / math.sqrt(1.01)
    res.append(_result("plane normals", float((n[:, 1:-1, 1:-1] - expect[:, None, None]).abs().max()), 1e-12))

    d = 1.0 + 0.1 * smooth_field(3)
    n = renderer.compute_normals(d)
    res.append(_result("unit normals", float((n.norm(dim=0) - 1).abs().max()), 1e-6))

    albedo = 0.5 + 0.5 * smooth_field(1, channels=3)
    out = renderer.render(albedo, torch.ones(64, 64, dtype=dt), renderer.IDENTITY_POSE,
                          renderer.Light(1.0, 0.0, 0.0, 0.0), cam)
    res.append(_result("identity-pose render", float((out.image - albedo).abs().max()), 1e-3))
    res.append(_result("identity-pose coverage", float((~out.mask).sum()), 0.5))

    light = renderer.Light(0.5, 0.5, 0.0, 0.3)
    d = 1.0 + 0.08 * smooth_field(2)
    a = 0.5 + 0.5 * smooth_field(4, channels=3)
    direct = renderer.render(a, d, renderer.IDENTITY_POSE, light, cam).image
    flip = renderer.render_flipped(a, d, renderer.IDENTITY_POSE, light, cam).image
    res.append(_result("frontal mirror symmetry", float((flip - renderer.hflip(direct)).abs().max()), 1e-3))

    ones = torch.ones(1, 3, 4, 4, dtype=dt)
    diff = torch.rand(1, 3, 4, 4, generator=torch.Generator().manual_seed(5), dtype=dt)
    s = torch.full((1, 1, 4, 4), 1 / math.sqrt(2), dtype=dt)
    closed = float(conf_loss(ones + diff, ones, s)) - 2.0 * float(diff.mean())
    res.append(_result("conf_loss sigma=1/sqrt2", abs(closed), 1e-12))
    s = torch.full((1, 1, 4, 4), 0.37, dtype=dt)
    res.append(_result("conf_loss perfect recon", abs(float(conf_loss(ones, ones, s)) - math.log(math.sqrt(2) * 0.37)),
                       1e-12))

    sched = make_schedule()

    def const(z, t, c):
        return torch.full_like(z, 0.731)

    worst = 0.0
    for steps in (1, 2, 5, 50):
        z = ddim_sample(torch.zeros(2, 8, dtype=dt), const, sched, S=steps, seed=11)
        worst = max(worst, float((z - 0.731).abs().max()))
    res.append(_result("ddim constant oracle", worst, 1e-6))
    return res


def run_suite(name: str) -> list[CheckResult]:
    if name == "grad":
        return grad_suite()
    if name == "invariants":
        return invariants_suite()
    if name == "all":
        return invariants_suite() + grad_suite()
    raise ValueError(f"unknown suite {name!r}")
