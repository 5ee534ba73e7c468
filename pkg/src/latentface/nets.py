"""Network architectures for both stages.

All image networks take 3x64x64 inputs in [0, 1]. Widths are configurable so
the same code runs at reduced size inside gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import renderer
from .errors import InvalidInputError

LATENT_DIM = 256
POSE_DIM = 6
LIGHT_DIM = 4
FEATURE_EXTRACTOR_SEED = 20230917


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0 and ch >= 2 * g:
            return g
    return 1


def _down(cin, cout, act, norm=True):
    layers = [nn.Conv2d(cin, cout, 4, 2, 1)]
    if norm:
        layers.append(nn.GroupNorm(_groups(cout), cout))
    layers.append(act())
    return layers


def _up(cin, cout, norm=True):
    layers = [nn.ConvTranspose2d(cin, cout, 4, 2, 1)]
    if norm:
        layers.append(nn.GroupNorm(_groups(cout), cout))
    layers.append(nn.ReLU())
    return layers


def _lrelu():
    return nn.LeakyReLU(0.2)


class FeatureEncoder(nn.Module):
    """Fully convolutional 64 -> 1 encoder producing a latent vector."""

    def __init__(self, width: int = 16, zdim: int = LATENT_DIM, size: int = 64):
        super().__init__()
        chans = [3] + [width * min(2 ** i, 8) for i in range(int(math.log2(size)))]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += _down(cin, cout, _lrelu)
        layers.append(nn.Conv2d(chans[-1], zdim, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).flatten(1)


class NumericEncoder(nn.Module):
    """Conv + ReLU stack ending in tanh; raw outputs live in (-1, 1)."""

    def __init__(self, n_out: int, width: int = 16, size: int = 64):
        super().__init__()
        chans = [3] + [width * min(2 ** i, 8) for i in range(int(math.log2(size)))]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += _down(cin, cout, nn.ReLU, norm=False)
        layers += [nn.Conv2d(chans[-1], n_out, 1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).flatten(1)


class Decoder(nn.Module):
    """Latent vector -> out_ch x size x size map in (-1, 1)."""

    def __init__(self, out_ch: int, width: int = 16, zdim: int = LATENT_DIM, size: int = 64):
        super().__init__()
        n_up = int(math.log2(size // 4))
        chans = [width * min(2 ** i, 8) for i in range(n_up - 1, -1, -1)] + [width]
        layers = [nn.ConvTranspose2d(zdim, chans[0], 4, 1, 0), nn.ReLU(),
                  nn.Conv2d(chans[0], chans[0], 3, 1, 1), nn.GroupNorm(_groups(chans[0]), chans[0]), nn.ReLU()]
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += _up(cin, cout)
        layers += [nn.Conv2d(chans[-1], out_ch, 3, 1, 1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z[:, :, None, None])


class ConfidenceNet(nn.Module):
    """Encoder-decoder emitting pixel-level and feature-level confidence maps.

    The feature-level head branches off early in the decoder (feature-map
    resolution); the pixel-level head continues to full resolution. Both
    have two channels: one for the direct and one for the flipped render.
    """

    def __init__(self, width: int = 16, size: int = 64, feat_size: int = 16, bottleneck: int = 128):
        super().__init__()
        chans = [3] + [width * min(2 ** i, 8) for i in range(int(math.log2(size)))]
        enc = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            enc += _down(cin, cout, _lrelu)
        enc += [nn.Conv2d(chans[-1], bottleneck, 1), nn.ReLU()]
        self.encoder = nn.Sequential(*enc)
        n_short = int(math.log2(feat_size // 4))
        n_long = int(math.log2(size // feat_size))
        c0 = width * min(2 ** (n_short + n_long), 8)
        short = [nn.ConvTranspose2d(bottleneck, c0, 4, 1, 0), nn.ReLU()]
        c = c0
        for _ in range(n_short):
            short += _up(c, max(c // 2, width))
            c = max(c // 2, width)
        self.shared = nn.Sequential(*short)
        self.feat_head = nn.Conv2d(c, 2, 3, 1, 1)
        long = []
        for _ in range(n_long):
            long += _up(c, max(c // 2, width))
            c = max(c // 2, width)
        self.pix_path = nn.Sequential(*long)
        self.pix_head = nn.Conv2d(c, 2, 5, 1, 2)

    def forward(self, x):
        h = self.shared(self.encoder(x))
        sigma_f = F.softplus(self.feat_head(h), beta=1, threshold=20)
        sigma_p = F.softplus(self.pix_head(self.pix_path(h)), beta=1, threshold=20)
        return sigma_p, sigma_f


class FeatureExtractor(nn.Module):
    """Frozen random conv features standing in for a pretrained perceptual net.

    Weights are drawn from a fixed seed and never require gradients;
    gradients still flow to the input image.
    """

    def __init__(self, seed: int = FEATURE_EXTRACTOR_SEED, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, 1, 1), nn.ReLU(),
        )
        init_params(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


class ResLayer(nn.Module):
    def __init__(self, dim: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(dim), dim)
        self.fc1 = nn.Linear(dim, dim)
        self.temb = nn.Linear(temb_dim, dim)
        self.norm2 = nn.GroupNorm(_groups(dim), dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x, temb):
        h = self.fc1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)
        h = self.fc2(F.silu(self.norm2(h)))
        return x + h


class Denoiser(nn.Module):
    """U-shaped latent denoiser predicting the clean latent.

    Input is [noisy latent, condition] (2 * zdim); three stages of two
    residual layers with widths (down, middle, up), and a skip from the
    down stage into the up stage.
    """

    def __init__(self, zdim: int = LATENT_DIM, widths=(512, 128, 256), temb_dim: int = 128, T: int = 1000):
        super().__init__()
        d, m, u = widths
        self.zdim, self.T, self.temb_dim = zdim, T, temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.inp = nn.Linear(2 * zdim, d)
        self.down = nn.ModuleList([ResLayer(d, temb_dim), ResLayer(d, temb_dim)])
        self.to_mid = nn.Linear(d, m)
        self.mid = nn.ModuleList([ResLayer(m, temb_dim), ResLayer(m, temb_dim)])
        self.to_up = nn.Linear(m + d, u)
        self.up = nn.ModuleList([ResLayer(u, temb_dim), ResLayer(u, temb_dim)])
        self.out_norm = nn.GroupNorm(_groups(u), u)
        self.out = nn.Linear(u, zdim)

    def forward(self, z_noisy, t, cond):
        if torch.is_tensor(t):
            t = t.reshape(-1).expand(z_noisy.shape[0]) if t.numel() == 1 else t
        else:
            t = torch.full((z_noisy.shape[0],), int(t))
        if bool(((t < 1) | (t > self.T)).any()):
            raise InvalidInputError(f"timestep out of range [1, {self.T}]")
        temb = self.time_mlp(sinusoidal_embedding(t, self.temb_dim).to(z_noisy.dtype))
        h = self.inp(torch.cat([z_noisy, cond], dim=-1))
        for layer in self.down:
            h = layer(h, temb)
        skip = h
        h = self.to_mid(h)
        for layer in self.mid:
            h = layer(h, temb)
        h = self.to_up(torch.cat([h, skip], dim=-1))
        for layer in self.up:
            h = layer(h, temb)
        return self.out(F.silu(self.out_norm(h)))


class IdentityRegressor(nn.Module):
    """Residual MLP baseline mapping an expression latent to an identity latent."""

    def __init__(self, zdim: int = LATENT_DIM, hidden: int = 512, depth: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Linear(zdim, hidden), nn.SiLU(), nn.Linear(hidden, zdim)) for _ in range(depth)
        )

    def forward(self, z):
        for block in self.blocks:
            z = z + block(z)
        return z


@dataclass(frozen=True)
class Stage1Arch:
    width: int = 16
    conf_width: int = 8
    size: int = 64
    fov: float = 10.0

    @property
    def arch_id(self) -> str:
        return f"latentface-stage1-w{self.width}-c{self.conf_width}-s{self.size}"

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DenoiserArch:
    widths: tuple = (512, 128, 256)
    temb_dim: int = 128
    T: int = 1000

    @property
    def arch_id(self) -> str:
        return "latentface-rdm-" + "-".join(map(str, self.widths)) + f"-t{self.temb_dim}-T{self.T}"


class Stage1Model(nn.Module):
    """Texture/shape/pose/light encoders, texture/shape decoders and confidence net."""

    def __init__(self, arch: Stage1Arch = Stage1Arch()):
        super().__init__()
        self.arch = arch
        w, s = arch.width, arch.size
        self.tex_enc = FeatureEncoder(w, size=s)
        self.shape_enc = FeatureEncoder(w, size=s)
        self.pose_enc = NumericEncoder(POSE_DIM, w, size=s)
        self.light_enc = NumericEncoder(LIGHT_DIM, w, size=s)
        self.tex_dec = Decoder(3, w, size=s)
        self.shape_dec = Decoder(1, w, size=s)
        self.conf = ConfidenceNet(arch.conf_width, size=s, feat_size=s // 4)


# ---------------------------------------------------------------- operations

def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic fan-in uniform init; zero biases; unit/zero norm affines."""
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for name, mod in module.named_modules():
            if isinstance(mod, (nn.GroupNorm, nn.BatchNorm1d, nn.BatchNorm2d, nn.LayerNorm)):
                if mod.weight is not None:
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
            elif isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                weight = mod.weight
                if isinstance(mod, nn.ConvTranspose2d):
                    fan_in = weight.shape[0] * weight[0, 0].numel()
                else:
                    fan_in = weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                weight.copy_(torch.rand(weight.shape, generator=gen, dtype=torch.float64).mul(2).sub(1).mul(bound))
                if mod.bias is not None:
                    mod.bias.zero_()
    return module


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encode_feature(image: torch.Tensor, encoder: FeatureEncoder) -> torch.Tensor:
    """Image (B,3,H,W) or (3,H,W) -> latent (B,256) or (256,)."""
    if image.shape[-3] != 3:
        raise ValueError(f"expected 3-channel image, got shape {tuple(image.shape)}")
    if image.dim() == 3:
        return encoder(image[None])[0]
    return encoder(image)


def encode_numeric(image: torch.Tensor, encoder: NumericEncoder, head: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (raw tanh output, range-mapped Pose or Light tensor)."""
    if image.shape[-3] != 3:
        raise ValueError(f"expected 3-channel image, got shape {tuple(image.shape)}")
    raw = encoder(image[None])[0] if image.dim() == 3 else encoder(image)
    if head == "pose":
        return raw, renderer.pose_from_raw(raw)
    if head == "light":
        return raw, renderer.light_from_raw(raw)
    raise ValueError(f"unknown numeric head {head!r}")


def decode_map(latent: torch.Tensor, decoder: Decoder, head: str) -> torch.Tensor:
    """Latent -> albedo (B,3,H,W) in [0,1] or depth (B,H,W) in [0.9,1.1]."""
    if not torch.isfinite(latent).all():
        raise ValueError("latent contains non-finite values")
    single = latent.dim() == 1
    raw = decoder(latent[None] if single else latent)
    if head == "texture":
        out = renderer.albedo_from_raw(raw)
    elif head == "shape":
        out = renderer.depth_from_raw(raw[:, 0])
    else:
        raise ValueError(f"unknown map head {head!r}")
    return out[0] if single else out


def confidence_forward(image: torch.Tensor, net: ConfidenceNet):
    if image.dim() == 3:
        sp, sf = net(image[None])
        return sp[0], sf[0]
    return net(image)


def denoise_forward(z_noisy, t, cond, net: Denoiser):
    single = z_noisy.dim() == 1
    if single:
        z_noisy, cond = z_noisy[None], cond[None]
    out = net(z_noisy, t, cond)
    return out[0] if single else out
