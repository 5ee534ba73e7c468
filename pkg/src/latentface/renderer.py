"""Differentiable grid-mesh renderer.

A canonical face is an albedo map (3xHxW) and a depth map (HxW) on the
regular [-1, 1]^2 grid. Rendering shades the canonical maps with a diffuse
(ambient + Lambert) model, places the grid mesh in front of a pinhole camera,
applies the head pose and rasterizes with a hard z-buffer. Gradients flow
through shading and through the barycentric interpolation of per-vertex
colours; the choice of covering triangle is not differentiated.

Tensors may carry a leading batch dimension; unbatched inputs are accepted
by the public entry points and return unbatched outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np
import torch

from .errors import DegeneratePoseError, InvalidInputError

IMAGE_SIZE = 64

YAW_LIMIT = math.radians(60.0)
PITCH_LIMIT = math.radians(30.0)
ROLL_LIMIT = math.radians(30.0)
TRANSLATION_LIMIT = 0.1
POSE_SCALE = (YAW_LIMIT, PITCH_LIMIT, ROLL_LIMIT,
              TRANSLATION_LIMIT, TRANSLATION_LIMIT, TRANSLATION_LIMIT)

DEPTH_CENTER = 1.0
DEPTH_RANGE = 0.1

# barycentric slack so pixel centres sitting exactly on shared edges are covered
_INSIDE_EPS = 1e-5
_MIN_AREA = 1e-12


@dataclass(frozen=True)
class Camera:
    fov: float = 10.0

    @property
    def f(self) -> float:
        return 1.0 / (2.0 * math.tan(math.radians(self.fov) / 2.0))

    @property
    def z_offset(self) -> float:
        # canonical depth 1 lands at distance f, i.e. unit magnification
        return self.f - DEPTH_CENTER


@dataclass(frozen=True)
class Pose:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.yaw, self.pitch, self.roll, self.tx, self.ty, self.tz], dtype=dtype)


@dataclass(frozen=True)
class Light:
    ka: float = 0.7
    kd: float = 0.3
    lx: float = 0.0
    ly: float = 0.0

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.ka, self.kd, self.lx, self.ly], dtype=dtype)


IDENTITY_POSE = Pose()
NEUTRAL_LIGHT = Light(0.7, 0.3, 0.0, 0.0)


class RenderOutput(NamedTuple):
    image: torch.Tensor    # (B,3,H,W), unclamped
    mask: torch.Tensor     # (B,H,W) bool
    face_id: torch.Tensor  # (B,H,W) long, -1 where uncovered


# ---------------------------------------------------------------- range maps

def pose_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """Map tanh outputs in (-1, 1) to (yaw, pitch, roll, tx, ty, tz)."""
    return raw * raw.new_tensor(POSE_SCALE)


def light_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """Map tanh outputs to (ka, kd, lx, ly): coefficients in [0,1], direction in [-1,1]."""
    coeff = (raw[..., :2] + 1.0) / 2.0
    return torch.cat([coeff, raw[..., 2:]], dim=-1)


def depth_from_raw(raw: torch.Tensor) -> torch.Tensor:
    return DEPTH_CENTER + DEPTH_RANGE * raw


def albedo_from_raw(raw: torch.Tensor) -> torch.Tensor:
    return (raw + 1.0) / 2.0


def light_direction(light: torch.Tensor) -> torch.Tensor:
    d = torch.stack([light[..., 2], light[..., 3], torch.ones_like(light[..., 2])], dim=-1)
    return d / d.norm(dim=-1, keepdim=True)


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, (Pose, Light)):
        return x.as_tensor(like.dtype)
    return torch.as_tensor(x, dtype=like.dtype)


# ---------------------------------------------------------------- geometry

def grid_xy(h: int, w: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Grid coordinates; row 0 is y = -1 and column 0 is x = -1."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    return torch.meshgrid(ys, xs, indexing="ij")[::-1]


def grid_faces(h: int, w: int) -> torch.Tensor:
    """Two triangles per grid cell.

    Cells left of the vertical midline split along the (i,j)-(i+1,j+1)
    diagonal, cells right of it along the mirrored diagonal, so the mesh is
    mirror-symmetric except for the central cell column when W is even.
    """
    i, j = torch.meshgrid(torch.arange(h - 1), torch.arange(w - 1), indexing="ij")
    v00 = (i * w + j).reshape(-1)
    v01 = v00 + 1
    v10 = v00 + w
    v11 = v10 + 1
    left = (j.reshape(-1) <= (w - 2) // 2)[:, None]
    first = torch.where(left, torch.stack([v00, v10, v11], -1), torch.stack([v00, v10, v01], -1))
    second = torch.where(left, torch.stack([v00, v11, v01], -1), torch.stack([v10, v11, v01], -1))
    return torch.stack([first, second], dim=1).reshape(-1, 3)


def build_grid_mesh(depth: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return vertices (..., H*W, 3) and faces (2(H-1)(W-1), 3)."""
    if not torch.isfinite(depth).all():
        raise InvalidInputError("depth map contains non-finite values")
    h, w = depth.shape[-2:]
    x, y = grid_xy(h, w, depth.dtype)
    x = x.expand_as(depth)
    y = y.expand_as(depth)
    verts = torch.stack([x, y, depth], dim=-1).reshape(*depth.shape[:-2], h * w, 3)
    return verts, grid_faces(h, w)


def _grid_derivative(z: torch.Tensor, dim: int, spacing: float) -> torch.Tensor:
    n = z.shape[dim]
    lo = z.narrow(dim, 1, 1) - z.narrow(dim, 0, 1)
    hi = z.narrow(dim, n - 1, 1) - z.narrow(dim, n - 2, 1)
    if n == 2:
        return torch.cat([lo, hi], dim=dim) / spacing
    mid = (z.narrow(dim, 2, n - 2) - z.narrow(dim, 0, n - 2)) / 2.0
    return torch.cat([lo, mid, hi], dim=dim) / spacing


def compute_normals(depth: torch.Tensor) -> torch.Tensor:
    """Unit normals (..., 3, H, W) with positive z, from central differences."""
    h, w = depth.shape[-2:]
    dzdx = _grid_derivative(depth, -1, 2.0 / (w - 1))
    dzdy = _grid_derivative(depth, -2, 2.0 / (h - 1))
    n = torch.stack([-dzdx, -dzdy, torch.ones_like(depth)], dim=-3)
    return n / n.norm(dim=-3, keepdim=True)


def shade(albedo: torch.Tensor, normals: torch.Tensor, light) -> torch.Tensor:
    """Diffuse shading albedo * (ka + kd * max(0, n.L)); no clamping."""
    light = _as_tensor(light, albedo)
    direction = light_direction(light)[..., :, None, None]
    n_dot_l = torch.relu((normals * direction).sum(dim=-3, keepdim=True))
    ka = light[..., 0, None, None, None]
    kd = light[..., 1, None, None, None]
    return albedo * (ka + kd * n_dot_l)


def rotation_matrix(yaw: torch.Tensor, pitch: torch.Tensor, roll: torch.Tensor) -> torch.Tensor:
    """R = Rz(roll) @ Rx(pitch) @ Ry(yaw), shape (..., 3, 3)."""
    one, zero = torch.ones_like(yaw), torch.zeros_like(yaw)
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    cp, sp = torch.cos(pitch), torch.sin(pitch)
    cr, sr = torch.cos(roll), torch.sin(roll)
    ry = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(*yaw.shape, 3, 3)
    rx = torch.stack([one, zero, zero, zero, cp, -sp, zero, sp, cp], -1).reshape(*yaw.shape, 3, 3)
    rz = torch.stack([cr, -sr, zero, sr, cr, zero, zero, zero, one], -1).reshape(*yaw.shape, 3, 3)
    return rz @ rx @ ry


def transform_vertices(verts: torch.Tensor, pose: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Rotate about the canonical face centre, then push to the camera distance.

    For the identity pose a vertex (x, y, z) maps to (x, y, z + z_offset).
    """
    rot = rotation_matrix(pose[..., 0], pose[..., 1], pose[..., 2])
    centre = verts.new_tensor([0.0, 0.0, DEPTH_CENTER])
    out = (verts - centre) @ rot.transpose(-1, -2)
    shift = pose[..., 3:6] + verts.new_tensor([0.0, 0.0, cam.f])
    return out + shift[..., None, :]


def project(verts_cam: torch.Tensor, cam: Camera, h: int, w: int) -> torch.Tensor:
    """Pinhole projection to pixel coordinates (col, row); screen [-1,1] spans the image."""
    z = verts_cam[..., 2]
    if bool((z <= 0).any()):
        raise DegeneratePoseError("a transformed vertex lies at or behind the camera plane")
    u = cam.f * verts_cam[..., 0] / z
    v = cam.f * verts_cam[..., 1] / z
    return torch.stack([(u + 1.0) * (w - 1) / 2.0, (v + 1.0) * (h - 1) / 2.0], dim=-1)


def _cross(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _barycentric(tri: torch.Tensor, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """tri (..., 3, 2), p (..., 2) -> weights (..., 3) and signed doubled area (...)."""
    a, b, c = tri.unbind(-2)
    area = _cross(b - a, c - a)
    return torch.stack([_cross(b - p, c - p), _cross(c - p, a - p), _cross(a - p, b - p)], -1), area


@numba.njit(cache=True)
def _zbuffer(screen, depth_z, faces, h, w, face_id):
    bsz = screen.shape[0]
    zbuf = np.empty(h * w)
    for b in range(bsz):
        zbuf[:] = np.inf
        for f in range(faces.shape[0]):
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            ax, ay = screen[b, i0, 0], screen[b, i0, 1]
            bx, by = screen[b, i1, 0], screen[b, i1, 1]
            cx, cy = screen[b, i2, 0], screen[b, i2, 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if abs(area) <= _MIN_AREA:
                continue
            x0 = max(int(np.ceil(min(ax, bx, cx) - 1e-4)), 0)
            x1 = min(int(np.floor(max(ax, bx, cx) + 1e-4)), w - 1)
            y0 = max(int(np.ceil(min(ay, by, cy) - 1e-4)), 0)
            y1 = min(int(np.floor(max(ay, by, cy) + 1e-4)), h - 1)
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    wa = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
                    wb = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
                    wc = ((ax - px) * (by - py) - (ay - py) * (bx - px)) / area
                    if wa < -_INSIDE_EPS or wb < -_INSIDE_EPS or wc < -_INSIDE_EPS:
                        continue
                    z = wa * depth_z[b, i0] + wb * depth_z[b, i1] + wc * depth_z[b, i2]
                    k = py * w + px
                    # strict test: equal depths keep the lower face index
                    if z < zbuf[k]:
                        zbuf[k] = z
                        face_id[b, k] = f


def rasterize_faces(screen: torch.Tensor, depth_z: torch.Tensor, faces: torch.Tensor,
                    h: int, w: int) -> torch.Tensor:
    """Z-buffered triangle assignment per pixel centre.

    screen: (B, N, 2) pixel coords; depth_z: (B, N) camera-space Z.
    Returns face ids (B, H, W), -1 where no triangle covers the pixel.
    Ties in depth resolve to the lowest face index.
    """
    bsz = screen.shape[0]
    face_id = np.full((bsz, h * w), -1, dtype=np.int64)
    _zbuffer(screen.detach().cpu().double().numpy(), depth_z.detach().cpu().double().numpy(),
             faces.numpy(), h, w, face_id)
    return torch.from_numpy(face_id).view(bsz, h, w)


def interpolate(attrs: torch.Tensor, screen: torch.Tensor, faces: torch.Tensor,
                face_id: torch.Tensor) -> torch.Tensor:
    """Barycentric interpolation of per-vertex attributes (B, N, C) -> (B, C, H, W)."""
    bsz, h, w = face_id.shape
    mask = (face_id >= 0).view(bsz, h * w)
    fid = face_id.clamp(min=0).view(bsz, h * w)
    vidx = faces[fid]                                            # (B,HW,3)
    bidx = torch.arange(bsz)[:, None, None]
    tri = screen[bidx, vidx]                                     # (B,HW,3,2)
    x, y = torch.meshgrid(torch.arange(w, dtype=screen.dtype),
                          torch.arange(h, dtype=screen.dtype), indexing="xy")
    p = torch.stack([x, y], dim=-1).reshape(1, h * w, 2)
    wts, area = _barycentric(tri, p)
    safe = torch.where(mask & (area.abs() > _MIN_AREA), area, torch.ones_like(area))
    bary = wts / safe[..., None]
    values = (bary[..., None] * attrs[bidx, vidx]).sum(dim=-2)   # (B,HW,C)
    values = torch.where(mask[..., None], values, torch.zeros_like(values))
    return values.transpose(1, 2).reshape(bsz, attrs.shape[-1], h, w)


# ---------------------------------------------------------------- pipeline

def project_and_rasterize(shaded: torch.Tensor, depth: torch.Tensor, pose, cam: Camera = Camera(),
                          face_id: torch.Tensor | None = None) -> RenderOutput:
    """Place the shaded canonical grid under `pose` and rasterize it.

    Passing `face_id` reuses a previous triangle assignment, which keeps the
    output a smooth function of the inputs (used by gradient checks).
    """
    unbatched = shaded.dim() == 3
    if unbatched:
        shaded, depth = shaded[None], depth[None]
    depth = depth.reshape(depth.shape[0], *depth.shape[-2:])
    pose = _as_tensor(pose, shaded)
    if pose.dim() == 1:
        pose = pose.expand(shaded.shape[0], 6)
    h, w = depth.shape[-2:]
    verts, faces = build_grid_mesh(depth)
    cam_verts = transform_vertices(verts, pose, cam)
    screen = project(cam_verts, cam, h, w)
    if face_id is None:
        face_id = rasterize_faces(screen.detach(), cam_verts[..., 2].detach(), faces, h, w)
    elif face_id.dim() == 2:
        face_id = face_id[None]
    colours = shaded.flatten(2).transpose(1, 2)
    image = interpolate(colours, screen, faces, face_id)
    out = RenderOutput(image, face_id >= 0, face_id)
    if unbatched:
        out = RenderOutput(*(t[0] for t in out))
    return out


def render(albedo: torch.Tensor, depth: torch.Tensor, pose, light, cam: Camera = Camera(),
           face_id: torch.Tensor | None = None) -> RenderOutput:
    """Shade the canonical maps and rasterize them under pose."""
    light = _as_tensor(light, albedo)
    if albedo.dim() == 4 and light.dim() == 1:
        light = light.expand(albedo.shape[0], 4)
    depth = depth.reshape(*albedo.shape[:-3], *depth.shape[-2:])
    shaded = shade(albedo, compute_normals(depth), light)
    return project_and_rasterize(shaded, depth, pose, cam, face_id=face_id)


def hflip(m: torch.Tensor) -> torch.Tensor:
    """Mirror the last (column) axis."""
    return torch.flip(m, dims=(-1,))


def render_flipped(albedo, depth, pose, light, cam: Camera = Camera(), face_id=None) -> RenderOutput:
    return render(hflip(albedo), hflip(depth), pose, light, cam, face_id=face_id)


def frontalize(albedo: torch.Tensor, depth: torch.Tensor, light=NEUTRAL_LIGHT,
               cam: Camera = Camera()) -> torch.Tensor:
    """Render at the identity pose under a fixed neutral light."""
    return render(albedo, depth, IDENTITY_POSE, light, cam).image
