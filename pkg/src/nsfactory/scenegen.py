"""Synthetic analytic scenes with exact ground truth.

Scenes are lists of textured primitives (axis-aligned boxes and spheres)
inside the unit cube. Two complementary views of the same scene exist:

* ``analytic_render``: first-hit ray casting with exact depth, used as the
  oracle that quadrature renders and fitted fields are judged against.
* ``scene_field``: a density/color adapter exposing the scene to the
  quadrature renderer (constant density inside primitives, the same
  procedural texture as color), so the full render/export pipeline can run
  on scenes whose geometry is known in closed form.

Textures are band-limited value noise driven by an integer lattice hash, so
identical seeds give identical images on any platform, and photometric
losses stay well conditioned (no untextured expanses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Intrinsics, Pose
from .renderer import RenderOutput

__all__ = [
    "TexturedBox",
    "TexturedSphere",
    "AnalyticScene",
    "AnalyticView",
    "SceneField",
    "value_noise",
    "analytic_render",
    "scene_field",
    "make_fixture",
    "FIXTURE_NAMES",
]

FIXTURE_NAMES = ("plane", "occluder", "textured_cube")

_DEFAULT_SIGMA = 200.0


@dataclass(frozen=True)
class TexturedBox:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    base_color: tuple[float, float, float]
    noise_amp: float = 0.35
    noise_freq: float = 10.0
    seed: int = 0
    sigma0: float = _DEFAULT_SIGMA


@dataclass(frozen=True)
class TexturedSphere:
    center: tuple[float, float, float]
    radius: float
    base_color: tuple[float, float, float]
    noise_amp: float = 0.35
    noise_freq: float = 10.0
    seed: int = 0
    sigma0: float = _DEFAULT_SIGMA


@dataclass(frozen=True)
class AnalyticScene:
    """Primitives inside the unit cube; closed-form depth along any ray."""

    primitives: tuple
    seed: int = 0

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(3), np.ones(3)


@dataclass(frozen=True)
class AnalyticView:
    """Exact render: first-hit color/depth plus binary coverage as AO."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) camera-frame z, 0 where no hit
    ao: np.ndarray  # (H, W) 1.0 on hits, else 0.0
    valid: np.ndarray  # (H, W) bool
    disparity: np.ndarray | None  # (H, W) pixels, when a baseline was given

    def render_output(self) -> RenderOutput:
        return RenderOutput(color=self.color, depth=self.depth, ao=self.ao, valid=self.valid)


# --- deterministic lattice noise ---


def _hash_lattice(ix: torch.Tensor, iy: torch.Tensor, iz: torch.Tensor, seed: int) -> torch.Tensor:
    """Integer lattice -> uniform [0,1); wrapping int64 mix, platform-stable."""
    h = ix * 374761393 + iy * 668265263 + iz * 2147483647 + (seed + 1) * 2654435761
    h = torch.bitwise_xor(h, h >> 13) * 1274126177
    h = torch.bitwise_xor(h, h >> 16)
    return (h & 0xFFFFFF).to(torch.float64) / float(0x1000000)


def value_noise(pts: torch.Tensor, seed: int, freq: float, octaves: int = 2) -> torch.Tensor:
    """Band-limited value noise in [0,1] at world points (..., 3).

    Each octave trilinearly interpolates hashed lattice values; octave o
    doubles the frequency and halves the amplitude.
    """
    p = pts.to(torch.float64)
    out = torch.zeros(p.shape[:-1], dtype=torch.float64)
    total = 0.0
    amp = 1.0
    for o in range(octaves):
        q = p * (freq * (2.0**o))
        c0 = q.floor()
        f = q - c0
        f = f * f * (3 - 2 * f)  # smoothstep for C1 continuity
        c0 = c0.to(torch.int64)
        acc = torch.zeros_like(out)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    v = _hash_lattice(c0[..., 0] + dx, c0[..., 1] + dy, c0[..., 2] + dz, seed * 31 + o)
                    w = (
                        (f[..., 0] if dx else 1 - f[..., 0])
                        * (f[..., 1] if dy else 1 - f[..., 1])
                        * (f[..., 2] if dz else 1 - f[..., 2])
                    )
                    acc = acc + w * v
        out = out + amp * acc
        total += amp
        amp *= 0.5
    return out / total


def _texture_color(prim, pts: torch.Tensor) -> torch.Tensor:
    """Procedural RGB of a primitive at world points (..., 3) -> (..., 3)."""
    base = torch.tensor(prim.base_color, dtype=torch.float64)
    chans = []
    for ch in range(3):
        n = value_noise(pts, seed=prim.seed * 7 + ch, freq=prim.noise_freq)
        chans.append(base[ch] + prim.noise_amp * (2 * n - 1))
    return torch.stack(chans, dim=-1).clamp(0.0, 1.0)


# --- exact ray casting ---


def _intersect_box(origins, dirs, lo, hi, eps=1e-12):
    """First positive entry distance of rays into a box; inf for misses."""
    inv = 1.0 / np.where(np.abs(dirs) < eps, eps, dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_enter = np.minimum(t0, t1).max(axis=-1)
    t_exit = np.maximum(t0, t1).min(axis=-1)
    hit = (t_exit > np.maximum(t_enter, 0)) & (t_enter > 1e-9)
    return np.where(hit, t_enter, np.inf)


def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = (oc * dirs).sum(-1)
    c = (oc * oc).sum(-1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    hit = ok & (t > 1e-9)
    return np.where(hit, t, np.inf)


def _first_hit(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray):
    """(t (P,), primitive index (P,)) of the nearest surface; inf/-1 on miss."""
    best_t = np.full(origins.shape[0], np.inf)
    best_i = np.full(origins.shape[0], -1)
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, TexturedBox):
            t = _intersect_box(origins, dirs, np.asarray(prim.lo), np.asarray(prim.hi))
        else:
            t = _intersect_sphere(origins, dirs, np.asarray(prim.center), prim.radius)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i


def analytic_render(
    scene: AnalyticScene,
    intr: Intrinsics,
    pose: Pose,
    baseline: float | None = None,
) -> AnalyticView:
    """Exact first-hit render; the oracle for quadrature and fitted fields.

    Depth is camera-frame z at the first opaque surface; color is the
    primitive's texture at the hit point; AO is binary coverage. When
    ``baseline`` is given, the exact disparity b*fx/z is included.
    """
    h, w = intr.height, intr.width
    us = (np.arange(w) + 0.5 - intr.cx) / intr.fx
    vs = (np.arange(h) + 0.5 - intr.cy) / intr.fy
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ pose.rotation.T
    norms = np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = dirs / norms
    origins = np.broadcast_to(pose.center, dirs.shape)

    t, idx = _first_hit(scene, origins, dirs)
    hit = np.isfinite(t)
    t_safe = np.where(hit, t, 0.0)
    points = origins + t_safe[:, None] * dirs
    # camera-frame z = t * cos(angle to optical axis)
    z = t_safe * (dirs @ pose.rotation[:, 2])

    color = np.zeros((h * w, 3))
    for i, prim in enumerate(scene.primitives):
        sel = hit & (idx == i)
        if sel.any():
            color[sel] = _texture_color(prim, torch.from_numpy(points[sel])).numpy()

    depth = np.where(hit, z, 0.0).reshape(h, w)
    ao = hit.astype(np.float64).reshape(h, w)
    disparity = None
    if baseline is not None:
        with np.errstate(divide="ignore"):
            disparity = np.where(depth > 0, baseline * intr.fx / np.where(depth > 0, depth, 1.0), 0.0)
    return AnalyticView(
        color=color.reshape(h, w, 3),
        depth=depth,
        ao=ao,
        valid=hit.reshape(h, w),
        disparity=disparity,
    )


# --- quadrature-compatible field adapter ---


class SceneField:
    """Exposes an AnalyticScene as a density/color field for the renderer.

    Density is sigma0 inside a primitive (the nearest-listed one where
    several overlap), zero outside; color is the primitive texture evaluated
    volumetrically, mid-gray in empty space.
    """

    def __init__(self, scene: AnalyticScene):
        self.scene = scene

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.scene.bounds

    def query_batch(self, pts: torch.Tensor, dirs: torch.Tensor):
        p = pts.to(torch.float64)
        sigma = torch.zeros(p.shape[0], dtype=torch.float64)
        rgb = torch.full((p.shape[0], 3), 0.5, dtype=torch.float64)
        unclaimed = torch.ones(p.shape[0], dtype=torch.bool)
        for prim in self.scene.primitives:
            if isinstance(prim, TexturedBox):
                lo = torch.tensor(prim.lo, dtype=torch.float64)
                hi = torch.tensor(prim.hi, dtype=torch.float64)
                inside = ((p >= lo) & (p <= hi)).all(dim=-1)
            else:
                c = torch.tensor(prim.center, dtype=torch.float64)
                inside = ((p - c).norm(dim=-1) <= prim.radius)
            take = inside & unclaimed
            if take.any():
                sigma[take] = prim.sigma0
                rgb[take] = _texture_color(prim, p[take])
                unclaimed &= ~take
        return sigma.to(pts.dtype), rgb.to(pts.dtype)


def scene_field(scene: AnalyticScene) -> SceneField:
    return SceneField(scene)


# --- bundled fixtures ---


def _look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Pose at ``eye`` with +z toward ``target`` (+y-down image convention)."""
    f = target - eye
    f = f / np.linalg.norm(f)
    up_hint = np.array([0.0, 1.0, 0.0])
    r = np.cross(up_hint, f)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f], axis=1)
    # orthonormalize against accumulated rounding so Pose accepts it
    u, _, vt = np.linalg.svd(rot)
    return Pose(rotation=u @ vt, center=eye)


def _fixture_intrinsics(res: int = 64) -> Intrinsics:
    return Intrinsics(fx=float(res), fy=float(res), cx=res / 2, cy=res / 2, width=res, height=res)


def make_fixture(
    name: str, seed: int = 0, views: int = 20, res: int = 64
) -> tuple[AnalyticScene, list[tuple[Intrinsics, Pose]]]:
    """A deterministic bundled scene plus a front-facing arc of posed views.

    * ``plane``: one full-width textured slab, front face at z=0.75, viewed
      fronto-parallel from 2.0 units in front (so depth reads exactly 2.0
      and disparity is b*fx/2 on covered pixels).
    * ``occluder``: the plane plus a nearer floating box, sized so the
      center-to-right occlusion band at b=0.5 is several percent of the
      image.
    * ``textured_cube``: a strongly textured box at the cube center over a
      textured back slab, viewed from a converging arc; the radiance-field
      fitting testbed.
    """
    if name not in FIXTURE_NAMES:
        raise ValueError(f"unknown fixture {name!r}; choose from {FIXTURE_NAMES}")
    intr = _fixture_intrinsics(res)
    cameras: list[tuple[Intrinsics, Pose]] = []

    if name == "plane":
        scene = AnalyticScene(
            primitives=(
                TexturedBox(lo=(0.0, 0.0, 0.75), hi=(1.0, 1.0, 0.95),
                            base_color=(0.55, 0.45, 0.4), noise_amp=0.4,
                            noise_freq=9.0, seed=seed),
            ),
            seed=seed,
        )
        # fronto-parallel translation arc, constant working distance 2.0
        for i in range(views):
            s = i / max(views - 1, 1)
            eye = np.array([0.35 + 0.3 * s, 0.5 + 0.08 * math.sin(3 * math.pi * s), -1.25])
            cameras.append((intr, Pose(rotation=np.eye(3), center=eye)))
        return scene, cameras

    if name == "occluder":
        scene = AnalyticScene(
            primitives=(
                TexturedBox(lo=(0.36, 0.03, 0.16), hi=(0.66, 0.97, 0.38),
                            base_color=(0.7, 0.35, 0.25), noise_amp=0.28,
                            noise_freq=11.0, seed=seed + 1),
                TexturedBox(lo=(0.0, 0.0, 0.8), hi=(1.0, 1.0, 1.0),
                            base_color=(0.35, 0.5, 0.6), noise_amp=0.4,
                            noise_freq=9.0, seed=seed),
            ),
            seed=seed,
        )
        for i in range(views):
            s = i / max(views - 1, 1)
            eye = np.array([0.38 + 0.24 * s, 0.5 + 0.06 * math.sin(2 * math.pi * s), -1.2])
            cameras.append((intr, Pose(rotation=np.eye(3), center=eye)))
        return scene, cameras

    scene = AnalyticScene(
        primitives=(
            TexturedBox(lo=(0.3, 0.3, 0.35), hi=(0.7, 0.7, 0.75),
                        base_color=(0.6, 0.4, 0.3), noise_amp=0.35,
                        noise_freq=10.0, seed=seed + 2),
            TexturedBox(lo=(0.0, 0.0, 0.85), hi=(1.0, 1.0, 1.0),
                        base_color=(0.4, 0.45, 0.55), noise_amp=0.35,
                        noise_freq=8.0, seed=seed),
        ),
        seed=seed,
    )
    target = np.array([0.5, 0.5, 0.55])
    radius = 1.9
    for i in range(views):
        s = i / max(views - 1, 1)
        az = math.radians(-28 + 56 * s)
        el = math.radians(8 * math.sin(2.5 * math.pi * s))
        eye = target + radius * np.array(
            [math.sin(az) * math.cos(el), math.sin(el), -math.cos(az) * math.cos(el)]
        )
        cameras.append((intr, _look_at(eye, target)))
    return scene, cameras
