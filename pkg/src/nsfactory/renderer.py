"""Quadrature volume rendering: color, expected depth, and ambient occlusion.

Along each ray the interval [t_near, t_far] is split into N equal bins.
With per-sample density sigma_i and step delta_i:

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = exp(-sum_{j<i} sigma_j * delta_j)        (transmittance)
    color   = sum_i T_i * alpha_i * c_i
    depth   = sum_i T_i * alpha_i * t_i                (expected depth)
    ao      = sum_i T_i * alpha_i                      (absorbed fraction)

The telescoping identity ao + T_final = 1 holds exactly in the continuum
and to float tolerance here; ao doubles as a per-pixel confidence. Pixels
whose rays absorb less than ``EPS_BACKGROUND`` are flagged invalid instead
of being assigned a far-plane depth.

Per-ray compositing works in ray-distance units (expected t). Full-image
rendering converts to camera-frame z, the quantity depth/disparity
consumers expect, by projecting onto the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Intrinsics, Pose

__all__ = [
    "EPS_BACKGROUND",
    "N_TRAIN_DEFAULT",
    "N_EXPORT_DEFAULT",
    "QuadratureSamples",
    "RenderOutput",
    "sample_bins",
    "composite",
    "render_image",
    "ray_grid",
    "intersect_aabb",
    "sample_bins_batch",
    "composite_batch",
]

EPS_BACKGROUND = 1e-3
N_TRAIN_DEFAULT = 256
N_EXPORT_DEFAULT = 512


@dataclass(frozen=True)
class QuadratureSamples:
    """Per-ray quadrature nodes and field evaluations."""

    t: np.ndarray  # (N,) strictly increasing sample distances
    delta: np.ndarray  # (N,) positive step sizes
    sigma: np.ndarray  # (N,) non-negative densities
    color: np.ndarray  # (N, 3) sample colors in [0,1]

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64)
        d = np.asarray(self.delta, dtype=np.float64)
        if (np.diff(t) <= 0).any():
            raise ValueError("sample distances must be strictly increasing")
        if (d <= 0).any():
            raise ValueError("step sizes must be positive")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True)
class RenderOutput:
    """Full-image render: color, expected depth, AO confidence, validity."""

    color: np.ndarray  # (H, W, 3) in [0,1]
    depth: np.ndarray  # (H, W) world units, 0 on invalid pixels
    ao: np.ndarray  # (H, W) in [0,1]
    valid: np.ndarray  # (H, W) bool


def sample_bins(
    t_near: float,
    t_far: float,
    n: int,
    jitter: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature node positions for one ray: (t (n,), delta (n,)).

    Bin midpoints when jitter is off; one uniform draw inside each bin when
    on (training-time stratified sampling). delta is the constant bin width.
    """
    if n < 2:
        raise ValueError("need at least 2 bins")
    if not t_near < t_far:
        raise ValueError("t_near must precede t_far")
    width = (t_far - t_near) / n
    edges = t_near + width * np.arange(n)
    if jitter:
        rng = rng or np.random.default_rng()
        t = edges + width * rng.uniform(size=n)
    else:
        t = edges + width / 2
    return t, np.full(n, width)


def composite(samples: QuadratureSamples) -> tuple[np.ndarray, float, float, float]:
    """Quadrature compositing of one ray.

    Returns (color (3,), depth, ao, final transmittance).
    """
    sigma = np.asarray(samples.sigma, dtype=np.float64)
    if (sigma < 0).any():
        raise ValueError("densities must be non-negative")
    tau = sigma * samples.delta
    alpha = 1.0 - np.exp(-tau)
    t_acc = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]]))
    w = t_acc * alpha
    color = (w[:, None] * np.asarray(samples.color, dtype=np.float64)).sum(axis=0)
    depth = float((w * samples.t).sum())
    ao = float(w.sum())
    t_final = float(np.exp(-tau.sum()))
    return color, depth, ao, t_final


# --- batched torch core (shared by training and full-image rendering) ---


def ray_grid(intr: Intrinsics, pose: Pose, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """All pixel-center rays of a camera: (origins (H*W, 3), dirs (H*W, 3)).

    Row-major pixel order; directions are unit length. Pixel centers at
    half-integer coordinates.
    """
    h, w = intr.height, intr.width
    u = torch.arange(w, dtype=dtype) + 0.5
    v = torch.arange(h, dtype=dtype) + 0.5
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    d_cam = torch.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, torch.ones_like(uu)], dim=-1
    ).reshape(-1, 3)
    rot = torch.as_tensor(pose.rotation, dtype=dtype)
    dirs = d_cam @ rot.t()
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = torch.as_tensor(pose.center, dtype=dtype).expand(h * w, 3)
    return origins, dirs


def intersect_aabb(
    origins: torch.Tensor,
    dirs: torch.Tensor,
    lo: torch.Tensor | np.ndarray,
    hi: torch.Tensor | np.ndarray,
    eps: float = 1e-9,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab intersection of rays with an axis-aligned box.

    Returns (t_near (P,), t_far (P,), hit (P,) bool). t_near is clamped to a
    small positive value so samples never sit behind the camera.
    """
    lo = torch.as_tensor(lo, dtype=origins.dtype)
    hi = torch.as_tensor(hi, dtype=origins.dtype)
    inv = 1.0 / torch.where(dirs.abs() < eps, torch.full_like(dirs, eps), dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp(min=1e-4)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def sample_bins_batch(
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    n: int,
    jitter: bool = False,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched quadrature nodes: (t (P, n), delta (P, n))."""
    width = ((t_far - t_near) / n).unsqueeze(-1)  # (P, 1)
    steps = torch.arange(n, dtype=t_near.dtype).unsqueeze(0)
    edges = t_near.unsqueeze(-1) + width * steps
    if jitter:
        u = torch.rand(edges.shape, dtype=t_near.dtype, generator=generator)
        t = edges + width * u
    else:
        t = edges + width / 2
    return t, width.expand_as(t)


def composite_batch(
    sigma: torch.Tensor,
    rgb: torch.Tensor,
    t: torch.Tensor,
    delta: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched quadrature compositing.

    sigma (P, N), rgb (P, N, 3), t/delta (P, N) ->
    (color (P, 3), depth (P,), ao (P,), t_final (P,)).
    """
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    zeros = tau.new_zeros(tau.shape[0], 1)
    t_acc = torch.exp(-torch.cumsum(torch.cat([zeros, tau[:, :-1]], dim=1), dim=1))
    w = t_acc * alpha
    color = (w.unsqueeze(-1) * rgb).sum(dim=1)
    depth = (w * t).sum(dim=1)
    ao = w.sum(dim=1)
    t_final = torch.exp(-tau.sum(dim=1))
    return color, depth, ao, t_final


def render_rays(
    field,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    n: int,
    jitter: bool = False,
    generator: torch.Generator | None = None,
    chunk: int = 1 << 16,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Render a batch of rays against ``field``.

    ``field`` needs ``query_batch(points (P,3), dirs (P,3)) -> (sigma, rgb)``
    and a ``bounds`` property. Rays missing the scene bounds come back with
    zero color/ao. Returns (color (P,3), depth (P,), ao (P,), t_final (P,)).
    """
    lo, hi = field.bounds
    outs = []
    for start in range(0, origins.shape[0], chunk):
        o = origins[start : start + chunk]
        d = dirs[start : start + chunk]
        t_near, t_far, hit = intersect_aabb(o, d, lo, hi)
        # degenerate interval for misses keeps shapes uniform; zeroed below
        t_far = torch.where(hit, t_far, t_near + 1e-3)
        t, delta = sample_bins_batch(t_near, t_far, n, jitter=jitter, generator=generator)
        pts = o.unsqueeze(1) + t.unsqueeze(-1) * d.unsqueeze(1)  # (p, n, 3)
        p, _ = t.shape
        sigma, rgb = field.query_batch(pts.reshape(-1, 3), d.unsqueeze(1).expand(p, n, 3).reshape(-1, 3))
        sigma = sigma.view(p, n) * hit.unsqueeze(-1).to(sigma.dtype)
        rgb = rgb.view(p, n, 3)
        outs.append(composite_batch(sigma, rgb, t, delta))
    color, depth, ao, t_final = (torch.cat(parts) for parts in zip(*outs))
    return color, depth, ao, t_final


def render_image(field, intr: Intrinsics, pose: Pose, n: int = N_TRAIN_DEFAULT) -> RenderOutput:
    """Deterministic full-image render (no jitter).

    The depth map holds camera-frame z (expected ray distance projected onto
    the optical axis), the quantity disparity conversion needs; a
    fronto-parallel plane therefore reads a constant depth across the image.
    """
    dtype = torch.float32
    params = getattr(field, "parameters", None)
    if callable(params):
        try:
            dtype = next(field.parameters()).dtype
        except StopIteration:
            pass
    origins, dirs = ray_grid(intr, pose, dtype=dtype)
    with torch.no_grad():
        color, depth_t, ao, _ = render_rays(field, origins, dirs, n, jitter=False)
    forward = torch.as_tensor(pose.rotation[:, 2], dtype=dtype)
    depth = depth_t * (dirs @ forward)
    h, w = intr.height, intr.width
    color_np = color.clamp(0, 1).view(h, w, 3).double().numpy()
    depth_np = depth.view(h, w).double().numpy()
    ao_np = ao.clamp(0, 1).view(h, w).double().numpy()
    valid = ao_np >= EPS_BACKGROUND
    depth_np = np.where(valid, depth_np, 0.0)
    return RenderOutput(color=color_np, depth=depth_np, ao=ao_np, valid=valid)
