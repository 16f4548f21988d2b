"""Cameras, poses, rays, the virtual stereo rig, and COLMAP text import.

Conventions used throughout the package:

* Poses are camera-to-world: ``rotation`` maps camera-frame vectors to world
  frame, ``center`` is the camera center in world units.
* Camera frame: +x right, +y down, +z forward (optical axis).
* Pixel centers sit at half-integer coordinates, i.e. the center of the
  top-left pixel is (0.5, 0.5). Functions here take continuous pixel
  coordinates; callers iterating over a pixel grid pass ``i + 0.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Intrinsics",
    "Pose",
    "Ray",
    "StereoRig",
    "make_ray",
    "project",
    "virtual_stereo_poses",
    "depth_to_disparity",
    "parse_colmap_text",
    "serialize_cameras",
    "parse_camera_lines",
    "quat_to_rotation",
    "rotation_to_quat",
]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: x_world = rotation @ x_cam + center."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    center: np.ndarray  # (3,) world units

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        ctr = np.asarray(self.center, dtype=np.float64)
        if rot.shape != (3, 3) or ctr.shape != (3,):
            raise ValueError("rotation must be 3x3 and center a 3-vector")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(ctr)):
            raise ValueError("pose entries must be finite")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation must have det +1 (got {det:.12f})")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", ctr)


@dataclass(frozen=True)
class Ray:
    """World-space ray r(t) = origin + t * direction for t in [t_near, t_far]."""

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,) unit norm
    t_near: float
    t_far: float

    def __post_init__(self) -> None:
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("origin and direction must be 3-vectors")
        if abs(np.linalg.norm(d) - 1.0) > _ORTHO_TOL:
            raise ValueError("direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class StereoRig:
    """Virtual rectified rig; b is the center-to-side baseline in world units."""

    baseline: float

    def __post_init__(self) -> None:
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")


def make_ray(
    intr: Intrinsics,
    pose: Pose,
    px: tuple[float, float],
    t_near: float = 1e-4,
    t_far: float = 1e4,
) -> Ray:
    """Ray through continuous pixel coordinate ``px`` = (u, v).

    Origin is the camera center; direction is the normalized world-frame
    vector rotation @ ((u - cx)/fx, (v - cy)/fy, 1).
    """
    u, v = float(px[0]), float(px[1])
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside image bounds")
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_world = pose.rotation @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=pose.center.copy(), direction=d_world, t_near=t_near, t_far=t_far)


def project(point: np.ndarray, intr: Intrinsics, pose: Pose) -> tuple[float, float, float]:
    """Pinhole projection of a world point; returns (u, v, depth).

    Depth is the camera-frame z coordinate. Raises for points at or behind
    the camera plane.
    """
    p_cam = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.center)
    z = p_cam[2]
    if z <= 0:
        raise ValueError("point is behind the camera")
    u = intr.fx * p_cam[0] / z + intr.cx
    v = intr.fy * p_cam[1] / z + intr.cy
    return float(u), float(v), float(z)


def virtual_stereo_poses(pose: Pose, rig: StereoRig) -> tuple[Pose, Pose]:
    """Left/right cameras of a rectified triplet around ``pose``.

    Both share the center camera's rotation; centers are displaced by
    -+ b along the camera's x-axis expressed in world coordinates
    (column 0 of the rotation). With the +x-right convention this yields
    row-aligned epipolar lines and disparity d = fx * b / z between the
    center and either side view.
    """
    x_axis = pose.rotation[:, 0]
    left = Pose(rotation=pose.rotation.copy(), center=pose.center - rig.baseline * x_axis)
    right = Pose(rotation=pose.rotation.copy(), center=pose.center + rig.baseline * x_axis)
    return left, right


def depth_to_disparity(
    depth: np.ndarray,
    baseline: float,
    focal: float,
    valid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise d = b * f / z. Returns (disparity, valid_mask).

    Pixels with non-positive or non-finite depth, or flagged invalid on
    input, come back as disparity 0 with valid False.
    """
    if not (baseline > 0 and focal > 0):
        raise ValueError("baseline and focal must be positive")
    z = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(z) & (z > 0)
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    disp = np.zeros_like(z)
    np.divide(baseline * focal, z, out=disp, where=ok)
    disp[~ok] = 0.0
    return disp, ok


# --- quaternion helpers (COLMAP stores qw, qx, qy, qz) ---


def quat_to_rotation(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    """Rotation matrix of a quaternion; input is normalized first."""
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if n == 0:
        raise ValueError("zero quaternion")
    w, x, y, z = qw / n, qx / n, qy / n, qz / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(rot: np.ndarray) -> tuple[float, float, float, float]:
    """Unit quaternion (qw, qx, qy, qz) of a rotation matrix, qw >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        qw = 0.25 * s
        qx = (m[2, 1] - m[1, 2]) / s
        qy = (m[0, 2] - m[2, 0]) / s
        qz = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        qw = (m[2, 1] - m[1, 2]) / s
        qx = 0.25 * s
        qy = (m[0, 1] + m[1, 0]) / s
        qz = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        qw = (m[0, 2] - m[2, 0]) / s
        qx = (m[0, 1] + m[1, 0]) / s
        qy = 0.25 * s
        qz = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        qw = (m[1, 0] - m[0, 1]) / s
        qx = (m[0, 2] + m[2, 0]) / s
        qy = (m[1, 2] + m[2, 1]) / s
        qz = 0.25 * s
    if qw < 0:
        qw, qx, qy, qz = -qw, -qx, -qy, -qz
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    return qw / n, qx / n, qy / n, qz / n


# --- COLMAP text import ---

_SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")


class ColmapParseError(ValueError):
    """Malformed COLMAP text input."""


def _parse_camera_line(line: str, lineno: int) -> tuple[int, Intrinsics]:
    parts = line.split()
    if len(parts) < 5:
        raise ColmapParseError(f"cameras line {lineno}: expected at least 5 fields")
    try:
        cam_id = int(parts[0])
        model = parts[1]
        width, height = int(parts[2]), int(parts[3])
        params = [float(p) for p in parts[4:]]
    except ValueError as exc:
        raise ColmapParseError(f"cameras line {lineno}: {exc}") from exc
    if model == "SIMPLE_PINHOLE":
        if len(params) != 3:
            raise ColmapParseError(f"cameras line {lineno}: SIMPLE_PINHOLE needs 3 params")
        f, cx, cy = params
        intr = Intrinsics(fx=f, fy=f, cx=cx, cy=cy, width=width, height=height)
    elif model == "PINHOLE":
        if len(params) != 4:
            raise ColmapParseError(f"cameras line {lineno}: PINHOLE needs 4 params")
        fx, fy, cx, cy = params
        intr = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    else:
        raise ColmapParseError(f"cameras line {lineno}: unsupported camera model {model!r}")
    return cam_id, intr


def parse_colmap_text(cameras_text: str | bytes, images_text: str | bytes) -> list[tuple[Intrinsics, Pose]]:
    """Parse COLMAP text exports (cameras.txt / images.txt contents).

    Only SIMPLE_PINHOLE and PINHOLE camera models are accepted. The
    quaternion + translation stored per image is world-to-camera; it is
    converted here to the package's camera-to-world convention
    (rotation = R^T, center = -R^T t). Quaternions are normalized before
    conversion since the text format carries limited precision. Comment
    lines and the per-image 2D point lines are skipped. Results are ordered
    by image id.
    """
    if isinstance(cameras_text, bytes):
        cameras_text = cameras_text.decode("utf-8")
    if isinstance(images_text, bytes):
        images_text = images_text.decode("utf-8")

    cameras: dict[int, Intrinsics] = {}
    for lineno, raw in enumerate(cameras_text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cam_id, intr = _parse_camera_line(line, lineno)
        cameras[cam_id] = intr

    results: list[tuple[int, Intrinsics, Pose]] = []
    expect_pose = True  # images.txt alternates pose line / 2D point line
    for lineno, raw in enumerate(images_text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not expect_pose:
            # the point line of an image with no observations is empty,
            # so a blank line consumes the slot like any other point line
            expect_pose = True
            continue
        if not line:
            continue
        parts = line.split()
        if len(parts) < 9:
            raise ColmapParseError(f"images line {lineno}: expected at least 9 fields")
        try:
            image_id = int(parts[0])
            qw, qx, qy, qz = (float(p) for p in parts[1:5])
            tx, ty, tz = (float(p) for p in parts[5:8])
            cam_id = int(parts[8])
        except ValueError as exc:
            raise ColmapParseError(f"images line {lineno}: {exc}") from exc
        if cam_id not in cameras:
            raise ColmapParseError(f"images line {lineno}: unknown camera id {cam_id}")
        r_w2c = quat_to_rotation(qw, qx, qy, qz)
        t = np.array([tx, ty, tz])
        pose = Pose(rotation=r_w2c.T, center=-r_w2c.T @ t)
        results.append((image_id, cameras[cam_id], pose))
        expect_pose = False

    results.sort(key=lambda item: item[0])
    return [(intr, pose) for _, intr, pose in results]


# --- line-oriented pose serialization ---
# One record per camera: "id qw qx qy qz cx cy cz fx fy px py w h"


def serialize_cameras(cameras: list[tuple[Intrinsics, Pose]]) -> str:
    """Serialize (Intrinsics, Pose) pairs to the line-oriented pose format."""
    lines = []
    for idx, (intr, pose) in enumerate(cameras, start=1):
        quat = rotation_to_quat(pose.rotation)
        fields = [*quat, *pose.center, intr.fx, intr.fy, intr.cx, intr.cy]
        body = " ".join(repr(float(f)) for f in fields)
        lines.append(f"{idx} {body} {intr.width} {intr.height}")
    return "\n".join(lines) + "\n"


def parse_camera_lines(text: str) -> list[tuple[Intrinsics, Pose]]:
    """Inverse of :func:`serialize_cameras`."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 14:
            raise ColmapParseError(f"pose line {lineno}: expected 14 fields, got {len(parts)}")
        _, qw, qx, qy, qz, cx_, cy_, cz_, fx, fy, px, py = (float(p) for p in parts[:12])
        w, h = int(parts[12]), int(parts[13])
        intr = Intrinsics(fx=fx, fy=fy, cx=px, cy=py, width=w, height=h)
        pose = Pose(rotation=quat_to_rotation(qw, qx, qy, qz), center=np.array([cx_, cy_, cz_]))
        out.append((intr, pose))
    return out
