"""Stereo-triplet export: rendering, float-map/PNG persistence, manifests.

Given a trained (or analytic) field, ``render_triplet`` produces the three
horizontally displaced views of one camera pose plus the center view's
disparity, ambient occlusion, and validity. ``build_dataset`` sweeps poses,
baselines, and output resolutions, writing color as 8-bit PNG and float
maps as PFM alongside a line-delimited JSON manifest with a disparity
histogram. Everything is deterministic: no timestamps, sorted keys, fixed
file naming, so identical inputs give byte-identical artifacts.

The PFM codec follows the grayscale float-map convention: "Pf" magic, a
"W H" dimensions line, a scale line whose sign encodes endianness (we
always write -1.0, little-endian), then rows bottom-to-top as 32-bit
floats. Reads invert writes bit-exactly and byte-swap big-endian files;
the scale magnitude is accepted and ignored (see read_pfm).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose, StereoRig, depth_to_disparity, virtual_stereo_poses
from .renderer import EPS_BACKGROUND, N_EXPORT_DEFAULT, render_image
from .scenegen import analytic_render, make_fixture

__all__ = [
    "Triplet",
    "SceneSpec",
    "DatasetManifest",
    "PfmParseError",
    "MANIFEST_VERSION",
    "HISTOGRAM_BINS",
    "render_triplet",
    "analytic_triplet",
    "build_dataset",
    "export_fixture",
    "save_triplet",
    "load_triplet",
    "load_manifest",
    "write_pfm",
    "read_pfm",
    "write_png",
    "read_png",
    "scale_intrinsics",
]

MANIFEST_VERSION = 1
HISTOGRAM_BINS = 80  # disparity bins of width 1 px: [0,1), [1,2), ...


class PfmParseError(ValueError):
    """A float-map file violated the expected header or payload layout."""


@dataclass(frozen=True)
class Triplet:
    """One rectified stereo triplet with center-view geometry maps.

    left/center/right are (H, W, 3) colors in [0,1]; disparity (pixels),
    ao, and valid describe the center view. Invalid pixels carry
    disparity 0 and must be honored by consumers.
    """

    left: np.ndarray
    center: np.ndarray
    right: np.ndarray
    disparity: np.ndarray
    ao: np.ndarray
    valid: np.ndarray
    baseline: float
    focal: float
    pose_id: str = ""

    def __post_init__(self):
        h, w = self.center.shape[:2]
        for name in ("left", "right"):
            if getattr(self, name).shape != (h, w, 3):
                raise ValueError(f"{name} image shape mismatch")
        for name in ("disparity", "ao", "valid"):
            if getattr(self, name).shape != (h, w):
                raise ValueError(f"{name} map shape mismatch")
        if self.disparity[self.valid].size and self.disparity[self.valid].min() < 0:
            raise ValueError("negative disparity on valid pixels")
        if self.ao.min() < 0 or self.ao.max() > 1:
            raise ValueError("ao outside [0,1]")


@dataclass(frozen=True)
class SceneSpec:
    """A renderable scene for export: a field plus the poses to render from.

    ``views`` normally mirrors the poses the field was fitted on (center
    views aligned with the original viewpoints); arbitrary novel poses are
    equally valid entries when the caller opts into them.
    """

    scene_id: str
    fld: object  # anything with query_batch + bounds
    views: tuple

    def __post_init__(self):
        if not self.views:
            raise ValueError("a scene spec needs at least one view")


@dataclass
class DatasetManifest:
    """Index of an exported dataset: versioned records plus global stats."""

    format_version: int
    records: list
    histogram: list

    @property
    def count(self) -> int:
        return len(self.records)


def scale_intrinsics(intr: Intrinsics, width: int, height: int) -> Intrinsics:
    """The same camera at a different pixel resolution."""
    sx, sy = width / intr.width, height / intr.height
    return Intrinsics(fx=intr.fx * sx, fy=intr.fy * sy, cx=intr.cx * sx,
                      cy=intr.cy * sy, width=width, height=height)


def render_triplet(fld, pose: Pose, intr: Intrinsics, rig: StereoRig,
                   n: int = N_EXPORT_DEFAULT, pose_id: str = "") -> Triplet:
    """Render the left/center/right views of one pose and derive geometry.

    The center view supplies depth (converted to disparity via the rig
    baseline and horizontal focal length, on the exact arithmetic path the
    geometry module defines), ambient occlusion, and the validity mask.
    """
    left_pose, right_pose = virtual_stereo_poses(pose, rig)
    center = render_image(fld, intr, pose, n=n)
    left = render_image(fld, intr, left_pose, n=n)
    right = render_image(fld, intr, right_pose, n=n)
    disp, ok = depth_to_disparity(center.depth, rig.baseline, intr.fx, valid=center.valid)
    return Triplet(
        left=left.color, center=center.color, right=right.color,
        disparity=disp, ao=center.ao, valid=ok,
        baseline=rig.baseline, focal=intr.fx, pose_id=pose_id,
    )


def analytic_triplet(scene, intr: Intrinsics, pose: Pose, rig: StereoRig,
                     pose_id: str = "") -> Triplet:
    """Exact-ground-truth triplet of an analytic scene.

    First-hit ray casting instead of quadrature: depth, disparity, and the
    binary coverage AO are exact, which makes these triplets the oracle
    substrate for loss and evaluation tests.
    """
    left_pose, right_pose = virtual_stereo_poses(pose, rig)
    center = analytic_render(scene, intr, pose, baseline=rig.baseline)
    left = analytic_render(scene, intr, left_pose)
    right = analytic_render(scene, intr, right_pose)
    return Triplet(
        left=left.color, center=center.color, right=right.color,
        disparity=center.disparity, ao=center.ao, valid=center.valid,
        baseline=rig.baseline, focal=intr.fx, pose_id=pose_id,
    )


# --- float-map (PFM) codec ---


def write_pfm(arr: np.ndarray, path) -> None:
    """Write a (H, W) float map: grayscale, little-endian, bottom-up rows."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("map contains non-finite values")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(a).astype("<f4").tobytes(order="C"))


def _read_pfm_line(fh, what: str) -> bytes:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise PfmParseError(f"truncated header while reading {what}")
    return line[:-1]


def read_pfm(path) -> np.ndarray:
    """Read a grayscale float map written by write_pfm or a compatible tool.

    The scale line's sign selects endianness; its magnitude (a units hint
    some writers vary) is ignored so round trips stay bit-exact.
    """
    with open(path, "rb") as fh:
        magic = _read_pfm_line(fh, "magic")
        if magic != b"Pf":
            raise PfmParseError(f"bad magic {magic!r}; only grayscale 'Pf' maps are supported")
        dims = _read_pfm_line(fh, "dimensions").split()
        if len(dims) != 2:
            raise PfmParseError(f"dimensions line must be 'W H', got {dims!r}")
        try:
            w, h = int(dims[0]), int(dims[1])
        except ValueError as exc:
            raise PfmParseError(f"non-integer dimensions {dims!r}") from exc
        if w <= 0 or h <= 0:
            raise PfmParseError(f"non-positive dimensions {w}x{h}")
        try:
            scale = float(_read_pfm_line(fh, "scale"))
        except ValueError as exc:
            raise PfmParseError("scale line is not a number") from exc
        if scale == 0:
            raise PfmParseError("scale must be nonzero")
        payload = fh.read(w * h * 4)
        if len(payload) != w * h * 4:
            raise PfmParseError(f"payload holds {len(payload)} bytes, expected {w * h * 4}")
        dt = "<f4" if scale < 0 else ">f4"
        rows = np.frombuffer(payload, dtype=dt).reshape(h, w)
        return np.flipud(rows).astype(np.float32)


# --- color io ---


def write_png(img: np.ndarray, path) -> None:
    """Save an (H, W, 3) [0,1] float image as deterministic 8-bit RGB PNG."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3), got {a.shape}")
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG", compress_level=9)


def read_png(path) -> np.ndarray:
    """Load an RGB PNG back to (H, W, 3) floats in [0,1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# --- dataset assembly ---


def _histogram(disp: np.ndarray, valid: np.ndarray, counts: np.ndarray) -> None:
    vals = disp[valid]
    if vals.size == 0:
        return
    bins = np.clip(np.floor(vals).astype(int), 0, HISTOGRAM_BINS - 1)
    np.add.at(counts, bins, 1)


def save_triplet(triplet: Triplet, out_dir, stem: str) -> dict:
    """Persist one triplet under out_dir and return its manifest record.

    Validity is not stored separately: it is exactly ao >= the renderer's
    background epsilon, so consumers recover it from the AO map.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "left": f"{stem}_left.png",
        "center": f"{stem}_center.png",
        "right": f"{stem}_right.png",
        "disparity": f"{stem}_disp.pfm",
        "ao": f"{stem}_ao.pfm",
    }
    write_png(triplet.left, out / paths["left"])
    write_png(triplet.center, out / paths["center"])
    write_png(triplet.right, out / paths["right"])
    write_pfm(triplet.disparity, out / paths["disparity"])
    write_pfm(triplet.ao, out / paths["ao"])
    h, w = triplet.center.shape[:2]
    return {
        "baseline": triplet.baseline,
        "focal": triplet.focal,
        "width": w,
        "height": h,
        "pose_id": triplet.pose_id,
        "paths": paths,
    }


def load_triplet(base_dir, record: dict) -> Triplet:
    """Rehydrate one manifest record from disk.

    Validity is recovered from the AO map (ao >= the renderer's background
    epsilon), matching what save_triplet persisted.
    """
    base = Path(base_dir)
    paths = record["paths"]
    ao = read_pfm(base / paths["ao"]).astype(np.float64)
    return Triplet(
        left=read_png(base / paths["left"]),
        center=read_png(base / paths["center"]),
        right=read_png(base / paths["right"]),
        disparity=read_pfm(base / paths["disparity"]).astype(np.float64),
        ao=ao,
        valid=ao >= EPS_BACKGROUND,
        baseline=float(record["baseline"]),
        focal=float(record["focal"]),
        pose_id=record.get("pose_id", ""),
    )


def build_dataset(
    scenes: list,
    baselines: list,
    out_dir,
    resolutions: list | None = None,
    n: int = N_EXPORT_DEFAULT,
) -> DatasetManifest:
    """Export one triplet per (scene view x baseline x resolution).

    ``scenes`` is a list of SceneSpec. ``resolutions`` entries are
    (width, height); None keeps each view's native size. The manifest is
    written to out_dir/manifest.jsonl: a header line with version, count,
    and the pooled valid-pixel disparity histogram (1 px bins), then one
    sorted-key JSON record per triplet.
    """
    if not scenes:
        raise ValueError("scene list is empty")
    out = _prepare_out_dir(out_dir, baselines)

    records = []
    counts = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
    for spec in scenes:
        scene_dir = out / spec.scene_id
        for k, (intr, pose) in enumerate(spec.views):
            for b in baselines:
                for res in resolutions or [None]:
                    cam = intr if res is None else scale_intrinsics(intr, res[0], res[1])
                    trip = render_triplet(spec.fld, pose, cam, StereoRig(baseline=b),
                                          n=n, pose_id=f"{k:03d}")
                    stem = f"pose{k:03d}_b{b:g}_{cam.width}x{cam.height}"
                    record = save_triplet(trip, scene_dir, stem)
                    record["scene_id"] = spec.scene_id
                    record["paths"] = {
                        key: f"{spec.scene_id}/{rel}" for key, rel in record["paths"].items()
                    }
                    records.append(record)
                    _histogram(trip.disparity, trip.valid, counts)

    return _finalize_manifest(records, counts, out)


def export_fixture(
    name: str,
    out_dir,
    baselines: list,
    seed: int = 0,
    views: int = 20,
    res: int = 64,
) -> DatasetManifest:
    """Export a bundled analytic fixture in the standard dataset layout.

    Each posed view becomes one exact-ground-truth triplet per baseline,
    written through the same persistence path as field-rendered datasets,
    so downstream consumers cannot tell the substrates apart.
    """
    scene, cams = make_fixture(name, seed=seed, views=views, res=res)
    out = _prepare_out_dir(out_dir, baselines)
    records = []
    counts = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
    scene_dir = out / name
    for k, (intr, pose) in enumerate(cams):
        for b in baselines:
            trip = analytic_triplet(scene, intr, pose, StereoRig(baseline=b), pose_id=f"{k:03d}")
            stem = f"pose{k:03d}_b{b:g}_{intr.width}x{intr.height}"
            record = save_triplet(trip, scene_dir, stem)
            record["scene_id"] = name
            record["paths"] = {key: f"{name}/{rel}" for key, rel in record["paths"].items()}
            records.append(record)
            _histogram(trip.disparity, trip.valid, counts)
    return _finalize_manifest(records, counts, out)


def _prepare_out_dir(out_dir, baselines) -> Path:
    for b in baselines:
        if not b > 0:
            raise ValueError(f"baselines must be positive, got {b}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _finalize_manifest(records: list, counts: np.ndarray, out: Path) -> DatasetManifest:
    manifest = DatasetManifest(
        format_version=MANIFEST_VERSION,
        records=records,
        histogram=counts.tolist(),
    )
    _write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def _write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        header = {
            "format_version": manifest.format_version,
            "count": manifest.count,
            "histogram": manifest.histogram,
        }
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest and (by default) verify every referenced file exists."""
    p = Path(path)
    lines = p.read_text(encoding="ascii").splitlines()
    if not lines:
        raise ValueError(f"manifest {p} is empty")
    header = json.loads(lines[0])
    records = [json.loads(line) for line in lines[1:]]
    if header.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {header.get('format_version')!r}")
    if header.get("count") != len(records):
        raise ValueError(f"header count {header.get('count')} != {len(records)} records")
    if check_files:
        base = p.parent
        for rec in records:
            for rel in rec["paths"].values():
                target = base / rel
                if not target.exists():
                    raise FileNotFoundError(f"manifest references missing file {target}")
    return DatasetManifest(
        format_version=header["format_version"],
        records=records,
        histogram=header["histogram"],
    )
