"""Per-scene radiance-field fitting from posed images.

A scene is a handful of posed views; fitting minimizes the mean squared
color error of rendered ray batches and runs the explicit Adam update from
diffengine directly on the field's parameters. The loop emits a CSV trace
(step, loss, psnr_train, psnr_holdout) and can checkpoint the result in the
field module's format.

By default the last view is held out of training and scored periodically,
which is where the generalization numbers in the test suite come from.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffengine import OptState, ParamSet, adam_step, gradient
from .field import RadianceField, make_field, save_field
from .geometry import Intrinsics, Pose
from .renderer import ray_grid, render_image, render_rays

__all__ = [
    "SceneDataset",
    "TrainConfig",
    "TrainingDiverged",
    "color_residual",
    "rend_loss",
    "psnr",
    "fit",
]

_BACKENDS = ("dense", "hash")


class TrainingDiverged(RuntimeError):
    """The training loss left the reals; carries the offending step."""


@dataclass
class SceneDataset:
    """Posed views of one static scene, all the fit ever sees.

    images are (H, W, 3) float arrays in [0,1]; cameras is the matching
    list of (Intrinsics, Pose). The scene is assumed to live inside the
    unit cube (the field's fixed bounds).
    """

    images: list
    cameras: list

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError(
                f"{len(self.images)} images but {len(self.cameras)} cameras"
            )
        if len(self.images) < 2:
            raise ValueError("a scene needs at least two views")
        shape = np.asarray(self.images[0]).shape
        for i, img in enumerate(self.images):
            arr = np.asarray(img)
            if arr.shape != shape or arr.ndim != 3 or arr.shape[-1] != 3:
                raise ValueError(f"image {i} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"image {i} contains non-finite values")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"image {i} values outside [0,1]")
        for i, (intr, pose) in enumerate(self.cameras):
            if intr.height != shape[0] or intr.width != shape[1]:
                raise ValueError(f"camera {i} size does not match its image")

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class TrainConfig:
    """Fit hyperparameters; defaults match the desk-scale regime."""

    steps: int = 2000
    batch_rays: int = 4096
    samples_per_ray: int = 128
    seed: int = 0
    deterministic: bool = True
    backend: str = "dense"
    eval_every: int = 100
    holdout: bool = True
    grid_lr: float = 1e-2
    mlp_lr: float = 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_rays < 1:
            raise ValueError(f"batch_rays must be >= 1, got {self.batch_rays}")
        if self.samples_per_ray < 1:
            raise ValueError(f"samples_per_ray must be >= 1, got {self.samples_per_ray}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.backend not in _BACKENDS:
            raise ValueError(f"backend must be one of {_BACKENDS}, got {self.backend!r}")


def color_residual(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared color error summed across channels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).sum(dim=-1).mean()


def rend_loss(
    field,
    rays: tuple[torch.Tensor, torch.Tensor],
    targets: torch.Tensor,
    n: int = 128,
    jitter: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Rendering loss of a ray batch: render, then color_residual."""
    origins, dirs = rays
    color, _, _, _ = render_rays(field, origins, dirs, n, jitter=jitter, generator=generator)
    return color_residual(color, torch.as_tensor(targets, dtype=color.dtype))


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; inf on equality."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _flatten_rays(scene: SceneDataset, view_indices, dtype) -> tuple[torch.Tensor, ...]:
    origins, dirs, colors = [], [], []
    for i in view_indices:
        intr, pose = scene.cameras[i]
        o, d = ray_grid(intr, pose, dtype=dtype)
        origins.append(o)
        dirs.append(d)
        colors.append(torch.as_tensor(np.asarray(scene.images[i]).reshape(-1, 3), dtype=dtype))
    return torch.cat(origins), torch.cat(dirs), torch.cat(colors)


def fit(
    scene: SceneDataset,
    cfg: TrainConfig = TrainConfig(),
    field: RadianceField | None = None,
    trace_path=None,
    checkpoint_path=None,
) -> RadianceField:
    """Fit a radiance field to a scene by stochastic ray-batch descent.

    Rays are drawn uniformly over all pixels of the training views with a
    seeded generator (fresh entropy when cfg.deterministic is off). The
    last view is excluded from training and scored as the holdout when
    cfg.holdout is set. A non-finite loss aborts with the step number.

    trace_path, if given, receives a CSV with one row per step; the PSNR
    columns are filled on eval steps (every cfg.eval_every, plus the last)
    and left empty elsewhere. checkpoint_path saves the final field.
    """
    if field is None:
        field = make_field(cfg.backend, seed=cfg.seed)
    holdout_idx = len(scene) - 1 if cfg.holdout else None
    train_indices = [i for i in range(len(scene)) if i != holdout_idx]
    dtype = next(field.parameters()).dtype
    origins, dirs, colors = _flatten_rays(scene, train_indices, dtype)

    params = ParamSet.aliasing(dict(field.named_parameters()))
    opt = OptState(lr=cfg.grid_lr, lr_overrides={"mlp.": cfg.mlp_lr})
    gen = torch.Generator()
    if cfg.deterministic:
        gen.manual_seed(cfg.seed)
    else:
        gen.seed()  # fresh entropy; a default-constructed generator is fixed

    def evaluate() -> tuple[float, float]:
        ti = train_indices[0]
        intr, pose = scene.cameras[ti]
        out = render_image(field, intr, pose, n=cfg.samples_per_ray)
        p_train = psnr(out.color, scene.images[ti])
        p_hold = float("nan")
        if holdout_idx is not None:
            intr, pose = scene.cameras[holdout_idx]
            out = render_image(field, intr, pose, n=cfg.samples_per_ray)
            p_hold = psnr(out.color, scene.images[holdout_idx])
        return p_train, p_hold

    rows = []
    total = origins.shape[0]
    seen = {}
    for step in range(1, cfg.steps + 1):
        idx = torch.randint(0, total, (cfg.batch_rays,), generator=gen)
        batch = (origins[idx], dirs[idx])

        def objective(_params):
            val = rend_loss(field, batch, colors[idx], n=cfg.samples_per_ray,
                            jitter=True, generator=gen)
            seen["loss"] = float(val.detach())
            return val

        grads = gradient(objective, params)
        loss = seen["loss"]
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss at step {step}: {loss}")
        adam_step(params, grads, opt)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            p_train, p_hold = evaluate()
            rows.append((step, loss, f"{p_train:.6f}", "" if math.isnan(p_hold) else f"{p_hold:.6f}"))
        else:
            rows.append((step, loss, "", ""))

    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "psnr_train", "psnr_holdout"])
            for step, loss, pt, ph in rows:
                writer.writerow([step, f"{loss:.8e}", pt, ph])
    if checkpoint_path is not None:
        save_field(field, checkpoint_path)
    return field
