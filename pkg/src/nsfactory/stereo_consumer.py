"""Consumers of exported stereo triplets: block matching and a loss-driven
per-pixel disparity optimizer.

``block_match`` is a classical winner-take-all matcher with a symmetric
left-right consistency check. It serves two roles: a trusted, simple
baseline for tests, and the initializer for ``optimize_disparity``, which
refines a free H x W disparity field by gradient descent on the combined
training loss. The optimizer is the desk-scale stand-in for training a
stereo network on exported data: it shares the loss, the supervision
masks, and the evaluation protocol, while staying small enough to run in
a test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffengine import OptState, ParamSet, adam_step, gradient
from .evalkit import EvalMask, bad_tau
from .nsloss import LossConfig, masked_mean, ns_loss, photometric_loss, ssim, triplet_loss, warp_horizontal

__all__ = [
    "MatcherConfig",
    "DisparityField",
    "TraceRow",
    "OptimizationDiverged",
    "OBJECTIVES",
    "block_match",
    "optimize_disparity",
    "write_trace",
]

OBJECTIVES = ("full", "triplet", "single_pair")

# Sentinel cost for disparity candidates whose sample leaves the image;
# any real aggregated residual of [0,1] images stays far below this.
_OUT_OF_RANGE_COST = 1e3


class OptimizationDiverged(RuntimeError):
    """The refinement loss went non-finite; carries the trace so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class MatcherConfig:
    """Block-matching knobs: search range, window, and cost flavor.

    ``uniqueness_margin`` is the minimum cost gap between the best
    candidate and the best non-adjacent runner-up; ties within the margin
    mark the pixel ambiguous (textureless regions fail this).
    """

    d_max: int = 64
    window: int = 7
    cost: str = "sad"  # "sad" or "ssim"
    uniqueness_margin: float = 1e-6

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError(f"d_max must be >= 1, got {self.d_max}")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.cost not in ("sad", "ssim"):
            raise ValueError(f"cost must be 'sad' or 'ssim', got {self.cost!r}")
        if self.uniqueness_margin < 0:
            raise ValueError("uniqueness_margin must be >= 0")


@dataclass
class DisparityField:
    """An optimized (or initial) per-pixel disparity estimate.

    values is (H, W) in pixels, finite and inside [0, d_max]; opt carries
    the optimizer accumulators so refinement can resume.
    """

    values: np.ndarray
    d_max: float
    opt: OptState | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"expected a 2-d field, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("disparity field contains non-finite values")
        if v.min() < 0 or v.max() > self.d_max:
            raise ValueError(f"disparity field leaves [0, {self.d_max}]")
        self.values = v


@dataclass(frozen=True)
class TraceRow:
    """One refinement step: scalar loss and bad-2 against the rendered map."""

    step: int
    loss: float
    bad2: float


def write_trace(rows: list, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("step,loss,bad2\n")
        for r in rows:
            fh.write(f"{r.step},{r.loss:.8e},{r.bad2:.6f}\n")


# --- block matching ---


def _as_gray(img) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img, dtype=np.float64))
    if t.ndim == 3 and t.shape[-1] == 3:
        t = t.mean(dim=-1)
    if t.ndim != 2:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {tuple(t.shape)}")
    return t


def _shift_columns(img: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """out[:, x] = img[:, x + k] plus the in-range mask."""
    h, w = img.shape
    out = torch.zeros_like(img)
    ok = torch.zeros(h, w, dtype=torch.bool)
    if k >= 0:
        if k < w:
            out[:, : w - k] = img[:, k:]
            ok[:, : w - k] = True
    elif -k < w:
        out[:, -k:] = img[:, : w + k]
        ok[:, -k:] = True
    return out, ok


def _masked_box_mean(res: torch.Tensor, ok: torch.Tensor, window: int) -> torch.Tensor:
    """Window mean of res over in-range columns only (zero-padded edges)."""
    pad = window // 2
    okf = ok.to(res.dtype)
    num = F.avg_pool2d(F.pad((res * okf)[None, None], (pad,) * 4), window, stride=1)[0, 0]
    den = F.avg_pool2d(F.pad(okf[None, None], (pad,) * 4), window, stride=1)[0, 0]
    return torch.where(den > 0, num / den.clamp_min(1e-12), torch.zeros_like(num))


def _cost_volume(ref: torch.Tensor, tgt: torch.Tensor, sign: int, cfg: MatcherConfig) -> torch.Tensor:
    """Aggregated matching cost per disparity candidate, (d_max+1, H, W).

    sign=-1 matches ref pixel x against tgt at x - d (left-style reference);
    sign=+1 against x + d (right-style reference). Columns whose sample
    leaves the image are excluded from (SAD) or neutral in (SSIM) the
    window aggregate, so border pixels cannot manufacture cost contrast.
    """
    h, w = ref.shape
    costs = torch.empty(cfg.d_max + 1, h, w, dtype=ref.dtype)
    ref3 = ref.unsqueeze(-1).expand(h, w, 3) if cfg.cost == "ssim" else None
    for d in range(cfg.d_max + 1):
        moved, ok = _shift_columns(tgt, sign * d)
        if cfg.cost == "sad":
            res = _masked_box_mean((ref - moved).abs(), ok, cfg.window)
        else:
            moved3 = torch.where(ok, moved, ref).unsqueeze(-1).expand(h, w, 3)
            res = (1.0 - ssim(ref3, moved3, window=cfg.window)) / 2.0
        costs[d] = torch.where(ok, res, torch.full_like(res, _OUT_OF_RANGE_COST))
    return costs


def _winner_take_all(costs: torch.Tensor, margin: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Best integer disparity per pixel plus a uniqueness mask.

    The runner-up search skips candidates adjacent to the winner (a sharp
    minimum has ordinary shoulders) and out-of-range sentinels (absent
    candidates are not evidence). Pixels without any viable runner-up
    cannot be certified unique.
    """
    best = costs.argmin(dim=0)
    best_cost = costs.gather(0, best[None])[0]
    idx = torch.arange(costs.shape[0])[:, None, None]
    skip = ((idx - best[None]).abs() <= 1) | (costs >= _OUT_OF_RANGE_COST)
    others = torch.where(skip, torch.full_like(costs, math.inf), costs)
    second = others.min(dim=0).values
    unique = torch.isfinite(second) & (second - best_cost > margin)
    return best.to(torch.float64), unique


def block_match(left, right, cfg: MatcherConfig = MatcherConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Integer winner-take-all disparity of a rectified pair.

    Returns (disparity, valid): disparity is the left/reference view's map;
    valid requires an unambiguous winner on the reference side plus a
    symmetric left-right consistency check within 1 px.
    """
    il, ir = _as_gray(left), _as_gray(right)
    if il.shape != ir.shape:
        raise ValueError(f"image shapes differ: {tuple(il.shape)} vs {tuple(ir.shape)}")
    disp_l, unique_l = _winner_take_all(_cost_volume(il, ir, -1, cfg), cfg.uniqueness_margin)
    disp_r, _ = _winner_take_all(_cost_volume(ir, il, +1, cfg), cfg.uniqueness_margin)

    h, w = il.shape
    xs = torch.arange(w).expand(h, w)
    target = (xs - disp_l.long()).clamp(0, w - 1)
    in_range = xs - disp_l.long() >= 0
    rows = torch.arange(h).unsqueeze(1).expand(h, w)
    agree = (disp_l - disp_r[rows, target]).abs() <= 1.0
    valid = unique_l & in_range & agree
    return disp_l.numpy(), valid.numpy()


# --- loss-driven refinement ---


def _make_objective(triplet, cfg: LossConfig, kind: str, seen: dict):
    if kind not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {kind!r}")

    def _objective(ps: ParamSet) -> torch.Tensor:
        d = ps["disparity"]
        if kind == "full":
            scalar = ns_loss(triplet, d, cfg).total_scalar
        elif kind == "triplet":
            tri, mask = triplet_loss(triplet.left, triplet.center, triplet.right, d, cfg)
            scalar = masked_mean(tri, mask > 0)
        else:
            warped, in_b = warp_horizontal(triplet.right, d, side="right")
            scalar = masked_mean(photometric_loss(triplet.center, warped, cfg), in_b)
        seen["loss"] = float(scalar.detach())
        return scalar

    return _objective


def optimize_disparity(
    triplet,
    cfg: LossConfig = LossConfig(),
    steps: int = 500,
    lr: float = 0.05,
    *,
    objective: str = "full",
    matcher: MatcherConfig = MatcherConfig(),
    init: np.ndarray | None = None,
    trace_path=None,
) -> tuple[DisparityField, list]:
    """Refine a per-pixel disparity field against one triplet.

    Initialization is the block-matching estimate where its validity check
    passes and 0 elsewhere (pure photometric descent from zero stalls in
    local minima that say nothing about the loss; the initializer keeps
    the experiment about supervision quality). Each step minimizes the
    selected scalar objective with Adam, then clamps the field into
    [0, d_max]. The trace records the scalar loss and bad-2 against the
    triplet's rendered disparity: row 0 is the initialization, row k the
    field after k updates. A non-finite loss aborts with the partial
    trace attached to the raised error.

    The returned field is the lowest-loss iterate encountered (earliest on
    ties), not necessarily the last: Adam's step size keeps the parameters
    jittering at a fixed amplitude once converged, and an init that is
    already optimal must come back out unharmed. The attached opt state is
    the end-of-run accumulator, so refinement can resume from the trace's
    final step.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")

    if init is None:
        bm_disp, bm_valid = block_match(triplet.center, triplet.right, matcher)
        start = np.where(bm_valid, bm_disp, 0.0)
    else:
        start = np.clip(np.asarray(init, dtype=np.float64), 0.0, float(matcher.d_max))
    if start.shape != triplet.disparity.shape:
        raise ValueError("initial field shape does not match the triplet")

    params = ParamSet({"disparity": start})
    state = OptState(lr=lr)
    seen: dict = {}
    obj = _make_objective(triplet, cfg, objective, seen)
    gt_mask = EvalMask.build(np.asarray(triplet.valid, dtype=bool))

    def _bad2() -> float:
        est = params["disparity"].detach().numpy()
        return bad_tau(est, triplet.disparity, 2.0, gt_mask)

    rows: list[TraceRow] = []
    best_loss, best_values = math.inf, start.copy()

    def _abort(step: int) -> OptimizationDiverged:
        if trace_path is not None:
            write_trace(rows, trace_path)
        return OptimizationDiverged(f"non-finite loss at step {step}", rows)

    def _record(step: int, loss: float) -> None:
        nonlocal best_loss, best_values
        rows.append(TraceRow(step=step, loss=loss, bad2=_bad2()))
        if loss < best_loss:
            best_loss = loss
            best_values = params["disparity"].detach().numpy().copy()
        if not math.isfinite(loss):
            raise _abort(step)

    for k in range(steps):
        grads = gradient(obj, params)
        _record(k, seen["loss"])
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise _abort(k)
        adam_step(params, grads, state)
        with torch.no_grad():
            params["disparity"].clamp_(0.0, float(matcher.d_max))

    with torch.no_grad():
        final_loss = float(obj(params))
    _record(steps, final_loss)

    if trace_path is not None:
        write_trace(rows, trace_path)
    return DisparityField(values=best_values, d_max=float(matcher.d_max), opt=state), rows
