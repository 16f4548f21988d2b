"""Photometric supervision for stereo from rendered triplets.

The training signal for a disparity map combines:

* a structural-similarity + L1 photometric residual between the center
  image and a backward-warped side image,
* a per-pixel minimum over the left and right reconstructions, which lets
  pixels occluded in one view be scored against the other,
* a binary automask that drops pixels whose warped residual is no better
  than not warping at all (untextured regions, specularities),
* a rendered-disparity regression term gated by ambient occlusion, so
  uncertain renders fall back to photometric supervision.

Everything here is a pure torch function of its inputs and stays
differentiable with respect to the disparity map; only the automask and
the AO gate are detached (they act as constants within a step).

Images are (H, W, 3) and maps are (H, W); numpy arrays are accepted and
converted, but gradients obviously flow only through tensor inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "LossConfig",
    "LossReport",
    "ssim",
    "warp_horizontal",
    "photometric_loss",
    "triplet_loss",
    "disparity_loss",
    "combine_terms",
    "ns_loss",
    "masked_mean",
]


@dataclass(frozen=True)
class LossConfig:
    """Weights and gates of the combined loss.

    beta mixes SSIM against L1 inside the photometric residual;
    ao_threshold is the occlusion-confidence cutoff below which the
    disparity term is silenced; gamma_triplet and gamma_disparity scale
    the two terms; ssim_window is the box-filter side length.
    """

    beta: float = 0.85
    ao_threshold: float = 0.5
    gamma_triplet: float = 0.1
    gamma_disparity: float = 1.0
    ssim_window: int = 3

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0,1], got {self.beta}")
        if not 0.0 <= self.ao_threshold <= 1.0:
            raise ValueError(f"ao_threshold must be in [0,1], got {self.ao_threshold}")
        if self.gamma_triplet < 0 or self.gamma_disparity < 0:
            raise ValueError("term weights must be >= 0")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and positive, got {self.ssim_window}")


@dataclass
class LossReport:
    """Per-pixel maps plus the scalar objective of one loss evaluation.

    ``total_scalar`` is the differentiable mean of the combined map over
    active pixels (those where either term is switched on); the other
    scalars are diagnostics averaged over the masks named in their docs.
    """

    pair_left: torch.Tensor  # photometric residual vs left reconstruction
    pair_right: torch.Tensor  # photometric residual vs right reconstruction
    triplet: torch.Tensor  # per-pixel min with occlusion fallback
    automask: torch.Tensor  # {0,1}, detached
    gate: torch.Tensor  # AO gate: 0 below threshold, else the AO value
    disparity_err: torch.Tensor  # |rendered - predicted|, zero off-mask
    total: torch.Tensor  # combined per-pixel loss
    total_scalar: torch.Tensor  # mean of `total` over active pixels
    triplet_scalar: torch.Tensor
    disparity_scalar: torch.Tensor
    active_fraction: float


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _as_image(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {tuple(t.shape)}")
    return t if t.is_floating_point() else t.to(torch.float64)


def _box_filter(x: torch.Tensor, window: int) -> torch.Tensor:
    """Mean over a window x window neighborhood, reflect-padded; (C,H,W)."""
    pad = window // 2
    y = F.pad(x.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    return F.avg_pool2d(y, window, stride=1).squeeze(0)


def ssim(a, b, window: int = 3) -> torch.Tensor:
    """Per-pixel structural similarity of two images, channel-averaged.

    Local statistics come from a reflect-padded box filter; stabilizers
    are the usual C1=0.01^2, C2=0.03^2 for [0,1]-ranged inputs. Returns an
    (H, W) map in [-1, 1].
    """
    ia, ib = _as_image(a), _as_image(b)
    if ia.shape != ib.shape:
        raise ValueError(f"shape mismatch: {tuple(ia.shape)} vs {tuple(ib.shape)}")
    xa = ia.permute(2, 0, 1)
    xb = ib.permute(2, 0, 1)
    mu_a = _box_filter(xa, window)
    mu_b = _box_filter(xb, window)
    var_a = _box_filter(xa * xa, window) - mu_a * mu_a
    var_b = _box_filter(xb * xb, window) - mu_b * mu_b
    cov = _box_filter(xa * xb, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    # rounding can push the ratio past 1 by ~1e-16 on identical inputs;
    # clamp into the declared range so downstream losses stay nonnegative
    return (num / den).mean(dim=0).clamp(-1.0, 1.0)


def warp_horizontal(target, disp, side: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward-warp a side image onto the center view along image rows.

    side="right" samples the target at x - d (the right image as seen from
    the center); side="left" samples at x + d. Bilinear along x; sample
    positions outside the full-support range [0, W-1] are border-clamped
    and reported False in the in-bounds mask. Differentiable wrt disp.
    """
    img = _as_image(target)
    d = torch.as_tensor(disp)
    if d.shape != img.shape[:2]:
        raise ValueError(f"disparity shape {tuple(d.shape)} does not match image {tuple(img.shape[:2])}")
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    h, w = img.shape[:2]
    xs = torch.arange(w, dtype=d.dtype).expand(h, w)
    pos = xs + d if side == "left" else xs - d
    in_bounds = (pos >= 0) & (pos <= w - 1)
    pos_c = pos.clamp(0, w - 1)
    x0 = pos_c.floor().clamp(0, w - 2)
    frac = (pos_c - x0).unsqueeze(-1)
    x0i = x0.long()
    rows = torch.arange(h).unsqueeze(1).expand(h, w)
    left_px = img[rows, x0i]
    right_px = img[rows, x0i + 1]
    warped = left_px * (1 - frac) + right_px * frac
    return warped, in_bounds


def photometric_loss(center, reconstructed, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-pixel image difference: beta*(1-SSIM)/2 + (1-beta)*L1.

    The L1 term is channel-averaged, so identical images score exactly 0
    and the map lives in [0, ~1] for [0,1]-ranged inputs.
    """
    ic, ir = _as_image(center), _as_image(reconstructed)
    if ic.shape != ir.shape:
        raise ValueError(f"shape mismatch: {tuple(ic.shape)} vs {tuple(ir.shape)}")
    s = ssim(ic, ir, window=cfg.ssim_window)
    l1 = (ic - ir).abs().mean(dim=-1)
    return cfg.beta * (1 - s) / 2 + (1 - cfg.beta) * l1


def triplet_loss(
    left, center, right, disp, cfg: LossConfig = LossConfig()
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel minimum photometric residual over both warped sides.

    Pixels whose warp sample leaves one image fall back to the other
    pair's residual; pixels out of bounds on both sides get loss 0 and an
    automask of 0. The automask is 1 only where the best warped residual
    strictly beats the better of the two *unwarped* residuals, and is
    returned detached (a constant gate within an optimization step).
    """
    il, ic, ir = _as_image(left), _as_image(center), _as_image(right)
    warped_l, in_l = warp_horizontal(il, disp, side="left")
    warped_r, in_r = warp_horizontal(ir, disp, side="right")
    loss_l = photometric_loss(ic, warped_l, cfg)
    loss_r = photometric_loss(ic, warped_r, cfg)

    big = torch.inf
    cand_l = torch.where(in_l, loss_l, torch.full_like(loss_l, big))
    cand_r = torch.where(in_r, loss_r, torch.full_like(loss_r, big))
    any_in = in_l | in_r
    tri = torch.minimum(cand_l, cand_r)
    tri = torch.where(any_in, tri, torch.zeros_like(tri))

    with torch.no_grad():
        still_l = photometric_loss(ic, il, cfg)
        still_r = photometric_loss(ic, ir, cfg)
        mask = (tri < torch.minimum(still_l, still_r)) & any_in
    return tri, mask.to(tri.dtype)


def disparity_loss(rendered, predicted, valid) -> torch.Tensor:
    """Absolute disparity error; zero wherever the rendered map is invalid.

    The valid mask is the caller's record of which pixels may enter a
    reduction; use masked_mean with the same mask.
    """
    dr = torch.as_tensor(rendered)
    dp = torch.as_tensor(predicted)
    if dr.shape != dp.shape:
        raise ValueError(f"shape mismatch: {tuple(dr.shape)} vs {tuple(dp.shape)}")
    v = torch.as_tensor(valid, dtype=torch.bool)
    err = (dr - dp).abs()
    return torch.where(v, err, torch.zeros_like(err))


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of x over true mask entries; 0 when the mask is empty."""
    m = torch.as_tensor(mask, dtype=torch.bool)
    n = int(m.sum())
    if n == 0:
        return torch.zeros((), dtype=x.dtype)
    return x[m].sum() / n


def combine_terms(
    gate: torch.Tensor,
    disparity_err: torch.Tensor,
    automask: torch.Tensor,
    triplet_res: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """The per-pixel combination of the two supervision terms.

    gamma_disparity * gate * disparity_err
        + automask * gamma_triplet * (1 - gate) * triplet_res

    Split out so the arithmetic can be exercised on bare numbers.
    """
    return (
        cfg.gamma_disparity * gate * disparity_err
        + automask * cfg.gamma_triplet * (1 - gate) * triplet_res
    )


def ns_loss(triplet, predicted_disp, cfg: LossConfig = LossConfig()) -> LossReport:
    """Combined per-pixel training loss of a disparity map against a triplet.

    ``triplet`` is any object with attributes left, center, right (H,W,3
    images), disparity, ao, valid (H,W maps): the rendered training tuple.
    The gate is 0 where AO < ao_threshold and the raw AO value otherwise
    (a boundary AO exactly at the threshold keeps its value). Per pixel:

        total = gamma_disparity * gate * |d_rendered - d_predicted|
              + automask * gamma_triplet * (1 - gate) * triplet_residual

    The scalar objective is the mean of ``total`` over active pixels,
    where a pixel is active if the gate or the automask is nonzero.
    """
    d_hat = torch.as_tensor(predicted_disp)
    ao = torch.as_tensor(triplet.ao, dtype=d_hat.dtype if d_hat.is_floating_point() else torch.float64)
    valid = torch.as_tensor(triplet.valid, dtype=torch.bool)

    tri, mask = triplet_loss(triplet.left, triplet.center, triplet.right, d_hat, cfg)
    pair_l = photometric_loss(_as_image(triplet.center), warp_horizontal(triplet.left, d_hat, "left")[0], cfg)
    pair_r = photometric_loss(_as_image(triplet.center), warp_horizontal(triplet.right, d_hat, "right")[0], cfg)
    d_err = disparity_loss(triplet.disparity, d_hat, valid)

    gate = torch.where(ao < cfg.ao_threshold, torch.zeros_like(ao), ao).detach()
    total = combine_terms(gate, d_err, mask, tri, cfg)

    active = (gate > 0) | (mask > 0)
    scalar = masked_mean(total, active)
    return LossReport(
        pair_left=pair_l,
        pair_right=pair_r,
        triplet=tri,
        automask=mask,
        gate=gate,
        disparity_err=d_err,
        total=total,
        total_scalar=scalar,
        triplet_scalar=masked_mean(tri, mask > 0),
        disparity_scalar=masked_mean(d_err, valid),
        active_fraction=float(active.to(torch.float64).mean()),
    )
