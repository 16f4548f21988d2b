"""Command-line entry points for the dataset factory.

Subcommands cover the full pipeline:

* ``gen-fixture``: export an analytic fixture as an exact-ground-truth
  dataset (the fast substrate for loss and evaluation work).
* ``fit-nerf``: fit a radiance field to a fixture's posed views and save
  a checkpoint plus a per-step trace.
* ``export-dataset``: render stereo triplets from a fitted checkpoint
  into the standard dataset layout with a manifest.
* ``optimize``: run the self-supervised disparity refinement on one
  exported triplet and save the estimate plus its trace.
* ``eval``: score a disparity map against ground truth (bad-tau, with an
  optional non-occluded region) and write a report.
* ``plot-hist``: recount the disparity histogram from the exported maps
  and plot it.
* ``selftest``: run a battery of fast invariant checks in-process.

Option precedence is defaults < JSON config file (``--config``) < explicit
flags. The fully resolved configuration is written next to the outputs as
``resolved_config.json``. Exit codes: 0 success, 1 domain error (bad data,
diverged optimization, io failure), 2 usage error.

Thread count: ``--threads`` wins, then the NSF_THREADS environment
variable, then the torch default is left alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import evalkit, factory, nsloss
from .diffengine import OptState, ParamSet, adam_step, fd_check, gradient
from .factory import (
    HISTOGRAM_BINS,
    SceneSpec,
    _histogram,
    build_dataset,
    export_fixture,
    load_manifest,
    load_triplet,
    read_pfm,
    write_pfm,
)
from .field import DenseGridConfig, load_field, make_field
from .geometry import StereoRig
from .nerf_trainer import SceneDataset, TrainConfig, fit, psnr
from .renderer import (
    EPS_BACKGROUND,
    QuadratureSamples,
    composite,
    render_image,
    sample_bins,
)
from .scenegen import FIXTURE_NAMES, analytic_render, make_fixture
from .stereo_consumer import (
    OBJECTIVES,
    MatcherConfig,
    block_match,
    optimize_disparity,
    write_trace,
)

log = logging.getLogger("nsfactory")


class UsageError(Exception):
    """Bad invocation (unknown config key, missing required option)."""


# --- option resolution ---


def _csv_floats(text: str) -> list:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from exc


def _load_config_file(path: str, allowed: dict) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise UsageError(
            f"unknown config keys {unknown}; allowed: {sorted(allowed)}"
        )
    return data


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags, with unknown keys rejected."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        resolved.update(_load_config_file(args.config, defaults))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    if "baselines" in resolved and resolved["baselines"] is not None:
        resolved["baselines"] = [float(b) for b in resolved["baselines"]]
    return resolved


def _require(resolved: dict, *keys: str) -> None:
    missing = [k for k in keys if resolved.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _prepare_out(resolved: dict, command: str) -> Path:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command}
    payload.update(resolved)
    (out / "resolved_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n",
        encoding="utf-8",
    )
    return out


# --- subcommand handlers ---

_GEN_DEFAULTS = {
    "name": "plane",
    "out": None,
    "baselines": [0.5],
    "views": 20,
    "res": 64,
    "seed": 0,
}


def _cmd_gen_fixture(resolved: dict) -> int:
    _require(resolved, "out")
    out = _prepare_out(resolved, "gen-fixture")
    manifest = export_fixture(
        resolved["name"], out, resolved["baselines"],
        seed=resolved["seed"], views=resolved["views"], res=resolved["res"],
    )
    print(f"manifest={out / 'manifest.jsonl'}")
    print(f"count={manifest.count}")
    return 0


_FIT_DEFAULTS = {
    "fixture": "textured_cube",
    "out": None,
    "views": 20,
    "res": 64,
    "seed": 0,
    "steps": 2000,
    "batch_rays": 1024,
    "samples_per_ray": 64,
    "backend": "dense",
    "grid_lr": 0.05,
    "mlp_lr": 3e-3,
    "eval_every": 200,
    "init_raw_density": 0.0,
    "deterministic": True,
    "holdout": True,
}


def _cmd_fit_nerf(resolved: dict) -> int:
    _require(resolved, "out")
    out = _prepare_out(resolved, "fit-nerf")
    scene, cams = make_fixture(
        resolved["fixture"], seed=resolved["seed"],
        views=resolved["views"], res=resolved["res"],
    )
    images = [analytic_render(scene, intr, pose).color for intr, pose in cams]
    dataset = SceneDataset(images=images, cameras=cams)

    cfg = TrainConfig(
        steps=resolved["steps"], batch_rays=resolved["batch_rays"],
        samples_per_ray=resolved["samples_per_ray"], seed=resolved["seed"],
        deterministic=resolved["deterministic"], backend=resolved["backend"],
        eval_every=resolved["eval_every"], holdout=resolved["holdout"],
        grid_lr=resolved["grid_lr"], mlp_lr=resolved["mlp_lr"],
    )
    if cfg.backend == "dense":
        field = make_field(
            "dense", seed=cfg.seed,
            dense_cfg=DenseGridConfig(init_raw_density=resolved["init_raw_density"]),
        )
    else:
        field = make_field(cfg.backend, seed=cfg.seed)

    checkpoint = out / "checkpoint.nsfc"
    trace = out / "trace.csv"
    log.info("fitting %s: %d steps, backend=%s", resolved["fixture"], cfg.steps, cfg.backend)
    field = fit(dataset, cfg, field=field, trace_path=trace, checkpoint_path=checkpoint)

    print(f"checkpoint={checkpoint}")
    print(f"trace={trace}")
    if cfg.holdout:
        intr, pose = cams[-1]
        rendered = render_image(field, intr, pose, n=cfg.samples_per_ray)
        print(f"holdout_psnr={psnr(rendered.color, images[-1]):.4f}")
    return 0


_EXPORT_DEFAULTS = {
    "checkpoint": None,
    "fixture": "textured_cube",
    "out": None,
    "baselines": [0.5],
    "views": 20,
    "res": 64,
    "seed": 0,
    "samples_per_ray": 512,
}


def _cmd_export_dataset(resolved: dict) -> int:
    _require(resolved, "checkpoint", "out")
    out = _prepare_out(resolved, "export-dataset")
    field = load_field(resolved["checkpoint"])
    _, cams = make_fixture(
        resolved["fixture"], seed=resolved["seed"],
        views=resolved["views"], res=resolved["res"],
    )
    spec = SceneSpec(scene_id=resolved["fixture"], fld=field, views=tuple(cams))
    manifest = build_dataset([spec], resolved["baselines"], out,
                             n=resolved["samples_per_ray"])
    print(f"manifest={out / 'manifest.jsonl'}")
    print(f"count={manifest.count}")
    return 0


_OPTIMIZE_DEFAULTS = {
    "manifest": None,
    "record": 0,
    "out": None,
    "steps": 500,
    "lr": 0.05,
    "objective": "full",
    "ao_threshold": 0.5,
    "d_max": 64,
    "window": 7,
    "cost": "sad",
}


def _cmd_optimize(resolved: dict) -> int:
    _require(resolved, "manifest", "out")
    out = _prepare_out(resolved, "optimize")
    manifest_path = Path(resolved["manifest"])
    manifest = load_manifest(manifest_path)
    idx = int(resolved["record"])
    if not 0 <= idx < manifest.count:
        raise ValueError(f"record index {idx} outside [0, {manifest.count})")
    triplet = load_triplet(manifest_path.parent, manifest.records[idx])

    cfg = nsloss.LossConfig(ao_threshold=resolved["ao_threshold"])
    matcher = MatcherConfig(d_max=resolved["d_max"], window=resolved["window"],
                            cost=resolved["cost"])
    trace = out / "trace.csv"
    field, rows = optimize_disparity(
        triplet, cfg, steps=resolved["steps"], lr=resolved["lr"],
        objective=resolved["objective"], matcher=matcher, trace_path=trace,
    )
    disp_path = out / "disparity.pfm"
    write_pfm(field.values, disp_path)
    best = min(r.loss for r in rows)
    returned_bad2 = evalkit.bad_tau(
        field.values, triplet.disparity, 2.0, evalkit.EvalMask.build(triplet.valid)
    )
    print(f"disparity={disp_path}")
    print(f"trace={trace}")
    print(f"loss={best:.8e}")
    print(f"bad2={returned_bad2:.6f}")
    return 0


_EVAL_DEFAULTS = {
    "pred": None,
    "gt": None,
    "gt_right": None,
    "dataset_id": "custom",
    "tau": None,
    "out": None,
}


def _cmd_eval(resolved: dict) -> int:
    _require(resolved, "pred", "gt", "out")
    out = _prepare_out(resolved, "eval")
    pred = read_pfm(resolved["pred"]).astype(np.float64)
    gt = read_pfm(resolved["gt"]).astype(np.float64)
    tau = resolved["tau"]
    if tau is None:
        tau = evalkit.TAU_DEFAULTS.get(resolved["dataset_id"], 2.0)

    valid = np.isfinite(gt) & (gt > 0)
    noc = None
    if resolved["gt_right"] is not None:
        gt_right = read_pfm(resolved["gt_right"]).astype(np.float64)
        noc = evalkit.occlusion_mask(gt, gt_right) & valid
    mask = evalkit.EvalMask.build(valid, noc)
    record = evalkit.evaluate(pred, gt, tau, mask, resolved["dataset_id"])
    txt, csv_path = evalkit.report([record], out)
    print(evalkit.format_report([record]), end="")
    print(f"report_txt={txt}")
    print(f"report_csv={csv_path}")
    return 0


_PLOT_DEFAULTS = {
    "manifest": None,
    "out": None,
}


def _cmd_plot_hist(resolved: dict) -> int:
    _require(resolved, "manifest", "out")
    out = _prepare_out(resolved, "plot-hist")
    manifest_path = Path(resolved["manifest"])
    manifest = load_manifest(manifest_path)

    counts = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
    for record in manifest.records:
        disp = read_pfm(manifest_path.parent / record["paths"]["disparity"])
        ao = read_pfm(manifest_path.parent / record["paths"]["ao"])
        _histogram(disp.astype(np.float64), ao >= EPS_BACKGROUND, counts)
    if manifest.histogram and counts.tolist() != list(manifest.histogram):
        log.warning("recounted histogram differs from the manifest header")

    csv_path = out / "histogram.csv"
    with open(csv_path, "w", encoding="ascii") as fh:
        fh.write("bin_lo,count\n")
        for lo, c in enumerate(counts):
            fh.write(f"{lo},{int(c)}\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(np.arange(HISTOGRAM_BINS) + 0.5, counts, width=1.0, edgecolor="none")
    ax.set_xlabel("disparity (px)")
    ax.set_ylabel("valid pixels")
    ax.set_title("disparity distribution")
    png_path = out / "histogram.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)

    print(f"png={png_path}")
    print(f"csv={csv_path}")
    return 0


# --- selftest checks ---


def _check_pfm_round_trip() -> None:
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((17, 23)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.pfm"
        write_pfm(arr, path)
        back = read_pfm(path)
    if not np.array_equal(back, arr):
        raise AssertionError("pfm round trip is not bit-exact")


def _check_quadrature_closed_form() -> None:
    t, delta = sample_bins(0.0, 1.0, 256)
    s = QuadratureSamples(t=t, delta=delta, sigma=np.ones(256),
                          color=np.full((256, 3), 0.7))
    color, _, ao, t_final = composite(s)
    expect = 1.0 - math.exp(-1.0)
    if abs(ao - expect) > 1e-3:
        raise AssertionError(f"homogeneous AO {ao} vs closed form {expect}")
    if abs((ao + t_final) - 1.0) > 1e-12:
        raise AssertionError("AO + final transmittance != 1")
    if np.abs(color - 0.7 * ao).max() > 1e-9:
        raise AssertionError("constant-color ray does not scale with AO")


def _check_telescoping_random() -> None:
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(2, 64))
        t, delta = sample_bins(0.1, 2.0, n)
        s = QuadratureSamples(t=t, delta=delta,
                              sigma=rng.uniform(0, 50, n),
                              color=rng.uniform(0, 1, (n, 3)))
        _, _, ao, t_final = composite(s)
        if abs(ao + t_final - 1.0) > 1e-9:
            raise AssertionError("telescoping identity violated")


def _check_plane_disparity_identity() -> None:
    scene, cams = make_fixture("plane", seed=0)
    intr, pose = cams[0]
    view = analytic_render(scene, intr, pose, baseline=0.5)
    expect = np.zeros_like(view.depth)
    np.divide(0.5 * intr.fx, view.depth, out=expect, where=view.valid)
    err = np.abs(view.disparity[view.valid] - expect[view.valid]).max()
    if err > 1e-9:
        raise AssertionError(f"disparity identity off by {err}")


def _check_warp_consistency() -> None:
    scene, cams = make_fixture("plane", seed=0)
    intr, pose = cams[0]
    trip = factory.analytic_triplet(scene, intr, pose, StereoRig(0.5))
    warped, in_b = nsloss.warp_horizontal(
        torch.as_tensor(trip.right), torch.as_tensor(trip.disparity), side="right"
    )
    sel = torch.as_tensor(trip.valid) & in_b & (torch.as_tensor(trip.ao) > 0.9)
    mae = (warped - torch.as_tensor(trip.center)).abs()[sel].mean().item()
    if mae > 0.02:
        raise AssertionError(f"warp reconstruction MAE {mae}")


def _check_gradient_certification() -> None:
    scene, cams = make_fixture("plane", seed=0, res=16)
    intr, pose = cams[0]
    trip = factory.analytic_triplet(scene, intr, pose, StereoRig(0.25))
    # probe away from integer disparities: bilinear warping is kinked at
    # grid nodes, where one-sided and central derivatives must differ
    params = ParamSet({"disparity": trip.disparity + 0.37})

    def objective(p):
        report = nsloss.ns_loss(trip, p["disparity"], nsloss.LossConfig())
        return report.total_scalar

    rel = fd_check(objective, params, probe_count=50)
    if rel > 1e-4:
        raise AssertionError(f"analytic vs finite-difference mismatch {rel}")


def _check_adam_first_step() -> None:
    params = ParamSet({"p": np.zeros(3)})
    state = OptState(lr=0.1)
    adam_step(params, {"p": np.ones(3)}, state)
    expect = -0.1 * (1.0 / (1.0 + state.eps))
    if np.abs(params["p"].detach().numpy() - expect).max() > 1e-12:
        raise AssertionError("first Adam step does not match the closed form")


def _check_block_match_recovers_shift() -> None:
    rng = np.random.default_rng(2)
    left = rng.uniform(0, 1, (24, 48))
    right = np.roll(left, -3, axis=1)
    disp, valid = block_match(left, right, MatcherConfig(d_max=8))
    interior = np.zeros_like(valid)
    interior[4:-4, 8:-8] = True
    sel = interior & valid
    if valid[interior].mean() < 0.9 or not (disp[sel] == 3.0).all():
        raise AssertionError("block matching failed to recover a constant shift")


_SELFTEST_CHECKS = (
    ("pfm round trip", _check_pfm_round_trip),
    ("quadrature closed form", _check_quadrature_closed_form),
    ("telescoping identity", _check_telescoping_random),
    ("plane disparity identity", _check_plane_disparity_identity),
    ("warp consistency", _check_warp_consistency),
    ("gradient certification", _check_gradient_certification),
    ("adam first step", _check_adam_first_step),
    ("block match shift", _check_block_match_recovers_shift),
)

_SELFTEST_DEFAULTS: dict = {}


def _cmd_selftest(resolved: dict) -> int:
    failures = 0
    for name, check in _SELFTEST_CHECKS:
        try:
            check()
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"ok   {name}")
    print(f"{len(_SELFTEST_CHECKS) - failures}/{len(_SELFTEST_CHECKS)} checks passed")
    return 0 if failures == 0 else 1


# --- parser assembly ---

_COMMANDS = {
    "gen-fixture": (_GEN_DEFAULTS, _cmd_gen_fixture),
    "fit-nerf": (_FIT_DEFAULTS, _cmd_fit_nerf),
    "export-dataset": (_EXPORT_DEFAULTS, _cmd_export_dataset),
    "optimize": (_OPTIMIZE_DEFAULTS, _cmd_optimize),
    "eval": (_EVAL_DEFAULTS, _cmd_eval),
    "plot-hist": (_PLOT_DEFAULTS, _cmd_plot_hist),
    "selftest": (_SELFTEST_DEFAULTS, _cmd_selftest),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nsfactory",
        description="stereo training-data factory: fixtures, fitting, export, refinement, scoring",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="torch thread count (overrides NSF_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON file with option defaults (flags still win)")
        return p

    p = add("gen-fixture", "export an analytic fixture as an exact dataset")
    p.add_argument("--name", choices=FIXTURE_NAMES, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--baselines", type=_csv_floats, default=None,
                   help="comma-separated center-to-side baselines")
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("fit-nerf", "fit a radiance field to a fixture")
    p.add_argument("--fixture", choices=FIXTURE_NAMES, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-rays", type=int, default=None, dest="batch_rays")
    p.add_argument("--samples-per-ray", type=int, default=None, dest="samples_per_ray")
    p.add_argument("--backend", choices=("dense", "hash"), default=None)
    p.add_argument("--grid-lr", type=float, default=None, dest="grid_lr")
    p.add_argument("--mlp-lr", type=float, default=None, dest="mlp_lr")
    p.add_argument("--eval-every", type=int, default=None, dest="eval_every")
    p.add_argument("--init-raw-density", type=float, default=None, dest="init_raw_density")
    p.add_argument("--nondeterministic", action="store_const", const=False,
                   default=None, dest="deterministic")
    p.add_argument("--no-holdout", action="store_const", const=False,
                   default=None, dest="holdout")

    p = add("export-dataset", "render triplets from a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--fixture", choices=FIXTURE_NAMES, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--baselines", type=_csv_floats, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples-per-ray", type=int, default=None, dest="samples_per_ray")

    p = add("optimize", "refine one triplet's disparity")
    p.add_argument("--manifest", default=None)
    p.add_argument("--record", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--objective", choices=OBJECTIVES, default=None)
    p.add_argument("--ao-threshold", type=float, default=None, dest="ao_threshold")
    p.add_argument("--d-max", type=int, default=None, dest="d_max")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--cost", choices=("sad", "ssim"), default=None)

    p = add("eval", "score a disparity map against ground truth")
    p.add_argument("--pred", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--gt-right", default=None, dest="gt_right",
                   help="right-view ground truth, enables the non-occluded region")
    p.add_argument("--dataset-id", default=None, dest="dataset_id")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", default=None)

    p = add("plot-hist", "recount and plot the disparity histogram")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)

    add("selftest", "run fast in-process invariant checks")
    return parser


def _apply_threads(flag_value) -> None:
    threads = flag_value
    if threads is None:
        env = os.environ.get("NSF_THREADS", "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"NSF_THREADS must be an integer, got {env!r}")
    if threads is not None:
        if threads < 1:
            raise UsageError(f"thread count must be >= 1, got {threads}")
        torch.set_num_threads(threads)
        log.debug("torch threads set to %d", threads)


def run(argv=None) -> int:
    """Parse arguments and execute one subcommand; returns the exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    defaults, handler = _COMMANDS[args.command]
    try:
        _apply_threads(args.threads)
        resolved = _resolve(defaults, args)
        return handler(resolved)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
