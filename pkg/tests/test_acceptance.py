"""Acceptance gate: one test per shipping criterion.

Each test is self-contained and asserts its criterion at the stated
tolerance; the terminal summary (see conftest) prints one pass/fail line
per criterion. The heavyweight entries (the radiance-field fit and the
objective ladder) use configurations frozen from pilot runs recorded in
the repository notes.
"""

import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from nsfactory import cli, evalkit, nsloss
from nsfactory.diffengine import ParamSet, fd_check
from nsfactory.factory import (
    SceneSpec,
    analytic_triplet,
    build_dataset,
    load_manifest,
    load_triplet,
    read_pfm,
    write_pfm,
)
from nsfactory.field import HashGridConfig, make_field
from nsfactory.geometry import StereoRig, parse_colmap_text, project, virtual_stereo_poses
from nsfactory.nerf_trainer import SceneDataset, TrainConfig, fit, psnr, rend_loss
from nsfactory.renderer import (
    QuadratureSamples,
    composite,
    composite_batch,
    ray_grid,
    render_image,
    render_rays,
    sample_bins,
)
from nsfactory.scenegen import analytic_render, make_fixture, scene_field
from nsfactory.stereo_consumer import optimize_disparity


def _bad2(estimate, triplet) -> float:
    mask = evalkit.EvalMask.build(triplet.valid)
    return evalkit.bad_tau(estimate, triplet.disparity, 2.0, mask)


@pytest.fixture(scope="module")
def occluder_triplet():
    scene, cams = make_fixture("occluder", seed=0)
    intr, pose = cams[0]
    trip = analytic_triplet(scene, intr, pose, StereoRig(0.5))
    return scene, intr, pose, trip


def test_c01_quadrature_matches_closed_form():
    # homogeneous unit-density medium over a unit ray: coverage 1 - 1/e
    expect = 1.0 - np.exp(-1.0)
    t, delta = sample_bins(0.0, 1.0, 256)
    s = QuadratureSamples(t=t, delta=delta, sigma=np.ones(256), color=np.ones((256, 3)))
    color, _, ao, _ = composite(s)
    assert abs(ao - expect) < 1e-3
    assert np.abs(color - expect).max() < 1e-3

    # discretization error must at least halve when the sample count
    # doubles; measured on a varying-color ray because the constant case
    # is exact by telescoping (the error above sits at float precision)
    closed = 1.0 - 2.0 / np.e  # integral of t * exp(-t) over [0, 1]
    errors = []
    for n in (64, 128, 256):
        t, delta = sample_bins(0.0, 1.0, n)
        s = QuadratureSamples(t=t, delta=delta, sigma=np.ones(n),
                              color=np.stack([t, t, t], axis=-1))
        color, _, _, _ = composite(s)
        errors.append(abs(float(color[0]) - closed))
    for coarse, fine in zip(errors, errors[1:]):
        assert fine <= 0.5 * coarse + 1e-12


def test_c02_telescoping_identity_on_random_rays():
    rng = np.random.default_rng(0)
    rays, n = 10_000, 64
    sigma = torch.from_numpy(rng.uniform(0.0, 50.0, (rays, n)))
    rgb = torch.from_numpy(rng.uniform(0.0, 1.0, (rays, n, 3)))
    delta = torch.from_numpy(rng.uniform(1e-3, 0.05, (rays, n)))
    t = torch.cumsum(delta, dim=1)
    _, _, ao, t_final = composite_batch(sigma, rgb, t, delta)
    gap = (ao + t_final - 1.0).abs().max().item()
    assert gap <= 1e-6

    # and through the full ray pipeline of a freshly seeded field
    field = make_field("hash", seed=3)
    scene, cams = make_fixture("textured_cube", seed=0, views=2, res=10)
    origins, dirs = ray_grid(*cams[0])
    _, _, ao, t_final = render_rays(field, origins, dirs, n=32)
    assert (ao + t_final - 1.0).abs().max().item() <= 1e-6


def test_c03_rectified_rows_and_disparity_identity():
    rng = np.random.default_rng(1)
    rig = StereoRig(0.5)
    for name in ("plane", "occluder", "textured_cube"):
        _, cams = make_fixture(name, seed=0)
        checked = 0
        while checked < 200:
            point = rng.uniform(0.05, 0.95, 3)
            intr, pose = cams[rng.integers(len(cams))]
            left, right = virtual_stereo_poses(pose, rig)
            try:
                u_c, v_c, z_c = project(point, intr, pose)
                u_l, v_l, _ = project(point, intr, left)
                u_r, v_r, _ = project(point, intr, right)
            except ValueError:
                continue  # behind the camera; draw another point
            assert abs(v_c - v_l) <= 1e-9
            assert abs(v_c - v_r) <= 1e-9
            assert abs((u_c - u_r) - intr.fx * rig.baseline / z_c) <= 1e-9
            assert abs((u_l - u_c) - intr.fx * rig.baseline / z_c) <= 1e-9
            checked += 1


class _ReboundField:
    """The radiance field evaluated with parameters taken from a ParamSet.

    functional_call swaps the module's registered parameters for the
    ParamSet's tensors, so autograd reaches the ParamSet and finite
    differences see the perturbed values.
    """

    def __init__(self, field, params: ParamSet):
        self._field = field
        self._params = params
        self.bounds = field.bounds

    def query_batch(self, pts, dirs):
        mapping = {name: self._params[name] for name in self._params.names()}
        return torch.func.functional_call(self._field, mapping, (pts, dirs))


class _QueryModule(torch.nn.Module):
    def __init__(self, field):
        super().__init__()
        self.inner = field

    @property
    def bounds(self):
        return self.inner.bounds

    def forward(self, pts, dirs):
        return self.inner.query_batch(pts, dirs)


def test_c04_gradients_match_finite_differences():
    # rendering loss, probed across the parameters of a small hash field
    field = make_field("hash", seed=5, hash_cfg=HashGridConfig(levels=4, table_size=2**10))
    module = _QueryModule(field).double()
    scene, cams = make_fixture("textured_cube", seed=0, views=2, res=8)
    intr, pose = cams[0]
    target = torch.from_numpy(analytic_render(scene, intr, pose).color.reshape(-1, 3))
    origins, dirs = ray_grid(intr, pose, dtype=torch.float64)
    params = ParamSet.from_module(module, dtype=torch.float64)

    def render_objective(p):
        return rend_loss(_ReboundField(module, p), (origins, dirs), target, n=16)

    err_rend = fd_check(render_objective, params, probe_count=100, h=1e-5, seed=0)
    assert err_rend < 1e-4

    # combined disparity-supervision loss wrt a 16x16 disparity field,
    # probed away from the bilinear warp's integer-disparity kinks
    scene, cams = make_fixture("plane", seed=0, res=16)
    intr, pose = cams[0]
    trip = analytic_triplet(scene, intr, pose, StereoRig(0.25))
    disp_params = ParamSet({"disparity": trip.disparity + 0.37})

    def ns_objective(p):
        return nsloss.ns_loss(trip, p["disparity"]).total_scalar

    err_ns = fd_check(ns_objective, disp_params, probe_count=100, h=1e-4, seed=0)
    assert err_ns < 1e-4


def test_c05_field_fit_reaches_holdout_quality():
    # configuration frozen from the pilot run recorded in the repo notes:
    # dense backend, raw density starting at 0, 2000 steps of 1024 rays
    start = time.monotonic()
    scene, cams = make_fixture("textured_cube", seed=0, views=20, res=64)
    images = [analytic_render(scene, intr, pose).color for intr, pose in cams]
    dataset = SceneDataset(images=images, cameras=cams)
    cfg = TrainConfig(steps=2000, batch_rays=1024, samples_per_ray=64, seed=0,
                      backend="dense", eval_every=200, holdout=True,
                      grid_lr=0.05, mlp_lr=3e-3)
    from nsfactory.field import DenseGridConfig

    field = make_field("dense", seed=0, dense_cfg=DenseGridConfig(init_raw_density=0.0))
    field = fit(dataset, cfg, field=field)

    intr, pose = cams[-1]
    rendered = render_image(field, intr, pose, n=cfg.samples_per_ray)
    holdout = psnr(rendered.color, images[-1])
    elapsed = time.monotonic() - start
    print(f"holdout {holdout:.3f} dB in {elapsed:.0f} s")
    assert holdout > 25.0
    assert elapsed < 15 * 60


def test_c06_exported_triplets_are_self_consistent(tmp_path):
    scene, cams = make_fixture("plane", seed=0)
    fld = scene_field(scene)
    rig = StereoRig(0.5)
    n = 256
    spec = SceneSpec(scene_id="plane", fld=fld, views=tuple(cams[:3]))
    manifest = build_dataset([spec], [rig.baseline], tmp_path, n=n)
    assert manifest.count == 3

    for k, record in enumerate(manifest.records):
        trip = load_triplet(tmp_path, record)
        intr, pose = cams[k]

        # the disparity map must equal b*fx/depth of the same render
        # exactly (in the export's float32 precision)
        out = render_image(fld, intr, pose, n=n)
        expect = np.zeros_like(out.depth)
        np.divide(rig.baseline * intr.fx, out.depth, out=expect, where=out.valid)
        stored = expect.astype(np.float32).astype(np.float64)
        assert np.array_equal(trip.disparity[trip.valid], stored[trip.valid])

        # warping the right view back by that disparity reconstructs the
        # center view on confident, in-bounds, non-occluded pixels
        warped, in_b = nsloss.warp_horizontal(
            torch.as_tensor(trip.right), torch.as_tensor(trip.disparity), side="right"
        )
        right_pose = virtual_stereo_poses(pose, rig)[1]
        d_right = analytic_render(scene, intr, right_pose, baseline=rig.baseline).disparity
        noc = evalkit.occlusion_mask(trip.disparity, d_right)
        sel = (
            torch.as_tensor(trip.valid)
            & in_b
            & (torch.as_tensor(trip.ao) > 0.9)
            & torch.as_tensor(noc)
        )
        assert int(sel.sum()) > 500
        mae = (warped - torch.as_tensor(trip.center)).abs().mean(dim=-1)[sel].mean()
        assert float(mae) < 0.02


def test_c07_occlusion_fallback_and_automask(occluder_triplet):
    scene, intr, pose, trip = occluder_triplet
    right_pose = virtual_stereo_poses(pose, StereoRig(0.5))[1]
    d_right = analytic_render(scene, intr, right_pose, baseline=0.5).disparity
    occluded = trip.valid & ~evalkit.occlusion_mask(trip.disparity, d_right)
    assert occluded.sum() > 100

    tri, _ = nsloss.triplet_loss(trip.left, trip.center, trip.right, trip.disparity)
    warped, _ = nsloss.warp_horizontal(
        torch.as_tensor(trip.right), torch.as_tensor(trip.disparity), side="right"
    )
    pair = nsloss.photometric_loss(trip.center, warped)
    occ = torch.as_tensor(occluded)
    assert float(tri[occ].mean()) < float(pair[occ].mean())

    # identical images at zero disparity: the warped residual ties the
    # unwarped one everywhere, so the strict automask must be all zero
    img = trip.center
    same = SimpleNamespace(left=img, center=img, right=img)
    _, automask = nsloss.triplet_loss(same.left, same.center, same.right,
                                      np.zeros_like(trip.disparity))
    assert float(automask.abs().max()) == 0.0


def test_c08_objective_ladder_orders_bad2(occluder_triplet):
    _, _, _, trip = occluder_triplet
    scores = {}
    for objective in ("full", "triplet", "single_pair"):
        estimate, _ = optimize_disparity(trip, steps=500, objective=objective)
        scores[objective] = _bad2(estimate.values, trip)
    print(f"ladder bad-2: {scores}")
    assert scores["full"] <= scores["triplet"] + 0.2
    assert scores["triplet"] <= scores["single_pair"] + 0.2


def test_c09_ao_gate_zeroes_low_confidence(occluder_triplet):
    _, _, _, trip = occluder_triplet
    rng = np.random.default_rng(4)
    soft_ao = rng.uniform(0.0, 1.0, trip.ao.shape)
    soft = SimpleNamespace(left=trip.left, center=trip.center, right=trip.right,
                           disparity=trip.disparity, ao=soft_ao, valid=trip.valid)
    report = nsloss.ns_loss(soft, trip.disparity + 0.5, nsloss.LossConfig(ao_threshold=0.5))
    gate = report.gate.numpy()
    low = soft_ao < 0.5
    assert np.array_equal(gate[low], np.zeros(low.sum()))
    assert np.array_equal(gate[~low], soft_ao[~low])

    # removing the gate (threshold 0) must not score better than the
    # gated run; on this fixture the coverage map is binary, so the two
    # runs coincide and "worse or equal" holds with exact equality
    scores = {}
    for th in (0.5, 0.0):
        estimate, _ = optimize_disparity(
            trip, nsloss.LossConfig(ao_threshold=th), steps=500, objective="full"
        )
        scores[th] = _bad2(estimate.values, trip)
    print(f"gate bad-2: {scores}")
    assert scores[0.0] >= scores[0.5] - 1e-9


def test_c10_formats_round_trip_and_parse(tmp_path):
    rng = np.random.default_rng(5)
    for i in range(100):
        h, w = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        arr = (rng.standard_normal((h, w)) * 10.0 ** rng.integers(-3, 4)).astype(np.float32)
        path = tmp_path / f"m{i}.pfm"
        write_pfm(arr, path)
        assert np.array_equal(read_pfm(path), arr)

    cameras_text = "# cameras\n1 PINHOLE 64 48 60.0 61.0 32.0 24.0\n"
    half = np.sqrt(0.5)
    images_text = (
        "# images\n"
        "1 1 0 0 0 0 0 0 1 a.png\n"
        "\n"
        f"2 {half} 0 {half} 0 0 0 5 1 b.png\n"
        "\n"
    )
    views = parse_colmap_text(cameras_text, images_text)
    assert len(views) == 2
    intr, pose = views[0]
    assert (intr.fx, intr.fy, intr.cx, intr.cy) == (60.0, 61.0, 32.0, 24.0)
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(pose.center, np.zeros(3), atol=1e-9)

    _, pose90 = views[1]
    rot_y90 = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    np.testing.assert_allclose(pose90.rotation, rot_y90.T, atol=1e-9)
    np.testing.assert_allclose(pose90.center, np.array([5.0, 0.0, 0.0]), atol=1e-9)


def test_c11_pipeline_is_deterministic(tmp_path, capsys):
    fit_args = [
        "fit-nerf", "--fixture", "textured_cube", "--steps", "150",
        "--views", "6", "--res", "32", "--batch-rays", "512",
        "--samples-per-ray", "32", "--eval-every", "50",
    ]
    for run_dir in ("fit_a", "fit_b"):
        assert cli.run(fit_args + ["--out", str(tmp_path / run_dir)]) == 0
    bytes_a = (tmp_path / "fit_a" / "checkpoint.nsfc").read_bytes()
    bytes_b = (tmp_path / "fit_b" / "checkpoint.nsfc").read_bytes()
    assert bytes_a == bytes_b

    export_args = [
        "export-dataset", "--checkpoint", str(tmp_path / "fit_a" / "checkpoint.nsfc"),
        "--fixture", "textured_cube", "--views", "2", "--res", "32",
        "--baselines", "0.4", "--samples-per-ray", "64",
    ]
    for run_dir in ("exp_a", "exp_b"):
        assert cli.run(export_args + ["--out", str(tmp_path / run_dir)]) == 0
    manifest_a = (tmp_path / "exp_a" / "manifest.jsonl").read_bytes()
    manifest_b = (tmp_path / "exp_b" / "manifest.jsonl").read_bytes()
    assert manifest_a == manifest_b

    records = load_manifest(tmp_path / "exp_a" / "manifest.jsonl").records
    for record in records:
        for rel in record["paths"].values():
            payload_a = (tmp_path / "exp_a" / rel).read_bytes()
            payload_b = (tmp_path / "exp_b" / rel).read_bytes()
            assert payload_a == payload_b
