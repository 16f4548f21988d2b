"""bad-tau semantics, occlusion masks, and report round trips."""

import numpy as np
import pytest

from nsfactory.evalkit import (
    EmptyRegionError,
    EvalMask,
    EvalRecord,
    TAU_DEFAULTS,
    bad_tau,
    evaluate,
    format_report,
    occlusion_mask,
    read_report_csv,
    report,
    write_report_csv,
)
from nsfactory.geometry import StereoRig, virtual_stereo_poses
from nsfactory.scenegen import analytic_render, make_fixture


def full_mask(shape):
    ones = np.ones(shape, dtype=bool)
    return EvalMask(valid=ones, noc=ones)


class TestEvalMask:
    def test_noc_must_be_subset(self):
        valid = np.array([[True, False]])
        noc = np.array([[True, True]])
        with pytest.raises(ValueError):
            EvalMask(valid=valid, noc=noc)

    def test_build_intersects(self):
        valid = np.array([[True, False, True]])
        noc = np.array([[True, True, False]])
        m = EvalMask.build(valid, noc)
        np.testing.assert_array_equal(m.noc, [[True, False, False]])

    def test_build_default_noc_is_valid(self):
        valid = np.array([[True, False]])
        m = EvalMask.build(valid)
        np.testing.assert_array_equal(m.noc, valid)


class TestBadTau:
    def test_one_of_three_pixels(self):
        gt = np.array([[1.0, 2.0, 3.0]])
        pred = np.array([[1.0, 2.0, 10.0]])
        rate = bad_tau(pred, gt, 2.0, full_mask(gt.shape))
        np.testing.assert_allclose(rate, 100.0 / 3.0)

    def test_perfect_prediction(self):
        gt = np.arange(12.0).reshape(3, 4)
        assert bad_tau(gt, gt, 1.0, full_mask(gt.shape)) == 0.0

    def test_error_at_tau_not_counted(self):
        gt = np.zeros((2, 2))
        pred = np.full((2, 2), 2.0)  # |err| == tau exactly
        assert bad_tau(pred, gt, 2.0, full_mask(gt.shape)) == 0.0
        assert bad_tau(pred, gt, 1.9999, full_mask(gt.shape)) == 100.0

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(0, 30, size=(16, 16))
        pred = gt + rng.normal(scale=2.0, size=gt.shape)
        mask = full_mask(gt.shape)
        rates = [bad_tau(pred, gt, t, mask) for t in (0.5, 1.0, 2.0, 3.0, 5.0)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_noc_excludes_occluded_errors(self):
        gt = np.zeros((4, 4))
        pred = np.zeros((4, 4))
        pred[:, 0] = 10.0  # errs only in the occluded column
        valid = np.ones((4, 4), dtype=bool)
        noc = valid.copy()
        noc[:, 0] = False
        mask = EvalMask(valid=valid, noc=noc)
        assert bad_tau(pred, gt, 2.0, mask, region="noc") == 0.0
        assert bad_tau(pred, gt, 2.0, mask, region="all") == 25.0

    def test_empty_region_raises(self):
        mask = EvalMask(valid=np.zeros((2, 2), dtype=bool), noc=np.zeros((2, 2), dtype=bool))
        with pytest.raises(EmptyRegionError):
            bad_tau(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, mask)

    def test_input_validation(self):
        mask = full_mask((2, 2))
        with pytest.raises(ValueError):
            bad_tau(np.zeros((2, 2)), np.zeros((2, 2)), 0.0, mask)
        with pytest.raises(ValueError):
            bad_tau(np.zeros((2, 2)), np.zeros((2, 3)), 1.0, mask)
        with pytest.raises(ValueError):
            bad_tau(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, mask, region="half")

    def test_benchmark_tau_defaults(self):
        assert TAU_DEFAULTS == {"kitti": 3.0, "middlebury": 2.0, "eth3d": 1.0}


class TestOcclusionMask:
    def test_constant_pair_interior_noc(self):
        d = np.full((6, 20), 4.0)
        noc = occlusion_mask(d, d)
        assert noc[:, 4:].all()  # x - 4 stays in range from column 4 on
        assert not noc[:, :3].any()  # lookup falls off the left edge

    def test_out_of_range_is_occluded(self):
        d = np.full((2, 5), 100.0)
        assert not occlusion_mask(d, d).any()

    def test_disagreement_beyond_one_pixel_occluded(self):
        dl = np.full((3, 10), 3.0)
        dr = np.full((3, 10), 5.0)
        assert not occlusion_mask(dl, dr).any()
        dr = np.full((3, 10), 3.9)  # within tolerance
        assert occlusion_mask(dl, dr)[:, 4:].all()

    def test_occluder_fixture_band_geometry(self):
        scene, cams = make_fixture("occluder", seed=0)
        intr, pose = cams[0]
        b = 0.5
        _, right_pose = virtual_stereo_poses(pose, StereoRig(baseline=b))
        center = analytic_render(scene, intr, pose, baseline=b)
        right = analytic_render(scene, intr, right_pose, baseline=b)
        noc = occlusion_mask(center.disparity, right.disparity)

        # closed-form band: background strip left of the box silhouette,
        # width = disparity difference between box and background
        ex = float(pose.center[0])
        box, slab = scene.primitives
        depth_box = box.lo[2] - float(pose.center[2])
        depth_bg = slab.lo[2] - float(pose.center[2])
        d_box = b * intr.fx / depth_box
        d_bg = b * intr.fx / depth_bg
        u_lo = intr.fx * (box.lo[0] - ex) / depth_box + intr.cx
        u_hi = intr.fx * (box.hi[0] - ex) / depth_box + intr.cx
        band_w = d_box - d_bg

        # the background is only covered where the slab projects into view
        bg_left = intr.fx * (slab.lo[0] - ex) / depth_bg + intr.cx

        cols = np.arange(intr.width) + 0.5
        rows = slice(20, 44)  # rows fully covered by the box vertically
        inside_band = (cols >= u_lo - band_w + 1.0) & (cols <= u_lo - 1.0)
        on_box = (cols >= u_lo + 1.0) & (cols <= u_hi - 1.0)
        left_of_band = (cols >= max(d_bg, bg_left) + 1.0) & (cols <= u_lo - band_w - 1.0)

        assert inside_band.sum() >= 4 and left_of_band.sum() >= 2
        assert not noc[rows][:, inside_band].any()
        assert noc[rows][:, on_box].all()
        assert noc[rows][:, left_of_band].all()


class TestRecordsAndReports:
    def records(self):
        return [
            EvalRecord("plane", 2.0, 12.345678, 1.5, 4096, 3900),
            EvalRecord("occluder", 3.0, 0.0, 0.0, 4096, 3700),
        ]

    def test_record_validation(self):
        with pytest.raises(ValueError):
            EvalRecord("x", 2.0, 101.0, 0.0, 10, 5)
        with pytest.raises(ValueError):
            EvalRecord("x", 2.0, 1.0, 1.0, 10, 11)

    def test_evaluate_packs_both_regions(self):
        gt = np.zeros((4, 4))
        pred = np.zeros((4, 4))
        pred[:, 0] = 10.0
        mask = EvalMask.build(np.ones((4, 4), dtype=bool),
                              ~(np.arange(4)[None, :] == 0).repeat(4, 0))
        rec = evaluate(pred, gt, 2.0, mask, "toy")
        assert rec.bad_all == 25.0 and rec.bad_noc == 0.0
        assert rec.n_all == 16 and rec.n_noc == 12

    def test_text_table_two_decimals(self):
        text = format_report(self.records())
        lines = text.strip().split("\n")
        assert len(lines) == 3
        assert "12.35" in lines[1] and "1.50" in lines[1]
        assert lines[0].split()[0] == "dataset"

    def test_csv_round_trip_identical(self, tmp_path):
        recs = self.records()
        path = tmp_path / "r.csv"
        write_report_csv(recs, path)
        assert read_report_csv(path) == recs

    def test_report_writes_both_files(self, tmp_path):
        txt, csv_path = report(self.records(), tmp_path)
        assert txt.exists() and csv_path.exists()
        assert read_report_csv(csv_path) == self.records()

    def test_empty_records_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            format_report([])
        with pytest.raises(ValueError):
            write_report_csv([], tmp_path / "x.csv")
