"""PCK computation, joint averaging, curve emission."""

import numpy as np
import pytest

from flowpose.evaluation import PckCurve, average_joints, emit_curves, fraction_within, pck
from flowpose.heatmap import Pose


def poses_from(arrays, visible=None):
    out = []
    for i, a in enumerate(arrays):
        vis = None if visible is None else visible[i]
        out.append(Pose(np.asarray(a, dtype=np.float64), vis))
    return out


class TestPck:
    def test_exact_match_is_one_everywhere(self, rng):
        gt = poses_from(rng.uniform(0, 60, (5, 3, 2)))
        curve = pck(gt, gt, [0.0, 1.0, 4.0])
        assert np.array_equal(curve.accuracy, np.ones((3, 3)))
        assert curve.frame_count == 5

    def test_off_by_exactly_five_is_a_step(self, rng):
        # integer-valued truth keeps the (3, 4) displacement exact in floats
        gt = poses_from(rng.integers(10, 50, (4, 2, 2)).astype(np.float64))
        pred = poses_from([p.coords + np.array([3.0, 4.0]) for p in gt])
        curve = pck(pred, gt, [0.0, 4.999, 5.0, 7.0])
        assert np.array_equal(curve.accuracy[:, 0], [0.0, 0.0])
        assert np.array_equal(curve.accuracy[:, 1], [0.0, 0.0])
        assert np.array_equal(curve.accuracy[:, 2], [1.0, 1.0])  # inclusive <=
        assert np.array_equal(curve.accuracy[:, 3], [1.0, 1.0])

    def test_matches_brute_force_count(self, rng):
        n, k = 12, 3
        gt_arr = rng.uniform(0, 40, (n, k, 2))
        pred_arr = gt_arr + rng.normal(0, 3, (n, k, 2))
        vis = rng.random((n, k)) > 0.2
        gt = poses_from(gt_arr, vis)
        pred = poses_from(pred_arr)
        d_values = [1.0, 2.5, 5.0, 10.0]
        curve = pck(pred, gt, d_values)
        for j in range(k):
            for di, d in enumerate(d_values):
                hits = 0
                total = 0
                for i in range(n):
                    if not vis[i][j]:
                        continue
                    total += 1
                    if np.hypot(*(pred_arr[i, j] - gt_arr[i, j])) <= d:
                        hits += 1
                expected = hits / total if total else np.nan
                if np.isnan(expected):
                    assert np.isnan(curve.accuracy[j, di])
                else:
                    assert curve.accuracy[j, di] == pytest.approx(expected, abs=1e-15)

    def test_monotone_in_d(self, rng):
        gt = poses_from(rng.uniform(0, 40, (20, 4, 2)))
        pred = poses_from(rng.uniform(0, 40, (20, 4, 2)))
        curve = pck(pred, gt, np.linspace(0, 60, 25))
        assert (np.diff(curve.accuracy, axis=1) >= 0).all()
        assert np.array_equal(curve.accuracy[:, -1], np.ones(4))

    def test_invariant_to_common_translation(self, rng):
        gt_arr = rng.uniform(0, 40, (6, 2, 2))
        pred_arr = gt_arr + rng.normal(0, 2, (6, 2, 2))
        shift = np.array([13.0, -7.0])
        a = pck(poses_from(pred_arr), poses_from(gt_arr), [1.0, 3.0])
        b = pck(poses_from(pred_arr + shift), poses_from(gt_arr + shift), [1.0, 3.0])
        assert np.allclose(a.accuracy, b.accuracy, atol=1e-12)

    def test_invisible_joints_excluded(self):
        gt = poses_from([[[10.0, 10.0], [20.0, 20.0]]], visible=[np.array([True, False])])
        pred = poses_from([[[10.0, 10.0], [99.0, 99.0]]])
        curve = pck(pred, gt, [1.0])
        assert curve.accuracy[0, 0] == 1.0
        assert np.isnan(curve.accuracy[1, 0])  # never visible: no denominator

    def test_default_joint_names(self, rng):
        gt = poses_from(rng.uniform(0, 40, (2, 7, 2)))
        assert pck(gt, gt, [1.0]).joint_names[0] == "head"
        gt3 = poses_from(rng.uniform(0, 40, (2, 3, 2)))
        assert pck(gt3, gt3, [1.0]).joint_names == ("joint0", "joint1", "joint2")

    def test_errors(self, rng):
        gt = poses_from(rng.uniform(0, 40, (3, 2, 2)))
        with pytest.raises(ValueError):
            pck(gt[:2], gt, [1.0])
        with pytest.raises(ValueError):
            pck([], [], [1.0])
        with pytest.raises(ValueError):
            pck(gt, gt, [])
        with pytest.raises(ValueError):
            pck(gt, gt, [3.0, 1.0])  # not ascending
        with pytest.raises(ValueError):
            pck(gt, gt, [1.0], joint_names=("only-one",))


class TestFractionWithin:
    def test_pools_joints_and_frames(self):
        gt = poses_from([[[0.0, 0.0], [10.0, 10.0]], [[5.0, 5.0], [20.0, 20.0]]])
        pred = poses_from([[[0.0, 0.5], [10.0, 19.0]], [[5.0, 5.0], [20.0, 20.0]]])
        assert fraction_within(pred, gt, 1.0) == 0.75

    def test_invisible_excluded(self):
        gt = poses_from([[[0.0, 0.0], [10.0, 10.0]]], visible=[np.array([True, False])])
        pred = poses_from([[[0.0, 0.0], [99.0, 99.0]]])
        assert fraction_within(pred, gt, 1.0) == 1.0

    def test_no_visible_joints_gives_zero(self):
        gt = poses_from([[[0.0, 0.0]]], visible=[np.array([False])])
        assert fraction_within(gt, gt, 1.0) == 0.0


class TestAverageJoints:
    def test_average_of_identical_is_identity(self, rng):
        gt = poses_from(rng.uniform(0, 40, (5, 3, 2)))
        pred = poses_from(rng.uniform(0, 40, (5, 3, 2)))
        curve = pck(pred, gt, [2.0, 8.0])
        same = PckCurve(curve.d_values, np.tile(curve.accuracy[0], (3, 1)), 5, curve.joint_names)
        avg = average_joints(same, [0, 1, 2], name="avg")
        assert np.allclose(avg.accuracy[0], curve.accuracy[0], atol=1e-15)
        assert avg.joint_names == ("avg",)

    def test_average_of_zero_and_one(self):
        curve = PckCurve(np.array([1.0, 2.0]), np.array([[0.0, 0.0], [1.0, 1.0]]), 4, ("a", "b"))
        avg = average_joints(curve, [0, 1])
        assert np.array_equal(avg.accuracy, [[0.5, 0.5]])

    def test_left_right_wrist_average_matches_hand_mean(self, rng):
        gt = poses_from(rng.uniform(0, 40, (8, 7, 2)))
        pred = poses_from(rng.uniform(0, 40, (8, 7, 2)))
        curve = pck(pred, gt, [2.0, 5.0, 10.0])
        avg = average_joints(curve, [5, 6], name="wrists")
        assert np.allclose(avg.accuracy[0], (curve.accuracy[5] + curve.accuracy[6]) / 2, atol=1e-15)

    def test_empty_selection_rejected(self):
        curve = PckCurve(np.array([1.0]), np.array([[0.5]]), 1, ("a",))
        with pytest.raises(ValueError):
            average_joints(curve, [])


class TestEmitCurves:
    def flat_curve(self, k=1, n_d=4):
        return PckCurve(
            np.linspace(0, 6, n_d),
            np.full((k, n_d), 0.5),
            3,
            tuple(f"j{i}" for i in range(k)),
        )

    def test_single_curve_row_count(self, tmp_path):
        csv_path, svg_path = emit_curves([("only", self.flat_curve(n_d=4))], tmp_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "method,joint,d,accuracy"
        assert len(lines) == 1 + 4
        assert svg_path.read_text().startswith("<?xml")

    def test_two_methods_in_legend_and_csv(self, tmp_path):
        curves = [("spatial", self.flat_curve()), ("flow-pooled", self.flat_curve())]
        csv_path, svg_path = emit_curves(curves, tmp_path)
        svg = svg_path.read_text()
        assert "spatial" in svg and "flow-pooled" in svg
        methods = {line.split(",")[0] for line in csv_path.read_text().splitlines()[1:]}
        assert methods == {"spatial", "flow-pooled"}

    def test_rerun_byte_identical(self, tmp_path, rng):
        curve = PckCurve(
            np.array([0.0, 2.0, 4.0]),
            rng.random((2, 3)),
            5,
            ("a", "b"),
        )
        p1 = tmp_path / "one"
        p2 = tmp_path / "two"
        emit_curves([("m", curve)], p1)
        emit_curves([("m", curve)], p2)
        assert (p1 / "pck.csv").read_bytes() == (p2 / "pck.csv").read_bytes()
        assert (p1 / "pck.svg").read_bytes() == (p2 / "pck.svg").read_bytes()

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_curves([], tmp_path)

    def test_stem_parameter(self, tmp_path):
        csv_path, svg_path = emit_curves([("m", self.flat_curve())], tmp_path, stem="fig8")
        assert csv_path.name == "fig8.csv" and svg_path.name == "fig8.svg"
