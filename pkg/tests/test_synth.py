"""Puppet generator: determinism, exactness of labels and flow, noise, io."""

import numpy as np
import pytest

from flowpose.errors import ConfigError, FormatError
from flowpose.flow import warp_heatmap
from flowpose.synth import (
    JointSpec,
    PuppetSpec,
    add_label_noise,
    default_puppet,
    generate_dataset,
    generate_sequence,
    load_dataset,
    render_frame,
    save_dataset,
    simulate_states,
    spec_from_json,
    two_mode_puppet,
)
from flowpose.synth import _make_texture  # texture for alpha-mask re-rendering
from flowpose.tensor import Tensor


def static_puppet(**overrides):
    """Two static limbs (zero angular velocity)."""
    joints = (
        JointSpec("a", -1, 8.0, 2.0, (0.9, 0.2, 0.2), 0.0, 0.0, 0.0),
        JointSpec("b", 0, 8.0, 2.0, (0.2, 0.9, 0.2), np.pi / 2, 0.0, 0.0),
    )
    return PuppetSpec(joints=joints, **overrides)


class TestSpecValidation:
    def test_default_builds(self):
        spec = default_puppet()
        assert spec.k == 7
        assert tuple(j.name for j in spec.joints)[0] == "head"

    def test_two_mode_shares_arm_colors(self):
        spec = two_mode_puppet()
        assert spec.joints[1].color == spec.joints[2].color
        assert spec.joints[3].color == spec.joints[4].color
        assert spec.joints[5].color == spec.joints[6].color

    def test_empty_joints_rejected(self):
        with pytest.raises(ConfigError):
            PuppetSpec(joints=())

    def test_forward_parent_rejected(self):
        joints = (JointSpec("a", 1, 5.0, 2.0, (1, 0, 0), 0.0, 0.1, 0.05),)
        with pytest.raises(ConfigError):
            PuppetSpec(joints=joints)

    def test_nonpositive_length_rejected(self):
        joints = (JointSpec("a", -1, 0.0, 2.0, (1, 0, 0), 0.0, 0.1, 0.05),)
        with pytest.raises(ConfigError):
            PuppetSpec(joints=joints)

    def test_bad_draw_order_rejected(self):
        with pytest.raises(ConfigError):
            static_puppet(draw_order=(0, 0))

    def test_reach_violation_rejected(self):
        # a limb long enough to swing outside the frame
        joints = (JointSpec("a", -1, 40.0, 2.0, (1, 0, 0), 0.0, np.pi, 0.1),)
        with pytest.raises(ConfigError):
            PuppetSpec(joints=joints)

    def test_excessive_root_sway_rejected(self):
        with pytest.raises(ConfigError):
            default_puppet(root_sway=(40.0, 40.0))

    def test_negative_root_sway_rejected(self):
        with pytest.raises(ConfigError):
            default_puppet(root_sway=(-1.0, 0.0))


class TestGenerateSequence:
    def test_same_seed_bit_identical(self):
        spec = default_puppet(noise_level=0.05)
        a_frames, a_poses, a_flows = generate_sequence(spec, 6, seed=9)
        b_frames, b_poses, b_flows = generate_sequence(spec, 6, seed=9)
        for fa, fb in zip(a_frames, b_frames):
            assert np.array_equal(fa.data, fb.data)
        for pa, pb in zip(a_poses, b_poses):
            assert np.array_equal(pa.coords, pb.coords)
        for fa, fb in zip(a_flows, b_flows):
            assert np.array_equal(fa.u, fb.u) and np.array_equal(fa.v, fb.v)

    def test_different_seed_differs(self):
        spec = default_puppet()
        a, _, _ = generate_sequence(spec, 2, seed=0)
        b, _, _ = generate_sequence(spec, 2, seed=1)
        assert not np.array_equal(a[0].data, b[0].data)

    def test_length_one(self):
        frames, poses, flows = generate_sequence(default_puppet(), 1, seed=0)
        assert len(frames) == 1 and len(poses) == 1 and flows == []
        assert frames[0].shape == (1, 3, 64, 64)

    def test_length_zero_rejected(self):
        with pytest.raises(ValueError):
            generate_sequence(default_puppet(), 0, seed=0)

    def test_zero_motion_static_frames_and_zero_flow(self):
        frames, poses, flows = generate_sequence(static_puppet(), 5, seed=3)
        for f in frames[1:]:
            assert np.array_equal(f.data, frames[0].data)
        for p in poses[1:]:
            assert np.array_equal(p.coords, poses[0].coords)
        for fl in flows:
            assert np.abs(fl.u).max() < 1e-12
            assert np.abs(fl.v).max() < 1e-12

    def test_poses_inside_frame(self):
        _, poses, _ = generate_sequence(default_puppet(), 30, seed=1)
        for p in poses:
            assert (p.coords >= 0).all()
            assert (p.coords[:, 0] < 64).all() and (p.coords[:, 1] < 64).all()
            assert p.visible.all()

    def test_joint_markers_coincide_with_labels(self):
        spec = default_puppet()
        rng = np.random.default_rng(4)
        texture = _make_texture(spec, rng)
        states = simulate_states(spec, 8, rng)
        for state in states:
            _, alphas = render_frame(spec, state, texture)
            for i in range(spec.k):
                x, y = state.joint_xy[i]
                # the limb capsule ends at the joint: its coverage there is full
                assert alphas[i][int(round(y)), int(round(x))] >= 0.5

    def test_warp_consistency_oracle(self):
        # frame t+1 warped by the exact flow matches frame t on the puppet
        spec = default_puppet()
        rng = np.random.default_rng(11)
        texture = _make_texture(spec, rng)
        states = simulate_states(spec, 13, rng)
        rendered = [render_frame(spec, s, texture) for s in states]
        frames, poses, flows = generate_sequence(spec, 13, seed=11)
        errs = []
        for t in range(12):
            warped = warp_heatmap(frames[t + 1], flows[t])
            fg = rendered[t][1].max(axis=0) > 0.5
            errs.append(np.abs(warped.data[0][:, fg] - frames[t].data[0][:, fg]).mean())
        assert float(np.mean(errs)) < 0.05

    def test_background_drift_moves_background(self):
        spec = static_puppet(background_drift=(1.0, 0.0))
        frames, _, flows = generate_sequence(spec, 3, seed=2)
        assert not np.array_equal(frames[1].data, frames[0].data)
        bg = np.ones((64, 64), dtype=bool)
        bg[:40, :] = False  # puppet occupies the upper-left region
        assert abs(np.median(flows[0].u[bg]) - 1.0) < 1e-9


class TestRootSway:
    def test_disabled_root_is_static(self):
        spec = default_puppet()
        states = simulate_states(spec, 10, np.random.default_rng(0))
        for s in states:
            assert np.array_equal(s.root_xy, np.asarray(spec.root))

    def test_enabled_root_moves_within_bounds(self):
        spec = default_puppet(root_sway=(4.0, 3.0))
        states = simulate_states(spec, 80, np.random.default_rng(0))
        offsets = np.array([s.root_xy - np.asarray(spec.root) for s in states])
        assert np.abs(offsets[:, 0]).max() <= 4.0 + 1e-9
        assert np.abs(offsets[:, 1]).max() <= 3.0 + 1e-9
        assert np.abs(offsets).max() > 0.5  # it does actually move

    def test_sway_does_not_change_angle_stream(self):
        # rng draws for sway are separate, so angles match the sway-free run
        plain = simulate_states(default_puppet(), 6, np.random.default_rng(5))
        swayed = simulate_states(default_puppet(root_sway=(4.0, 3.0)), 6, np.random.default_rng(5))
        for p, s in zip(plain, swayed):
            rel_p = p.joint_xy - p.root_xy
            rel_s = s.joint_xy - s.root_xy
            assert np.allclose(rel_p, rel_s, atol=1e-12)


class TestLabelNoise:
    def test_zero_noise_identity(self):
        _, poses, _ = generate_sequence(default_puppet(), 4, seed=0)
        noisy = add_label_noise(poses, jitter_sigma=0.0, outlier_rate=0.0, seed=1)
        for a, b in zip(noisy, poses):
            assert np.array_equal(a.coords, b.coords)
            assert np.array_equal(a.visible, b.visible)

    def test_rate_one_relocates_every_joint(self):
        _, poses, _ = generate_sequence(default_puppet(), 4, seed=0)
        noisy = add_label_noise(poses, jitter_sigma=0.0, outlier_rate=1.0, seed=1)
        for a, b in zip(noisy, poses):
            assert (np.abs(a.coords - b.coords).max(axis=1) > 1e-9).all()
            assert (a.coords[:, 0] >= 0).all() and (a.coords[:, 0] <= 63).all()
            assert (a.coords[:, 1] >= 0).all() and (a.coords[:, 1] <= 63).all()

    def test_jitter_std_within_five_percent(self):
        k, n = 7, 1500  # 10500 jittered joints
        base = [type(p)(p.coords.copy(), p.visible.copy()) for p in
                [generate_sequence(default_puppet(), 1, seed=0)[1][0]] * n]
        noisy = add_label_noise(base, jitter_sigma=2.0, outlier_rate=0.0, seed=3)
        deltas = np.concatenate([(a.coords - b.coords).ravel() for a, b in zip(noisy, base)])
        assert deltas.shape == (2 * k * n,)
        assert abs(deltas.std() - 2.0) / 2.0 < 0.05

    def test_visibility_preserved(self):
        _, poses, _ = generate_sequence(default_puppet(), 2, seed=0)
        poses[0].visible[3] = False
        noisy = add_label_noise(poses, jitter_sigma=1.0, outlier_rate=0.5, seed=1)
        assert not noisy[0].visible[3]

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            add_label_noise([], jitter_sigma=1.0, outlier_rate=1.5, seed=0)


class TestDatasetIo:
    def test_round_trip(self, tmp_path):
        frames, poses, flows = generate_dataset(default_puppet(), 4, seed=6, flow_window=1)
        save_dataset(tmp_path / "ds", frames, poses, flows)
        rf, rp, rfl = load_dataset(tmp_path / "ds")
        assert len(rf) == 4 and len(rp) == 4
        for a, b in zip(rf, frames):
            assert np.array_equal(a.data, b.data)
        for a, b in zip(rp, poses):
            assert np.array_equal(a.coords, b.coords)
            assert np.array_equal(a.visible, b.visible)
        assert set(rfl) == set(flows)
        for key in flows:
            assert np.array_equal(rfl[key].u, flows[key].u.astype(np.float32).astype(np.float64))

    def test_generate_dataset_matches_sequence(self):
        spec = default_puppet()
        sf, sp, sfl = generate_sequence(spec, 5, seed=2)
        df, dp, dfl = generate_dataset(spec, 5, seed=2, flow_window=2)
        for a, b in zip(sf, df):
            assert np.array_equal(a.data, b.data)
        for a, b in zip(sp, dp):
            assert np.array_equal(a.coords, b.coords)
        for t in range(4):
            assert np.array_equal(dfl[(t, 1)].u, sfl[t].u)
        assert (0, 2) in dfl and (0, -1) not in dfl
        assert (4, -2) in dfl and (4, 1) not in dfl

    def test_missing_pose_rows_rejected(self, tmp_path):
        frames, poses, _ = generate_dataset(default_puppet(), 2, seed=0, flow_window=0)
        save_dataset(tmp_path / "ds", frames, poses)
        csv_path = tmp_path / "ds" / "poses.csv"
        lines = csv_path.read_text().splitlines()
        csv_path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "ds")

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_bad_flow_name_rejected(self, tmp_path):
        frames, poses, _ = generate_dataset(default_puppet(), 2, seed=0, flow_window=0)
        save_dataset(tmp_path / "ds", frames, poses)
        (tmp_path / "ds" / "flow_1.flo").write_bytes(b"junk")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "ds")


class TestSpecJson:
    def test_empty_object_is_default(self):
        assert spec_from_json("{}") == default_puppet()

    def test_field_overrides(self):
        spec = spec_from_json('{"noise_level": 0.1, "root_sway": [2.0, 1.0], "background_drift": [0.5, 0.0]}')
        assert spec.noise_level == 0.1
        assert spec.root_sway == (2.0, 1.0)
        assert spec.background_drift == (0.5, 0.0)

    def test_joint_list_replacement(self):
        text = """
        {"joints": [
            {"name": "a", "parent": -1, "length": 8.0, "thickness": 2.0,
             "color": [0.9, 0.2, 0.2], "base_angle": 0.0, "amplitude": 0.3, "max_step": 0.1}
        ]}
        """
        spec = spec_from_json(text)
        assert spec.k == 1 and spec.joints[0].name == "a"

    def test_unknown_key_rejected(self):
        with pytest.raises(FormatError):
            spec_from_json('{"gravity": 9.8}')

    def test_invalid_json_rejected(self):
        with pytest.raises(FormatError):
            spec_from_json("{not json")

    def test_invariants_still_enforced(self):
        with pytest.raises(ConfigError):
            spec_from_json('{"root_sway": [99.0, 0.0]}')
