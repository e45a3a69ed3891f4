import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowdepth import synth
from flowdepth.errors import SpecError
from flowdepth.geometry import Intrinsics, PoseSE3, rotation_distance
from flowdepth.synth import Background, SceneObject, SceneSpec, Texture

K100 = Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def test_static_world():
    b = synth.generate(SceneSpec(K100, background=Background(2.0)))
    assert np.array_equal(b.I_t.data, b.I_t1.data)
    assert np.abs(b.O_gt.flow).max() < 1e-12 and b.O_gt.mask.all()
    assert b.labels_gt.k == 0


def test_translation_flow_hand_value():
    b = synth.generate(SceneSpec(K100, ego=PoseSE3.from_translation([-0.1, 0, 0]), background=Background(2.0)))
    assert np.allclose(b.O_gt.flow[b.O_gt.mask], [-5.0, 0.0])
    assert np.allclose(b.D_t.depth, 2.0)


def test_moving_object_flow_matches_plane_oracle():
    b = synth.generate(synth.moving_object_spec(0))
    K = b.spec.K
    assert b.labels_gt.k == 1 and b.labels_gt.counts[1] == 100 * 100
    depths = (b.spec.background.depth, b.spec.objects[0].depth)
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    for r, pose in enumerate(b.region_poses):
        # pure translations over fronto-parallel planes: closed-form per-pixel flow
        t = pose.translation
        z = depths[r]
        X, Y = (u - K.cx) / K.fx * z + t[0], (v - K.cy) / K.fy * z + t[1]
        Z = z + t[2]
        expect = np.stack([K.fx * X / Z + K.cx - u, K.fy * Y / Z + K.cy - v], axis=-1)
        sel = b.labels_gt.region(r) & b.O_gt.mask
        assert np.abs(b.O_gt.flow[sel] - expect[sel]).max() < 1e-9
    gap = b.O_gt.flow[b.labels_gt.region(1)][:, 0].mean() - b.O_gt.flow[b.labels_gt.region(0) & b.O_gt.mask][:, 0].mean()
    assert abs(abs(gap) - 10.0) < 1.0


def test_small_object_area():
    b = synth.generate(synth.moving_object_spec(1, object_size=50))
    assert b.labels_gt.counts[1] == 2500


def test_generate_deterministic():
    a = synth.generate(synth.moving_object_spec(4))
    b = synth.generate(synth.moving_object_spec(4))
    assert np.array_equal(a.I_t.data, b.I_t.data) and np.array_equal(a.O_gt.flow, b.O_gt.flow)
    c = synth.generate(synth.moving_object_spec(5))
    assert not np.array_equal(a.I_t.data, c.I_t.data)


def test_texture_statistics():
    b = synth.generate(synth.ego_scene_spec(0))
    d = b.I_t.data
    assert 0.0 <= d.min() and d.max() <= 1.0
    assert 0.4 < d.mean() < 0.6 and d.std() > 0.03


def test_checker_texture():
    spec = dataclasses.replace(synth.ego_scene_spec(0), texture=Texture(kind="checker"))
    d = synth.generate(spec).I_t.data
    assert 0.0 <= d.min() and d.max() <= 1.0 and d.std() > 0.1


def test_visibility_masks_consistent(moving_bundle):
    b = moving_bundle
    # occluded background next to the moving patch must be flagged
    assert not b.visible_t.all() and b.visible_t.mean() > 0.8
    assert not b.visible_t1.all() and b.visible_t1.mean() > 0.8


def test_region_poses(moving_bundle):
    b = moving_bundle
    poses = b.region_poses
    assert len(poses) == 2
    assert np.allclose(poses[1].as_matrix(), b.T_cam.as_matrix() @ b.object_poses[0].as_matrix())


def test_perturb_pose_examples():
    T = PoseSE3.from_axis_angle([0.1, 0.2, -0.1], [1, 2, 3])
    same = synth.perturb_pose(T, 0, 0, 1)
    assert np.allclose(same.as_matrix(), T.as_matrix())
    P = synth.perturb_pose(T, 1.0, 0.05, 1)
    assert np.rad2deg(rotation_distance(P, T)) == pytest.approx(1.0, abs=1e-9)
    assert np.linalg.norm(P.translation - T.translation) == pytest.approx(0.05, abs=1e-12)
    Q = synth.perturb_pose(T, 1.0, 0.05, 2)
    assert not np.allclose(P.as_matrix(), Q.as_matrix())
    assert np.rad2deg(rotation_distance(Q, T)) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        synth.perturb_pose(T, -1, 0)


@given(st.integers(0, 1000))
def test_spec_text_round_trip(seed):
    spec = synth.moving_object_spec(seed % 50) if seed % 2 else synth.ego_scene_spec(seed)
    text = synth.dumps_spec(spec)
    back = synth.loads_spec(text)
    assert synth.dumps_spec(back) == text
    assert synth.spec_digest(back) == synth.spec_digest(spec)


def test_spec_hand_written():
    text = """
[camera]
width = 64
height = 32

[ego]
rotation_deg = 0 1 0
translation = 0.1 0 0

[object.0]
center = 32 16
size = 10 8
depth = 2
translation = 0 0 0.05
"""
    spec = synth.loads_spec(text)
    assert spec.K.width == 64 and spec.K.fx == 40.0
    assert np.rad2deg(spec.ego.rotation_angle()) == pytest.approx(1.0)
    assert spec.objects[0].shape == "rect" and spec.objects[0].motion.translation[2] == 0.05
    assert synth.generate(spec).labels_gt.counts[1] == 80


@pytest.mark.parametrize(
    "text",
    [
        "[camera]\nwidth = 8\n",
        "[camera]\nwidth = 8\nheight = 8\n[ego]\ntranslation = 1 2\n",
        "[camera]\nwidth = 8\nheight = 8\n[background]\ndepth = -1\n",
        "[camera]\nwidth = 8\nheight = 8\n[texture]\nkind = plaid\n",
        "not an ini file",
        "[camera]\nwidth = 8\nheight = 8\n[object.0]\ncenter = 4 4\nsize = 2 2\ndepth = 1\nshape = star\n",
    ],
)
def test_bad_specs(text):
    with pytest.raises(SpecError):
        synth.loads_spec(text)


def test_generate_rejects_invisible_object():
    obj = SceneObject("rect", (500.0, 50.0), (10.0, 10.0), 2.0)
    with pytest.raises(SpecError):
        synth.generate(SceneSpec(K100, objects=(obj,)))


def test_with_seed_changes_digest():
    spec = synth.ego_scene_spec(3)
    assert synth.spec_digest(synth.with_seed(spec, 4)) != synth.spec_digest(spec)


def test_inline_comments_allowed():
    spec = synth.loads_spec("[camera]\nwidth = 16 ; px\nheight = 8  # px\n")
    assert (spec.K.width, spec.K.height) == (16, 8)
