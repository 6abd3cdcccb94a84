import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frustumkit.box3d import Box3D, iou3d
from frustumkit.errors import EmptyFrustum, EmptyMask
from frustumkit.frustum_geom import (
    CanonicalizationState,
    FrustumSample,
    apply_tnet_shift,
    camera_to_object,
    flip_yz,
    lift_frustum,
    mask_centralize,
    object_to_camera,
    recover_center,
    rotate_to_center,
    shift_depth,
    unrotate_y,
)
from frustumkit.kitti_io import CalibKitti, Frame, PointCloud, identity_calib
from frustumkit.synth_data import synthetic_calib


def cloud(xyz, frame=Frame.CAMERA, intensity=0.5):
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    return PointCloud(np.column_stack([xyz, np.full(len(xyz), intensity)]), frame)


def test_lift_identity_calib():
    calib = identity_calib()
    out = lift_frustum(cloud([[0, 0, 5], [10, 0, 5]], Frame.LIDAR), calib, (-1, -1, 1, 1))
    assert out.frame == Frame.CAMERA
    assert out.xyz.tolist() == [[0, 0, 5]]


def test_points_behind_camera_never_kept():
    calib = identity_calib()
    with pytest.raises(EmptyFrustum):
        lift_frustum(cloud([[0, 0, -3]]), calib, (-1e6, -1e6, 1e6, 1e6))


def test_inclusive_edges():
    calib = identity_calib()
    out = lift_frustum(cloud([[1, 1, 1], [1.0001, 0, 1]]), calib, (-1, -1, 1, 1))
    assert out.xyz.tolist() == [[1, 1, 1]]


def test_lift_matches_brute_force_projection():
    p2 = np.array([[700.0, 3.0, 600.0, 40.0], [0.0, 710.0, 180.0, -2.0], [0.0, 0.0, 1.0, 0.003]])
    calib = CalibKitti(p2, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))
    pts = np.array([[0.0, 0.0, 10.0], [1.0, 0.5, 10.0], [-3.0, 0.0, 5.0], [0.2, -0.1, 2.0], [0.0, 0.0, -4.0], [5.0, 2.0, 8.0]])
    box2d = (560.0, 150.0, 700.0, 230.0)
    want = []
    for x, y, z in pts:
        # independent homogeneous projection per point
        u_h = p2[0] @ [x, y, z, 1.0]
        v_h = p2[1] @ [x, y, z, 1.0]
        w_h = p2[2] @ [x, y, z, 1.0]
        if z > 0 and w_h > 0 and 560 <= u_h / w_h <= 700 and 150 <= v_h / w_h <= 230:
            want.append([x, y, z])
    out = lift_frustum(cloud(pts), calib, box2d)
    assert out.xyz.tolist() == want
    assert 0 < len(want) < len(pts)


def test_lift_idempotent():
    calib = synthetic_calib()
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(-10, 10, 500), rng.uniform(-2, 2, 500), rng.uniform(1, 40, 500)])
    box2d = (500.0, 100.0, 800.0, 300.0)
    once = lift_frustum(cloud(pts), calib, box2d)
    twice = lift_frustum(once, calib, box2d)
    assert np.array_equal(once.points, twice.points)


def pinhole():
    k = np.array([[720.0, 0.0, 610.0, 0.0], [0.0, 720.0, 175.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return CalibKitti(k, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))


def test_rotate_centered_box_is_identity():
    calib = pinhole()
    box2d = (560.0, 125.0, 660.0, 225.0)
    c = cloud(np.random.default_rng(0).normal(0, 5, (10, 3)))
    out, angle = rotate_to_center(c, box2d, calib)
    assert angle == 0.0
    assert np.array_equal(out.xyz, c.xyz)


def test_rotate_center_ray():
    calib = pinhole()
    box2d = (900.0, 120.0, 1000.0, 220.0)
    ray_pts = np.array([calib.unproject(950.0, 170.0, d) for d in (5.0, 12.0, 33.0)])
    out, angle = rotate_to_center(cloud(ray_pts), box2d, calib)
    assert np.allclose(out.xyz[:, 0], 0.0, atol=1e-9)
    assert np.all(out.xyz[:, 2] > 0)
    assert out.frame == Frame.FRUSTUM


def test_rotate_is_isometry():
    calib = synthetic_calib()
    rnd = cloud(np.random.default_rng(1).normal(0, 10, (200, 3)))
    rot, _ = rotate_to_center(rnd, (900.0, 120.0, 1000.0, 220.0), calib)
    assert np.allclose(np.linalg.norm(rot.xyz, axis=1), np.linalg.norm(rnd.xyz, axis=1), atol=1e-9)
    assert np.allclose(rot.xyz[:, 1], rnd.xyz[:, 1])


def test_mask_centralize_examples():
    out, c = mask_centralize(cloud([[1, 2, 3]], Frame.FRUSTUM), [True])
    assert out.xyz.tolist() == [[0, 0, 0]] and c.tolist() == [1, 2, 3]
    out, c = mask_centralize(cloud([[-1, 0, 0], [1, 0, 0]], Frame.FRUSTUM), [True, True])
    assert out.xyz.tolist() == [[-1, 0, 0], [1, 0, 0]] and c.tolist() == [0, 0, 0]
    rnd = cloud(np.random.default_rng(2).normal(0, 4, (100, 3)), Frame.FRUSTUM, 0.3)
    out, c = mask_centralize(rnd, np.ones(100, bool))
    assert np.allclose(out.xyz.mean(axis=0), 0.0, atol=1e-9)
    assert np.all(out.intensity == 0.3) and out.frame == Frame.MASK
    with pytest.raises(EmptyMask):
        mask_centralize(rnd, np.zeros(100, bool))


def test_tnet_shift_examples():
    c = cloud([[1, 1, 1]], Frame.MASK)
    assert apply_tnet_shift(c, (0, 0, 0)).xyz.tolist() == [[1, 1, 1]]
    assert apply_tnet_shift(c, (1, 1, 1)).xyz.tolist() == [[0, 0, 0]]


def test_recover_center_examples():
    st0 = CanonicalizationState(0.3, (1.0, 2.0, 3.0))
    assert np.allclose(recover_center(st0, (0, 0, 0)), unrotate_y([1.0, 2.0, 3.0], 0.3))
    st1 = CanonicalizationState(0.0, (1.0, 0.0, 10.0), (0.1, 0.0, 0.2))
    assert np.allclose(recover_center(st1, (0.0, 0.0, 0.3)), (1.1, 0.0, 10.5), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-math.pi, math.pi),
    st.lists(st.floats(-20, 20), min_size=9, max_size=9),
)
def test_recover_center_matches_inverse_chain(angle, v):
    state = CanonicalizationState(angle, tuple(v[:3]), tuple(v[3:6]))
    box_delta = np.array(v[6:9])
    want = object_to_camera(box_delta, state)
    assert np.allclose(recover_center(state, box_delta), want, atol=1e-9)


def test_full_chain_inverse_identity():
    rng = np.random.default_rng(5)
    calib = synthetic_calib()
    pts = np.column_stack([rng.uniform(-3, 3, 300), rng.uniform(-1, 1, 300), rng.uniform(10, 30, 300)])
    c = cloud(pts)
    box2d = (300.0, 100.0, 900.0, 300.0)
    fr, angle = rotate_to_center(c, box2d, calib)
    mask = rng.random(300) < 0.5
    mk, centroid = mask_centralize(fr, mask)
    delta = rng.normal(0, 0.5, 3)
    obj = apply_tnet_shift(mk, delta)
    state = CanonicalizationState(angle, tuple(centroid), tuple(delta))
    assert np.allclose(object_to_camera(obj.xyz, state), pts[mask], atol=1e-9)
    assert np.allclose(camera_to_object(pts[mask], state), obj.xyz, atol=1e-9)


def _sample(heading=math.pi / 4):
    rng = np.random.default_rng(9)
    pts = cloud(rng.normal(0, 3, (50, 3)), Frame.FRUSTUM)
    box = Box3D((1.0, 0.5, 20.0), (1.5, 1.6, 3.9), heading)
    return FrustumSample(pts, np.array([1.0, 0.0, 0.0]), gt_mask=rng.random(50) < 0.3, gt_box=box)


def test_flip_examples():
    s = _sample()
    f = flip_yz(s)
    assert f.gt_box.heading == pytest.approx(-math.pi / 4)
    assert f.gt_box.center[0] == -1.0
    assert np.array_equal(f.points.xyz[:, 0], -s.points.xyz[:, 0])
    assert np.array_equal(f.gt_mask, s.gt_mask)
    one = FrustumSample(cloud([[1, 2, 3]], Frame.FRUSTUM), np.array([0.0, 1.0]))
    assert flip_yz(one).points.xyz.tolist() == [[-1, 2, 3]]
    ff = flip_yz(f)
    assert np.array_equal(ff.points.points, s.points.points)
    assert ff.gt_box.center == s.gt_box.center and ff.gt_box.heading == pytest.approx(s.gt_box.heading, abs=1e-15)


def test_flip_preserves_distances_and_box():
    s = _sample(2.0)
    f = flip_yz(s)
    d0 = np.linalg.norm(s.points.xyz[:, None] - s.points.xyz[None], axis=-1)
    d1 = np.linalg.norm(f.points.xyz[:, None] - f.points.xyz[None], axis=-1)
    assert np.allclose(d0, d1, atol=1e-12)
    # the flipped box is the mirror image: it contains exactly the mirrored points
    from frustumkit.synth_data import auto_label_mask

    assert np.array_equal(auto_label_mask(s.points, s.gt_box), auto_label_mask(f.points, f.gt_box))
    assert iou3d(flip_yz(f).gt_box, s.gt_box) == pytest.approx(1.0)


def test_flip_heading_wraps():
    f = flip_yz(_sample(-math.pi))
    assert -math.pi <= f.gt_box.heading < math.pi


def test_shift_depth():
    s = _sample()
    t = shift_depth(s, 1.5)
    assert np.allclose(t.points.xyz[:, 2], s.points.xyz[:, 2] + 1.5)
    assert t.gt_box.center[2] == pytest.approx(21.5)
    assert np.array_equal(t.gt_mask, s.gt_mask)


def test_sample_invariants():
    with pytest.raises(ValueError):
        FrustumSample(cloud([[0, 0, 1]], Frame.FRUSTUM), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        FrustumSample(cloud([[0, 0, 1]], Frame.FRUSTUM), np.array([1.0, 0.0]), gt_mask=[True, False])
