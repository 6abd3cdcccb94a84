"""Frustum extraction and the camera -> frustum -> mask -> object canonicalisation chain.

The frustum rotation is a yaw about the camera y axis.  With ``angle`` the
azimuth of the 2D-box centre ray (``atan2(x, z)``), a camera point maps to
frustum coordinates by ``R_y(-angle)`` in the KITTI sense, so a box with
camera heading ``h`` has frustum heading ``h - angle``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .box3d import Box3D, wrap_angle
from .errors import EmptyFrustum, EmptyMask
from .kitti_io import Frame, PointCloud

REFERENCE_DEPTH = 20.0


@dataclass(frozen=True)
class CanonicalizationState:
    frustum_angle: float = 0.0
    mask_centroid: tuple = (0.0, 0.0, 0.0)
    tnet_delta: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "frustum_angle", float(self.frustum_angle))
        object.__setattr__(self, "mask_centroid", tuple(float(v) for v in self.mask_centroid))
        object.__setattr__(self, "tnet_delta", tuple(float(v) for v in self.tnet_delta))


@dataclass(frozen=True, eq=False)
class FrustumSample:
    """One training / inference unit.

    ``points`` and ``gt_box`` share the frustum frame, so augmentations can
    flip and shift them together; ``state.frustum_angle`` maps back to camera.
    """

    points: PointCloud
    onehot: np.ndarray
    state: CanonicalizationState = field(default_factory=CanonicalizationState)
    gt_mask: np.ndarray | None = None
    gt_box: Box3D | None = None
    category: str = ""

    def __post_init__(self):
        oh = np.asarray(self.onehot, dtype=np.float64)
        if oh.ndim != 1 or np.count_nonzero(oh == 1.0) != 1 or np.count_nonzero(oh) != 1:
            raise ValueError("onehot needs exactly one entry equal to 1")
        object.__setattr__(self, "onehot", oh)
        if self.gt_mask is not None:
            m = np.asarray(self.gt_mask, dtype=bool)
            if m.shape != (len(self.points),):
                raise ValueError("gt_mask length must equal the point count")
            object.__setattr__(self, "gt_mask", m)


# --- rotation helpers -----------------------------------------------------------------------


def rotate_y(xyz, angle):
    """Rotate points in the x-z plane so that the direction at azimuth
    ``angle`` (``atan2(x, z)``) becomes the +z axis."""
    xyz = np.asarray(xyz, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    out = xyz.copy()
    x, z = xyz[..., 0], xyz[..., 2]
    out[..., 0] = c * x - s * z
    out[..., 2] = s * x + c * z
    return out


def unrotate_y(xyz, angle):
    return rotate_y(xyz, -angle)


def camera_to_frustum_box(box, angle):
    return Box3D(tuple(rotate_y(box.center, angle)), box.size, box.heading - angle)


def frustum_to_camera_box(box, angle):
    return Box3D(tuple(unrotate_y(box.center, angle)), box.size, box.heading + angle)


# --- operations ------------------------------------------------------------------------------


def _check_box2d(box2d):
    u0, v0, u1, v1 = (float(v) for v in box2d)
    if not (u1 > u0 and v1 > v0):
        raise ValueError(f"degenerate 2D box {box2d}")
    return u0, v0, u1, v1


def to_camera(cloud, calib):
    """Rectified-camera copy of ``cloud`` (LiDAR clouds go through Tr_velo_to_cam then R0_rect)."""
    if cloud.frame == Frame.CAMERA:
        return cloud
    if cloud.frame != Frame.LIDAR:
        raise ValueError(f"cannot bring a {cloud.frame.value} cloud to camera without its state")
    pts = np.array(cloud.points)
    pts[:, :3] = calib.velo_to_rect(cloud.xyz)
    return PointCloud(pts, Frame.CAMERA)


def frustum_membership(cloud_cam, calib, box2d):
    """Boolean mask of camera-frame points inside the frustum of ``box2d`` (inclusive edges)."""
    u0, v0, u1, v1 = _check_box2d(box2d)
    xyz = cloud_cam.xyz
    uv, w = calib.project_rect_to_image(xyz)
    front = (xyz[:, 2] > 0) & (w > 0)
    with np.errstate(invalid="ignore"):
        inside = (uv[:, 0] >= u0) & (uv[:, 0] <= u1) & (uv[:, 1] >= v0) & (uv[:, 1] <= v1)
    return front & inside


def lift_frustum(cloud, calib, box2d):
    """Camera-frame points whose projection falls inside ``box2d`` and lie in front of the camera."""
    cam = to_camera(cloud, calib)
    keep = frustum_membership(cam, calib, box2d)
    if not keep.any():
        raise EmptyFrustum(f"no points inside frustum of {tuple(box2d)}")
    return PointCloud(cam.points[keep], Frame.CAMERA)


def frustum_angle_for_box2d(box2d, calib):
    u0, v0, u1, v1 = _check_box2d(box2d)
    ray = calib.unproject(0.5 * (u0 + u1), 0.5 * (v0 + v1), REFERENCE_DEPTH)
    return math.atan2(ray[0], ray[2])


def rotate_to_center(points, box2d, calib):
    """Rotate a camera-frame cloud about y so the 2D-box centre ray has x = 0."""
    if len(points) == 0:
        raise EmptyFrustum("cannot rotate an empty frustum")
    angle = frustum_angle_for_box2d(box2d, calib)
    pts = np.array(points.points)
    pts[:, :3] = rotate_y(points.xyz, angle)
    return PointCloud(pts, Frame.FRUSTUM), angle


def mask_centralize(points, mask):
    """Masked points translated so their XYZ centroid is the origin (no scaling)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(points),):
        raise ValueError("mask length must equal point count")
    if not mask.any():
        raise EmptyMask("mask selects no points")
    sel = np.array(points.points[mask])
    centroid = sel[:, :3].mean(axis=0)
    sel[:, :3] -= centroid
    return PointCloud(sel, Frame.MASK), centroid


def apply_tnet_shift(points, delta):
    pts = np.array(points.points)
    pts[:, :3] -= np.asarray(delta, dtype=np.float64)
    return PointCloud(pts, Frame.OBJECT)


def recover_center(state, box_delta):
    """Camera-frame box centre: un-rotate (C_mask + delta_tnet + delta_box)."""
    c = np.add(np.add(state.mask_centroid, state.tnet_delta), box_delta)
    return unrotate_y(c, state.frustum_angle)


def object_to_camera(xyz, state):
    """Invert the whole chain for object-frame points."""
    p = np.asarray(xyz, dtype=np.float64) + np.asarray(state.tnet_delta) + np.asarray(state.mask_centroid)
    return unrotate_y(p, state.frustum_angle)


def camera_to_object(xyz, state):
    p = rotate_y(xyz, state.frustum_angle)
    return p - np.asarray(state.mask_centroid) - np.asarray(state.tnet_delta)


# --- augmentations ---------------------------------------------------------------------------


def flip_yz(sample):
    """Mirror the frustum through its YZ plane (x -> -x); heading h -> -h."""
    pts = np.array(sample.points.points)
    pts[:, 0] = -pts[:, 0]
    box = sample.gt_box
    if box is not None:
        cx, cy, cz = box.center
        box = Box3D((-cx, cy, cz), box.size, wrap_angle(-box.heading))
    return replace(sample, points=PointCloud(pts, sample.points.frame), gt_box=box)


def shift_depth(sample, dz):
    pts = np.array(sample.points.points)
    pts[:, 2] += dz
    box = sample.gt_box
    if box is not None:
        box = box.translated((0.0, 0.0, dz))
    return replace(sample, points=PointCloud(pts, sample.points.frame), gt_box=box)
