"""Bird's-eye-view rasterisation, BV cuboid regions and frustum/BV detection fusion.

Raster coordinates (:attr:`Frame.BEV`): ``x`` is lateral width, ``y`` height
(up is positive) and ``z`` forward depth.  :func:`to_bev_frame` maps LiDAR
(``x`` forward, ``y`` left, ``z`` up) and camera clouds into it, shifting the
lateral axis by half the width extent so the sensor sits on the centre column.

Grid cell ``[i, j]`` covers depth ``[i r, (i+1) r)`` and width ``[j r, (j+1) r)``
measured from the extent minima.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .box3d import nms3d
from .errors import ConfigError, DataError, EmptyFrustum, InvalidValue, WrongFieldCount
from .frustum_geom import CanonicalizationState, FrustumSample, rotate_y
from .kitti_io import Frame, PointCloud, _as_text, _parse_float

BVG_MAGIC = b"BVG1"
N_FIXED_CHANNELS = 2  # intensity of the highest point, density


@dataclass(frozen=True)
class BvGridConfig:
    resolution: float = 0.1
    depth_range: tuple = (0.0, 60.0)
    width_range: tuple = (0.0, 60.0)
    height_range: tuple = (-3.0, 1.0)
    n_height_bins: int = 7
    density_base: float = 64.0

    def __post_init__(self):
        if self.resolution <= 0 or self.n_height_bins < 1 or self.density_base <= 1:
            raise ConfigError("resolution > 0, n_height_bins >= 1, density_base > 1 required")
        for name in ("depth_range", "width_range", "height_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"{name} must be increasing")

    @property
    def shape(self):
        nd = int(round((self.depth_range[1] - self.depth_range[0]) / self.resolution))
        nw = int(round((self.width_range[1] - self.width_range[0]) / self.resolution))
        return nd, nw, N_FIXED_CHANNELS + self.n_height_bins


def to_bev_frame(cloud, calib=None, grid=None):
    """Copy of ``cloud`` in raster coordinates (see module docstring)."""
    grid = grid or BvGridConfig()
    half = 0.5 * (grid.width_range[0] + grid.width_range[1])
    p = np.array(cloud.points)
    if cloud.frame == Frame.BEV:
        return cloud
    if cloud.frame == Frame.LIDAR:
        x, y, z = p[:, 0].copy(), p[:, 1].copy(), p[:, 2].copy()
        p[:, 0], p[:, 1], p[:, 2] = half - y, z, x
    elif cloud.frame == Frame.CAMERA:
        x, y, z = p[:, 0].copy(), p[:, 1].copy(), p[:, 2].copy()
        p[:, 0], p[:, 1], p[:, 2] = x + half, -y, z
    else:
        raise ValueError(f"cannot rasterise a {cloud.frame.value} cloud")
    return PointCloud(p, Frame.BEV)


def cell_indices(cloud, grid):
    """``(i_depth, j_width, inside)`` for every point of a BEV-frame cloud."""
    xyz = cloud.xyz
    r = grid.resolution
    i = np.floor((xyz[:, 2] - grid.depth_range[0]) / r)
    j = np.floor((xyz[:, 0] - grid.width_range[0]) / r)
    nd, nw, _ = grid.shape
    inside = (i >= 0) & (i < nd) & (j >= 0) & (j < nw)
    return i.astype(np.int64, copy=False), j.astype(np.int64, copy=False), inside


def raw_counts(cloud, grid=None):
    """Per-cell point counts before density normalisation."""
    grid = grid or BvGridConfig()
    nd, nw, _ = grid.shape
    i, j, inside = cell_indices(cloud, grid)
    flat = i[inside] * nw + j[inside]
    return np.bincount(flat, minlength=nd * nw).reshape(nd, nw)


def rasterize_bv(cloud, grid=None):
    """``(depth cells, width cells, 2 + n_height_bins)`` float64 grid.

    Channels: 0 intensity of the highest point (ties: larger intensity),
    1 density ``min(1, log(count + 1) / log(base))``, 2.. per-height-bin
    maximum height.  Empty cells and empty bins are 0; points outside the
    height range only contribute to channels 0 and 1.
    """
    grid = grid or BvGridConfig()
    if cloud.frame != Frame.BEV:
        raise ValueError("rasterize_bv expects a BEV-frame cloud; see to_bev_frame")
    nd, nw, nc = grid.shape
    out = np.zeros((nd * nw, nc))
    i, j, inside = cell_indices(cloud, grid)
    if not inside.any():
        return out.reshape(nd, nw, nc)
    cell = i[inside] * nw + j[inside]
    height = cloud.xyz[inside, 1]
    inten = cloud.intensity[inside]

    counts = np.bincount(cell, minlength=nd * nw)
    occupied = counts > 0
    out[occupied, 1] = np.minimum(1.0, np.log(counts[occupied] + 1.0) / math.log(grid.density_base))

    # highest point per cell; the order is fully determined by values, so the
    # result does not depend on input order
    order = np.lexsort((inten, height, cell))
    last = np.flatnonzero(np.r_[cell[order][1:] != cell[order][:-1], True])
    top = order[last]
    out[cell[top], 0] = inten[top]

    lo, hi = grid.height_range
    nb = grid.n_height_bins
    b = np.floor((height - lo) / (hi - lo) * nb).astype(np.int64)
    ok = (height >= lo) & (height <= hi)
    b = np.minimum(b, nb - 1)
    hmax = np.full(nd * nw * nb, -np.inf)
    np.maximum.at(hmax, cell[ok] * nb + b[ok], height[ok])
    hmax = hmax.reshape(nd * nw, nb)
    out[:, N_FIXED_CHANNELS:] = np.where(np.isfinite(hmax), hmax, 0.0)
    return out.reshape(nd, nw, nc)


def dumps_bv_grid(grid_array):
    a = np.ascontiguousarray(grid_array, dtype="<f8")
    header = BVG_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes()


def loads_bv_grid(data):
    data = bytes(data)
    if data[:4] != BVG_MAGIC:
        raise DataError("not a BVG1 grid")
    try:
        (rank,) = struct.unpack_from("<I", data, 4)
        shape = struct.unpack_from(f"<{rank}Q", data, 8)
    except struct.error:
        raise DataError("truncated BVG1 header") from None
    off = 8 + 8 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(data) != off + 8 * n:
        raise DataError(f"BVG1 payload has {len(data) - off} bytes, expected {8 * n}")
    return np.frombuffer(data, "<f8", n, off).reshape(shape).copy()


# --- BV regions ------------------------------------------------------------------------------


@dataclass(frozen=True)
class BvRegion:
    """Axis-aligned LiDAR-frame cuboid: x/y rectangle plus a height cut on z."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    category: str = "Car"

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("BV rectangle is degenerate")
        if not self.z_min < self.z_max:
            raise ValueError("z_min must be below z_max")

    @property
    def center(self):
        return (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            0.5 * (self.z_min + self.z_max),
        )


def parse_regions(data):
    """One region per line: ``x_min x_max y_min y_max z_min z_max [category]``."""
    text = _as_text(data)
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if len(tok) not in (6, 7):
            raise WrongFieldCount(lineno, len(tok))
        vals = [_parse_float(t, lineno, col) for col, t in enumerate(tok[:6], start=1)]
        try:
            out.append(BvRegion(*vals, category=tok[6] if len(tok) == 7 else "Car"))
        except ValueError as exc:
            raise InvalidValue(str(exc), line=lineno) from None
    return out


def write_regions(regions):
    lines = [
        " ".join(repr(float(v)) for v in (r.x_min, r.x_max, r.y_min, r.y_max, r.z_min, r.z_max)) + f" {r.category}"
        for r in regions
    ]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


def lift_bv_region(cloud, region):
    """LiDAR points inside the region cuboid (inclusive faces)."""
    if cloud.frame != Frame.LIDAR:
        raise ValueError("BV regions are defined in the LiDAR frame")
    x, y, z = cloud.xyz.T
    keep = (
        (x >= region.x_min) & (x <= region.x_max)
        & (y >= region.y_min) & (y <= region.y_max)
        & (z >= region.z_min) & (z <= region.z_max)
    )
    return PointCloud(cloud.points[keep], Frame.LIDAR)


def region_frustum_angle(region, calib):
    c = calib.velo_to_rect(np.asarray(region.center)[None, :])[0]
    return math.atan2(c[0], c[2])


def region_sample(cloud, region, calib, onehot, n_points, rng):
    """A :class:`FrustumSample` built from a BV region instead of a 2D box.

    Points go to the camera frame and are yawed by the region centre's
    azimuth, so the downstream canonicalisation is the frustum one.
    """
    lifted = lift_bv_region(cloud, region)
    if len(lifted) == 0:
        raise EmptyFrustum("no points inside BV region")
    pts = np.array(lifted.points)
    pts[:, :3] = calib.velo_to_rect(lifted.xyz)
    angle = region_frustum_angle(region, calib)
    pts[:, :3] = rotate_y(pts[:, :3], angle)
    idx = rng.choice(len(pts), n_points, replace=len(pts) < n_points)
    return FrustumSample(
        PointCloud(pts[idx], Frame.FRUSTUM), onehot, CanonicalizationState(frustum_angle=angle), category=region.category
    )


def regions_from_boxes(boxes, categories, calib, rng=None, jitter=0.0, margin=0.3):
    """Oracle BV regions around camera-frame boxes, optionally jittered."""
    from .box3d import box_corners

    out = []
    for box, cat in zip(boxes, categories):
        lid = calib.rect_to_velo(box_corners(box))
        lo, hi = lid.min(axis=0) - margin, lid.max(axis=0) + margin
        if rng is not None and jitter > 0:
            shift = rng.uniform(-jitter, jitter, 2) * (hi[:2] - lo[:2])
            lo[:2] += shift
            hi[:2] += shift
        out.append(BvRegion(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2], cat))
    return out


def fuse_detections(frustum_dets, bv_dets, bv_weight=0.5, iou_threshold=0.8):
    """Pool ``(Box3D, score)`` lists with BV scores scaled by ``bv_weight`` and run 3D NMS.

    Survivors are returned in pooled order (frustum detections first).
    """
    pooled = [(b, float(s)) for b, s in frustum_dets] + [(b, float(s) * bv_weight) for b, s in bv_dets]
    if not pooled:
        return []
    keep = sorted(nms3d(pooled, iou_threshold))
    return [pooled[i] for i in keep]

