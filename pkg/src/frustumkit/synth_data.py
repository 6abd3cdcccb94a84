"""Synthetic LiDAR-like scenes with oracle boxes, auto-labelled masks and augmentation.

A scene is a camera-frame point cloud made of

* objects: visible faces of cuboid shells, point count ~ area * cos(incidence) / range^2,
* a ground plane at the sensor height (points never rise above the plane),
* clutter blobs (bushes, poles) standing on the ground,

with simple ray occlusion against the object boxes.  Object-surface noise is
applied inward along the face normal only, so every object point stays inside
its own box and auto-labelling reproduces the generator's membership exactly.
"""

from __future__ import annotations

import configparser
import math
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .box3d import DEFAULT_TEMPLATES, Box3D, box_corners
from .errors import ConfigError, DataError, EmptyFrustum
from .frustum_geom import (
    CanonicalizationState,
    FrustumSample,
    camera_to_frustum_box,
    flip_yz,
    lift_frustum,
    rotate_to_center,
    shift_depth,
)
from .kitti_io import CalibKitti, Frame, PointCloud
from .rng import substream

CATEGORIES = ("Car", "Pedestrian", "Cyclist")
IMAGE_SIZE = (1242, 375)
SENSOR_HEIGHT = 1.73

GROUND = -1
CLUTTER = -2

_MEAN_SIZE = {c: t for t, c in DEFAULT_TEMPLATES}


def synthetic_calib():
    """KITTI-like calibration (P2 of a typical KITTI frame, identity R0_rect)."""
    p2 = np.array(
        [
            [721.5377, 0.0, 609.5593, 44.85728],
            [0.0, 721.5377, 172.854, 0.2163791],
            [0.0, 0.0, 1.0, 0.002745884],
        ]
    )
    tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]])
    return CalibKitti(p2, np.eye(3), tr)


def onehot_for(category, categories=CATEGORIES):
    v = np.zeros(len(categories))
    v[categories.index(category)] = 1.0
    return v


@dataclass
class SceneSpec:
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 4
    category_mix: dict = field(default_factory=lambda: {"Car": 0.6, "Pedestrian": 0.2, "Cyclist": 0.2})
    depth_range: tuple = (5.0, 40.0)
    max_azimuth: float = 0.5
    size_jitter: float = 0.1
    clutter_density: float = 8.0
    ground_points: float = 20000.0
    ground_noise: float = 0.03
    surface_noise: float = 0.02
    point_density: float = 8000.0  # points per m^2 of frontal area at 1 m

    def validate(self):
        if not (0 <= self.min_objects <= self.max_objects):
            raise ConfigError("object count range is empty")
        if not (0 < self.depth_range[0] < self.depth_range[1]):
            raise ConfigError("depth range must be positive and non-empty")
        mix = self.category_mix
        if not mix or any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
            raise ConfigError("category mix needs non-negative weights with positive sum")
        unknown = set(mix) - set(CATEGORIES)
        if unknown:
            raise ConfigError(f"unknown categories in mix: {sorted(unknown)}")
        for name in ("clutter_density", "ground_points", "ground_noise", "surface_noise", "point_density", "size_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self


def load_scene_spec(text):
    """``key = value`` text (optional ``[synth]`` header).  Ranges are two numbers,
    the category mix is ``Car:0.6 Pedestrian:0.2 ...``."""
    cp = configparser.ConfigParser()
    body = text if text.lstrip().startswith("[") else "[synth]\n" + text
    try:
        cp.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(f"scene spec: {exc}") from None
    sec = cp["synth"] if cp.has_section("synth") else {}
    spec = SceneSpec()
    kw = {}
    try:
        for f in fields(SceneSpec):
            if f.name not in sec:
                continue
            raw = sec[f.name]
            if f.name == "category_mix":
                kw[f.name] = {k: float(v) for k, v in (item.split(":") for item in raw.split())}
            elif f.name == "depth_range":
                lo, hi = raw.split()
                kw[f.name] = (float(lo), float(hi))
            elif f.name in ("seed", "min_objects", "max_objects"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
    except ValueError as exc:
        raise ConfigError(f"scene spec: {exc}") from None
    return replace(spec, **kw).validate()


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    category: str


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: PointCloud
    objects: tuple
    calib: CalibKitti
    membership: np.ndarray  # object index per point; GROUND / CLUTTER otherwise

    @property
    def boxes(self):
        return [o.box for o in self.objects]


# --- geometry helpers -----------------------------------------------------------------------


def _rot(heading):
    c, s = math.cos(heading), math.sin(heading)
    # columns: local x (length), y, z (width) in camera coordinates
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def to_box_frame(xyz, box):
    r = _rot(box.heading)
    return (np.asarray(xyz, dtype=np.float64) - np.asarray(box.center)) @ r


def points_in_box(xyz, box):
    """Inclusive point-in-oriented-box test."""
    local = to_box_frame(xyz, box)
    h, w, l = box.size  # noqa: E741
    half = np.array([l, h, w]) / 2.0
    return np.all(np.abs(local) <= half, axis=1)


def auto_label_mask(cloud, gt_box):
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)[:, :3]
    return points_in_box(xyz, gt_box)


def _segment_hits_box(xyz, box, eps=1e-9):
    """True where the segment origin -> point passes through ``box`` before the point."""
    r = _rot(box.heading)
    o = (-np.asarray(box.center)) @ r
    p = (xyz - np.asarray(box.center)) @ r
    d = p - o
    h, w, l = box.size  # noqa: E741
    half = np.array([l, h, w]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.where(d == 0, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    return (enter <= leave) & (leave > 0) & (enter < 1.0 - eps)


_FACES = (
    # (local normal, local centre in half-extents (x=l, y=h, z=w), tangent axes)
    ((1, 0, 0), (1, 0, 0), (2, 1)),
    ((-1, 0, 0), (-1, 0, 0), (2, 1)),
    ((0, 0, 1), (0, 0, 1), (0, 1)),
    ((0, 0, -1), (0, 0, -1), (0, 1)),
    ((0, -1, 0), (0, -1, 0), (0, 2)),  # top; the bottom face rests on the ground
)


def expected_surface_points(box, density):
    """Expected visible-surface point count of ``box`` seen from the origin."""
    return sum(lam for lam, *_ in _visible_faces(box, density))


def _visible_faces(box, density):
    h, w, l = box.size  # noqa: E741
    half = np.array([l, h, w]) / 2.0
    r = _rot(box.heading)
    c = np.asarray(box.center)
    out = []
    for n_loc, c_loc, (ta, tb) in _FACES:
        n_loc = np.array(n_loc, dtype=np.float64)
        f_loc = np.array(c_loc, dtype=np.float64) * half
        n = r @ n_loc
        f = c + r @ f_loc
        dist = float(np.linalg.norm(f))
        cos_inc = -float(n @ f) / dist
        if cos_inc <= 0:
            continue
        area = (2 * half[ta]) * (2 * half[tb])
        lam = density * area * cos_inc / dist**2
        out.append((lam, n_loc, f_loc, ta, tb, half))
    return out


def _sample_object(box, spec, rng):
    faces = _visible_faces(box, spec.point_density)
    r = _rot(box.heading)
    pts = []
    for lam, n_loc, f_loc, ta, tb, half in faces:
        k = rng.poisson(lam)
        if k == 0:
            continue
        loc = np.tile(f_loc, (k, 1))
        loc[:, ta] = rng.uniform(-half[ta], half[ta], k)
        loc[:, tb] = rng.uniform(-half[tb], half[tb], k)
        depth = np.minimum(np.abs(rng.normal(0.0, spec.surface_noise, k)), half.min())
        loc -= np.outer(depth, n_loc)
        pts.append(loc)
    if not pts:
        # guarantee at least one surface point on the most visible face
        lam, n_loc, f_loc, ta, tb, half = max(faces, key=lambda t: t[0])
        pts.append(f_loc[None, :].copy())
    loc = np.concatenate(pts)
    return loc @ r.T + np.asarray(box.center)


def _place_objects(spec, rng):
    cats = list(spec.category_mix)
    weights = np.array([spec.category_mix[c] for c in cats], dtype=np.float64)
    weights /= weights.sum()
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for _ in range(n):
        for _attempt in range(30):
            cat = cats[int(rng.choice(len(cats), p=weights))]
            base = np.asarray(_MEAN_SIZE[cat])
            size = base * (1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter, 3))
            depth = rng.uniform(*spec.depth_range)
            az = rng.uniform(-spec.max_azimuth, spec.max_azimuth)
            heading = rng.uniform(-math.pi, math.pi)
            center = (depth * math.sin(az), SENSOR_HEIGHT - size[0] / 2.0, depth * math.cos(az))
            box = Box3D(center, tuple(size), heading)
            radius = 0.5 * math.hypot(box.l, box.w)
            ok = all(
                math.hypot(center[0] - o.box.center[0], center[2] - o.box.center[2])
                > radius + 0.5 * math.hypot(o.box.l, o.box.w) + 0.3
                for o in objects
            )
            if ok:
                objects.append(SceneObject(box, cat))
                break
    return objects


def generate_scene(spec, rng=None):
    """Return a :class:`Scene`; deterministic for a given ``spec`` / ``rng`` state."""
    spec.validate()
    if rng is None:
        rng = substream(spec.seed, "scene")
    objects = _place_objects(spec, rng)
    chunks, ids = [], []

    for i, obj in enumerate(objects):
        xyz = _sample_object(obj.box, spec, rng)
        inten = np.clip(rng.uniform(0.2, 0.9) + rng.normal(0.0, 0.05, len(xyz)), 0.0, 1.0)
        chunks.append(np.column_stack([xyz, inten]))
        ids.append(np.full(len(xyz), i))

    n_ground = int(rng.poisson(spec.ground_points)) if spec.ground_points > 0 else 0
    if n_ground:
        az = rng.uniform(-0.8, 0.8, n_ground)
        rr = np.exp(rng.uniform(math.log(3.0), math.log(60.0), n_ground))
        y = SENSOR_HEIGHT + np.abs(rng.normal(0.0, spec.ground_noise, n_ground))
        inten = rng.uniform(0.05, 0.25, n_ground)
        chunks.append(np.column_stack([rr * np.sin(az), y, rr * np.cos(az), inten]))
        ids.append(np.full(n_ground, GROUND))

    n_blobs = int(rng.poisson(spec.clutter_density)) if spec.clutter_density > 0 else 0
    for _ in range(n_blobs):
        depth = rng.uniform(spec.depth_range[0], spec.depth_range[1] + 10.0)
        az = rng.uniform(-0.7, 0.7)
        cx, cz = depth * math.sin(az), depth * math.cos(az)
        radius = rng.uniform(0.2, 1.2)
        height = rng.uniform(0.5, 3.0)
        if any(
            math.hypot(cx - o.box.center[0], cz - o.box.center[2]) < radius + 0.5 * math.hypot(o.box.l, o.box.w) + 0.3
            for o in objects
        ):
            continue
        k = int(rng.poisson(spec.point_density * 2 * radius * height / depth**2))
        if k == 0:
            continue
        x = cx + rng.normal(0.0, radius / 2, k)
        z = cz + rng.normal(0.0, radius / 2, k)
        y = SENSOR_HEIGHT - rng.uniform(0.0, height, k)
        inten = np.clip(rng.uniform(0.0, 1.0) + rng.normal(0.0, 0.05, k), 0.0, 1.0)
        chunks.append(np.column_stack([x, y, z, inten]))
        ids.append(np.full(k, CLUTTER))

    pts = np.concatenate(chunks) if chunks else np.zeros((0, 4))
    member = np.concatenate(ids) if ids else np.zeros(0, dtype=int)

    keep = np.ones(len(pts), dtype=bool)
    for i, obj in enumerate(objects):
        keep &= ~(_segment_hits_box(pts[:, :3], obj.box) & (member != i))
    pts, member = pts[keep], member[keep]
    # fully occluded objects leave no trace in the cloud, so they are not part of the scene
    visible = [i for i in range(len(objects)) if np.any(member == i)]
    if len(visible) < len(objects):
        remap = np.arange(len(objects))
        remap[visible] = np.arange(len(visible))
        member = np.where(member >= 0, remap[np.maximum(member, 0)], member)
        objects = [objects[i] for i in visible]
    return Scene(PointCloud(pts, Frame.CAMERA), tuple(objects), synthetic_calib(), member.astype(np.int64))


# --- frustum samples ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    box2d_translate_frac: float = 0.1
    box2d_scale_range: tuple = (0.9, 1.1)
    flip_prob: float = 0.5
    depth_shift_range: float = 2.0
    n_frustum_points: int = 1024
    n_mask_points: int = 512

    def __post_init__(self):
        if self.box2d_translate_frac < 0 or self.flip_prob < 0 or self.depth_shift_range < 0:
            raise ConfigError("augmentation fractions must be >= 0")
        lo, hi = self.box2d_scale_range
        if not (0 < lo <= hi):
            raise ConfigError("box2d scale range must be positive")
        if self.n_frustum_points < 1 or self.n_mask_points < 1:
            raise ConfigError("point budgets must be >= 1")

    @classmethod
    def evaluation(cls, n_frustum_points=1024, n_mask_points=512):
        """No randomness beyond point subsampling."""
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, n_frustum_points, n_mask_points)


def project_box_to_image(box, calib, image_size=IMAGE_SIZE):
    """Tight 2D box of the projected corners, clipped to the image."""
    corners = box_corners(box)
    uv, w = calib.project_rect_to_image(corners)
    if (w <= 0).any():
        raise EmptyFrustum("box crosses the camera plane")
    u0, v0 = uv.min(axis=0)
    u1, v1 = uv.max(axis=0)
    W, H = image_size
    u0, u1 = np.clip([u0, u1], 0, W - 1)
    v0, v1 = np.clip([v0, v1], 0, H - 1)
    if not (u1 > u0 and v1 > v0):
        raise EmptyFrustum("box projects outside the image")
    return (float(u0), float(v0), float(u1), float(v1))


def jitter_box2d(box2d, rng, aug=None, image_size=IMAGE_SIZE):
    """Shift the centre by U[-f w, f w] x U[-f h, f h] and scale w, h by U[lo, hi]."""
    aug = aug or AugmentConfig()
    u0, v0, u1, v1 = box2d
    w, h = u1 - u0, v1 - v0
    f = aug.box2d_translate_frac
    cu = 0.5 * (u0 + u1) + rng.uniform(-f * w, f * w)
    cv = 0.5 * (v0 + v1) + rng.uniform(-f * h, f * h)
    lo, hi = aug.box2d_scale_range
    w *= rng.uniform(lo, hi)
    h *= rng.uniform(lo, hi)
    W, H = image_size
    nu0, nu1 = np.clip([cu - w / 2, cu + w / 2], 0, W - 1)
    nv0, nv1 = np.clip([cv - h / 2, cv + h / 2], 0, H - 1)
    if not (nu1 > nu0 and nv1 > nv0):
        return tuple(box2d)
    return (float(nu0), float(nv0), float(nu1), float(nv1))


def sample_indices(n_have, n_want, rng):
    """Subsample without replacement, or resample with replacement when short."""
    return rng.choice(n_have, n_want, replace=n_have < n_want)


def frustum_sample_from_box2d(cloud, calib, box2d, category, n_points, rng, gt_box=None, rotate=True, categories=CATEGORIES):
    """Lift ``box2d`` into a frustum sample; ``gt_box`` (camera frame) adds labels."""
    cam = lift_frustum(cloud, calib, box2d)
    if rotate:
        pts, angle = rotate_to_center(cam, box2d, calib)
    else:
        pts, angle = PointCloud(cam.points, Frame.FRUSTUM), 0.0
    idx = sample_indices(len(pts), n_points, rng)
    pts = PointCloud(pts.points[idx], Frame.FRUSTUM)
    gt = mask = None
    if gt_box is not None:
        gt = camera_to_frustum_box(gt_box, angle)
        mask = auto_label_mask(pts, gt)
    return FrustumSample(
        points=pts,
        onehot=onehot_for(category, categories),
        state=CanonicalizationState(frustum_angle=angle),
        gt_mask=mask,
        gt_box=gt,
        category=category,
    )


def make_frustum_sample(scene, obj, aug, rng, rotate=True, categories=CATEGORIES):
    """Frustum sample for ``obj`` (a :class:`SceneObject` of ``scene``)."""
    box2d = project_box_to_image(obj.box, scene.calib)
    box2d = jitter_box2d(box2d, rng, aug)
    sample = frustum_sample_from_box2d(
        scene.cloud, scene.calib, box2d, obj.category, aug.n_frustum_points, rng, obj.box, rotate, categories
    )
    return augment_sample(sample, aug, rng)


def augment_sample(sample, aug, rng):
    """Random YZ flip and depth shift with label fix-up."""
    if aug.flip_prob > 0 and rng.uniform() < aug.flip_prob:
        sample = flip_yz(sample)
    if aug.depth_shift_range > 0:
        sample = shift_depth(sample, rng.uniform(-aug.depth_shift_range, aug.depth_shift_range))
    return sample


def generate_samples(spec, count, aug, seed, split="train", rotate=True, min_object_points=1):
    """``count`` frustum samples; sample ``i`` depends only on ``(seed, split, i)``."""
    return [generate_sample(spec, aug, seed, split, i, rotate, min_object_points) for i in range(count)]


def generate_sample(spec, aug, seed, split, index, rotate=True, min_object_points=1):
    for attempt in range(50):
        rng = substream(seed, f"data/{split}", index, attempt)
        scene = generate_scene(replace(spec, min_objects=max(1, spec.min_objects)), rng)
        if not scene.objects:
            continue
        order = rng.permutation(len(scene.objects))
        for j in order:
            try:
                s = make_frustum_sample(scene, scene.objects[j], aug, rng, rotate=rotate)
            except EmptyFrustum:
                continue
            if s.gt_mask.sum() >= min_object_points:
                return s
    raise DataError(f"could not build a sample for index {index}")


# --- FSAM serialisation -----------------------------------------------------------------------

_FSAM = b"FSAM"


def dumps_sample(sample):
    """``FSAM`` | u32 N | u32 k | u8 flags | N x 4 f64 points | mask bits |
    7 f64 gt box | k f64 one-hot | 7 f64 state | u16 len + category."""
    n = len(sample.points)
    k = len(sample.onehot)
    flags = (1 if sample.gt_mask is not None else 0) | (2 if sample.gt_box is not None else 0)
    parts = [_FSAM, struct.pack("<IIB", n, k, flags), np.ascontiguousarray(sample.points.points, "<f8").tobytes()]
    if sample.gt_mask is not None:
        parts.append(np.packbits(sample.gt_mask.astype(np.uint8)).tobytes())
    if sample.gt_box is not None:
        parts.append(sample.gt_box.to_array().astype("<f8").tobytes())
    parts.append(sample.onehot.astype("<f8").tobytes())
    st = sample.state
    parts.append(np.array([st.frustum_angle, *st.mask_centroid, *st.tnet_delta], "<f8").tobytes())
    cat = sample.category.encode("utf-8")
    parts.append(struct.pack("<H", len(cat)) + cat)
    return b"".join(parts)


def loads_sample(data):
    if data[:4] != _FSAM:
        raise DataError("not an FSAM sample")
    try:
        n, k, flags = struct.unpack_from("<IIB", data, 4)
        pos = 13
        pts = np.frombuffer(data, "<f8", 4 * n, pos).reshape(n, 4)
        pos += 32 * n
        mask = None
        if flags & 1:
            nb = (n + 7) // 8
            mask = np.unpackbits(np.frombuffer(data, np.uint8, nb, pos))[:n].astype(bool)
            pos += nb
        box = None
        if flags & 2:
            box = Box3D.from_array(np.frombuffer(data, "<f8", 7, pos))
            pos += 56
        onehot = np.frombuffer(data, "<f8", k, pos).copy()
        pos += 8 * k
        st = np.frombuffer(data, "<f8", 7, pos)
        pos += 56
        (ln,) = struct.unpack_from("<H", data, pos)
        cat = bytes(data[pos + 2 : pos + 2 + ln]).decode("utf-8")
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated or malformed FSAM sample: {exc}") from None
    state = CanonicalizationState(st[0], tuple(st[1:4]), tuple(st[4:7]))
    return FrustumSample(PointCloud(pts, Frame.FRUSTUM), onehot, state, mask, box, cat)


def save_samples(samples, directory):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        path = os.path.join(directory, f"{i:06d}.fsam")
        with open(path, "wb") as fh:
            fh.write(dumps_sample(s))
        paths.append(path)
    return paths


def load_samples(directory):
    names = sorted(n for n in os.listdir(directory) if n.endswith(".fsam"))
    out = []
    for n in names:
        with open(os.path.join(directory, n), "rb") as fh:
            out.append(loads_sample(fh.read()))
    return out

