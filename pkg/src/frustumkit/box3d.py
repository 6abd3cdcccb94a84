"""Amodal 3D boxes: corners, the size-template / heading-bin codec, IoU and NMS.

Boxes live in a camera-style frame (x right, y down, z forward) and rotate by
``heading`` about the y axis with the KITTI ``rotation_y`` convention: the
length axis of a box points along ``(cos h, 0, -sin h)``.

Corner order (see :func:`box_corners`): the top face (``y = -h/2``)
counter-clockwise seen from above starting at ``(+l/2, +w/2)``, then the
bottom face in the same order::

        top      0 (+l,+w)  1 (-l,+w)  2 (-l,-w)  3 (+l,-w)
        bottom   4          5          6          7
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteScore

TWO_PI = 2.0 * math.pi

# (x, z) signs per face ring position, in units of (l/2, w/2)
_RING = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
# corner k -> corner of the same box rotated by pi
FLIP_PERMUTATION = np.array([2, 3, 0, 1, 6, 7, 4, 5])


def wrap_angle(theta):
    """Map an angle (or array of angles) to [-pi, pi).

    Inside [-4pi, 4pi] the reduction uses whole 2pi steps, each of which is
    exact in floating point, so angles that differ by exact multiples of pi
    keep exact relationships after wrapping.
    """
    t = np.array(theta, dtype=np.float64, copy=True)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    far = np.abs(t) > 4 * math.pi
    if far.any():
        t[far] = np.mod(t[far] + math.pi, TWO_PI) - math.pi
    while True:
        hi = t >= math.pi
        lo = t < -math.pi
        if not (hi.any() or lo.any()):
            break
        t[hi] -= TWO_PI
        t[lo] += TWO_PI
    return float(t[0]) if scalar else t


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple  # (h, w, l)
    heading: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size need three components")
        if not all(v > 0 for v in s):
            raise ValueError(f"box dimensions must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def h(self):
        return self.size[0]

    @property
    def w(self):
        return self.size[1]

    @property
    def l(self):  # noqa: E743
        return self.size[2]

    @property
    def volume(self):
        return self.size[0] * self.size[1] * self.size[2]

    def to_array(self):
        return np.array([*self.center, *self.size, self.heading])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[:3]), tuple(a[3:6]), float(a[6]))

    def translated(self, delta):
        return Box3D(tuple(np.add(self.center, delta)), self.size, self.heading)


def corners_from_params(center, size, heading):
    """Vectorised corners: ``center (..., 3)``, ``size (..., 3)``, ``heading (...)`` -> ``(..., 8, 3)``."""
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    h, w, l = size[..., 0:1], size[..., 1:2], size[..., 2:3]  # noqa: E741
    lx = np.concatenate([_RING[:, 0], _RING[:, 0]]) * 0.5 * l
    wz = np.concatenate([_RING[:, 1], _RING[:, 1]]) * 0.5 * w
    hy = np.concatenate([-np.ones(4), np.ones(4)]) * 0.5 * h
    c = np.cos(heading)[..., None]
    s = np.sin(heading)[..., None]
    x = c * lx + s * wz
    z = -s * lx + c * wz
    out = np.stack([x, hy, z], axis=-1)
    return out + center[..., None, :]


def box_corners(box):
    """The 8 corners of ``box`` as an ``(8, 3)`` array in the documented order."""
    return corners_from_params(box.center, box.size, box.heading)


def box_from_corners(corners):
    """Inverse of :func:`box_corners` for corners in the documented order."""
    c = np.asarray(corners, dtype=np.float64)
    center = c.mean(axis=0)
    d_len = c[0] - c[1]
    d_wid = c[1] - c[2]
    d_hgt = c[4] - c[0]
    l = float(np.linalg.norm(d_len))  # noqa: E741
    w = float(np.linalg.norm(d_wid))
    h = float(np.linalg.norm(d_hgt))
    heading = math.atan2(-d_len[2], d_len[0])
    return Box3D(tuple(center), (h, w, l), heading)


# --- codec ------------------------------------------------------------------------------------

# mean KITTI object sizes (h, w, l) in meters
DEFAULT_TEMPLATES = (
    ((1.5256, 1.6286, 3.8831), "Car"),
    ((2.2053, 1.9007, 5.0676), "Van"),
    ((3.2521, 2.5855, 10.1359), "Truck"),
    ((1.7626, 0.6607, 0.8442), "Pedestrian"),
    ((1.2745, 0.5984, 0.8006), "Person_sitting"),
    ((1.7370, 0.5971, 1.7628), "Cyclist"),
    ((3.5308, 2.5325, 16.1715), "Tram"),
    ((1.9232, 1.5430, 3.6430), "Misc"),
)


@dataclass(frozen=True)
class BoxCodecConfig:
    templates: tuple = tuple(t for t, _ in DEFAULT_TEMPLATES)
    categories: tuple = tuple(c for _, c in DEFAULT_TEMPLATES)
    nh: int = 12

    def __post_init__(self):
        tpl = tuple(tuple(float(v) for v in t) for t in self.templates)
        object.__setattr__(self, "templates", tpl)
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(tpl) < 1 or self.nh < 1:
            raise ConfigError("need at least one size template and one heading bin")
        if len(self.categories) != len(tpl):
            raise ConfigError("one category tag per size template")
        if any(len(t) != 3 or min(t) <= 0 for t in tpl):
            raise ConfigError("template dimensions must be three positive numbers")

    @property
    def ns(self):
        return len(self.templates)

    @property
    def bin_width(self):
        return TWO_PI / self.nh

    @property
    def half_bin(self):
        return math.pi / self.nh

    @property
    def template_array(self):
        return np.array(self.templates)

    @property
    def output_size(self):
        return 3 + 4 * self.ns + 2 * self.nh

    def bin_centers(self):
        return np.arange(self.nh) * self.bin_width


def load_codec_config(text):
    """Parse ``ns = ..``, ``nh = ..``, ``template.<i> = h w l <category>`` lines."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string("[codec]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"codec config: {exc}") from None
    sec = cp["codec"]
    try:
        nh = int(sec.get("nh", "12"))
        templates, cats = [], []
        idx = sorted(int(k.split(".", 1)[1]) for k in sec if k.startswith("template."))
        for i in idx:
            parts = sec[f"template.{i}"].split()
            if len(parts) != 4:
                raise ConfigError(f"template.{i} needs 'h w l category'")
            templates.append(tuple(float(p) for p in parts[:3]))
            cats.append(parts[3])
    except ValueError as exc:
        raise ConfigError(f"codec config: {exc}") from None
    if not templates:
        return BoxCodecConfig(nh=nh)
    cfg = BoxCodecConfig(tuple(templates), tuple(cats), nh)
    if "ns" in sec and int(sec["ns"]) != cfg.ns:
        raise ConfigError(f"ns = {sec['ns']} but {cfg.ns} templates given")
    return cfg


def dump_codec_config(cfg):
    lines = [f"ns = {cfg.ns}", f"nh = {cfg.nh}"]
    for i, (t, c) in enumerate(zip(cfg.templates, cfg.categories)):
        lines.append(f"template.{i} = {t[0]!r} {t[1]!r} {t[2]!r} {c}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ClsRegTarget:
    heading_bin: int
    heading_residual: float  # in units of half a bin width
    size_class: int
    size_residual: tuple  # per-axis fraction of the template


def heading_to_bin(theta, nh):
    """Nearest bin centre to ``theta``; an exact midpoint goes to the lower index."""
    scaled = np.mod(theta, TWO_PI) / (TWO_PI / nh)
    k = int(math.ceil(scaled - 0.5))
    return k % nh


def encode_heading(theta, nh):
    k = heading_to_bin(theta, nh)
    residual = wrap_angle(theta - k * (TWO_PI / nh)) / (math.pi / nh)
    return k, residual


def size_class_of(size, cfg):
    tpl = cfg.template_array
    err = np.abs(np.asarray(size) - tpl) / tpl
    return int(np.argmin(err.sum(axis=1)))


def encode_box(box, cfg):
    k, hres = encode_heading(box.heading, cfg.nh)
    s = size_class_of(box.size, cfg)
    t = cfg.templates[s]
    sres = tuple((d - td) / td for d, td in zip(box.size, t))
    return ClsRegTarget(k, float(hres), s, sres)


@dataclass
class BoxPrediction:
    """Raw box-net output split into its heads.

    Flat layout: ``center(3) | heading_scores(NH) | heading_residuals(NH) |
    size_scores(NS) | size_residuals(NS*3)``.
    """

    center_delta: np.ndarray
    heading_scores: np.ndarray
    heading_residuals: np.ndarray
    size_scores: np.ndarray
    size_residuals: np.ndarray  # (NS, 3)

    @classmethod
    def from_vector(cls, vec, cfg):
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != cfg.output_size:
            raise ValueError(f"expected {cfg.output_size} numbers, got {vec.size}")
        nh, ns = cfg.nh, cfg.ns
        o = 3
        hs = vec[o : o + nh]
        o += nh
        hr = vec[o : o + nh]
        o += nh
        ss = vec[o : o + ns]
        o += ns
        sr = vec[o : o + 3 * ns].reshape(ns, 3)
        return cls(vec[:3].copy(), hs.copy(), hr.copy(), ss.copy(), sr.copy())

    def to_vector(self):
        return np.concatenate(
            [self.center_delta, self.heading_scores, self.heading_residuals, self.size_scores, self.size_residuals.reshape(-1)]
        )

    @classmethod
    def from_target(cls, target, center_delta, cfg, high=10.0):
        """A prediction whose argmaxes hit ``target`` with its residuals."""
        hs = np.zeros(cfg.nh)
        hs[target.heading_bin] = high
        hr = np.zeros(cfg.nh)
        hr[target.heading_bin] = target.heading_residual
        ss = np.zeros(cfg.ns)
        ss[target.size_class] = high
        sr = np.zeros((cfg.ns, 3))
        sr[target.size_class] = target.size_residual
        return cls(np.asarray(center_delta, dtype=np.float64), hs, hr, ss, sr)


RESIDUAL_MODES = ("cls_reg_normalized", "cls_reg", "regression_only")


def decode_heading_size(pred, cfg, mode="cls_reg_normalized"):
    """Heading (in the prediction's frame) and (h, w, l) from a :class:`BoxPrediction`."""
    vec = pred.to_vector()
    if not np.isfinite(vec).all():
        raise NonFiniteScore("box prediction contains NaN/Inf")
    if mode == "regression_only":
        theta = float(pred.heading_residuals[0])
        size = np.maximum(pred.size_residuals[0], 1e-3)
        return wrap_angle(theta), tuple(size)
    k = int(np.argmax(pred.heading_scores))
    s = int(np.argmax(pred.size_scores))
    t = np.asarray(cfg.templates[s])
    if mode == "cls_reg_normalized":
        theta = k * cfg.bin_width + pred.heading_residuals[k] * cfg.half_bin
        size = t * (1.0 + pred.size_residuals[s])
    elif mode == "cls_reg":
        theta = k * cfg.bin_width + pred.heading_residuals[k]
        size = t + pred.size_residuals[s]
    else:
        raise ValueError(f"unknown residual mode {mode!r}")
    size = np.maximum(size, 1e-3)
    return wrap_angle(theta), tuple(size)


def decode_box(pred, state, cfg, mode="cls_reg_normalized"):
    """Camera-frame :class:`Box3D` from a prediction made in the object frame of ``state``."""
    from .frustum_geom import recover_center

    theta, size = decode_heading_size(pred, cfg, mode)
    center = recover_center(state, pred.center_delta)
    return Box3D(tuple(center), size, theta + state.frustum_angle)


# --- IoU --------------------------------------------------------------------------------------


def bev_polygon(box):
    """Footprint in the (x, z) plane, counter-clockwise in (x, z) coordinates."""
    return box_corners(box)[:4][:, [0, 2]]


def _ccw(poly):
    x, y = poly[:, 0], poly[:, 1]
    area2 = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return poly if area2 >= 0 else poly[::-1]


def polygon_area(poly):
    """Shoelace area (absolute)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject, clip):
    """Sutherland-Hodgman: intersection of two convex polygons (both CCW)."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def inside(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax) >= 0.0

        def cross_point(p, q):
            # intersection of segment pq with the infinite clip edge
            dpx, dpy = q[0] - p[0], q[1] - p[1]
            denom = ex * dpy - ey * dpx
            t = (ex * (ay - p[1]) - ey * (ax - p[0])) / denom
            return (p[0] + t * dpx, p[1] + t * dpy)

        inp = out
        out = []
        prev = inp[-1]
        prev_in = inside(prev)
        for cur in inp:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    out.append(cross_point(prev, cur))
                out.append(cur)
            elif prev_in:
                out.append(cross_point(prev, cur))
            prev, prev_in = cur, cur_in
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a, b):
    pa = _ccw(bev_polygon(a))
    pb = _ccw(bev_polygon(b))
    return polygon_area(clip_convex(pa, pb))


def iou3d(a, b):
    """Volume IoU of two boxes that rotate about the same (y) axis."""
    ya0, ya1 = a.center[1] - a.h / 2, a.center[1] + a.h / 2
    yb0, yb1 = b.center[1] - b.h / 2, b.center[1] + b.h / 2
    overlap_h = min(ya1, yb1) - max(ya0, yb0)
    if overlap_h <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.center[0] - b.center[0], a.center[2] - b.center[2]) > ra + rb:
        return 0.0
    inter = bev_intersection_area(a, b) * overlap_h
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def iou_bev(a, b):
    """Bird's-eye-view (footprint) IoU."""
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(inter / union) if union > 0 else 0.0


def nms3d(dets, iou_threshold, iou_fn=iou3d):
    """Greedy NMS over ``[(Box3D, score), ...]``; returns kept indices in pick order.

    Ties in score are broken by lower original index.  A box is suppressed when
    its IoU with an already kept box is strictly greater than the threshold.
    """
    scores = np.array([float(s) for _, s in dets], dtype=np.float64)
    if not np.isfinite(scores).all():
        raise NonFiniteScore("NMS scores must be finite")
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        box = dets[i][0]
        if all(iou_fn(box, dets[j][0]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept

