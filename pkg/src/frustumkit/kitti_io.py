"""Readers and writers for KITTI object-detection files.

Covered formats:

* calibration text (``P2``, ``R0_rect``, ``Tr_velo_to_cam``; other keys ignored),
* label / detection text (15 fields, 16 with a score),
* velodyne binaries (little-endian float32 ``x y z intensity`` records).

All parsers accept ``bytes`` or ``str`` and raise a :class:`ParseError`
subclass carrying the line (text) or byte offset (binary) on failure.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    InvalidValue,
    MalformedFloat,
    MalformedLine,
    MalformedText,
    MissingKey,
    MissingScore,
    TruncatedRecord,
    WrongArity,
    WrongFieldCount,
)

KNOWN_CATEGORIES = ("Car", "Pedestrian", "Cyclist")

_FLOAT_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?\Z")
_INT_RE = re.compile(r"[+-]?\d+\Z")


class Frame(enum.Enum):
    LIDAR = "lidar"
    CAMERA = "camera"
    FRUSTUM = "frustum"
    MASK = "mask"
    OBJECT = "object"
    BEV = "bev"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``points`` is an ``(N, 4)`` float64 array of ``x y z intensity``."""

    points: np.ndarray
    frame: Frame = Frame.LIDAR

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (N, 4), got {pts.shape}")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def intensity(self):
        return self.points[:, 3]

    def with_points(self, points, frame=None):
        return PointCloud(points, self.frame if frame is None else frame)


@dataclass(frozen=True, eq=False)
class CalibKitti:
    p2: np.ndarray
    r0_rect: np.ndarray
    tr_velo_to_cam: np.ndarray
    # matrices the pipeline does not use (P0, P1, P3, Tr_imu_to_velo, ...), kept
    # as ``(key, values)`` so a written file reproduces its source; ``None`` marks
    # where each of the three matrices above sat in the file
    extra: tuple = ()

    def __post_init__(self):
        for name, shape in (("p2", (3, 4)), ("r0_rect", (3, 3)), ("tr_velo_to_cam", (3, 4))):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(shape)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "extra", tuple((k, None if v is None else tuple(map(float, v))) for k, v in self.extra))

    def validate(self, tol=1e-4):
        """Raise :class:`InvalidValue` if a documented invariant fails."""
        eye = np.eye(3)
        if np.abs(self.r0_rect @ self.r0_rect.T - eye).max() >= tol:
            raise InvalidValue("R0_rect is not orthonormal")
        rot = self.tr_velo_to_cam[:, :3]
        if np.abs(rot @ rot.T - eye).max() >= tol:
            raise InvalidValue("rotation part of Tr_velo_to_cam is not orthonormal")
        if not (self.p2[0, 0] > 0 and self.p2[1, 1] > 0):
            raise InvalidValue("P2 focal lengths must be positive")
        return self

    def velo_to_rect(self, xyz):
        """LiDAR meters -> rectified camera meters."""
        xyz = np.asarray(xyz, dtype=np.float64)
        cam = xyz @ self.tr_velo_to_cam[:, :3].T + self.tr_velo_to_cam[:, 3]
        return cam @ self.r0_rect.T

    def rect_to_velo(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        cam = xyz @ self.r0_rect  # R0 orthonormal: inverse is the transpose
        rot = self.tr_velo_to_cam[:, :3]
        return np.linalg.solve(rot, (cam - self.tr_velo_to_cam[:, 3]).T).T

    def project_rect_to_image(self, xyz):
        """Rectified camera meters -> ``(uv (N, 2), w (N,))`` pixels and homogeneous depth."""
        xyz = np.asarray(xyz, dtype=np.float64)
        hom = xyz @ self.p2[:, :3].T + self.p2[:, 3]
        w = hom[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = hom[:, :2] / w[:, None]
        return uv, w

    def unproject(self, u, v, depth):
        """Point in rectified camera coordinates with ``z = depth`` that projects to ``(u, v)``."""
        p = self.p2
        # unknowns (x, y, w): P[:, :2] @ (x, y) - w * (u, v, 1) = -(P[:, 2] * z + P[:, 3])
        a = np.column_stack([p[:, 0], p[:, 1], -np.array([u, v, 1.0])])
        rhs = -(p[:, 2] * depth + p[:, 3])
        x, y, _ = np.linalg.solve(a, rhs)
        return np.array([x, y, depth])


def identity_calib():
    return CalibKitti(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))


@dataclass(frozen=True)
class LabelKitti:
    """One object line.  ``location`` is the bottom-face center in camera meters."""

    category: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple
    h: float
    w: float
    l: float  # noqa: E741
    location: tuple
    rotation_y: float
    score: float | None = None

    @property
    def is_known(self):
        return self.category in KNOWN_CATEGORIES

    def with_score(self, score):
        return replace(self, score=score)


# --- text helpers ----------------------------------------------------------------


def _as_text(data):
    if isinstance(data, str):
        return data
    try:
        return bytes(data).decode("ascii")
    except UnicodeDecodeError as exc:
        line = bytes(data)[: exc.start].count(b"\n") + 1
        raise MalformedText("non-ASCII byte", line=line, offset=exc.start) from None


def _parse_float(token, line, column):
    if not _FLOAT_RE.match(token):
        raise MalformedFloat(token, line, column)
    value = float(token)
    if not math.isfinite(value):
        raise MalformedFloat(token, line, column)
    return value


def _fmt_exact(value):
    """KITTI-style ``%.12e`` when it round-trips bit-exactly, else ``repr``."""
    s = "%.12e" % value
    return s if float(s) == value else repr(float(value))


# --- calibration ------------------------------------------------------------------

_CALIB_KEYS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def parse_calib(data):
    text = _as_text(data)
    found = {}
    layout = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if ":" not in line:
            raise MalformedLine("expected 'KEY: values'", line=lineno)
        key, _, rest = line.partition(":")
        key = key.strip()
        tokens = rest.split()
        if key not in _CALIB_KEYS:
            layout.append((key, [_parse_float(t, lineno, col) for col, t in enumerate(tokens, start=1)]))
            continue
        if key not in found:
            layout.append((key, None))
        want = _CALIB_KEYS[key]
        if len(tokens) != want:
            raise WrongArity(key, want, len(tokens), line=lineno)
        found[key] = [_parse_float(t, lineno, col) for col, t in enumerate(tokens, start=1)]
    for key in _CALIB_KEYS:
        if key not in found:
            raise MissingKey(key)
    calib = CalibKitti(
        np.array(found["P2"]).reshape(3, 4),
        np.array(found["R0_rect"]).reshape(3, 3),
        np.array(found["Tr_velo_to_cam"]).reshape(3, 4),
        tuple(layout),
    )
    return calib.validate()


def write_calib(calib):
    """KITTI calibration text; any ``extra`` matrices are written back in place."""
    core = {
        "P2": calib.p2.reshape(-1),
        "R0_rect": calib.r0_rect.reshape(-1),
        "Tr_velo_to_cam": calib.tr_velo_to_cam.reshape(-1),
    }
    rows = [(k, core[k] if v is None else v) for k, v in calib.extra if v is not None or k in core]
    rows += [(k, v) for k, v in core.items() if k not in {r[0] for r in rows}]
    lines = [f"{key}: " + " ".join(_fmt_exact(v) for v in vals) for key, vals in rows]
    return ("\n".join(lines) + "\n").encode("ascii")


# --- labels -------------------------------------------------------------------------


def _parse_label_line(tokens, lineno):
    if len(tokens) not in (15, 16):
        raise WrongFieldCount(lineno, len(tokens))
    category = tokens[0]
    vals = []
    for col, tok in enumerate(tokens[1:], start=2):
        if col == 3:
            if not _INT_RE.match(tok):
                raise MalformedFloat(tok, lineno, col)
            vals.append(int(tok))
        else:
            vals.append(_parse_float(tok, lineno, col))
    trunc, occl, alpha = vals[0], vals[1], vals[2]
    u0, v0, u1, v1 = vals[3:7]
    h, w, l = vals[7:10]  # noqa: E741
    loc = tuple(vals[10:13])
    ry = vals[13]
    score = vals[14] if len(vals) == 15 else None
    if u0 > u1 or v0 > v1:
        raise InvalidValue("bbox has min > max", line=lineno)
    if category in KNOWN_CATEGORIES:
        if not (h > 0 and w > 0 and l > 0):
            raise InvalidValue("non-positive dimensions", line=lineno)
        if not (-math.pi <= ry <= math.pi):
            raise InvalidValue("rotation_y outside [-pi, pi]", line=lineno)
    return LabelKitti(category, trunc, occl, alpha, (u0, v0, u1, v1), h, w, l, loc, ry, score)


def parse_labels(data):
    text = _as_text(data)
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        out.append(_parse_label_line(tokens, lineno))
    return out


def _label_fields(lab, score_fmt=None):
    b = lab.bbox2d
    fields = [
        lab.category,
        "%.2f" % lab.truncated,
        "%d" % lab.occluded,
        "%.2f" % lab.alpha,
        "%.2f %.2f %.2f %.2f" % tuple(b),
        "%.2f %.2f %.2f" % (lab.h, lab.w, lab.l),
        "%.2f %.2f %.2f" % tuple(lab.location),
        "%.2f" % lab.rotation_y,
    ]
    if score_fmt is not None:
        fields.append(score_fmt % lab.score)
    return " ".join(fields)


def write_labels(labels):
    """Ground-truth style: 15 fields, 2-decimal fixed point, scores dropped."""
    return "".join(_label_fields(lab) + "\n" for lab in labels).encode("ascii")


def write_detections(dets):
    """KITTI result format (16 fields).  Geometry uses 2-decimal fixed point;
    the score uses 4 decimals so ranking survives the round trip."""
    lines = []
    for i, det in enumerate(dets):
        if det.score is None:
            raise MissingScore(f"detection {i} ({det.category}) has no score")
        lines.append(_label_fields(det, "%.4f") + "\n")
    return "".join(lines).encode("ascii")


# --- velodyne -------------------------------------------------------------------------


def read_velodyne(data):
    data = bytes(data)
    if len(data) % 16:
        raise TruncatedRecord(f"{len(data)} bytes is not a multiple of 16", offset=len(data) - len(data) % 16)
    pts = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 4)
    bad = ~np.isfinite(pts)
    if bad.any():
        row = int(np.argwhere(bad)[0, 0])
        raise InvalidValue("non-finite value in point record", offset=16 * row)
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return PointCloud(pts, Frame.LIDAR)


def write_velodyne(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    return np.ascontiguousarray(pts, dtype="<f4").tobytes()


def read_file(path):
    with open(path, "rb") as fh:
        return fh.read()



# --- boxes <-> labels ------------------------------------------------------------------


def label_to_box(label):
    """Box3D centred on the cuboid (KITTI ``location`` is the bottom-face centre)."""
    from .box3d import Box3D

    x, y, z = label.location
    return Box3D((x, y - label.h / 2.0, z), (label.h, label.w, label.l), label.rotation_y)


def box_to_label(box, category, score=None, bbox2d=(0.0, 0.0, 0.0, 0.0), truncated=0.0, occluded=0):
    x, y, z = box.center
    alpha = box.heading - math.atan2(x, z)
    alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
    return LabelKitti(
        category, truncated, occluded, alpha, tuple(bbox2d), box.h, box.w, box.l, (x, y + box.h / 2.0, z), box.heading, score
    )
