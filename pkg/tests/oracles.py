"""Independent reference computations shared by the tests."""

import math

import numpy as np

from frustumkit.box3d import box_corners


def inside_box(box, pts):
    c, s = math.cos(box.heading), math.sin(box.heading)
    d = pts - np.asarray(box.center)
    along_l = d[:, 0] * c - d[:, 2] * s
    along_w = d[:, 0] * s + d[:, 2] * c
    return (np.abs(along_l) <= box.l / 2) & (np.abs(along_w) <= box.w / 2) & (np.abs(d[:, 1]) <= box.h / 2)


def mc_iou(a, b, n, rng):
    """Monte-Carlo volume IoU: uniform samples in the union's bounding box."""
    both = np.vstack([box_corners(a), box_corners(b)])
    lo, hi = both.min(axis=0), both.max(axis=0)
    p = rng.uniform(lo, hi, (n, 3))
    ia, ib = inside_box(a, p), inside_box(b, p)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0
