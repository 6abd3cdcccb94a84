"""Multi-task objective: segmentation, two centre regressions, heading and size
classification + residual regression, and the corner regulariser.

Batch reductions: classification terms are the mean cross-entropy over the
batch; regression terms apply the smooth-l1 per component, sum the components
of one sample and average over the batch.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from .box3d import FLIP_PERMUTATION, RESIDUAL_MODES, encode_box
from .errors import ConfigError
from .tensor_nn import Tensor
from .tensor_nn import ops as T

CORNER_ANCHORS = ("literal", "with_residuals")

_RING_X = np.array([1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0]) * 0.5
_RING_Z = np.array([1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0]) * 0.5
_RING_Y = np.array([-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]) * 0.5


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    gamma: float = 10.0
    residual_mode: str = "cls_reg_normalized"
    corner_anchors: str = "with_residuals"
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigError(f"unknown residual mode {self.residual_mode!r}")
        if self.corner_anchors not in CORNER_ANCHORS:
            raise ConfigError(f"corner_anchors must be one of {CORNER_ANCHORS}")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be > 0")


@dataclass(frozen=True)
class LossBreakdown:
    seg: float
    c1_reg: float
    c2_reg: float
    h_cls: float
    h_reg: float
    s_cls: float
    s_reg: float
    corner: float
    total: float

    @classmethod
    def columns(cls):
        return tuple(f.name for f in fields(cls))

    def as_tuple(self):
        return astuple(self)


@dataclass
class BoxTargets:
    """Per-sample regression/classification targets, frustum frame."""

    center: np.ndarray  # [B, 3]
    heading: np.ndarray  # [B]
    size: np.ndarray  # [B, 3]
    heading_bin: np.ndarray  # [B] int
    heading_residual: np.ndarray  # [B], units of half a bin
    size_class: np.ndarray  # [B] int
    size_residual: np.ndarray  # [B, 3], fraction of the template

    @classmethod
    def from_boxes(cls, boxes, codec):
        enc = [encode_box(b, codec) for b in boxes]
        return cls(
            center=np.array([b.center for b in boxes], dtype=np.float64).reshape(-1, 3),
            heading=np.array([b.heading for b in boxes], dtype=np.float64),
            size=np.array([b.size for b in boxes], dtype=np.float64).reshape(-1, 3),
            heading_bin=np.array([e.heading_bin for e in enc], dtype=np.int64),
            heading_residual=np.array([e.heading_residual for e in enc], dtype=np.float64),
            size_class=np.array([e.size_class for e in enc], dtype=np.int64),
            size_residual=np.array([e.size_residual for e in enc], dtype=np.float64).reshape(-1, 3),
        )

    def __len__(self):
        return len(self.heading)


# --- primitives ------------------------------------------------------------------------------


def seg_loss(logits, gt_mask):
    """Mean per-point softmax cross-entropy of ``[..., 2]`` logits."""
    return T.mean(T.softmax_cross_entropy(logits, np.asarray(gt_mask, dtype=np.int64)))


def huber(residual, delta=1.0):
    """Sum of elementwise smooth-l1 values."""
    return T.tsum(T.huber(residual, delta))


def _batch_huber(residual, delta):
    r = T.huber(residual, delta)
    if r.ndim > 1:
        r = T.tsum(r, axis=tuple(range(1, r.ndim)))
    return T.mean(r)


def corners_tensor(center, size, heading):
    """Differentiable ``[B, 8, 3]`` corners (same order as ``box3d.box_corners``).

    The heading is first reduced into [-pi/2, pi/2) by exact half turns, so a
    box and its pi-rotated twin yield the same corner set up to the fixed
    corner permutation.
    """
    center, size, heading = T.as_tensor(center), T.as_tensor(size), T.as_tensor(heading)
    b = heading.shape[0]
    th = T.wrap_half_turn(heading)
    c = T.reshape(T.cos(th), (b, 1))
    s = T.reshape(T.sin(th), (b, 1))
    h = T.getitem(size, (slice(None), slice(0, 1)))
    w = T.getitem(size, (slice(None), slice(1, 2)))
    l = T.getitem(size, (slice(None), slice(2, 3)))  # noqa: E741
    lx = T.mul(l, _RING_X)
    wz = T.mul(w, _RING_Z)
    hy = T.mul(h, _RING_Y)
    x = T.add(T.mul(c, lx), T.mul(s, wz))
    z = T.sub(T.mul(c, wz), T.mul(s, lx))
    corners = T.stack([x, hy, z], axis=-1)
    return T.add(corners, T.reshape(center, (b, 1, 3)))


def corner_distance(pred_corners, gt_corners):
    """Per-sample min over {gt, pi-flipped gt} of the summed corner distances."""
    gt = np.asarray(gt_corners.data if isinstance(gt_corners, Tensor) else gt_corners)
    d1 = T.tsum(T.norm(T.sub(pred_corners, gt), axis=-1), axis=-1)
    d2 = T.tsum(T.norm(T.sub(pred_corners, gt[:, FLIP_PERMUTATION]), axis=-1), axis=-1)
    return T.minimum(d1, d2)


def predicted_heading_size(heads, targets, codec, mode, anchors="with_residuals"):
    """Heading ``[B]`` and size ``[B, 3]`` tensors of the anchor selected by the gt classes."""
    b = len(targets)
    rows = np.arange(b)
    if mode == "regression_only":
        heading = T.getitem(heads.heading_residuals, (slice(None), 0))
        size = T.getitem(heads.size_residuals, (slice(None), 0))
        return heading, size
    bins = targets.heading_bin
    cls = targets.size_class
    bin_center = bins * codec.bin_width
    tpl = codec.template_array[cls]
    if anchors == "literal":
        return Tensor(bin_center), Tensor(tpl)
    hr = T.getitem(heads.heading_residuals, (rows, bins))
    sr = T.getitem(heads.size_residuals, (rows, cls))
    if mode == "cls_reg_normalized":
        heading = T.add(T.mul(hr, codec.half_bin), bin_center)
        size = T.mul(T.add(sr, 1.0), tpl)
    elif mode == "cls_reg":
        heading = T.add(hr, bin_center)
        size = T.add(sr, tpl)
    else:
        raise ConfigError(f"unknown residual mode {mode!r}")
    return heading, size


def corner_loss(heads, targets, codec, mode="cls_reg_normalized", anchors="with_residuals"):
    """Batch-mean corner loss of the gt-class anchor placed at the predicted centre."""
    heading, size = predicted_heading_size(heads, targets, codec, mode, anchors)
    pred = corners_tensor(heads.center, size, heading)
    gt = corners_tensor(Tensor(targets.center), Tensor(targets.size), Tensor(targets.heading))
    return T.mean(corner_distance(pred, gt.data))


def loss_terms(seg_logits, gt_mask, heads, targets, codec, weights=None):
    """Unweighted term tensors in :class:`LossBreakdown` order (without ``total``).

    ``seg_logits`` may be ``None`` (box stage trained on its own); the
    segmentation term is then 0.  The corner term is skipped (0) when
    ``weights.gamma`` is 0.
    """
    weights = weights or LossWeights()
    mode = weights.residual_mode
    delta = weights.huber_delta
    rows = np.arange(len(targets))
    zero = Tensor(0.0)

    seg = seg_loss(seg_logits, gt_mask) if seg_logits is not None else zero
    c1 = _batch_huber(T.sub(heads.center_t, targets.center), delta)
    c2 = _batch_huber(T.sub(heads.center, targets.center), delta)

    if mode == "regression_only":
        h_cls = s_cls = zero
        h_reg = _batch_huber(T.sub(T.getitem(heads.heading_residuals, (slice(None), 0)), targets.heading), delta)
        s_reg = _batch_huber(T.sub(T.getitem(heads.size_residuals, (slice(None), 0)), targets.size), delta)
    else:
        h_cls = T.mean(T.softmax_cross_entropy(heads.heading_scores, targets.heading_bin))
        s_cls = T.mean(T.softmax_cross_entropy(heads.size_scores, targets.size_class))
        hr = T.getitem(heads.heading_residuals, (rows, targets.heading_bin))
        sr = T.getitem(heads.size_residuals, (rows, targets.size_class))
        if mode == "cls_reg_normalized":
            h_tgt = targets.heading_residual
            s_tgt = targets.size_residual
        else:
            h_tgt = targets.heading_residual * codec.half_bin
            tpl = codec.template_array[targets.size_class]
            s_tgt = targets.size_residual * tpl
        h_reg = _batch_huber(T.sub(hr, h_tgt), delta)
        s_reg = _batch_huber(T.sub(sr, s_tgt), delta)

    if weights.gamma > 0:
        corner = corner_loss(heads, targets, codec, mode, weights.corner_anchors)
    else:
        corner = zero
    return [seg, c1, c2, h_cls, h_reg, s_cls, s_reg, corner]


def multi_task_loss(seg_logits, gt_mask, heads, targets, codec, weights=None):
    """Return ``(total Tensor, LossBreakdown)``; see :func:`loss_terms`."""
    weights = weights or LossWeights()
    seg, c1, c2, h_cls, h_reg, s_cls, s_reg, corner = loss_terms(seg_logits, gt_mask, heads, targets, codec, weights)
    box_terms = T.add(T.add(T.add(c1, c2), T.add(h_cls, h_reg)), T.add(T.add(s_cls, s_reg), T.mul(corner, weights.gamma)))
    total = T.add(seg, T.mul(box_terms, weights.lam))
    parts = [seg, c1, c2, h_cls, h_reg, s_cls, s_reg, corner, total]
    return total, LossBreakdown(*(float(p.data) for p in parts))
