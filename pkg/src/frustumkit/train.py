"""Training and evaluation loops.

Randomness is split into named sub-streams of the master seed:
``init`` (weights), ``data/<split>`` (scenes), ``batch`` (sample order),
``augment`` (flip / depth shift) and ``masksample`` (mask point sampling), so
one component can change without perturbing the others.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .box3d import iou3d
from .config import dump_experiment_config
from .evalkit import seg_accuracy
from .fpnet_models import FrustumPointNet, decode_batch, full_forward
from .frustum_geom import frustum_to_camera_box
from .losses import BoxTargets, LossBreakdown, multi_task_loss
from .rng import substream
from .synth_data import AugmentConfig, augment_sample, generate_samples
from .tensor_nn import Adam, StepDecay, Tape, backward, bn_decay, save, set_bn_momentum

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "lr") + LossBreakdown.columns()


def build_datasets(cfg):
    """``(train, val)`` frustum samples.  Training samples keep their 2D-box
    jitter but no flip / depth shift; those are redrawn on every batch."""
    tc = cfg.train
    aug = cfg.augment
    gen_aug = replace(aug, flip_prob=0.0, depth_shift_range=0.0)
    rotate = cfg.pipeline.frustum_rot
    train = generate_samples(cfg.synth, tc.train_count, gen_aug, tc.seed, "train", rotate=rotate)
    val_aug = AugmentConfig.evaluation(aug.n_frustum_points, aug.n_mask_points)
    val = generate_samples(cfg.synth, tc.val_count, val_aug, tc.seed, "val", rotate=rotate) if tc.val_count else []
    return train, val


def stack_batch(samples):
    pts = np.stack([s.points.points for s in samples])
    onehot = np.stack([s.onehot for s in samples])
    mask = np.stack([s.gt_mask for s in samples])
    return pts, onehot, mask


def build_model(cfg):
    return FrustumPointNet(cfg.net, cfg.codec, substream(cfg.train.seed, "init"), cfg.pipeline)


@dataclass
class TrainResult:
    model: FrustumPointNet
    rows: list = field(default_factory=list)  # (step, lr, *LossBreakdown)

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return buf.getvalue()


def train_model(cfg, train_samples, model=None):
    """Run ``cfg.train.steps`` Adam steps; deterministic for a given config."""
    tc = cfg.train
    model = model or build_model(cfg)
    named = list(model.named_parameters())
    if not tc.train_seg:
        named = [(n, p) for n, p in named if not n.startswith("seg.")]
    opt = Adam(named, StepDecay(tc.base_lr, tc.decay_every, tc.decay_factor))
    result = TrainResult(model)
    n = len(train_samples)
    b = min(tc.batch_size, n)
    for step in range(tc.steps):
        rng_b = substream(tc.seed, "batch", step)
        rng_a = substream(tc.seed, "augment", step)
        rng_m = substream(tc.seed, "masksample", step)
        idx = rng_b.choice(n, b, replace=False)
        batch = [augment_sample(train_samples[i], cfg.augment, rng_a) for i in idx]
        pts, onehot, gt_mask = stack_batch(batch)
        targets = BoxTargets.from_boxes([s.gt_box for s in batch], cfg.codec)
        if cfg.net.batch_norm:
            set_bn_momentum(model, bn_decay(step * b))
        model.train()
        lr = opt.lr
        with Tape() as tape:
            oracle = gt_mask if tc.mask_source == "oracle" else None
            out = full_forward(model, pts, onehot, rng_m, mask=oracle, run_seg=tc.train_seg)
            total, parts = multi_task_loss(out.seg_logits, gt_mask, out.heads, targets, cfg.codec, cfg.loss)
        backward(total, tape)
        opt.step()
        opt.zero_grad()
        model.zero_grad()
        result.rows.append((step, lr) + parts.as_tuple())
        if tc.log_every and (step % tc.log_every == 0 or step == tc.steps - 1):
            log.info("step %d lr %.2e total %.4f seg %.4f corner %.4f", step, lr, parts.total, parts.seg, parts.corner)
    model.eval()
    return result


@dataclass
class EvalResult:
    seg_accuracy: float
    box_accuracy: float
    ious: np.ndarray
    boxes: list  # camera frame
    scores: list
    fallback_rate: float


def evaluate(model, samples, cfg, batch_size=32, mask_source="predicted"):
    """Segmentation accuracy and box accuracy at ``cfg.train.iou_threshold``.

    Boxes are compared in camera coordinates (the frustum rotation is undone).
    """
    model.eval()
    rng = substream(cfg.train.seed, "masksample", "eval")
    pred_masks, boxes, scores, fallbacks = [], [], [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        pts, onehot, gt_mask = stack_batch(chunk)
        oracle = gt_mask if mask_source == "oracle" else None
        out = full_forward(model, pts, onehot, rng, mask=oracle)
        pred_masks.append(out.seg_logits.data[..., 1] > out.seg_logits.data[..., 0])
        bx, sc = decode_batch(out, [s.state.frustum_angle for s in chunk], cfg.codec, cfg.loss.residual_mode)
        boxes.extend(bx)
        scores.extend(sc)
        fallbacks.extend(out.selection.fallback.tolist())
    gts = [camera_gt(s) for s in samples]
    if not samples:
        return EvalResult(0.0, 0.0, np.zeros(0), [], [], 0.0)
    ious = np.array([iou3d(b, g) for b, g in zip(boxes, gts)])
    gt_masks = np.concatenate([s.gt_mask for s in samples])
    return EvalResult(
        seg_accuracy=seg_accuracy(np.concatenate([m.reshape(-1) for m in pred_masks]), gt_masks),
        box_accuracy=float(np.mean(ious >= cfg.train.iou_threshold)),
        ious=ious,
        boxes=boxes,
        scores=scores,
        fallback_rate=float(np.mean(fallbacks)),
    )


def camera_gt(sample):
    return frustum_to_camera_box(sample.gt_box, sample.state.frustum_angle)


def write_run(out_dir, cfg, result, metrics=None):
    """Checkpoint, per-step CSV and the resolved config under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    save(result.model, os.path.join(out_dir, "model.fpk"))
    with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.csv_text())
    with open(os.path.join(out_dir, "config.resolved.ini"), "w", encoding="utf-8") as fh:
        fh.write(dump_experiment_config(cfg))
    if metrics is not None:
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            for k, v in metrics.items():
                fh.write(f"{k},{v!r}\n")

