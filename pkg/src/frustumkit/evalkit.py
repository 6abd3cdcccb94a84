"""Metrics (segmentation / box accuracy, PR curves, AP) and the ablation harness."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .box3d import iou3d
from .errors import ConfigError, NonFiniteScore

log = logging.getLogger(__name__)

AP_MODES = {"11": np.linspace(0.0, 1.0, 11), "40": np.linspace(1.0 / 40, 1.0, 40)}

# KITTI object benchmark buckets: min 2D box height (px), max occlusion level, max truncation
DIFFICULTIES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


def seg_accuracy(pred_mask, gt_mask):
    """Fraction of points whose predicted label matches the ground truth."""
    p = np.asarray(pred_mask, dtype=bool).reshape(-1)
    g = np.asarray(gt_mask, dtype=bool).reshape(-1)
    if p.shape != g.shape:
        raise ValueError("masks differ in length")
    if g.size == 0:
        return 0.0
    return float(np.count_nonzero(p == g)) / g.size


def box_accuracy(preds, gts, iou_thresh=0.7, iou_fn=iou3d):
    """Fraction of gt boxes whose paired prediction reaches ``iou_thresh``.

    ``preds[i]`` pairs with ``gts[i]``; missing entries (short list or ``None``)
    count as failures.
    """
    if not gts:
        return 0.0
    hits = 0
    for i, g in enumerate(gts):
        p = preds[i] if i < len(preds) else None
        if p is not None and iou_fn(p, g) >= iou_thresh:
            hits += 1
    return hits / len(gts)


# --- PR curves / AP ----------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    frame: object
    box: object
    score: float


@dataclass(frozen=True)
class GroundTruth:
    frame: object
    box: object
    ignore: bool = False  # matched detections are neither TP nor FP


@dataclass
class PrCurve:
    scores: np.ndarray  # descending, detections that count
    tp: np.ndarray  # bool per counted detection
    n_gt: int
    recall: np.ndarray
    precision: np.ndarray
    recall_samples: np.ndarray
    precision_samples: np.ndarray  # interpolated, non-increasing
    ap: float
    mode: str = "11"


def match_detections(dets, gts, iou_thresh, iou_fn=iou3d):
    """Greedy matching in descending score (ties by input index).

    Each detection takes the unmatched gt of its frame with the highest IoU
    (first one on ties) if that IoU reaches ``iou_thresh``.  Returns
    ``(order, status)`` where status is 1 = TP, 0 = FP, -1 = ignored.
    """
    scores = np.array([float(d.score) for d in dets], dtype=np.float64)
    if not np.isfinite(scores).all():
        raise NonFiniteScore("detection scores must be finite")
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    by_frame = {}
    for j, g in enumerate(gts):
        by_frame.setdefault(g.frame, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    status = np.zeros(len(dets), dtype=np.int64)
    for i in order:
        d = dets[i]
        best, best_j = -1.0, -1
        for j in by_frame.get(d.frame, ()):
            if used[j]:
                continue
            v = iou_fn(d.box, gts[j].box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            used[best_j] = True
            status[i] = -1 if gts[best_j].ignore else 1
        else:
            status[i] = 0
    return np.array(order, dtype=np.int64), status


def pr_curve(scores, tp, n_gt, mode="11"):
    """Build a :class:`PrCurve` from per-detection ``scores`` / ``tp`` flags."""
    if mode not in AP_MODES:
        raise ConfigError(f"AP mode must be one of {sorted(AP_MODES)}")
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    samples = AP_MODES[mode]
    if n_gt == 0 or scores.size == 0:
        zeros = np.zeros(samples.size)
        return PrCurve(scores, tp, n_gt, np.zeros(0), np.zeros(0), samples, zeros, 0.0, mode)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros(samples.size)
    for k, r in enumerate(samples):
        hit = np.flatnonzero(recall >= r - 1e-12)
        interp[k] = env[hit[0]] if hit.size else 0.0
    return PrCurve(scores, tp, n_gt, recall, precision, samples, interp, float(interp.mean()), mode)


def average_precision(dets, gts, iou_thresh, mode="11", iou_fn=iou3d):
    """AP of ``dets`` (:class:`Detection`) against ``gts`` (:class:`GroundTruth`)."""
    order, status = match_detections(dets, gts, iou_thresh, iou_fn)
    keep = order[status[order] >= 0]
    scores = np.array([dets[i].score for i in keep], dtype=np.float64)
    tp = status[keep] == 1
    n_gt = sum(1 for g in gts if not g.ignore)
    return pr_curve(scores, tp, n_gt, mode)


def difficulty_of(label):
    """Smallest KITTI bucket index (0 easy, 1 moderate, 2 hard) containing ``label``, or None."""
    height = label.bbox2d[3] - label.bbox2d[1]
    for k, (min_h, max_occ, max_trunc) in enumerate(DIFFICULTIES.values()):
        if height >= min_h and label.occluded <= max_occ and label.truncated <= max_trunc:
            return k
    return None


def kitti_ground_truth(labels_by_frame, category, difficulty=None):
    """GroundTruth list for one category; objects harder than ``difficulty``
    (and DontCare / neighbouring classes) become ignore regions."""
    from .kitti_io import label_to_box

    level = None if difficulty is None else list(DIFFICULTIES).index(difficulty)
    out = []
    for frame, labels in labels_by_frame.items():
        for lab in labels:
            if lab.category != category:
                continue
            d = difficulty_of(lab)
            ignore = level is not None and (d is None or d > level)
            out.append(GroundTruth(frame, label_to_box(lab), ignore))
    return out


def kitti_detections(dets_by_frame, category):
    from .kitti_io import label_to_box

    return [
        Detection(frame, label_to_box(d), float(d.score))
        for frame, dets in dets_by_frame.items()
        for d in dets
        if d.category == category
    ]


# --- SVG -------------------------------------------------------------------------------------


def pr_curves_svg(curves, width=400, height=400, margin=40):
    """PR curves as an SVG document (one polyline per named curve)."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    w, h = width - 2 * margin, height - 2 * margin

    def xy(r, p):
        return margin + r * w, margin + (1.0 - p) * h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="{margin}" y="{margin}" width="{w}" height="{h}" fill="none" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">recall</text>',
        f'<text x="12" y="{height / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {height / 2})">precision</text>',
    ]
    for k, (name, c) in enumerate(curves.items()):
        color = colors[k % len(colors)]
        if c.recall.size:
            r = np.concatenate([[0.0], c.recall])
            p = np.concatenate([[c.precision[0]], c.precision])
            pts = " ".join("%.2f,%.2f" % xy(a, b) for a, b in zip(r, p))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{margin + 8}" y="{margin + 16 + 14 * k}" font-size="11" fill="{color}">{name} AP={c.ap:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- ablation harness ------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    name: str
    pipeline: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)


NORMALISATION_ROWS = (
    AblationRow("none", {"frustum_rot": False, "mask_centralize": False, "t_net": False}),
    AblationRow("frustum_rot", {"frustum_rot": True, "mask_centralize": False, "t_net": False}),
    AblationRow("mask_centralize", {"frustum_rot": False, "mask_centralize": True, "t_net": False}),
    AblationRow("frustum_rot+mask_centralize", {"frustum_rot": True, "mask_centralize": True, "t_net": False}),
    AblationRow("all", {"frustum_rot": True, "mask_centralize": True, "t_net": True}),
)

BOX_PARAM_ROWS = (
    AblationRow("regression_only", loss={"residual_mode": "regression_only", "gamma": 0.0}),
    AblationRow("cls_reg", loss={"residual_mode": "cls_reg", "gamma": 0.0}),
    AblationRow("cls_reg_normalized", loss={"residual_mode": "cls_reg_normalized", "gamma": 0.0}),
    AblationRow("cls_reg_normalized+corner", loss={"residual_mode": "cls_reg_normalized"}),
)

ABLATION_HEADER = (
    "row",
    "seed",
    "frustum_rot",
    "mask_centralize",
    "t_net",
    "residual_mode",
    "gamma",
    "corner_anchors",
    "box_accuracy",
    "seg_accuracy",
    "mean_iou",
)


@dataclass
class AblationResult:
    rows: list  # dicts keyed by ABLATION_HEADER

    def mean(self, name):
        vals = [r["box_accuracy"] for r in self.rows if r["row"] == name]
        return float(np.mean(vals)) if vals else float("nan")

    def means(self):
        names = list(dict.fromkeys(r["row"] for r in self.rows))
        return {n: self.mean(n) for n in names}

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in self.rows:
            w.writerow([r[k] for k in ABLATION_HEADER])
        return buf.getvalue()

    def summary_csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("row", "n_seeds", "mean_box_accuracy", "std_box_accuracy"))
        for name in dict.fromkeys(r["row"] for r in self.rows):
            vals = [r["box_accuracy"] for r in self.rows if r["row"] == name]
            w.writerow((name, len(vals), repr(float(np.mean(vals))), repr(float(np.std(vals)))))
        return buf.getvalue()


def row_config(base, row, seed):
    pipe = dict(row.pipeline)
    cfg = base.replace(pipeline=pipe, loss=dict(row.loss), train={"seed": seed})
    return cfg


def _run_one(args):
    from .train import build_datasets, evaluate, train_model

    cfg, name, data = args
    train, val = data if data is not None else build_datasets(cfg)
    res = train_model(cfg, train)
    ev = evaluate(res.model, val, cfg, mask_source=cfg.train.mask_source)
    p, lw = cfg.pipeline, cfg.loss
    return {
        "row": name,
        "seed": cfg.train.seed,
        "frustum_rot": p.frustum_rot,
        "mask_centralize": p.mask_centralize,
        "t_net": p.t_net,
        "residual_mode": lw.residual_mode,
        "gamma": lw.gamma,
        "corner_anchors": lw.corner_anchors,
        "box_accuracy": ev.box_accuracy,
        "seg_accuracy": ev.seg_accuracy,
        "mean_iou": float(ev.ious.mean()) if ev.ious.size else 0.0,
    }


def run_ablation(base, rows, seeds=(0, 1, 2), workers=1, progress=None):
    """Train and evaluate one model per (row, seed).

    Datasets are generated once per (seed, frustum_rot) and shared by the rows
    that need them.  With ``workers > 1`` the runs go to a process pool; the
    result does not depend on the worker count.
    """
    from .train import build_datasets

    jobs = []
    cache = {}
    for seed in seeds:
        for row in rows:
            cfg = row_config(base, row, seed)
            key = (seed, cfg.pipeline.frustum_rot)
            if workers <= 1 and key not in cache:
                cache[key] = build_datasets(cfg)
            jobs.append((cfg, row.name, cache.get(key)))
    out = []
    if workers <= 1:
        for k, job in enumerate(jobs):
            out.append(_run_one(job))
            if progress:
                progress(k + 1, len(jobs), out[-1])
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for k, r in enumerate(pool.map(_run_one, jobs)):
                out.append(r)
                if progress:
                    progress(k + 1, len(jobs), r)
    return AblationResult(out)


def strictly_increasing(values):
    return all(a < b for a, b in zip(values[:-1], values[1:]))
