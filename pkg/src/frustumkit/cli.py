"""``frustumkit`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 failed check.
Every command that writes outputs also writes ``config.resolved.ini`` next
to them so a run can be repeated from (config, seed) alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import bv_pipeline as bv
from . import evalkit, kitti_io
from .box3d import iou3d, iou_bev
from .config import ablation_config, desk_config, dump_experiment_config, read_experiment_config
from .errors import ConfigError, DataError, EmptyFrustum, FrustumKitError
from .rng import substream
from .synth_data import (
    frustum_sample_from_box2d,
    generate_scene,
    load_scene_spec,
    load_samples,
    project_box_to_image,
    save_samples,
)

log = logging.getLogger("frustumkit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


class CheckFailed(FrustumKitError):
    """A verification command found a failure."""


# --- shared helpers ----------------------------------------------------------------------------


def _config(args):
    return read_experiment_config(args.config) if getattr(args, "config", None) else desk_config()


def _write_resolved(out_dir, cfg):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.ini"), "w", encoding="utf-8") as fh:
        fh.write(dump_experiment_config(cfg))


def _write(path, data):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def _frame_ids(dataset, sub="velodyne", ext=".bin"):
    d = os.path.join(dataset, sub)
    if not os.path.isdir(d):
        raise DataError(f"missing directory {d}")
    return sorted(n[: -len(ext)] for n in os.listdir(d) if n.endswith(ext))


def _read_frame(dataset, fid, with_labels=True):
    cloud = kitti_io.read_velodyne(kitti_io.read_file(os.path.join(dataset, "velodyne", fid + ".bin")))
    calib = kitti_io.parse_calib(kitti_io.read_file(os.path.join(dataset, "calib", fid + ".txt")))
    labels = []
    path = os.path.join(dataset, "label_2", fid + ".txt")
    if with_labels and os.path.exists(path):
        labels = kitti_io.parse_labels(kitti_io.read_file(path))
    return cloud, calib, labels


def _read_label_dir(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".txt"):
            out[name[:-4]] = kitti_io.parse_labels(kitti_io.read_file(os.path.join(directory, name)))
    return out


def _load_model(cfg, path):
    from .tensor_nn import load_into
    from .train import build_model

    model = build_model(cfg)
    load_into(model, path)
    return model.eval()


# --- commands --------------------------------------------------------------------------------


def cmd_synth(args):
    """Synthetic scenes written as a KITTI-layout dataset (LiDAR-frame clouds)."""
    cfg = _config(args)
    spec = cfg.synth
    if args.spec:
        with open(args.spec) as fh:
            spec = load_scene_spec(fh.read())
        cfg = dataclasses.replace(cfg, synth=spec)
    for k in range(args.count):
        scene = generate_scene(spec, substream(cfg.train.seed, "synth", k))
        fid = f"{k:06d}"
        lidar = np.array(scene.cloud.points)
        lidar[:, :3] = scene.calib.rect_to_velo(scene.cloud.xyz)
        _write(os.path.join(args.out, "velodyne", fid + ".bin"), kitti_io.write_velodyne(lidar))
        _write(os.path.join(args.out, "calib", fid + ".txt"), kitti_io.write_calib(scene.calib))
        labels = []
        for obj in scene.objects:
            try:
                box2d = project_box_to_image(obj.box, scene.calib)
            except EmptyFrustum:
                continue
            labels.append(kitti_io.box_to_label(obj.box, obj.category, bbox2d=box2d))
        _write(os.path.join(args.out, "label_2", fid + ".txt"), kitti_io.write_labels(labels))
    _write_resolved(args.out, cfg)
    print(f"wrote {args.count} frames to {args.out}")
    return EXIT_OK


def cmd_frustumize(args):
    """One FSAM sample per labelled object of a KITTI-layout dataset."""
    cfg = _config(args)
    n = cfg.augment.n_frustum_points
    samples = []
    for fid in _frame_ids(args.dataset):
        cloud, calib, labels = _read_frame(args.dataset, fid)
        rng = substream(cfg.train.seed, "frustumize", int(fid) if fid.isdigit() else fid)
        for lab in labels:
            if not lab.is_known:
                continue
            try:
                samples.append(
                    frustum_sample_from_box2d(
                        cloud, calib, lab.bbox2d, lab.category, n, rng, kitti_io.label_to_box(lab), cfg.pipeline.frustum_rot
                    )
                )
            except (EmptyFrustum, ValueError) as exc:
                log.info("frame %s: skipping %s (%s)", fid, lab.category, exc)
    save_samples(samples, args.out)
    _write_resolved(args.out, cfg)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .train import build_datasets, evaluate, train_model, write_run

    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    if args.steps is not None:
        cfg = cfg.replace(train={"steps": args.steps})
    if args.samples:
        train = load_samples(args.samples)
        val = load_samples(args.val) if args.val else []
        if not train:
            raise DataError(f"no samples in {args.samples}")
    else:
        train, val = build_datasets(cfg)
    result = train_model(cfg, train)
    metrics = {}
    if val:
        ev = evaluate(result.model, val, cfg)
        metrics = {
            "seg_accuracy": ev.seg_accuracy,
            f"box_accuracy@{cfg.train.iou_threshold}": ev.box_accuracy,
            "mean_iou": float(ev.ious.mean()),
            "mask_fallback_rate": ev.fallback_rate,
        }
        for k, v in metrics.items():
            print(f"{k}: {v:.4f}")
    write_run(args.out, cfg, result, metrics)
    print(f"checkpoint: {os.path.join(args.out, 'model.fpk')}")
    return EXIT_OK


def _detect_frame(model, cfg, cloud, calib, proposals, rng):
    from .fpnet_models import decode_batch, full_forward

    n = cfg.augment.n_frustum_points
    samples, kept = [], []
    for lab in proposals:
        try:
            samples.append(frustum_sample_from_box2d(cloud, calib, lab.bbox2d, lab.category, n, rng, rotate=cfg.pipeline.frustum_rot))
            kept.append(lab)
        except (EmptyFrustum, ValueError):
            continue
    if not samples:
        return []
    pts = np.stack([s.points.points for s in samples])
    onehot = np.stack([s.onehot for s in samples])
    out = full_forward(model, pts, onehot, rng)
    boxes, scores = decode_batch(out, [s.state.frustum_angle for s in samples], cfg.codec, cfg.loss.residual_mode)
    dets = []
    for lab, box, score in zip(kept, boxes, scores):
        s2d = 1.0 if lab.score is None else float(lab.score)
        dets.append(kitti_io.box_to_label(box, lab.category, score=score * s2d, bbox2d=lab.bbox2d))
    return dets


def cmd_detect(args):
    """3D boxes for the 2D proposals of each frame (``--proposals`` or ground-truth 2D boxes)."""
    cfg = _config(args)
    model = _load_model(cfg, args.checkpoint)
    prop_dir = args.proposals or os.path.join(args.dataset, "label_2")
    total = 0
    for fid in _frame_ids(args.dataset):
        cloud, calib, _ = _read_frame(args.dataset, fid, with_labels=False)
        path = os.path.join(prop_dir, fid + ".txt")
        props = kitti_io.parse_labels(kitti_io.read_file(path)) if os.path.exists(path) else []
        props = [p for p in props if p.is_known]
        rng = substream(cfg.train.seed, "masksample", "detect", fid)
        dets = _detect_frame(model, cfg, cloud, calib, props, rng)
        _write(os.path.join(args.out, fid + ".txt"), kitti_io.write_detections(dets))
        total += len(dets)
    _write_resolved(args.out, cfg)
    print(f"wrote {total} detections to {args.out}")
    return EXIT_OK


def cmd_bv_raster(args):
    grid = bv.BvGridConfig(resolution=args.resolution)
    cloud = kitti_io.read_velodyne(kitti_io.read_file(args.velodyne))
    raster = bv.rasterize_bv(bv.to_bev_frame(cloud, grid=grid), grid)
    _write(args.out, bv.dumps_bv_grid(raster))
    print(f"{args.out}: shape {raster.shape}, occupied cells {int((raster[..., 1] > 0).sum())}")
    return EXIT_OK


def cmd_fuse(args):
    fr = _read_label_dir(args.frustum)
    bvd = _read_label_dir(args.bv)
    total = 0
    for fid in sorted(set(fr) | set(bvd)):
        out = []
        for cat in sorted({d.category for d in fr.get(fid, []) + bvd.get(fid, [])}):
            a = [d for d in fr.get(fid, []) if d.category == cat]
            b = [d for d in bvd.get(fid, []) if d.category == cat]
            fa = [(kitti_io.label_to_box(d), d.score) for d in a]
            fb = [(kitti_io.label_to_box(d), d.score) for d in b]
            # survivors keep their source label, rescored
            source = {id(box): d for (box, _), d in zip(fa + fb, a + b)}
            for box, score in bv.fuse_detections(fa, fb, args.bv_weight, args.iou_threshold):
                out.append(source[id(box)].with_score(score))
        _write(os.path.join(args.out, fid + ".txt"), kitti_io.write_detections(out))
        total += len(out)
    print(f"wrote {total} fused detections to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    """Average precision per KITTI difficulty for one category."""
    gts_by_frame = _read_label_dir(args.labels)
    dets_by_frame = _read_label_dir(args.detections)
    for fid, dets in dets_by_frame.items():
        for d in dets:
            if d.score is None:
                raise DataError(f"frame {fid}: detection without score")
    dets = evalkit.kitti_detections(dets_by_frame, args.category)
    rows, curves = [], {}
    iou_fn = iou_bev if args.metric == "bev" else iou3d
    for diff in evalkit.DIFFICULTIES:
        gts = evalkit.kitti_ground_truth(gts_by_frame, args.category, diff)
        curve = evalkit.average_precision(dets, gts, args.iou, args.ap_mode, iou_fn=iou_fn)
        ap = curve.ap
        rows.append((diff, ap))
        curves[diff] = curve
        print(f"{args.category} {args.metric} AP@{args.iou} {diff}: {100 * ap:.2f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ap.csv"), "w", encoding="utf-8") as fh:
            fh.write("category,metric,iou,difficulty,ap\n")
            for diff, ap in rows:
                fh.write(f"{args.category},{args.metric},{args.iou},{diff},{ap!r}\n")
        with open(os.path.join(args.out, "pr.svg"), "w", encoding="utf-8") as fh:
            fh.write(evalkit.pr_curves_svg(curves))
    return EXIT_OK


def cmd_ablate(args):
    """Train one model per (row, seed) and report mean box accuracy per row."""
    cfg = read_experiment_config(args.config, base=ablation_config()) if args.config else ablation_config()
    rows = evalkit.NORMALISATION_ROWS if args.table == "normalisation" else evalkit.BOX_PARAM_ROWS
    if args.rows:
        wanted = args.rows.split(",")
        rows = [r for r in rows if r.name in wanted]
        if not rows:
            raise ConfigError(f"no ablation rows named {args.rows!r}")
    seeds = tuple(range(args.seeds))

    def progress(k, n, r):
        print(f"[{k}/{n}] {r['row']} seed {r['seed']}: box_accuracy {r['box_accuracy']:.3f}", flush=True)

    res = evalkit.run_ablation(cfg, rows, seeds, workers=max(1, args.threads), progress=progress)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(res.csv_text())
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(res.summary_csv_text())
    _write_resolved(args.out, cfg)
    for name, m in res.means().items():
        print(f"{name}: mean box_accuracy {m:.3f}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    results = run_suite(args.configs, args.seed)
    bad = [r for r in results if not r.passed]
    by_case = {}
    for r in results:
        by_case.setdefault(r.case, []).append(r)
    for case, rs in by_case.items():
        n_bad = sum(not r.passed for r in rs)
        worst = max(r.max_abs_err for r in rs)
        print(f"{'FAIL' if n_bad else 'ok  '} {case}: {len(rs) - n_bad}/{len(rs)} configs, max abs err {worst:.2e}")
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    if bad:
        raise CheckFailed(f"{len(bad)} gradient checks failed")
    return EXIT_OK


def cmd_inspect(args):
    """Short human-readable summary of any frustumkit / KITTI file."""
    path = args.path
    if os.path.isdir(path):
        samples = load_samples(path)
        print(f"{path}: {len(samples)} FSAM samples")
        return EXIT_OK
    data = kitti_io.read_file(path)
    if data[:4] == b"FSAM":
        from .synth_data import loads_sample

        s = loads_sample(data)
        fg = "-" if s.gt_mask is None else f"{s.gt_mask.mean():.3f}"
        print(f"FSAM sample: {len(s.points)} points, category {s.category}, object fraction {fg}")
        print(f"  frustum angle {s.state.frustum_angle:.4f}, gt box {s.gt_box}")
    elif data[:4] == bv.BVG_MAGIC:
        g = bv.loads_bv_grid(data)
        print(f"BV grid: shape {g.shape}, occupied cells {int((g[..., 1] > 0).sum()) if g.ndim == 3 else '-'}")
    elif path.endswith(".fpk"):
        from .tensor_nn import loads

        arrays = loads(data)
        print(f"checkpoint: {len(arrays)} tensors, {sum(a.size for _, a in arrays)} parameters")
        for name, a in arrays:
            print(f"  {name} {a.shape}")
    elif path.endswith(".bin"):
        c = kitti_io.read_velodyne(data)
        print(f"velodyne: {len(c)} points, xyz min {c.xyz.min(axis=0)}, max {c.xyz.max(axis=0)}")
    elif path.endswith(".ini"):
        cfg = read_experiment_config(path)
        print(dump_experiment_config(cfg), end="")
    else:
        text = kitti_io._as_text(data)
        if text.lstrip().startswith("P0") or "Tr_velo_to_cam" in text:
            kitti_io.parse_calib(data).validate()
            print("calibration: valid")
        else:
            labels = kitti_io.parse_labels(data)
            cats = {}
            for lab in labels:
                cats[lab.category] = cats.get(lab.category, 0) + 1
            scored = sum(lab.score is not None for lab in labels)
            print(f"labels: {len(labels)} objects {cats}, {scored} with scores")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="frustumkit", description=__doc__.splitlines()[0].replace("``", ""))
    p.add_argument("--threads", type=int, default=1, help="cap on worker processes (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=fn.__doc__ or help_)
        sp.set_defaults(func=fn)
        return sp

    def with_config(sp):
        sp.add_argument("--config", help="experiment config (.ini); defaults to the desk-scale settings")
        return sp

    sp = with_config(cmd("synth", cmd_synth, "generate a synthetic KITTI-layout dataset"))
    sp.add_argument("--spec", help="scene spec (key = value text); overrides the [synth] config section")
    sp.add_argument("--count", "--frames", dest="count", type=int, default=10, help="number of frames")
    sp.add_argument("--out", required=True)

    sp = with_config(cmd("frustumize", cmd_frustumize, "extract labelled frustum samples (FSAM)"))
    sp.add_argument("--dataset", required=True, help="directory with velodyne/, calib/, label_2/")
    sp.add_argument("--out", required=True)

    sp = with_config(cmd("train", cmd_train, "train the segmentation and box networks"))
    sp.add_argument("--samples", help="FSAM directory (default: generate synthetic data)")
    sp.add_argument("--val", help="FSAM directory for held-out metrics")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)

    sp = with_config(cmd("detect", cmd_detect, "run a checkpoint on a KITTI-layout dataset"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--proposals", help="directory of 2D proposals (KITTI label format); default label_2/")
    sp.add_argument("--out", required=True)

    sp = cmd("bv-raster", cmd_bv_raster, "rasterise a velodyne scan to a BV grid")
    sp.add_argument("--in", "--velodyne", dest="velodyne", required=True, help="velodyne .bin scan")
    sp.add_argument("--resolution", type=float, default=0.1)
    sp.add_argument("--out", required=True)

    sp = cmd("fuse", cmd_fuse, "fuse frustum and BV detections with weighted 3D NMS")
    sp.add_argument("--frustum", required=True, help="detections directory")
    sp.add_argument("--bv", required=True, help="detections directory")
    sp.add_argument("--bv-weight", type=float, default=0.5)
    sp.add_argument("--iou-threshold", type=float, default=0.8)
    sp.add_argument("--out", required=True)

    sp = cmd("eval", cmd_eval, "KITTI-style average precision")
    sp.add_argument("--labels", required=True, help="ground-truth label directory")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--category", default="Car")
    sp.add_argument("--iou", type=float, default=0.7)
    sp.add_argument("--metric", choices=("3d", "bev"), default="3d")
    sp.add_argument("--ap-mode", choices=evalkit.AP_MODES, default="11")
    sp.add_argument("--out", help="directory for ap.csv and pr.svg")

    sp = with_config(cmd("ablate", cmd_ablate, "run an ablation table over several seeds"))
    sp.add_argument("--table", choices=("normalisation", "box-param"), default="normalisation")
    sp.add_argument("--rows", help="comma-separated subset of row names")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--out", required=True)

    sp = cmd("gradcheck", cmd_gradcheck, "finite-difference check of every layer and loss term")
    sp.add_argument("--configs", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)

    sp = cmd("inspect", cmd_inspect, "summarise a data, grid, checkpoint or config file")
    sp.add_argument("path")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
