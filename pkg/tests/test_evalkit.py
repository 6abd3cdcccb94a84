import math

import numpy as np
import pytest

from frustumkit.box3d import Box3D, BoxCodecConfig, BoxPrediction, decode_box, encode_box
from frustumkit.config import desk_config
from frustumkit.errors import ConfigError
from frustumkit.evalkit import (
    NORMALISATION_ROWS,
    BOX_PARAM_ROWS,
    AblationResult,
    Detection,
    GroundTruth,
    average_precision,
    box_accuracy,
    difficulty_of,
    kitti_ground_truth,
    match_detections,
    pr_curve,
    pr_curves_svg,
    row_config,
    seg_accuracy,
    strictly_increasing,
)
from frustumkit.frustum_geom import CanonicalizationState
from frustumkit.kitti_io import LabelKitti
from oracles import mc_iou

CAR = (1.5, 1.6, 3.9)


def test_seg_accuracy_examples():
    m = np.array([True, False, True, True])
    assert seg_accuracy(m, m) == 1.0
    assert seg_accuracy(~m, m) == 0.0
    assert seg_accuracy([True, True, False, False], [True, False, True, False]) == 0.5
    with pytest.raises(ValueError):
        seg_accuracy([True], [True, False])


def test_box_accuracy_codec_consistency():
    rng = np.random.default_rng(0)
    codec = BoxCodecConfig()
    gts = [Box3D(tuple(rng.normal(0, 5, 3)), tuple(rng.uniform(0.5, 4, 3)), float(rng.uniform(-3, 3))) for _ in range(50)]
    preds = [decode_box(BoxPrediction.from_target(encode_box(g, codec), g.center, codec), CanonicalizationState(), codec) for g in gts]
    assert box_accuracy(preds, gts) == 1.0
    assert box_accuracy([], gts) == 0.0
    assert box_accuracy([None] * 50, gts) == 0.0


def test_box_accuracy_against_monte_carlo():
    rng = np.random.default_rng(1)
    preds, gts, oracle = [], [], []
    while len(gts) < 10:
        g = Box3D((0.0, 0.0, 20.0), CAR, float(rng.uniform(-3, 3)))
        p = Box3D(tuple(np.add(g.center, rng.normal(0, 0.2, 3))), tuple(np.multiply(CAR, rng.uniform(0.9, 1.1, 3))), g.heading + float(rng.normal(0, 0.1)))
        v = mc_iou(p, g, 200_000, rng)
        if abs(v - 0.7) < 0.03:
            continue  # too close to the threshold for the oracle's noise
        preds.append(p)
        gts.append(g)
        oracle.append(v)
    want = np.mean(np.array(oracle) >= 0.7)
    assert 0.0 < want < 1.0
    assert box_accuracy(preds, gts, 0.7) == want


def _dets_gts():
    g1 = Box3D((0, 1, 10), CAR, 0.0)
    g2 = Box3D((10, 1, 30), CAR, 0.0)
    far = Box3D((-15, 1, 40), CAR, 0.0)
    gts = [GroundTruth(0, g1), GroundTruth(0, g2)]
    return g1, g2, far, gts


def test_ap_perfect_and_empty():
    g1, g2, _, gts = _dets_gts()
    perfect = [Detection(0, g1, 0.9), Detection(0, g2, 0.8)]
    assert average_precision(perfect, gts, 0.7).ap == 1.0
    assert average_precision(perfect, gts, 0.7, mode="40").ap == 1.0
    assert average_precision([], gts, 0.7).ap == 0.0


def test_ap_hand_computed_three_dets_two_gts():
    g1, g2, far, gts = _dets_gts()
    dets = [Detection(0, g1, 0.9), Detection(0, far, 0.8), Detection(0, g2, 0.7)]
    curve = average_precision(dets, gts, 0.7)
    # ranked: TP, FP, TP -> recall 0.5, 0.5, 1.0 and precision 1, 1/2, 2/3
    assert np.allclose(curve.recall, [0.5, 0.5, 1.0])
    assert np.allclose(curve.precision, [1.0, 0.5, 2 / 3])
    # interpolated precision: 1 for r in {0, .1, ..., .5}, 2/3 for r in {.6, ..., 1}
    assert curve.ap == pytest.approx((6 * 1.0 + 5 * (2 / 3)) / 11)
    assert np.all(np.diff(curve.precision_samples) <= 0)
    curve40 = average_precision(dets, gts, 0.7, mode="40")
    assert curve40.ap == pytest.approx((20 * 1.0 + 20 * (2 / 3)) / 40)


def test_ap_duplicate_detection_is_false_positive():
    g1, _, _, gts = _dets_gts()
    order, status = match_detections([Detection(0, g1, 0.9), Detection(0, g1, 0.8)], gts[:1], 0.7)
    assert order.tolist() == [0, 1] and status.tolist() == [1, 0]


def test_ap_invariant_to_monotone_rescaling():
    rng = np.random.default_rng(2)
    gts, dets = [], []
    for f in range(5):
        for k in range(3):
            g = Box3D((k * 8.0, 1.0, 15.0 + f), CAR, 0.0)
            gts.append(GroundTruth(f, g))
            if rng.random() < 0.8:
                dets.append(Detection(f, Box3D(tuple(np.add(g.center, rng.normal(0, 0.3, 3))), CAR, 0.0), float(rng.uniform())))
        dets.append(Detection(f, Box3D((-20.0, 1.0, 20.0), CAR, 0.0), float(rng.uniform())))
    ref = average_precision(dets, gts, 0.5).ap
    for fn in (lambda s: 3 * s + 1, lambda s: s**3, lambda s: math.exp(5 * s)):
        moved = [Detection(d.frame, d.box, fn(d.score)) for d in dets]
        assert average_precision(moved, gts, 0.5).ap == ref
    assert 0.0 < ref < 1.0


def test_ignored_gt_neither_tp_nor_fp():
    g1, g2, _, _ = _dets_gts()
    gts = [GroundTruth(0, g1), GroundTruth(0, g2, ignore=True)]
    curve = average_precision([Detection(0, g1, 0.9), Detection(0, g2, 0.95)], gts, 0.7)
    assert curve.n_gt == 1 and curve.ap == 1.0


def test_pr_curve_mode_validation():
    with pytest.raises(ConfigError):
        pr_curve([0.5], [True], 1, mode="7")


def _label(height, occ, trunc, cat="Car"):
    return LabelKitti(cat, trunc, occ, 0.0, (0.0, 0.0, 10.0, height), 1.5, 1.6, 3.9, (0.0, 1.0, 10.0), 0.0)


def test_difficulty_buckets():
    assert difficulty_of(_label(50, 0, 0.1)) == 0
    assert difficulty_of(_label(30, 0, 0.1)) == 1
    assert difficulty_of(_label(50, 2, 0.1)) == 2
    assert difficulty_of(_label(20, 0, 0.0)) is None
    gts = kitti_ground_truth({0: [_label(50, 0, 0.0), _label(30, 1, 0.2), _label(50, 0, 0.0, "Van")]}, "Car", "easy")
    assert [g.ignore for g in gts] == [False, True]


def test_svg_output():
    g1, g2, far, gts = _dets_gts()
    curve = average_precision([Detection(0, g1, 0.9), Detection(0, far, 0.8)], gts, 0.7)
    svg = pr_curves_svg({"frustum": curve, "empty": average_precision([], gts, 0.7)})
    assert svg.startswith("<svg") and svg.count("<polyline") == 1 and "AP=" in svg


def test_ablation_rows_and_configs():
    assert [r.name for r in NORMALISATION_ROWS] == ["none", "frustum_rot", "mask_centralize", "frustum_rot+mask_centralize", "all"]
    assert [r.loss.get("gamma") for r in BOX_PARAM_ROWS] == [0.0, 0.0, 0.0, None]
    base = desk_config()
    cfg = row_config(base, NORMALISATION_ROWS[0], 2)
    assert not cfg.pipeline.frustum_rot and not cfg.pipeline.t_net and cfg.train.seed == 2
    cfg = row_config(base, BOX_PARAM_ROWS[0], 0)
    assert cfg.loss.residual_mode == "regression_only" and cfg.loss.gamma == 0.0


def test_ablation_result_tables():
    rows = [{"row": n, "seed": s, "box_accuracy": v} for n, s, v in (("a", 0, 0.2), ("a", 1, 0.4), ("b", 0, 0.5))]
    res = AblationResult(rows)
    assert res.means() == {"a": pytest.approx(0.3), "b": 0.5}
    assert "a,2," in res.summary_csv_text()
    assert strictly_increasing([0.1, 0.2, 0.3]) and not strictly_increasing([0.1, 0.1])
