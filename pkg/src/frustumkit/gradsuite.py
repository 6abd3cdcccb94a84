"""Finite-difference gradient suite over every layer and loss term.

Each case draws a random configuration (shapes and values) from its own
sub-stream and compares backward() with central differences under the
tolerance ``|a - n| <= max(1e-4 * max(|a|, |n|), 1e-6)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .box3d import Box3D, BoxCodecConfig
from .fpnet_models import BoxNetV1, NetConfig, SegNetV1, TNet, split_box_output
from .losses import CORNER_ANCHORS, BoxTargets, LossWeights, corner_loss, loss_terms, multi_task_loss, seg_loss
from .rng import substream
from .tensor_nn import MLP, BatchNorm, Tensor, check
from .tensor_nn import ops as T

RTOL = 1e-4
ATOL = 1e-6
EPS = 1e-6


@dataclass
class CaseResult:
    case: str
    config: int
    passed: bool
    max_abs_err: float
    worst: str


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _away_from(rng, shape, kinks, gap=1e-3, scale=1.0):
    """Normal draws kept ``gap`` away from the given kink locations."""
    x = rng.normal(0.0, scale, size=shape)
    for k in kinks:
        close = np.abs(x - k) < gap
        x[close] = k + np.where(x[close] >= k, gap, -gap) * 2
    return x


# --- layer cases: each returns (loss_fn, tensors) ----------------------------------------------


def _weights(rng, shape_out):
    return rng.normal(size=shape_out)


def _jitter_biases(module, rng):
    # zero-initialised biases / BN shifts put units exactly on the ReLU kink
    for name, p in module.named_parameters():
        if name.endswith(("bias", "beta")):
            p.data[:] = rng.normal(0.0, 0.3, p.shape)
    return module


def case_linear(rng):
    b, n, i, o = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 6)
    x, w, bias = _param(rng, b, n, i), _param(rng, i, o), _param(rng, o)
    r = _weights(rng, (b, n, o))
    return (lambda: T.tsum(T.mul(T.linear(x, w, bias), r))), [x, w, bias]


def case_relu(rng):
    x = Tensor(_away_from(rng, (rng.integers(1, 5), rng.integers(1, 7)), [0.0]), requires_grad=True)
    r = _weights(rng, x.shape)
    return (lambda: T.tsum(T.mul(T.relu(x), r))), [x]


def case_shared_mlp(rng):
    widths = [int(v) for v in rng.integers(1, 6, size=rng.integers(2, 4))]
    mlp = _jitter_biases(MLP(widths, rng, final_activation=bool(rng.integers(0, 2))), rng)
    x = _param(rng, rng.integers(1, 3), rng.integers(1, 6), widths[0])
    r = _weights(rng, x.shape[:-1] + (widths[-1],))
    params = [x] + mlp.parameters()
    return (lambda: T.tsum(T.mul(mlp(x), r))), params


def case_max_pool(rng):
    b, n, c = rng.integers(1, 3), rng.integers(1, 7), rng.integers(1, 5)
    # distinct values with clear gaps so the argmax is stable under +-eps
    vals = rng.permutation(b * n * c).reshape(b, n, c) * 0.1 + rng.uniform(0, 0.01, (b, n, c))
    x = Tensor(vals, requires_grad=True)
    r = _weights(rng, (b, c))
    return (lambda: T.tsum(T.mul(T.max_pool_points(x)[0], r))), [x]


def case_concat(rng):
    b = rng.integers(1, 4)
    a, c = _param(rng, b, rng.integers(1, 4)), _param(rng, b, rng.integers(1, 4))
    r = _weights(rng, (b, a.shape[1] + c.shape[1]))
    return (lambda: T.tsum(T.mul(T.concat([a, c], axis=-1), r))), [a, c]


def case_batch_norm(rng):
    n, c = rng.integers(3, 8), rng.integers(1, 5)
    bn = BatchNorm(c)
    x = _param(rng, n, c)
    bn.gamma.data[:] = rng.normal(1.0, 0.3, c)
    bn.beta.data[:] = rng.normal(0.0, 0.3, c)
    r = _weights(rng, (n, c))
    return (lambda: T.tsum(T.mul(T.batch_norm(x, bn.gamma, bn.beta)[0], r))), [x, bn.gamma, bn.beta]


def case_softmax_ce(rng):
    n, k = rng.integers(1, 6), rng.integers(2, 6)
    x = _param(rng, n, k, scale=2.0)
    labels = rng.integers(0, k, n)
    w = _weights(rng, (n,))
    return (lambda: T.tsum(T.mul(T.softmax_cross_entropy(x, labels), w))), [x]


def case_log_softmax(rng):
    x = _param(rng, rng.integers(1, 4), rng.integers(2, 6))
    r = _weights(rng, x.shape)
    return (lambda: T.tsum(T.mul(T.log_softmax(x), r))), [x]


def case_huber(rng):
    delta = float(rng.uniform(0.5, 2.0))
    x = Tensor(_away_from(rng, (rng.integers(1, 9),), [delta, -delta], scale=2.0), requires_grad=True)
    return (lambda: T.tsum(T.huber(x, delta))), [x]


def case_norm(rng):
    x = _param(rng, rng.integers(1, 4), rng.integers(1, 5), 3)
    r = _weights(rng, x.shape[:-1])
    return (lambda: T.tsum(T.mul(T.norm(x, axis=-1), r))), [x]


def case_trig(rng):
    x = _param(rng, rng.integers(1, 7), scale=3.0)
    return (lambda: T.tsum(T.add(T.cos(x), T.mul(T.sin(x), 2.0)))), [x]


def case_wrap_half_turn(rng):
    half = np.pi / 2
    kinks = [k * half for k in range(-9, 10, 2)]
    x = Tensor(_away_from(rng, (rng.integers(1, 7),), kinks, scale=4.0), requires_grad=True)
    return (lambda: T.tsum(T.cos(T.wrap_half_turn(x)))), [x]


def case_minimum(rng):
    n = rng.integers(1, 7)
    a = _param(rng, n)
    b = Tensor(a.data + np.where(rng.random(n) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, n), requires_grad=True)
    r = _weights(rng, (n,))
    return (lambda: T.tsum(T.mul(T.minimum(a, b), r))), [a, b]


def case_indexing(rng):
    b, k = rng.integers(1, 5), rng.integers(2, 6)
    x = _param(rng, b, k)
    idx = rng.integers(0, k, b)
    r = _weights(rng, (b,))
    rows = np.arange(b)
    return (lambda: T.tsum(T.mul(T.getitem(x, (rows, idx)), r))), [x]


def case_shape_ops(rng):
    b, c = rng.integers(1, 4), rng.integers(1, 4)
    x = _param(rng, b, c)
    y = _param(rng, b, c)
    n = int(rng.integers(1, 4))
    r = _weights(rng, (b, n, c, 2))

    def f():
        xb = T.broadcast_to(T.reshape(x, (b, 1, c)), (b, n, c))
        yb = T.broadcast_to(T.reshape(y, (b, 1, c)), (b, n, c))
        s = T.stack([xb, yb], axis=-1)
        return T.add(T.tsum(T.mul(s, r)), T.mean(T.mul(x, y)))

    return f, [x, y]


def _tiny_net_cfg(rng):
    def widths(k):
        return tuple(int(v) for v in rng.integers(2, 6, size=k))

    return NetConfig(
        n_classes=3,
        seg_embed=widths(3),
        global_width=int(rng.integers(2, 6)),
        seg_point_layer=int(rng.integers(0, 3)),
        seg_head=widths(2),
        tnet_embed=widths(2),
        tnet_head=widths(1),
        box_embed=widths(2),
        box_head=widths(1),
        batch_norm=bool(rng.integers(0, 2)),
    )


def _onehot(rng, b):
    oh = np.zeros((b, 3))
    oh[np.arange(b), rng.integers(0, 3, b)] = 1.0
    return oh


def case_seg_net(rng):
    cfg = _tiny_net_cfg(rng)
    net = _jitter_biases(SegNetV1(cfg, rng), rng)
    b, n = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    x = _param(rng, b, n, 4)
    oh = _onehot(rng, b)
    r = _weights(rng, (b, n, 2))
    return (lambda: T.tsum(T.mul(net(x, oh), r))), [x] + net.parameters()


def case_tnet(rng):
    cfg = _tiny_net_cfg(rng)
    net = _jitter_biases(TNet(cfg, rng), rng)
    b, n = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    x = _param(rng, b, n, 3)
    oh = _onehot(rng, b)
    r = _weights(rng, (b, 3))
    return (lambda: T.tsum(T.mul(net(x, oh), r))), [x] + net.parameters()


def case_box_net(rng):
    cfg = _tiny_net_cfg(rng)
    codec = BoxCodecConfig(((1.5, 1.6, 3.9), (1.7, 0.6, 0.8)), ("Car", "Pedestrian"), nh=int(rng.integers(1, 5)))
    net = _jitter_biases(BoxNetV1(cfg, codec, rng), rng)
    b, n = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    x = _param(rng, b, n, 3)
    oh = _onehot(rng, b)
    r = _weights(rng, (b, codec.output_size))
    return (lambda: T.tsum(T.mul(net(x, oh), r))), [x] + net.parameters()


LAYER_CASES = {
    "linear": case_linear,
    "relu": case_relu,
    "shared_mlp": case_shared_mlp,
    "max_pool_points": case_max_pool,
    "concat": case_concat,
    "batch_norm": case_batch_norm,
    "softmax_cross_entropy": case_softmax_ce,
    "log_softmax": case_log_softmax,
    "huber": case_huber,
    "norm": case_norm,
    "cos_sin": case_trig,
    "wrap_half_turn": case_wrap_half_turn,
    "minimum": case_minimum,
    "getitem": case_indexing,
    "shape_ops": case_shape_ops,
    "seg_net": case_seg_net,
    "tnet": case_tnet,
    "box_net": case_box_net,
}


# --- loss-term cases ------------------------------------------------------------------------------


def _loss_setup(rng, mode):
    codec = BoxCodecConfig(nh=int(rng.integers(2, 9)))
    b = int(rng.integers(1, 4))
    boxes = []
    for _ in range(b):
        t = np.array(codec.templates[rng.integers(codec.ns)])
        boxes.append(Box3D(rng.normal(0, 3, 3), tuple(t * rng.uniform(0.8, 1.2, 3)), rng.uniform(-np.pi, np.pi)))
    targets = BoxTargets.from_boxes(boxes, codec)
    vec = _param(rng, b, codec.output_size, scale=0.5)
    base = Tensor(targets.center + rng.normal(0, 0.5, (b, 3)), requires_grad=True)
    if mode == "regression_only":
        # raw heading / size regression: start from the right magnitude
        vec.data[:, 3 + codec.nh] = targets.heading + rng.normal(0, 0.3, b)
        o = 3 + 2 * codec.nh + codec.ns
        vec.data[:, o : o + 3] = targets.size + rng.normal(0, 0.2, (b, 3))
    n = int(rng.integers(2, 7))
    logits = _param(rng, b, n, 2)
    mask = rng.random((b, n)) < 0.5
    return codec, targets, vec, base, logits, mask


def _term(name, mode, anchors="with_residuals"):
    index = {"seg": 0, "c1_reg": 1, "c2_reg": 2, "h_cls": 3, "h_reg": 4, "s_cls": 5, "s_reg": 6}

    def build(rng):
        codec, targets, vec, base, logits, mask = _loss_setup(rng, mode)

        if name == "corner":
            def f():
                heads = split_box_output(vec, codec, base)
                return corner_loss(heads, targets, codec, mode, anchors)

            return f, [vec, base]

        if name == "total":
            w = LossWeights(lam=float(rng.uniform(0.5, 2)), gamma=float(rng.uniform(0, 10)), residual_mode=mode, corner_anchors=anchors)

            def f():
                heads = split_box_output(vec, codec, base)
                return multi_task_loss(logits, mask, heads, targets, codec, w)[0]

            return f, [vec, base, logits]

        if name == "seg":
            return (lambda: seg_loss(logits, mask)), [logits]

        k = index[name]

        def f():
            heads = split_box_output(vec, codec, base)
            return loss_terms(logits, mask, heads, targets, codec, LossWeights(gamma=0.0, residual_mode=mode))[k]

        return f, [vec, base]

    return build


LOSS_CASES = {"seg": _term("seg", "cls_reg_normalized")}
for _mode in ("cls_reg_normalized", "cls_reg", "regression_only"):
    for _name in ("c1_reg", "c2_reg", "h_cls", "h_reg", "s_cls", "s_reg"):
        if _mode == "regression_only" and _name in ("h_cls", "s_cls"):
            continue
        LOSS_CASES[f"{_name}[{_mode}]"] = _term(_name, _mode)
    for _anchors in CORNER_ANCHORS:
        LOSS_CASES[f"corner[{_mode},{_anchors}]"] = _term("corner", _mode, _anchors)
        LOSS_CASES[f"total[{_mode},{_anchors}]"] = _term("total", _mode, _anchors)

ALL_CASES = {**LAYER_CASES, **LOSS_CASES}


def run_suite(n_configs=20, seed=0, cases=None, rtol=RTOL, atol=ATOL, eps=EPS):
    """List of :class:`CaseResult`, one per (case, configuration)."""
    names = list(cases) if cases else list(ALL_CASES)
    out = []
    for name in names:
        build = ALL_CASES[name]
        for k in range(n_configs):
            rng = substream(seed, f"gradcheck/{name}", k)
            fn, tensors = build(rng)
            res = check(fn, tensors, eps=eps, rtol=rtol, atol=atol)
            bad = [r for r in res if not r.passed]
            worst = max(res, key=lambda r: r.max_abs_err)
            out.append(CaseResult(name, k, not bad, worst.max_abs_err, (bad[0] if bad else worst).name))
    return out
