"""The three point networks: instance segmentation net, T-Net and amodal box net.

All networks run batched on ``[B, N, C]`` tensors.  The class one-hot vector
enters twice: next to the global feature in the segmentation head, and after
the max-pool in the T-Net and box net.

The segmentation head's first layer acts on ``concat(point_feature,
global_feature, onehot)``; it is evaluated as ``point @ W_p + (global, onehot)
@ W_g`` which is the same affine map without materialising the broadcast
concatenation.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass

import numpy as np

from .box3d import BoxPrediction, decode_box
from .errors import ConfigError
from .frustum_geom import CanonicalizationState
from .tensor_nn import MLP, Linear, Module, Tensor
from .tensor_nn import ops as T


@dataclass(frozen=True)
class NetConfig:
    """Layer widths.  Embedding stacks exclude the input width."""

    n_classes: int = 3
    seg_embed: tuple = (64, 64, 64, 128)
    global_width: int = 256
    seg_point_layer: int = 1  # index into seg_embed of the per-point feature
    seg_head: tuple = (256, 128)
    tnet_embed: tuple = (128, 128, 256)
    tnet_head: tuple = (256, 128)
    box_embed: tuple = (128, 128, 256, 512)
    box_head: tuple = (512, 256)
    batch_norm: bool = False
    seg_channels: int = 4  # xyz + intensity
    box_channels: int = 3  # xyz

    def __post_init__(self):
        for name in ("seg_embed", "seg_head", "tnet_embed", "tnet_head", "box_embed", "box_head"):
            v = tuple(int(x) for x in getattr(self, name))
            if not v or any(x < 1 for x in v):
                raise ConfigError(f"{name} needs positive widths")
            object.__setattr__(self, name, v)
        if not (0 <= self.seg_point_layer < len(self.seg_embed)):
            raise ConfigError("seg_point_layer out of range")
        if self.global_width < 1 or self.n_classes < 1:
            raise ConfigError("global_width and n_classes must be >= 1")


def load_net_config(text):
    """``key = w1 w2 ...`` lines, optionally under a ``[net]`` section."""
    cp = configparser.ConfigParser()
    body = text if text.lstrip().startswith("[") else "[net]\n" + text
    try:
        cp.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(f"net config: {exc}") from None
    sec = cp["net"] if cp.has_section("net") else {}
    return net_config_from_mapping(sec)


def net_config_from_mapping(sec):
    kw = {}
    try:
        for name, default in asdict(NetConfig()).items():
            if name not in sec:
                continue
            raw = sec[name]
            if isinstance(default, tuple):
                kw[name] = tuple(int(x) for x in raw.split())
            elif isinstance(default, bool):
                kw[name] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                kw[name] = int(raw)
    except ValueError as exc:
        raise ConfigError(f"net config: {exc}") from None
    return NetConfig(**kw)


def dump_net_config(cfg):
    lines = ["[net]"]
    for name, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = " ".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def _shrink_output(mlp, scale=0.01):
    # inputs are in meters (tens of them), so He-scaled outputs start far too large
    mlp.layers[-1].weight.data *= scale


class SegNetV1(Module):
    """Per-point object/background logits for a frustum cloud."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        widths = (cfg.seg_channels,) + cfg.seg_embed + (cfg.global_width,)
        self.embed = MLP(widths, rng, batch_norm=cfg.batch_norm, name="seg.embed")
        h0 = cfg.seg_head[0]
        self.head_point = Linear(cfg.seg_embed[cfg.seg_point_layer], h0, rng, name="seg.head_point")
        self.head_global = Linear(cfg.global_width + cfg.n_classes, h0, rng, name="seg.head_global")
        # bias lives in head_point; the global half is a pure linear map
        self.head_global.bias.requires_grad = False
        self.head = MLP(cfg.seg_head + (2,), rng, batch_norm=cfg.batch_norm, final_activation=False, name="seg.head")
        _shrink_output(self.head)

    def forward(self, points, onehot):
        x = T.as_tensor(points)
        feat, outs = self.embed(x, collect=True)
        point_feat = outs[self.cfg.seg_point_layer]
        glob, _ = T.max_pool_points(feat)
        gcat = T.concat([glob, T.as_tensor(onehot)], axis=-1)
        h = T.add(self.head_point(point_feat), T.reshape(T.linear(gcat, self.head_global.weight), (x.shape[0], 1, -1)))
        h = T.relu(h)
        return self.head(h)

    def global_feature(self, points):
        feat = self.embed(T.as_tensor(points))
        return T.max_pool_points(feat)[0]


class _PooledRegressor(Module):
    def __init__(self, in_ch, embed, head, out, n_classes, rng, batch_norm, name):
        self.embed = MLP((in_ch,) + embed, rng, batch_norm=batch_norm, name=f"{name}.embed")
        self.head = MLP((embed[-1] + n_classes,) + head + (out,), rng, batch_norm=batch_norm, final_activation=False, name=f"{name}.head")
        _shrink_output(self.head)

    def forward(self, points, onehot):
        feat = self.embed(T.as_tensor(points))
        glob, _ = T.max_pool_points(feat)
        return self.head(T.concat([glob, T.as_tensor(onehot)], axis=-1))


class TNet(_PooledRegressor):
    """Residual from the mask-frame origin to the object centre (3 outputs)."""

    def __init__(self, cfg, rng):
        super().__init__(cfg.box_channels, cfg.tnet_embed, cfg.tnet_head, 3, cfg.n_classes, rng, cfg.batch_norm, "tnet")


class BoxNetV1(_PooledRegressor):
    """Amodal box parameters: ``3 + 4*NS + 2*NH`` numbers."""

    def __init__(self, cfg, codec, rng):
        self.n_out = 3 + 4 * codec.ns + 2 * codec.nh
        if self.n_out != codec.output_size:
            raise ConfigError("box head width disagrees with the codec")
        super().__init__(cfg.box_channels, cfg.box_embed, cfg.box_head, self.n_out, cfg.n_classes, rng, cfg.batch_norm, "box")


@dataclass(frozen=True)
class PipelineConfig:
    frustum_rot: bool = True  # applied when frusta are built; recorded here for bookkeeping
    mask_centralize: bool = True
    t_net: bool = True
    n_mask_points: int = 512


class FrustumPointNet(Module):
    """Segmentation net, T-Net and box net sharing one parameter tree."""

    def __init__(self, net_cfg, codec, rng, pipeline=None):
        self.net_cfg = net_cfg
        self.codec = codec
        self.pipeline = pipeline or PipelineConfig()
        self.seg = SegNetV1(net_cfg, rng)
        self.tnet = TNet(net_cfg, rng)
        self.box = BoxNetV1(net_cfg, codec, rng)

    def named_parameters(self, prefix=""):
        yield from self.seg.named_parameters(prefix + "seg.")
        if self.pipeline.t_net:
            yield from self.tnet.named_parameters(prefix + "tnet.")
        yield from self.box.named_parameters(prefix + "box.")


@dataclass
class BoxHeads:
    """Box-stage outputs for a batch, all in the (rotated) frustum frame."""

    center_t: Tensor  # [B, 3]  C_mask + dC_tnet
    center: Tensor  # [B, 3]  C_mask + dC_tnet + dC_box
    heading_scores: Tensor  # [B, NH]
    heading_residuals: Tensor  # [B, NH]
    size_scores: Tensor  # [B, NS]
    size_residuals: Tensor  # [B, NS, 3]


def split_box_output(vec, codec, base_center):
    """Cut a ``[B, 3+4NS+2NH]`` box-net output into :class:`BoxHeads`."""
    nh, ns = codec.nh, codec.ns
    b = vec.shape[0]
    o = 3
    hs = T.getitem(vec, (slice(None), slice(o, o + nh)))
    o += nh
    hr = T.getitem(vec, (slice(None), slice(o, o + nh)))
    o += nh
    ss = T.getitem(vec, (slice(None), slice(o, o + ns)))
    o += ns
    sr = T.reshape(T.getitem(vec, (slice(None), slice(o, o + 3 * ns))), (b, ns, 3))
    delta = T.getitem(vec, (slice(None), slice(0, 3)))
    return BoxHeads(base_center, T.add(base_center, delta), hs, hr, ss, sr)


@dataclass
class MaskSelection:
    points: np.ndarray  # [B, M, C] sampled (and possibly centred) mask points
    centroid: np.ndarray  # [B, 3]
    fallback: np.ndarray  # [B] bool: no point predicted as object
    indices: np.ndarray  # [B, M] indices into the frustum points


def mask_and_sample(mask, points, m, rng, centralize=True):
    """Sample exactly ``m`` masked points per frustum.

    ``mask`` is ``[B, N]`` booleans (or ``[N]``), ``points`` ``[B, N, C]``.
    Sampling is without replacement when at least ``m`` points are selected,
    with replacement otherwise.  A frustum with an empty mask falls back to all
    of its points and is flagged.  With ``centralize`` the centroid of the
    selected points (before sampling) is subtracted from xyz.
    """
    mask = np.asarray(mask, dtype=bool)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        mask, pts = mask[None], pts[None]
    b, n, c = pts.shape
    out = np.empty((b, m, c))
    cents = np.zeros((b, 3))
    flags = np.zeros(b, dtype=bool)
    idx_all = np.empty((b, m), dtype=np.int64)
    for i in range(b):
        sel = np.flatnonzero(mask[i])
        if sel.size == 0:
            flags[i] = True
            sel = np.arange(n)
        pick = sel[rng.choice(sel.size, m, replace=sel.size < m)]
        idx_all[i] = pick
        chosen = pts[i, pick].copy()
        if centralize:
            cents[i] = pts[i, sel, :3].mean(axis=0)
            chosen[:, :3] -= cents[i]
        out[i] = chosen
    res = MaskSelection(out, cents, flags, idx_all)
    if single:
        res = MaskSelection(out[0], cents[0], flags[0], idx_all[0])
    return res


@dataclass
class ForwardResult:
    seg_logits: Tensor | None
    heads: BoxHeads
    box_vector: Tensor
    tnet_delta: np.ndarray
    selection: MaskSelection


def box_stage(model, selection, onehot):
    """T-Net (optional) and box net on already selected mask points."""
    pipe = model.pipeline
    cfg = model.net_cfg
    pts = selection.points[..., : cfg.box_channels]
    x = Tensor(pts)
    base = Tensor(selection.centroid)
    b = pts.shape[0]
    if pipe.t_net:
        delta = model.tnet(x, onehot)
        base = T.add(base, delta)
        x = T.sub(x, T.reshape(delta, (b, 1, 3)))
        tnet_delta = delta.data.copy()
    else:
        tnet_delta = np.zeros((b, 3))
    vec = model.box(x, onehot)
    return split_box_output(vec, model.codec, base), vec, tnet_delta


def full_forward(model, points, onehot, rng, mask=None, m=None, run_seg=True):
    """Segmentation -> mask sampling -> T-Net -> box net for a batch.

    ``mask`` overrides the predicted mask (oracle masks for box-stage
    training).  ``run_seg=False`` skips the segmentation net entirely, which
    requires an explicit ``mask``.
    """
    m = m or model.pipeline.n_mask_points
    seg_logits = model.seg(points, onehot) if run_seg else None
    if mask is None:
        if seg_logits is None:
            raise ValueError("need a mask when the segmentation net is skipped")
        mask = seg_logits.data[..., 1] > seg_logits.data[..., 0]
    selection = mask_and_sample(mask, points, m, rng, centralize=model.pipeline.mask_centralize)
    heads, vec, tnet_delta = box_stage(model, selection, onehot)
    return ForwardResult(seg_logits, heads, vec, tnet_delta, selection)


def object_probability(seg_logits):
    z = seg_logits - seg_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p[..., 1] / p.sum(axis=-1)


def decode_batch(result, frustum_angles, codec, mode="cls_reg_normalized"):
    """Camera-frame boxes and scores for each frustum in a :class:`ForwardResult`.

    The score is the mean object probability over the points the mask kept
    (a flat 0.05 when the mask fell back to every point).
    """
    vec = result.box_vector.data
    sel = result.selection
    boxes, scores = [], []
    prob = object_probability(result.seg_logits.data) if result.seg_logits is not None else None
    for i in range(vec.shape[0]):
        pred = BoxPrediction.from_vector(vec[i], codec)
        state = CanonicalizationState(frustum_angles[i], tuple(sel.centroid[i]), tuple(result.tnet_delta[i]))
        boxes.append(decode_box(pred, state, codec, mode))
        if prob is None:
            scores.append(1.0)
        elif sel.fallback[i]:
            scores.append(0.05)
        else:
            p = prob[i]
            fg = p > 0.5
            # no confident foreground: the best point's probability, below 0.5
            scores.append(float(p[fg].mean()) if fg.any() else float(p.max()))
    return boxes, scores


def frustum_boxes(result, codec, mode="cls_reg_normalized"):
    """Boxes in the frustum frame (no un-rotation), for box-accuracy against frustum gt."""
    return decode_batch(result, np.zeros(result.box_vector.shape[0]), codec, mode)[0]


__all__ = [
    "BoxHeads",
    "BoxNetV1",
    "ForwardResult",
    "FrustumPointNet",
    "MaskSelection",
    "NetConfig",
    "PipelineConfig",
    "SegNetV1",
    "TNet",
    "box_stage",
    "decode_batch",
    "dump_net_config",
    "frustum_boxes",
    "full_forward",
    "load_net_config",
    "mask_and_sample",
    "net_config_from_mapping",
    "object_probability",
    "split_box_output",
]
