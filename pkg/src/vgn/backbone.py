"""Small multi-scale CNN producing pixel features and vessel probabilities.

Each stage is ``conv3x3 -> relu -> conv3x3 -> relu``; stages after the first
start with 2x2 max pooling. A 1x1 convolution taps ``tap_channels`` features
from every stage, the taps are resized to the input size and concatenated,
and a 1x1 convolution plus sigmoid gives the probability map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vgn.numeric import (DimensionError, ParamTensor, as_grid, conv2d_backward,
                         conv2d_forward, maxpool2x2, maxpool2x2_backward, relu,
                         relu_backward, resize_bilinear, resize_bilinear_backward,
                         sigmoid, sigmoid_backward)

LOG_FLOOR = 1e-12


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stages: int = 2
    base_width: int = 8
    tap_channels: int = 16

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")

    @property
    def feature_depth(self):
        return self.tap_channels * self.stages

    @property
    def widths(self):
        return [self.base_width * 2 ** s for s in range(self.stages)]

    @property
    def min_size(self):
        return 2 ** (self.stages - 1)


def init_backbone_params(config, rng, prefix="cnn"):
    params = {}

    def add(p):
        params[p.name] = p

    cin = config.in_channels
    for s, width in enumerate(config.widths):
        for j, (a, b) in enumerate(((cin, width), (width, width)), start=1):
            add(ParamTensor.init_uniform(f"{prefix}.stage{s}.conv{j}.weight",
                                         (3, 3, a, b), 9 * a, rng))
            add(ParamTensor.zeros(f"{prefix}.stage{s}.conv{j}.bias", (b,)))
        add(ParamTensor.init_uniform(f"{prefix}.stage{s}.tap.weight",
                                     (1, 1, width, config.tap_channels), width, rng))
        add(ParamTensor.zeros(f"{prefix}.stage{s}.tap.bias", (config.tap_channels,)))
        cin = width
    c = config.feature_depth
    add(ParamTensor.init_uniform(f"{prefix}.prob.weight", (1, 1, c, 1), c, rng))
    add(ParamTensor.zeros(f"{prefix}.prob.bias", (1,)))
    return params


@dataclass
class SegOutput:
    features: np.ndarray          # (H, W, C_cnn)
    prob: np.ndarray              # (H, W, 1)
    cache: dict = field(default_factory=dict, repr=False)


def backbone_forward(image, params, config, prefix="cnn"):
    image = as_grid(image)
    h, w, c = image.shape
    if c != config.in_channels:
        raise DimensionError(f"image has {c} channels, backbone expects {config.in_channels}")
    if min(h, w) < config.min_size:
        raise DimensionError(
            f"image {h}x{w} smaller than the total downsampling factor {config.min_size}")

    def P(name):
        return params[f"{prefix}.{name}"].value

    stages = []
    taps = []
    x = image
    for s in range(config.stages):
        st = {}
        if s > 0:
            st["pool_in_shape"] = x.shape
            x, st["pool_arg"] = maxpool2x2(x)
        st["in"] = x
        st["r1"] = relu(conv2d_forward(x, P(f"stage{s}.conv1.weight"), P(f"stage{s}.conv1.bias")))
        st["r2"] = relu(conv2d_forward(st["r1"], P(f"stage{s}.conv2.weight"),
                                       P(f"stage{s}.conv2.bias")))
        tap = conv2d_forward(st["r2"], P(f"stage{s}.tap.weight"), P(f"stage{s}.tap.bias"))
        taps.append(resize_bilinear(tap, h, w))
        stages.append(st)
        x = st["r2"]
    features = np.concatenate(taps, axis=2)
    prob = sigmoid(conv2d_forward(features, P("prob.weight"), P("prob.bias")))
    return SegOutput(features, prob, {"stages": stages, "image_shape": image.shape})


def backbone_backward(out, dprob, dfeatures, params, config, prefix="cnn"):
    """Accumulate parameter gradients given upstream grads on prob and features.

    Either upstream may be ``None``.
    """
    h, w, _ = out.cache["image_shape"]

    def P(name):
        return params[f"{prefix}.{name}"]

    dfeat = np.zeros_like(out.features) if dfeatures is None else np.array(dfeatures)
    if dprob is not None:
        dlogit = sigmoid_backward(as_grid(dprob), out.prob)
        pw = P("prob.weight")
        dx, dw, db = conv2d_backward(dlogit, out.features, pw.value)
        pw.grad += dw
        P("prob.bias").grad += db
        dfeat += dx

    tc = config.tap_channels
    dnext = None
    for s in reversed(range(config.stages)):
        st = out.cache["stages"][s]
        r2 = st["r2"]
        dtap = resize_bilinear_backward(dfeat[:, :, s * tc:(s + 1) * tc], r2.shape[0], r2.shape[1])
        tw = P(f"stage{s}.tap.weight")
        dr2, dw, db = conv2d_backward(dtap, r2, tw.value)
        tw.grad += dw
        P(f"stage{s}.tap.bias").grad += db
        if dnext is not None:
            dr2 += dnext
        w2 = P(f"stage{s}.conv2.weight")
        dr1, dw, db = conv2d_backward(relu_backward(dr2, r2), st["r1"], w2.value)
        w2.grad += dw
        P(f"stage{s}.conv2.bias").grad += db
        w1 = P(f"stage{s}.conv1.weight")
        dx, dw, db = conv2d_backward(relu_backward(dr1, st["r1"]), st["in"], w1.value)
        w1.grad += dw
        P(f"stage{s}.conv1.bias").grad += db
        if s > 0:
            dnext = maxpool2x2_backward(dx, st["pool_arg"], st["pool_in_shape"])


def class_balance_weights(gt, mask=None):
    """Per-pixel weights: beta = |BG|/|X| on vessel pixels, 1 - beta elsewhere.

    Counts run over the in-mask pixels only.
    """
    gt = as_grid(gt)[:, :, 0] > 0.5
    inside = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = inside.sum()
    if n == 0:
        raise ValueError("empty mask: loss mean undefined")
    beta = np.count_nonzero(~gt & inside) / n
    return np.where(gt, beta, 1.0 - beta)


def weighted_bce(prob, gt, weights, mask=None):
    """Mean weighted binary cross entropy over in-mask pixels.

    Returns ``(loss, dloss/dprob)``; logs are floored at ``LOG_FLOOR`` and the
    gradient is zero where the floor is active.
    """
    p = as_grid(prob)[:, :, 0]
    y = as_grid(gt)[:, :, 0] > 0.5
    inside = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = inside.sum()
    if n == 0:
        raise ValueError("empty mask: loss mean undefined")
    wt = np.where(inside, weights, 0.0)
    q = np.where(y, p, 1.0 - p)              # probability of the true class
    live = q >= LOG_FLOOR
    loss = -np.sum(wt * np.log(np.maximum(q, LOG_FLOOR))) / n
    dq = np.where(live, -wt / np.where(live, q, 1.0), 0.0) / n
    dp = np.where(y, dq, -dq)
    return float(loss), dp[:, :, None]


def cnn_loss(out, gt, mask=None, balance=True):
    """Class-balanced mean pixelwise cross entropy of the CNN map."""
    gt = as_grid(gt)
    weights = class_balance_weights(gt, mask) if balance else np.ones(gt.shape[:2])
    return weighted_bce(out.prob, gt, weights, mask)
