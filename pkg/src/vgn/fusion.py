"""Inference head: reproject GCN features to pixels and fuse with CNN features."""
from __future__ import annotations

import numpy as np

from vgn.backbone import class_balance_weights, weighted_bce
from vgn.numeric import (ParamTensor, as_grid, conv2d_backward, conv2d_forward, relu,
                         relu_backward, sigmoid, sigmoid_backward)

HEAD_LAYERS = 5


def reproject(hidden, graph, h, w):
    """Place row j of ``hidden`` at vertex j's pixel; zeros elsewhere."""
    grid = np.zeros((h, w, hidden.shape[1]))
    if graph.n == 0:
        return grid
    if len({tuple(v) for v in graph.vertices.tolist()}) != graph.n:
        raise ValueError("duplicate vertex coordinates")
    grid[graph.vertices[:, 0], graph.vertices[:, 1]] = hidden
    return grid


def reproject_backward(dgrid, graph):
    if graph.n == 0:
        return np.zeros((0, dgrid.shape[2]))
    return dgrid[graph.vertices[:, 0], graph.vertices[:, 1]].copy()


def head_depths(c_in):
    """Channel depths through the head: halve, hold for three layers, then 1."""
    half = max(c_in // 2, 1)
    return [c_in, half, half, half, half, 1]


def init_head_params(c_in, rng, prefix="head"):
    params = {}
    depths = head_depths(c_in)
    for i in range(HEAD_LAYERS):
        a, b = depths[i], depths[i + 1]
        w = ParamTensor.init_uniform(f"{prefix}.conv{i}.weight", (3, 3, a, b), 9 * a, rng)
        params[w.name] = w
        params[f"{prefix}.conv{i}.bias"] = ParamTensor.zeros(f"{prefix}.conv{i}.bias", (b,))
    return params


def head_forward(fused, params, prefix="head"):
    """Four ReLU 3x3 convolutions and a final 3x3 convolution + sigmoid.

    Returns ``(prob, cache)``; prob is (H, W, 1).
    """
    acts = [fused]
    x = fused
    for i in range(HEAD_LAYERS):
        z = conv2d_forward(x, params[f"{prefix}.conv{i}.weight"].value,
                           params[f"{prefix}.conv{i}.bias"].value)
        x = relu(z) if i < HEAD_LAYERS - 1 else sigmoid(z)
        acts.append(x)
    return x, acts


def head_backward(acts, dprob, params, prefix="head"):
    """Accumulate head gradients; returns the gradient on the fused grid."""
    d = sigmoid_backward(dprob, acts[-1])
    for i in reversed(range(HEAD_LAYERS)):
        if i < HEAD_LAYERS - 1:
            d = relu_backward(d, acts[i + 1])
        w = params[f"{prefix}.conv{i}.weight"]
        d, dw, db = conv2d_backward(d, acts[i], w.value)
        w.grad += dw
        params[f"{prefix}.conv{i}.bias"].grad += db
    return d


def alpha_map(graph, shape, delta):
    """Loss weight per pixel: ``delta**2`` on vertex pixels, 1 elsewhere."""
    alpha = np.ones(shape[:2])
    if graph.n:
        alpha[graph.vertices[:, 0], graph.vertices[:, 1]] = float(delta) ** 2
    return alpha


def infer_loss(pred, gt, graph, delta, mask=None, balance=True):
    """Alpha-weighted (and class-balanced) mean cross entropy of the fused map.

    The two weights multiply; the mean divides by the in-mask pixel count.
    """
    gt = as_grid(gt)
    weights = alpha_map(graph, gt.shape, delta)
    if balance:
        weights = weights * class_balance_weights(gt, mask)
    return weighted_bce(pred, gt, weights, mask)
