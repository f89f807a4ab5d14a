"""Two-layer graph convolution over the vessel graph.

``prob = sigmoid(A_hat @ relu(A_hat @ F @ W0) @ W1)`` with ``A_hat`` the
normalised adjacency and ``F`` the CNN features sampled at the vertices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vgn.backbone import LOG_FLOOR
from vgn.numeric import DimensionError, ParamTensor, relu, sigmoid


def init_gcn_params(c_in, c_hidden, rng, prefix="gcn"):
    return {
        f"{prefix}.w0": ParamTensor.init_uniform(f"{prefix}.w0", (c_in, c_hidden), c_in, rng),
        f"{prefix}.w1": ParamTensor.init_uniform(f"{prefix}.w1", (c_hidden, 1), c_hidden, rng),
    }


def gather_vertex_features(features, graph):
    """Row j is the feature vector at vertex j's pixel."""
    if graph.n == 0:
        return np.zeros((0, features.shape[2]))
    r, c = graph.vertices[:, 0], graph.vertices[:, 1]
    h, w = features.shape[:2]
    if (r < 0).any() or (r >= h).any() or (c < 0).any() or (c >= w).any():
        raise IndexError("vertex outside the feature grid")
    return features[r, c, :].copy()


def scatter_vertex_grad(dF, graph, shape):
    """Backward of :func:`gather_vertex_features` onto an (H, W, C) grid."""
    out = np.zeros(shape)
    if graph.n:
        np.add.at(out, (graph.vertices[:, 0], graph.vertices[:, 1]), dF)
    return out


@dataclass
class GCNOutput:
    hidden: np.ndarray            # (N, C_gcn), rectified
    prob: np.ndarray              # (N,)
    cache: dict = field(default_factory=dict, repr=False)


def gcn_forward(F, a_hat, w0, w1):
    n = F.shape[0]
    if a_hat.shape != (n, n):
        raise DimensionError(f"A_hat {a_hat.shape} does not match {n} vertices")
    if F.shape[1] != w0.shape[0] or w0.shape[1] != w1.shape[0]:
        raise DimensionError(f"feature/weight mismatch: F {F.shape}, W0 {w0.shape}, W1 {w1.shape}")
    af = a_hat @ F
    hidden = relu(af @ w0)
    ah = a_hat @ hidden
    prob = sigmoid(ah @ w1)[:, 0]
    return GCNOutput(hidden, prob, {"F": F, "a_hat": a_hat, "af": af, "ah": ah})


def gcn_backward(out, dprob, dhidden, w0, w1):
    """Returns ``(dF, dW0, dW1)``; ``dhidden`` may be ``None``."""
    a_hat, af, ah = out.cache["a_hat"], out.cache["af"], out.cache["ah"]
    dz1 = (dprob * out.prob * (1.0 - out.prob))[:, None]
    dw1 = ah.T @ dz1
    dh = a_hat.T @ (dz1 @ w1.T)
    if dhidden is not None:
        dh = dh + dhidden
    dz0 = dh * (out.hidden > 0)
    dw0 = af.T @ dz0
    dF = a_hat.T @ (dz0 @ w0.T)
    return dF, dw0, dw1


def gcn_loss(prob, labels):
    """Mean vertex-wise cross entropy; ``(0.0, empty)`` for an empty graph."""
    n = len(prob)
    if n == 0:
        return 0.0, np.zeros(0)
    y = np.asarray(labels) > 0
    q = np.where(y, prob, 1.0 - prob)
    live = q >= LOG_FLOOR
    loss = -np.sum(np.log(np.maximum(q, LOG_FLOOR))) / n
    dq = np.where(live, -1.0 / np.where(live, q, 1.0), 0.0) / n
    return float(loss), np.where(y, dq, -dq)
