"""The full vessel graph network and its total loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from vgn.backbone import (BackboneConfig, backbone_backward, backbone_forward, cnn_loss,
                          init_backbone_params)
from vgn.fusion import (head_backward, head_forward, infer_loss, init_head_params,
                        reproject, reproject_backward)
from vgn.gcn import (gather_vertex_features, gcn_backward, gcn_forward, gcn_loss,
                     init_gcn_params, scatter_vertex_grad)
from vgn.graph import graph_labels
from vgn.numeric import as_grid


@dataclass
class ModelConfig:
    in_channels: int = 1
    stages: int = 2
    base_width: int = 8
    tap_channels: int = 16
    gcn_hidden: int = 0           # 0: same as the CNN feature depth
    class_balance: bool = True

    @property
    def backbone(self):
        return BackboneConfig(self.in_channels, self.stages, self.base_width, self.tap_channels)

    @property
    def c_cnn(self):
        return self.backbone.feature_depth

    @property
    def c_gcn(self):
        return self.gcn_hidden or self.c_cnn

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    cnn: float
    gcn: float
    infer: float

    @property
    def total(self):
        return self.cnn + self.gcn + self.infer


class VGN:
    """Parameters plus forward/backward passes of CNN, GCN and inference head.

    Parameter names are prefixed ``cnn.``, ``gcn.`` and ``head.``; the
    ``cnn`` group and the ``rest`` group get separate learning rates.
    """

    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.params = {}
        self.params.update(init_backbone_params(cfg.backbone, rng))
        self.params.update(init_gcn_params(cfg.c_cnn, cfg.c_gcn, rng))
        self.params.update(init_head_params(cfg.c_cnn + cfg.c_gcn, rng))

    def group(self, name):
        if name == "cnn":
            return [p for k, p in self.params.items() if k.startswith("cnn.")]
        if name == "rest":
            return [p for k, p in self.params.items() if not k.startswith("cnn.")]
        raise KeyError(name)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def cnn_forward(self, image):
        return backbone_forward(image, self.params, self.config.backbone)

    def cnn_prob(self, image):
        return self.cnn_forward(image).prob[:, :, 0]

    def _vgn_forward(self, seg, graph):
        w0, w1 = self.params["gcn.w0"].value, self.params["gcn.w1"].value
        F = gather_vertex_features(seg.features, graph)
        g = gcn_forward(F, graph.normalized, w0, w1)
        h, w = seg.features.shape[:2]
        fused = np.concatenate([seg.features, reproject(g.hidden, graph, h, w)], axis=2)
        pred, acts = head_forward(fused, self.params)
        return g, pred, acts

    def predict(self, image, graph, seg=None):
        """Final vessel map (H, W) for one image and one graph."""
        seg = self.cnn_forward(image) if seg is None else seg
        return self._vgn_forward(seg, graph)[1][:, :, 0]

    # -- losses -------------------------------------------------------------

    def cnn_loss(self, image, gt, mask=None, backward=True):
        seg = self.cnn_forward(image)
        loss, dprob = cnn_loss(seg, gt, mask, self.config.class_balance)
        if backward:
            backbone_backward(seg, dprob, None, self.params, self.config.backbone)
        return loss

    def total_loss(self, image, gt, graph, delta, mask=None, backward=True, cnn_grad=True):
        """CNN + GCN + inference losses (plain sum), accumulating gradients.

        With ``cnn_grad=False`` the backbone backward pass is skipped (used
        when the CNN is frozen).
        """
        gt = as_grid(gt)
        balance = self.config.class_balance
        seg = self.cnn_forward(image)
        l_cnn, dp_cnn = cnn_loss(seg, gt, mask, balance)
        g, pred, acts = self._vgn_forward(seg, graph)
        l_gcn, dp_gcn = gcn_loss(g.prob, graph_labels(graph, gt))
        l_inf, dpred = infer_loss(pred, gt, graph, delta, mask, balance)
        if backward:
            c = self.config.c_cnn
            dfused = head_backward(acts, dpred, self.params)
            dfeat = dfused[:, :, :c].copy()
            if graph.n:
                w0, w1 = self.params["gcn.w0"], self.params["gcn.w1"]
                dhidden = reproject_backward(dfused[:, :, c:], graph)
                dF, dw0, dw1 = gcn_backward(g, dp_gcn, dhidden, w0.value, w1.value)
                w0.grad += dw0
                w1.grad += dw1
                dfeat += scatter_vertex_grad(dF, graph, dfeat.shape)
            if cnn_grad:
                backbone_backward(seg, dp_cnn, dfeat, self.params, self.config.backbone)
        return LossBreakdown(l_cnn, l_gcn, l_inf)


def total_loss(model, image, gt, graph, delta, mask=None, backward=True):
    return model.total_loss(image, gt, graph, delta, mask, backward)
