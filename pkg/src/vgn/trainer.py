"""Sequential training: CNN pretraining, then joint VGN training with graphs
rebuilt from the current CNN every ``k_gc`` iterations.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from vgn.data import Sample
from vgn.graph import construct_graph, graph_labels
from vgn.model import VGN, ModelConfig
from vgn.numeric import sgd_momentum_step

LOG_COLUMNS = ("iteration", "L_CNN", "L_GCN", "L_INFER", "L_total")


@dataclass
class TrainConfig:
    # model
    in_channels: int = 1
    stages: int = 2
    base_width: int = 8
    tap_channels: int = 16
    gcn_hidden: int = 0
    class_balance: bool = True
    # optimisation
    lr_pretrain: float = 0.05
    lr_cnn: float = 0.0
    lr_rest: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pretrain_iterations: int = 2000
    iterations: int = 2000
    batch_size: int = 1
    lr_steps: tuple = (0.5, 0.75)   # fractions of the run where the rate decays
    lr_gamma: float = 0.1
    # graphs
    k_gc: int = 500
    delta: int = 10
    thresholds: tuple = (0.2, 0.4, 0.6, 0.8)
    edge_mode: str = "skeletal"
    geodesic_radius: float = 0.0    # 0: use delta
    # augmentation
    augment: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.lr_steps = tuple(float(s) for s in self.lr_steps)
        self.validate()

    def validate(self):
        if not self.thresholds or not all(0.0 < t < 1.0 for t in self.thresholds):
            raise ValueError(f"thresholds must be non-empty and inside (0, 1): {self.thresholds}")
        if self.k_gc < 1:
            raise ValueError("k_gc must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.delta < 1:
            raise ValueError("delta must be at least 1")
        if self.edge_mode not in ("skeletal", "geodesic"):
            raise ValueError(f"unknown edge mode {self.edge_mode!r}")
        if min(self.iterations, self.pretrain_iterations) < 0:
            raise ValueError("iteration counts must be non-negative")

    def model_config(self):
        return ModelConfig(self.in_channels, self.stages, self.base_width, self.tap_channels,
                           self.gcn_hidden, self.class_balance)

    @property
    def radius(self):
        return self.geodesic_radius or None

    # -- flat key=value files -------------------------------------------------

    def to_text(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_strings(values, base)

    @classmethod
    def from_strings(cls, values, base=None):
        """Override ``base`` (default: the defaults) with string-valued fields."""
        types = {f.name: f.type for f in fields(cls)}
        current = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        for key, val in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            current[key] = parse_field(types[key], val)
        return cls(**current)

    @classmethod
    def load(cls, path, base=None):
        return cls.from_text(Path(path).read_text(), base)

    def save(self, path):
        Path(path).write_text(self.to_text())


def parse_field(kind, text):
    text = str(text).strip()
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad boolean {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "tuple":
        return tuple(float(x) for x in text.split(",") if x.strip())
    return text


PRESETS = {
    "desk": {},
    # full-scale settings for retinal (DRIVE) and angiogram (CA-XRA) data
    "drive": {"lr_cnn": "0", "lr_rest": "1e-2", "iterations": "50000",
              "pretrain_iterations": "50000", "k_gc": "10000", "in_channels": "3",
              "stages": "4", "base_width": "64", "tap_channels": "16"},
    "caxra": {"lr_cnn": "1e-6", "lr_rest": "1e-3", "iterations": "100000",
              "pretrain_iterations": "100000", "k_gc": "20000", "batch_size": "5",
              "stages": "4", "base_width": "64", "tap_channels": "20"},
}


def preset(name):
    return TrainConfig.from_strings(PRESETS[name])


def lr_at(base, iteration, total, steps=(0.5, 0.75), gamma=0.1):
    """Stepwise decay: ``base * gamma**k`` after passing k of the step fractions."""
    k = sum(iteration >= s * total for s in steps)
    return base * gamma ** k


class TrainingDiverged(FloatingPointError):
    pass


class TrainLog:
    """Collects per-iteration losses and streams them to a CSV file."""

    def __init__(self, path=None):
        self.rows = []
        self.refreshes = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(LOG_COLUMNS)

    def record(self, iteration, l_cnn, l_gcn=math.nan, l_infer=math.nan, l_total=None):
        if l_total is None:
            l_total = l_cnn + (0.0 if math.isnan(l_gcn) else l_gcn) \
                + (0.0 if math.isnan(l_infer) else l_infer)
        row = (iteration, l_cnn, l_gcn, l_infer, l_total)
        self.rows.append(row)
        if self._fh:
            self._writer.writerow([iteration] + [repr(float(v)) for v in row[1:]])
            self._fh.flush()

    def totals(self):
        return np.array([r[4] for r in self.rows])

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- augmentation -------------------------------------------------------------

def flip_sample(sample, graph=None):
    """Mirror image, GT, mask and graph horizontally."""
    out = Sample(sample.image[:, ::-1].copy(), sample.gt[:, ::-1].copy(),
                 None if sample.mask is None else sample.mask[:, ::-1].copy(), sample.id)
    return out, (None if graph is None else graph.mirrored())


def augment(sample, graph, rng, config):
    """Random horizontal flip (p = 1/2), brightness shift and contrast scale.

    Brightness adds ``u ~ U(-b, b)``; contrast scales about the image mean by
    ``s ~ U(1 - c, 1 + c)``; the result is clipped to [0, 1].
    """
    if not config.augment:
        return sample, graph
    flip = rng.random() < 0.5
    u = rng.uniform(-config.brightness, config.brightness)
    s = rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)
    if flip:
        sample, graph = flip_sample(sample, graph)
    image = sample.image + u
    image = image * s + image.mean() * (1.0 - s)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image, sample.gt, sample.mask, sample.id), graph


# -- graph cache ----------------------------------------------------------------

@dataclass
class GraphCache:
    graphs: list = field(default_factory=list)   # [sample][threshold] -> VesselGraph
    labels: list = field(default_factory=list)   # [sample][threshold] -> (N,) int
    iteration: int = 0

    def __eq__(self, other):
        if not isinstance(other, GraphCache):
            return NotImplemented
        return (len(self.graphs) == len(other.graphs)
                and all(a == b for ga, gb in zip(self.graphs, other.graphs)
                        for a, b in zip(ga, gb))
                and all(np.array_equal(a, b) for la, lb in zip(self.labels, other.labels)
                        for a, b in zip(la, lb)))


def _graph_input(prob, mask):
    return prob if mask is None else np.where(mask, prob, 0.0)


def refresh_graphs(samples, model, config, iteration=0):
    cache = GraphCache(iteration=iteration)
    for s in samples:
        prob = _graph_input(model.cnn_prob(s.image), s.mask)
        gs = [construct_graph(prob, t, config.delta, config.edge_mode, config.radius)
              for t in config.thresholds]
        cache.graphs.append(gs)
        cache.labels.append([graph_labels(g, s.gt) for g in gs])
    return cache


# -- training loops ---------------------------------------------------------------

def _check_finite(value, iteration, what, ids):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} ({value!r}) at iteration {iteration}, "
                               f"samples {ids}")


def _scale_grads(params, factor):
    if factor != 1.0:
        for p in params:
            p.grad *= factor


def _reset_velocity(params):
    for p in params:
        p.velocity.fill(0.0)


def pretrain_cnn(samples, config, model=None, log=None):
    """Train the backbone alone on the class-balanced CNN loss."""
    if not samples:
        raise ValueError("empty dataset")
    model = model or VGN(config.model_config(), seed=config.seed)
    params = model.group("cnn")
    _reset_velocity(params)
    rng = np.random.default_rng([config.seed, 1])
    total = config.pretrain_iterations
    for it in range(total):
        lr = lr_at(config.lr_pretrain, it, total, config.lr_steps, config.lr_gamma)
        loss, ids = 0.0, []
        for _ in range(config.batch_size):
            s = samples[int(rng.integers(len(samples)))]
            s, _ = augment(s, None, rng, config)
            ids.append(s.id)
            loss += model.cnn_loss(s.image, s.gt, s.mask) / config.batch_size
        _check_finite(loss, it, "CNN loss", ids)
        _scale_grads(params, 1.0 / config.batch_size)
        try:
            sgd_momentum_step(params, lr, config.momentum, config.weight_decay)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from None
        if log is not None:
            log.record(it, loss)
    return model


def train_vgn(samples, model, config, log=None):
    """Joint training of the pretrained ``model`` on the total loss."""
    if not samples:
        raise ValueError("empty dataset")
    cnn, rest = model.group("cnn"), model.group("rest")
    _reset_velocity(cnn + rest)
    train_cnn = config.lr_cnn > 0
    rng = np.random.default_rng([config.seed, 2])
    total = config.iterations
    cache = None
    for it in range(total):
        if it % config.k_gc == 0:
            cache = refresh_graphs(samples, model, config, it)
            if log is not None:
                log.refreshes.append(it)
        sums = np.zeros(3)
        ids = []
        for _ in range(config.batch_size):
            k = int(rng.integers(len(samples)))
            g = cache.graphs[k][int(rng.integers(len(config.thresholds)))]
            s, g = augment(samples[k], g, rng, config)
            ids.append(s.id)
            lb = model.total_loss(s.image, s.gt, g, config.delta, s.mask, cnn_grad=train_cnn)
            sums += (lb.cnn, lb.gcn, lb.infer)
        l_cnn, l_gcn, l_inf = sums / config.batch_size
        _check_finite(l_cnn + l_gcn + l_inf, it, "total loss", ids)
        _scale_grads(cnn + rest, 1.0 / config.batch_size)
        try:
            if train_cnn:
                sgd_momentum_step(cnn,
                                  lr_at(config.lr_cnn, it, total, config.lr_steps, config.lr_gamma),
                                  config.momentum, config.weight_decay)
            else:
                for p in cnn:
                    p.zero_grad()
            sgd_momentum_step(rest,
                              lr_at(config.lr_rest, it, total, config.lr_steps, config.lr_gamma),
                              config.momentum, config.weight_decay)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from None
        if log is not None:
            log.record(it, l_cnn, l_gcn, l_inf)
    return model


def predict(image, model, thresholds=(0.2, 0.4, 0.6, 0.8), delta=10, edge_mode="skeletal",
            radius=None, mask=None):
    """Mean of the VGN maps over graphs built at each threshold (CNN run once)."""
    seg = model.cnn_forward(image)
    prob = _graph_input(seg.prob[:, :, 0], mask)
    acc = None
    for t in thresholds:
        g = construct_graph(prob, t, delta, edge_mode, radius)
        p = model.predict(image, g, seg=seg)
        acc = p if acc is None else acc + p
    return acc / len(thresholds)
