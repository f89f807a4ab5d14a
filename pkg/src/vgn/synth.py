"""Synthetic branching vessel images with exact ground truth and centerlines.

Each sample is a tree of random-walk branches. The root enters from an image
border; children sprout from a random point of an earlier branch at a
40-90 degree angle. Centerlines are rasterised 8-connected and thinned to
one pixel, then dilated to a per-branch width for the GT.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vgn.data import Sample

VESSEL_LEVEL = 0.75
BACKGROUND_LEVEL = 0.25


@dataclass
class SynthConfig:
    extent: int = 64
    n_samples: int = 5
    branches: tuple = (1, 4)        # inclusive range of branch counts
    widths: tuple = (1, 3)          # inclusive range of branch widths (pixels)
    curvature: float = 0.2          # max heading change per 1-pixel step (radians)
    noise: float = 0.05             # std of additive Gaussian noise
    seed: int = 0
    prefix: str = "synth"

    def __post_init__(self):
        self.branches = tuple(int(b) for b in self.branches)
        self.widths = tuple(int(w) for w in self.widths)
        if self.extent < 32:
            raise ValueError("extent must be at least 32")
        if self.widths[0] < 1 or self.widths[0] > self.widths[1]:
            raise ValueError(f"bad width range {self.widths}")
        if self.branches[0] < 1 or self.branches[0] > self.branches[1]:
            raise ValueError(f"bad branch range {self.branches}")
        if self.curvature < 0 or self.noise < 0:
            raise ValueError("curvature and noise must be non-negative")


def _walk(start, heading, length, curvature, extent, rng):
    """Continuous random walk with unit steps, stopped at the border."""
    pts = [np.asarray(start, dtype=np.float64)]
    for _ in range(int(length)):
        heading += rng.uniform(-curvature, curvature)
        nxt = pts[-1] + (math.sin(heading), math.cos(heading))
        if not (0 <= nxt[0] <= extent - 1 and 0 <= nxt[1] <= extent - 1):
            break
        pts.append(nxt)
    return np.array(pts), heading


def _rasterise(pts):
    """Round to pixels (unit steps keep the chain 8-connected), drop repeats
    and corner pixels whose neighbours already touch."""
    pix = np.floor(pts + 0.5).astype(np.int64)
    chain = [tuple(pix[0])]
    for p in map(tuple, pix[1:]):
        if p != chain[-1]:
            chain.append(p)
    changed = True
    while changed and len(chain) > 2:
        changed = False
        out = [chain[0]]
        for i in range(1, len(chain) - 1):
            a, b = out[-1], chain[i + 1]
            if max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= 1:
                changed = True
                continue
            out.append(chain[i])
        out.append(chain[-1])
        chain = out
    return np.array(chain, dtype=np.int64)


def _stamp(width):
    r = width / 2.0
    k = int(math.ceil(r))
    return [(dr, dc) for dr in range(-k, k + 1) for dc in range(-k, k + 1)
            if dr * dr + dc * dc <= r * r]


def _root_start(extent, rng):
    side = rng.integers(4)
    pos = rng.uniform(0.25, 0.75) * (extent - 1)
    edge = extent - 1
    start, heading = {
        0: ((0.0, pos), math.pi / 2),       # top, heading down
        1: ((edge, pos), -math.pi / 2),     # bottom, heading up
        2: ((pos, 0.0), 0.0),               # left, heading right
        3: ((pos, edge), math.pi),          # right, heading left
    }[int(side)]
    return start, heading + rng.uniform(-0.3, 0.3)


def generate_tree(config, rng):
    """Return ``(gt, centerlines)`` for one tree."""
    n = config.extent
    n_branches = int(rng.integers(config.branches[0], config.branches[1] + 1))
    branches = []                   # (continuous points, headings at each point)
    start, heading = _root_start(n, rng)
    pts, _ = _walk(start, heading, 2 * n, config.curvature, n, rng)
    branches.append(pts)
    attempts = 0
    while len(branches) < n_branches and attempts < 20 * n_branches:
        attempts += 1
        parent = branches[rng.integers(len(branches))]
        if len(parent) < 10:
            continue
        i = int(rng.integers(len(parent) // 5, 4 * len(parent) // 5))
        d = parent[min(i + 1, len(parent) - 1)] - parent[max(i - 1, 0)]
        base = math.atan2(d[0], d[1])
        turn = rng.uniform(math.radians(40), math.radians(90)) * rng.choice([-1.0, 1.0])
        pts, _ = _walk(parent[i], base + turn, rng.uniform(n / 4, n), config.curvature, n, rng)
        if len(pts) >= 6:
            branches.append(pts)

    gt = np.zeros((n, n), dtype=np.uint8)
    centerlines = []
    for pts in branches:
        chain = _rasterise(pts)
        width = int(rng.integers(config.widths[0], config.widths[1] + 1))
        for dr, dc in _stamp(width):
            r, c = chain[:, 0] + dr, chain[:, 1] + dc
            ok = (r >= 0) & (r < n) & (c >= 0) & (c < n)
            gt[r[ok], c[ok]] = 1
        centerlines.append(chain)
    return gt, centerlines


def render(gt, noise, rng):
    image = BACKGROUND_LEVEL + (VESSEL_LEVEL - BACKGROUND_LEVEL) * gt.astype(np.float64)
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=gt.shape)
    return np.clip(image, 0.0, 1.0)[:, :, None]


def synth_generate(config=None):
    """Generate ``config.n_samples`` samples; sample k depends only on
    ``(seed, k)``."""
    config = config or SynthConfig()
    children = np.random.SeedSequence(config.seed).spawn(config.n_samples)
    samples = []
    for k, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        gt, centerlines = generate_tree(config, rng)
        samples.append(Sample(render(gt, config.noise, rng), gt, None,
                              f"{config.prefix}_{k:03d}", centerlines))
    return samples
