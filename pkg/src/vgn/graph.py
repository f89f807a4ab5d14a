"""Vessel graph construction from a probability map.

threshold -> thin to a one-pixel skeleton -> sample vertices along branches
-> connect vertices -> normalised adjacency for the graph convolution.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from vgn._backend import kernels
from vgn.errors import FormatError

# (dr, dc) in the bit order of the neighbourhood code: E NE N NW W SW S SE
_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
_EIGHT = np.ones((3, 3), dtype=bool)


def _bits(code):
    return [(code >> i) & 1 for i in range(8)]


def _crossing_number(b):
    # number of 8-connected foreground runs around p (1 <=> p is simple)
    return sum((not b[i]) and (b[i + 1] or b[(i + 2) % 8]) for i in (0, 2, 4, 6))


def _guo_hall_ok(b):
    n1 = sum(b[k] or b[k - 1] for k in (1, 3, 5, 7))
    n2 = sum(b[k] or b[(k + 1) % 8] for k in (1, 3, 5, 7))
    return _crossing_number(b) == 1 and min(n1, n2) in (2, 3)


def _make_luts():
    lut_a = np.zeros(256, dtype=np.uint8)
    lut_b = np.zeros(256, dtype=np.uint8)
    lut_clean = np.zeros(256, dtype=np.uint8)
    for code in range(256):
        b = _bits(code)
        if _guo_hall_ok(b):
            lut_a[code] = not ((b[1] or b[2] or not b[7]) and b[0])
            lut_b[code] = not ((b[5] or b[6] or not b[3]) and b[4])
        # corner of a 4-connected L whose two arms touch diagonally
        corner = (b[2] and b[0]) or (b[0] and b[6]) or (b[6] and b[4]) or (b[4] and b[2])
        lut_clean[code] = corner and sum(b) >= 2 and _crossing_number(b) == 1
    return lut_a, lut_b, lut_clean


LUT_A, LUT_B, LUT_CLEAN = _make_luts()


def threshold_map(prob, t):
    """Binary mask ``prob >= t`` over a (H, W) or (H, W, 1) map."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim == 3:
        prob = prob[:, :, 0]
    return prob >= t


def neighbor_count(mask):
    mask = np.asarray(mask, dtype=bool)
    counts = ndimage.convolve(mask.astype(np.int64), np.ones((3, 3), dtype=np.int64),
                              mode="constant")
    return np.where(mask, counts - 1, 0)


@dataclass
class Skeleton:
    """A thinned mask with its terminals.

    ``clumps`` are the 8-connected groups of junction pixels (>= 3 skeletal
    neighbours); ``junctions`` holds one representative per clump, its
    lexicographically smallest pixel. ``endpoints`` have exactly one
    neighbour.
    """

    mask: np.ndarray
    junctions: list
    endpoints: list
    clumps: list = field(default_factory=list)


def skeletonize(mask, tiebreak=None):
    """Thin a binary mask to a one-pixel-wide, 8-connected skeleton.

    Two-subiteration parallel thinning (Guo-Hall conditions, which keep
    8-connected components and 2x2 squares alive) alternated with a raster
    pass that deletes redundant staircase corners, repeated to a fixed
    point. The fixed point makes the operation idempotent.

    The subiterations are orientation dependent, so thinning runs in the
    canonical horizontal orientation of the mask (see ``_prefer_mirror``);
    this makes the result commute with horizontal flips. A mirror-symmetric
    mask has no canonical orientation of its own; ``tiebreak`` (an array of
    the same shape, e.g. the probability map the mask came from) then picks
    one. :func:`construct_graph` thins with its probability map as tiebreak.
    """
    mask = np.asarray(mask) != 0
    flip = _prefer_mirror(mask) if tiebreak is None else _prefer_mirror(mask, _as_map(tiebreak))
    frame = np.ascontiguousarray(mask[:, ::-1] if flip else mask, dtype=np.uint8)
    thin = np.asarray(kernels.thin(frame, LUT_A, LUT_B, LUT_CLEAN)).astype(bool)
    if flip:
        thin = thin[:, ::-1]
    counts = neighbor_count(thin)
    jmask = thin & (counts >= 3)
    labels, n = ndimage.label(jmask, structure=_EIGHT)
    clumps = [[] for _ in range(n)]
    for r, c in np.argwhere(jmask):
        clumps[labels[r, c] - 1].append((int(r), int(c)))
    clumps.sort()
    endpoints = [tuple(map(int, p)) for p in np.argwhere(thin & (counts == 1))]
    return Skeleton(thin, [cl[0] for cl in clumps], endpoints, clumps)


def _neighbors(mask, r, c):
    h, w = mask.shape
    for dr, dc in _OFFSETS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc]:
            yield rr, cc


@dataclass
class _Branch:
    start: tuple          # representative pixel of the starting terminal
    end: tuple
    interior: list        # pixels strictly between the terminals, in order


def _terminals(skel):
    """Map every terminal pixel to its representative (clump min or endpoint)."""
    rep = {}
    for clump in skel.clumps:
        for p in clump:
            rep[p] = clump[0]
    for p in skel.endpoints:
        rep[p] = p
    return rep


def trace_branches(skel):
    """Split the skeleton into branches between terminals.

    Terminals are junction clumps and endpoints. Closed loops without any
    terminal are opened at their lexicographically smallest pixel, which
    then acts as the terminal at both ends. Each branch is oriented to start
    at its lexicographically lower terminal.
    """
    mask = skel.mask
    rep = _terminals(skel)
    seen = set()
    branches = []

    def walk(prev, cur):
        path = []
        while cur not in rep:
            path.append(cur)
            seen.add(cur)
            nxt = [q for q in _neighbors(mask, *cur) if q != prev]
            if not nxt:
                return path, None
            prev, cur = cur, nxt[0]
        return path, cur

    direct = set()
    for p in sorted(rep):
        for q in _neighbors(mask, *p):
            if q in rep:
                if rep[q] != rep[p] and (q, p) not in direct:
                    direct.add((p, q))
                    branches.append(_Branch(rep[p], rep[q], []))
                continue
            if q in seen:
                continue
            path, stop = walk(p, q)
            if stop is None:
                continue
            branches.append(_Branch(rep[p], rep[stop], path))

    # terminal-free closed loops
    rest = mask & (neighbor_count(mask) == 2)
    for p in list(seen):
        rest[p] = False
    for p in rep:
        rest[p] = False
    for r, c in np.argwhere(rest):
        start = (int(r), int(c))
        if start in seen:
            continue
        seen.add(start)
        first = min(_neighbors(mask, *start))
        path, _ = _walk_cycle(mask, start, first)
        seen.update(path)
        branches.append(_Branch(start, start, path))

    for br in branches:
        if br.end < br.start or (br.end == br.start and br.interior
                                 and br.interior[-1] < br.interior[0]):
            br.start, br.end = br.end, br.start
            br.interior.reverse()
    return branches


def _walk_cycle(mask, start, first):
    path = []
    prev, cur = start, first
    while cur != start:
        path.append(cur)
        nxt = [q for q in _neighbors(mask, *cur) if q != prev]
        prev, cur = cur, nxt[0]
    return path, start


def sample_vertices(skel, delta):
    """Vertices: junction clumps, endpoints, isolated pixels and every
    ``delta``-th pixel of traversal along each branch. Sorted (row, col)."""
    if delta < 1:
        raise ValueError("delta must be >= 1")
    verts = {clump[0] for clump in skel.clumps}
    verts.update(skel.endpoints)
    counts = neighbor_count(skel.mask)
    verts.update(tuple(map(int, p)) for p in np.argwhere(skel.mask & (counts == 0)))
    for br in trace_branches(skel):
        verts.add(br.start)
        verts.update(br.interior[delta - 1::delta])
    return sorted(verts)


def _territories(skel, vertices):
    owner = np.full(skel.mask.shape, -1, dtype=np.int64)
    for i, (r, c) in enumerate(vertices):
        owner[r, c] = i
    for clump in skel.clumps:
        owners = {owner[p] for p in clump if owner[p] >= 0}
        if len(owners) == 1:
            o = owners.pop()
            for p in clump:
                owner[p] = o
    return owner


def build_edges_skeletal(skel, vertices):
    """Edge (i, j) iff a skeletal path joins v_i and v_j through no other vertex.

    A junction vertex owns its whole junction clump.
    """
    vertices = [tuple(v) for v in vertices]
    mask = skel.mask
    owner = _territories(skel, vertices)
    members = {}
    for r, c in np.argwhere(owner >= 0):
        members.setdefault(int(owner[r, c]), []).append((int(r), int(c)))
    edges = set()
    for i in range(len(vertices)):
        start = members.get(i, [])
        seen = set(start)
        queue = deque(start)
        while queue:
            p = queue.popleft()
            for q in _neighbors(mask, *p):
                if q in seen:
                    continue
                seen.add(q)
                j = owner[q]
                if j < 0:
                    queue.append(q)
                elif j != i:
                    edges.add((min(i, int(j)), max(i, int(j))))
    return sorted(edges)


def build_edges_geodesic(prob, vertices, radius):
    """Edge (i, j) iff the geodesic cost between v_i and v_j is <= ``radius``.

    Paths run on the 8-connected grid; a step into pixel q costs
    ``(1 - prob[q]) * step_length``. The cost is evaluated in both
    directions and the cheaper one decides, keeping the relation symmetric.
    """
    prob = np.ascontiguousarray(_as_map(prob))
    vertices = [tuple(v) for v in vertices]
    n = len(vertices)
    dist = np.full((n, n), np.inf)
    for i, (r, c) in enumerate(vertices):
        d = np.asarray(kernels.geodesic_distance(prob, int(r), int(c), float(radius)))
        for j, (rr, cc) in enumerate(vertices):
            dist[i, j] = d[rr, cc]
    sym = np.minimum(dist, dist.T)
    return [(i, j) for i in range(n) for j in range(i + 1, n) if sym[i, j] <= radius]


def _as_map(prob):
    prob = np.asarray(prob, dtype=np.float64)
    return prob[:, :, 0] if prob.ndim == 3 else prob


def normalize_adjacency(adj):
    """``D^-1/2 (A + I) D^-1/2`` with D the row sums of ``A + I``."""
    adj = np.asarray(adj, dtype=np.float64)
    a_tilde = adj + np.eye(adj.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


@dataclass(eq=False)
class VesselGraph:
    """Vertices are (row, col) pixels sorted lexicographically; edges are
    index pairs ``i < j`` sorted lexicographically."""

    vertices: np.ndarray
    edges: np.ndarray
    shape: tuple
    delta: int = 10
    threshold: float = 0.5
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.shape = tuple(int(s) for s in self.shape)

    @classmethod
    def from_parts(cls, vertices, edges, shape, delta=10, threshold=0.5):
        """Build with canonical ordering from arbitrary vertex/edge order."""
        vertices = [tuple(map(int, v)) for v in vertices]
        order = sorted(range(len(vertices)), key=lambda k: vertices[k])
        new_index = {old: new for new, old in enumerate(order)}
        verts = [vertices[k] for k in order]
        if len(set(verts)) != len(verts):
            raise ValueError("duplicate vertex coordinates")
        es = set()
        for i, j in edges:
            a, b = new_index[int(i)], new_index[int(j)]
            if a == b:
                raise ValueError("self-loop in edge list")
            es.add((min(a, b), max(a, b)))
        return cls(np.array(verts, dtype=np.int64).reshape(-1, 2),
                   np.array(sorted(es), dtype=np.int64).reshape(-1, 2),
                   shape, delta, threshold)

    @classmethod
    def empty(cls, shape, delta=10, threshold=0.5):
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), shape, delta, threshold)

    @property
    def n(self):
        return len(self.vertices)

    @property
    def adjacency(self):
        if "adj" not in self._cache:
            a = np.zeros((self.n, self.n))
            if len(self.edges):
                a[self.edges[:, 0], self.edges[:, 1]] = 1.0
                a[self.edges[:, 1], self.edges[:, 0]] = 1.0
            self._cache["adj"] = a
        return self._cache["adj"]

    @property
    def normalized(self):
        if "norm" not in self._cache:
            self._cache["norm"] = normalize_adjacency(self.adjacency)
        return self._cache["norm"]

    def mirrored(self):
        """The graph of the horizontally flipped image (col -> W - 1 - col)."""
        verts = self.vertices.copy()
        verts[:, 1] = self.shape[1] - 1 - verts[:, 1]
        return VesselGraph.from_parts(verts, self.edges, self.shape, self.delta, self.threshold)

    def coordinate_set(self):
        return {tuple(map(int, v)) for v in self.vertices}

    def edge_set(self):
        """Edges as unordered pairs of coordinates (independent of vertex order)."""
        v = [tuple(map(int, p)) for p in self.vertices]
        return {frozenset((v[i], v[j])) for i, j in self.edges}

    def __eq__(self, other):
        if not isinstance(other, VesselGraph):
            return NotImplemented
        return (self.shape == other.shape and self.delta == other.delta
                and self.threshold == other.threshold
                and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.edges, other.edges))

    # -- text serialisation -------------------------------------------------

    def to_text(self):
        lines = [f"{self.n} {len(self.edges)} {self.shape[0]} {self.shape[1]} "
                 f"{self.delta} {self.threshold!r}"]
        lines += [f"{r} {c}" for r, c in self.vertices]
        lines += [f"{i} {j}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines:
            raise FormatError("empty graph file", 1)
        head = lines[0].split()
        try:
            n, e, h, w, delta = (int(x) for x in head[:5])
            threshold = float(head[5])
        except (ValueError, IndexError):
            raise FormatError("bad header, expected 'N E H W delta threshold'", 1) from None
        if len(head) != 6 or min(n, e, h, w) < 0:
            raise FormatError("bad header, expected 'N E H W delta threshold'", 1)
        if len(lines) < 1 + n + e:
            raise FormatError(f"truncated: expected {1 + n + e} lines, got {len(lines)}",
                              len(lines) + 1)

        def pairs(start, count):
            out = np.zeros((count, 2), dtype=np.int64)
            for k in range(count):
                parts = lines[start + k].split()
                try:
                    if len(parts) != 2:
                        raise ValueError
                    out[k] = int(parts[0]), int(parts[1])
                except ValueError:
                    raise FormatError(f"expected two integers: {lines[start + k]!r}",
                                      start + k + 1) from None
            return out

        verts = pairs(1, n)
        edges = pairs(1 + n, e)
        if n and ((verts < 0).any() or (verts[:, 0] >= h).any() or (verts[:, 1] >= w).any()):
            raise FormatError("vertex outside image bounds", 2)
        if e and ((edges < 0).any() or (edges >= n).any()):
            raise FormatError("edge index out of range", 2 + n)
        return cls(verts, edges, (h, w), delta, threshold)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


def _prefer_mirror(*arrays):
    """Whether the mirrored frame is canonical.

    The canonical frame is the one whose first raster-order difference from
    its mirror image holds the larger value; later arrays break ties of
    earlier ones. Running orientation-dependent steps in this frame makes
    them commute with horizontal flips for any input that is not itself
    mirror-symmetric.
    """
    for a in arrays:
        a_flat, m_flat = a.ravel(), a[:, ::-1].ravel()
        diff = np.flatnonzero(a_flat != m_flat)
        if len(diff):
            return bool(m_flat[diff[0]] > a_flat[diff[0]])
    return False


def _construct(prob, t, delta, edge_mode, radius):
    skel = skeletonize(threshold_map(prob, t))
    vertices = sample_vertices(skel, delta)
    if edge_mode == "skeletal":
        edges = build_edges_skeletal(skel, vertices)
    elif edge_mode == "geodesic":
        edges = build_edges_geodesic(prob, vertices, delta if radius is None else radius)
    else:
        raise ValueError(f"unknown edge mode {edge_mode!r}")
    return vertices, edges


def construct_graph(prob, t=0.5, delta=10, edge_mode="skeletal", radius=None):
    """Build the vessel graph of a probability map.

    ``radius`` bounds geodesic edges (defaults to ``delta``); it is unused
    in skeletal mode.
    """
    prob = _as_map(prob)
    mask = threshold_map(prob, t)
    flip = _prefer_mirror(mask, prob)
    frame = np.ascontiguousarray(prob[:, ::-1]) if flip else prob
    vertices, edges = _construct(frame, t, delta, edge_mode, radius)
    graph = VesselGraph.from_parts(vertices, edges, prob.shape, delta, float(t))
    return graph.mirrored() if flip else graph


def graph_labels(graph, gt):
    """Per-vertex class (1 = vessel) read from the ground truth at each vertex."""
    gt = _as_map(gt)
    if graph.n == 0:
        return np.zeros(0, dtype=np.int64)
    return (gt[graph.vertices[:, 0], graph.vertices[:, 1]] > 0.5).astype(np.int64)
