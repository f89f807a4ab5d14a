import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.sparse.csgraph import connected_components

from vgn.errors import FormatError
from vgn.graph import (VesselGraph, build_edges_geodesic, build_edges_skeletal,
                       construct_graph, graph_labels, neighbor_count, normalize_adjacency,
                       sample_vertices, skeletonize, threshold_map, trace_branches)

EIGHT = np.ones((3, 3), dtype=bool)


def plus(size, width):
    m = np.zeros((size, size), dtype=bool)
    lo = size // 2 - width // 2
    m[lo:lo + width, :] = True
    m[:, lo:lo + width] = True
    return m


def line_mask(length=25, h=5, row=2):
    m = np.zeros((h, length), dtype=bool)
    m[row, :] = True
    return m


def smooth_map(rng, h=40, w=40, sigma=2.0):
    return ndimage.gaussian_filter(rng.random((h, w)), sigma)


def random_blobs(seed, h=24, w=24):
    r = np.random.default_rng(seed)
    f = ndimage.gaussian_filter(r.random((h, w)), 1.5)
    return f > np.quantile(f, 0.6)


class TestThreshold:
    def test_zero_threshold_all_true(self, rng):
        assert threshold_map(rng.random((4, 4)), 0.0).all()

    def test_one_keeps_exact_ones(self):
        assert threshold_map(np.array([[0.999, 1.0]]), 1.0).tolist() == [[False, True]]

    def test_direct(self):
        assert threshold_map(np.array([[0.2, 0.5, 0.8]]), 0.5).tolist() == [[False, True, True]]


class TestSkeletonize:
    def test_empty(self):
        s = skeletonize(np.zeros((5, 5), bool))
        assert not s.mask.any() and s.junctions == [] and s.endpoints == []

    def test_single_pixel_isolated(self):
        m = np.zeros((5, 5), bool)
        m[2, 3] = True
        s = skeletonize(m)
        assert np.array_equal(s.mask, m)
        assert s.junctions == [] and s.endpoints == []

    @pytest.mark.xfail(strict=True, reason="arms of the 7x7 width-3 plus are no longer than "
                       "they are wide; any 8-connectivity-preserving thinning erodes them "
                       "(see decisions ledger)")
    def test_plus_7x7_cross(self):
        s = skeletonize(plus(7, 3))
        assert len(s.junctions) == 1 and len(s.endpoints) == 4

    def test_plus_11x11_cross(self):
        s = skeletonize(plus(11, 3))
        assert len(s.junctions) == 1 and len(s.endpoints) == 4
        # the square arm tips recede by one pixel
        assert sorted(s.endpoints) == [(1, 5), (5, 1), (5, 9), (9, 5)]
        assert s.mask.sum() == 17 and s.mask[5, 1:10].all() and s.mask[1:10, 5].all()

    def test_square_survives(self):
        m = np.zeros((6, 6), bool)
        m[2:4, 2:4] = True
        assert skeletonize(m).mask.sum() >= 1

    @given(st.integers(0, 10**6))
    @settings(max_examples=60, deadline=None)
    def test_idempotent_and_connectivity(self, seed):
        m = random_blobs(seed)
        s = skeletonize(m)
        assert np.array_equal(skeletonize(s.mask).mask, s.mask)
        assert (s.mask <= m).all()
        assert ndimage.label(m, EIGHT)[1] == ndimage.label(s.mask, EIGHT)[1]
        counts = neighbor_count(s.mask)
        for clump in s.clumps:
            assert all(counts[p] >= 3 for p in clump)
        assert all(counts[p] == 1 for p in s.endpoints)


class TestSampleVertices:
    def test_line_25(self):
        verts = sample_vertices(skeletonize(line_mask()), 10)
        assert [c for _, c in verts] == [0, 10, 20, 24]

    def test_short_branch_terminals_only(self):
        verts = sample_vertices(skeletonize(line_mask(7)), 10)
        assert verts == [(2, 0), (2, 6)]

    def test_delta_one_every_pixel(self):
        s = skeletonize(plus(11, 3))
        verts = sample_vertices(s, 1)
        junction_pixels = {p for cl in s.clumps for p in cl}
        expected = {tuple(map(int, p)) for p in np.argwhere(s.mask)}
        # junction clumps collapse onto their representative pixel
        assert set(verts) == (expected - junction_pixels) | set(s.junctions)

    def test_rejects_delta_zero(self):
        with pytest.raises(ValueError):
            sample_vertices(skeletonize(line_mask()), 0)

    @given(st.integers(0, 10**6), st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_spacing_along_branches(self, seed, delta):
        s = skeletonize(random_blobs(seed, 32, 32))
        verts = set(sample_vertices(s, delta))
        for br in trace_branches(s):
            assert br.start in verts and br.end in verts
            path = [br.start] + br.interior + [br.end]
            idx = [k for k, p in enumerate(path) if p in verts]
            gaps = np.diff(idx)
            assert idx[0] == 0 and idx[-1] == len(path) - 1
            assert (gaps >= 1).all() and (gaps <= delta).all()


class TestSkeletalEdges:
    def test_disconnected_no_edges(self):
        m = np.zeros((5, 9), bool)
        m[1, 1] = m[3, 7] = True
        s = skeletonize(m)
        assert build_edges_skeletal(s, sample_vertices(s, 10)) == []

    def test_line_chain(self):
        s = skeletonize(line_mask())
        assert build_edges_skeletal(s, sample_vertices(s, 10)) == [(0, 1), (1, 2), (2, 3)]

    def test_cross_star(self):
        s = skeletonize(plus(11, 3))
        verts = sample_vertices(s, 10)
        assert len(verts) == 5
        j = verts.index(s.junctions[0])
        edges = build_edges_skeletal(s, verts)
        assert len(edges) == 4 and all(j in e for e in edges)

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_components_match_skeleton(self, seed):
        s = skeletonize(random_blobs(seed, 32, 32))
        verts = sample_vertices(s, 5)
        edges = build_edges_skeletal(s, verts)
        g = VesselGraph.from_parts(verts, edges, s.mask.shape)
        n_graph = connected_components(g.adjacency, directed=False)[0] if g.n else 0
        labels, _ = ndimage.label(s.mask, EIGHT)
        bearing = {labels[v] for v in verts}
        assert n_graph == len(bearing)


class TestGeodesicEdges:
    verts = [(2, 2), (2, 7)]

    def test_zero_cost(self):
        assert build_edges_geodesic(np.ones((5, 10)), self.verts, 1.0) == [(0, 1)]

    def test_costly(self):
        assert build_edges_geodesic(np.zeros((5, 10)), self.verts, 1.0) == []
        assert build_edges_geodesic(np.zeros((5, 10)), self.verts, 5.0) == [(0, 1)]

    def test_infinite_radius_complete(self, rng):
        verts = [(0, 0), (3, 4), (5, 1), (7, 7)]
        edges = build_edges_geodesic(rng.random((8, 8)), verts, math.inf)
        assert edges == [(i, j) for i in range(4) for j in range(i + 1, 4)]

    def test_diagonal_step_cost(self):
        # one diagonal step onto a zero-probability pixel costs sqrt(2)
        verts = [(0, 0), (1, 1)]
        assert build_edges_geodesic(np.zeros((3, 3)), verts, 1.41) == []
        assert build_edges_geodesic(np.zeros((3, 3)), verts, 1.415) == [(0, 1)]


def spectral_radius(m, iters=2000):
    """Power iteration on ``m @ m`` (positive semi-definite, so no sign flips)."""
    v = np.random.default_rng(0).random(len(m)) + 0.1
    mm = m @ m
    lam = 0.0
    for _ in range(iters):
        w = mm @ v
        lam = np.linalg.norm(w) / np.linalg.norm(v)
        v = w / np.linalg.norm(w)
    return math.sqrt(lam)


def dense_oracle(a):
    at = a + np.eye(len(a))
    d = np.diag(1.0 / np.sqrt(at.sum(1)))
    return d @ at @ d


class TestNormalizeAdjacency:
    def test_single(self):
        assert normalize_adjacency(np.zeros((1, 1))).tolist() == [[1.0]]

    def test_pair(self):
        np.testing.assert_allclose(normalize_adjacency(np.array([[0, 1], [1, 0]])),
                                   [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_path(self):
        a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        s = 1 / math.sqrt(6)
        np.testing.assert_allclose(normalize_adjacency(a),
                                   [[0.5, s, 0], [s, 1 / 3, s], [0, s, 0.5]], atol=1e-15)

    def test_empty(self):
        assert normalize_adjacency(np.zeros((0, 0))).shape == (0, 0)

    def test_star_row_sum_exceeds_one_spectrum_does_not(self):
        # symmetric normalisation is not row-stochastic: the hub row of a
        # 4-leaf star sums to 1/5 + 4/sqrt(10) > 1, yet the spectral radius is 1
        a = np.zeros((5, 5))
        a[0, 1:] = a[1:, 0] = 1
        ah = normalize_adjacency(a)
        assert ah[0].sum() > 1.4
        assert abs(np.max(np.abs(np.linalg.eigvalsh(ah))) - 1.0) < 1e-12
        assert abs(spectral_radius(ah) - 1.0) < 1e-9

    @given(st.integers(1, 20), st.floats(0, 1), st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_properties(self, n, p, seed):
        r = np.random.default_rng(seed)
        a = np.triu(r.random((n, n)) < p, 1).astype(float)
        a = a + a.T
        ah = normalize_adjacency(a)
        np.testing.assert_allclose(ah, dense_oracle(a), atol=1e-12)
        assert np.array_equal(ah, ah.T)
        assert np.max(np.abs(np.linalg.eigvalsh(ah))) <= 1 + 1e-9
        assert spectral_radius(ah) <= 1 + 1e-9


class TestConstructGraph:
    def test_zero_map_empty(self):
        g = construct_graph(np.zeros((10, 10)), 0.5)
        assert g.n == 0 and len(g.edges) == 0
        assert g.normalized.shape == (0, 0)

    def test_straight_vessel_chain(self):
        prob = line_mask().astype(float)
        g = construct_graph(prob, 0.5, 10)
        assert g.vertices.tolist() == [[2, 0], [2, 10], [2, 20], [2, 24]]
        assert g.edges.tolist() == [[0, 1], [1, 2], [2, 3]]

    def test_deterministic(self, rng):
        prob = smooth_map(rng)
        assert construct_graph(prob, 0.5, 5) == construct_graph(prob.copy(), 0.5, 5)

    def test_geodesic_mode(self):
        g = construct_graph(line_mask().astype(float), 0.5, 10, "geodesic", radius=0.5)
        assert g.edges.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            construct_graph(np.zeros((4, 4)), 0.5, 10, "nearest")

    @given(st.integers(0, 10**6), st.sampled_from([0.3, 0.5, 0.7]), st.sampled_from([1, 3, 10]))
    @settings(max_examples=40, deadline=None)
    def test_invariants(self, seed, t, delta):
        prob = smooth_map(np.random.default_rng(seed), 32, 32)
        g = construct_graph(prob, t, delta)
        skel = skeletonize(threshold_map(prob, t), prob).mask
        assert all(skel[r, c] for r, c in g.vertices)
        a = g.adjacency
        assert not np.diag(a).any() and np.array_equal(a, a.T)
        if g.n:
            assert spectral_radius(g.normalized) <= 1 + 1e-9
        m = construct_graph(prob[:, ::-1], t, delta)
        assert m.coordinate_set() == g.mirrored().coordinate_set()
        assert m.edge_set() == g.mirrored().edge_set()


class TestVesselGraph:
    def test_from_parts_canonical(self):
        g = VesselGraph.from_parts([(3, 1), (0, 2), (1, 1)], [(0, 1), (2, 0)], (4, 4))
        assert g.vertices.tolist() == [[0, 2], [1, 1], [3, 1]]
        assert g.edges.tolist() == [[0, 2], [1, 2]]

    def test_rejects_self_loop_and_duplicates(self):
        with pytest.raises(ValueError):
            VesselGraph.from_parts([(0, 0), (1, 1)], [(1, 1)], (2, 2))
        with pytest.raises(ValueError):
            VesselGraph.from_parts([(0, 0), (0, 0)], [], (2, 2))

    def test_mirror_involution(self, rng):
        g = construct_graph(smooth_map(rng), 0.5, 4)
        assert g.mirrored().mirrored() == g

    def test_mirror_column(self):
        g = VesselGraph.from_parts([(0, 3)], [], (5, 10))
        assert g.mirrored().vertices.tolist() == [[0, 6]]

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_text_round_trip(self, seed):
        g = construct_graph(smooth_map(np.random.default_rng(seed), 30, 30),
                            float(np.random.default_rng(seed).random()), 4)
        back = VesselGraph.from_text(g.to_text())
        assert back == g and back.threshold == g.threshold

    def test_file_round_trip(self, tmp_path, rng):
        g = construct_graph(smooth_map(rng), 0.37, 6)
        g.save(tmp_path / "g.txt")
        assert VesselGraph.load(tmp_path / "g.txt") == g

    @pytest.mark.parametrize("text,line", [
        ("", 1),
        ("2 1 5 5 10\n", 1),
        ("2 1 5 5 10 0.5\n0 0\n", 3),
        ("2 1 5 5 10 0.5\n0 0\n1 x\n0 1\n", 3),
        ("1 0 5 5 10 0.5\n9 9\n", 2),
        ("2 1 5 5 10 0.5\n0 0\n1 1\n0 7\n", 4),
    ])
    def test_malformed(self, text, line):
        with pytest.raises(FormatError) as info:
            VesselGraph.from_text(text)
        assert info.value.offset == line

    @given(st.text(max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_fuzz_never_crashes(self, text):
        try:
            VesselGraph.from_text(text)
        except FormatError:
            pass

    def test_labels(self):
        gt = np.zeros((4, 4))
        gt[1, 2] = 1
        g = VesselGraph.from_parts([(1, 2), (3, 3)], [(0, 1)], (4, 4))
        assert graph_labels(g, gt).tolist() == [1, 0]
        assert graph_labels(VesselGraph.empty((4, 4)), gt).tolist() == []
