"""Mesh container, OBJ/PLY IO, permutations, and cotangent weights."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grid_mesh
from meshpose.mesh import (
    EdgeWeights,
    Mesh,
    MeshError,
    ObjParseError,
    VertexPermutation,
    center_by_bbox,
    cotangent_weights,
    load_obj,
    one_ring,
    save_obj,
    save_ply,
    shuffle_vertices,
)

# frozen one-off values: cot(60 deg) / 2 for the equilateral triangle pair,
# and cot(90)/2 + cot(atan(4/3))/2 for the right-triangle check below
HALF_COT_60 = 0.28867513459481287
COT_60 = 0.5773502691896257


class TestMeshValidation:
    def test_basic_construction(self, tetra):
        assert tetra.n_vertices == 4
        assert tetra.n_faces == 4
        assert tetra.vertices.dtype == np.float64

    def test_vertices_immutable(self, tetra):
        with pytest.raises(ValueError):
            tetra.vertices[0, 0] = 9.0

    def test_rejects_bad_vertex_shape(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((3, 2)), np.array([[0, 1, 2]]))

    def test_rejects_out_of_range_face(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))

    def test_rejects_negative_index(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, -1]]))

    def test_rejects_degenerate_face(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))

    def test_rejects_nonfinite_vertices(self):
        v = np.zeros((3, 3))
        v[1, 1] = np.nan
        with pytest.raises(MeshError):
            Mesh(v, np.array([[0, 1, 2]]))

    def test_with_vertices_keeps_faces(self, tetra):
        moved = tetra.with_vertices(tetra.vertices + 1.0)
        assert np.array_equal(moved.faces, tetra.faces)
        assert moved.vertices[0, 0] == 1.0

    def test_edges_are_unique_and_sorted(self, tetra):
        e = tetra.edges()
        assert e.shape == (6, 2)  # complete graph on 4 vertices
        assert np.all(e[:, 0] < e[:, 1])


class TestObjIO:
    def test_round_trip(self, tmp_path, tetra):
        p = tmp_path / "t.obj"
        save_obj(tetra, p)
        back = load_obj(p)
        assert np.allclose(back.vertices, tetra.vertices, atol=1e-6)
        assert np.array_equal(back.faces, tetra.faces)

    def test_parses_slash_face_tokens(self, tmp_path):
        p = tmp_path / "s.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n")
        m = load_obj(p)
        assert np.array_equal(m.faces, [[0, 1, 2]])

    def test_skips_comments_and_unknown_lines(self, tmp_path):
        p = tmp_path / "c.obj"
        p.write_text("# header\nvn 0 0 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        assert load_obj(p).n_vertices == 3

    def test_error_carries_line_number(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 0\n")
        with pytest.raises(ObjParseError) as exc:
            load_obj(p)
        assert exc.value.lineno == 2

    def test_rejects_quad_face(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n")
        with pytest.raises(ObjParseError):
            load_obj(p)

    def test_rejects_zero_index(self, tmp_path):
        p = tmp_path / "z.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
        with pytest.raises(ObjParseError):
            load_obj(p)

    def test_save_ply_with_edges(self, tmp_path, tetra):
        p = tmp_path / "t.ply"
        colors = np.tile([255, 0, 0], (4, 1))
        save_ply(p, tetra.vertices, colors=colors, edges=np.array([[0, 1], [2, 3]]))
        text = p.read_text()
        assert "element vertex 4" in text
        assert "element edge 2" in text


class TestPermutation:
    def test_apply_then_undo_is_identity(self, tetra):
        shuffled, perm = shuffle_vertices(tetra, seed=5)
        back = perm.undo(shuffled)
        assert np.array_equal(back.vertices, tetra.vertices)
        assert np.array_equal(back.faces, tetra.faces)

    def test_rows_move_where_forward_says(self, tetra):
        shuffled, perm = shuffle_vertices(tetra, seed=5)
        assert np.array_equal(shuffled.vertices[perm.forward], tetra.vertices)

    def test_geometry_is_preserved(self, grid5):
        shuffled, _ = shuffle_vertices(grid5, seed=1)

        def edge_lengths(m):
            e = m.edges()
            return np.sort(np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1))

        assert np.allclose(edge_lengths(shuffled), edge_lengths(grid5))

    def test_reorder_rows_matches_apply(self, tetra):
        shuffled, perm = shuffle_vertices(tetra, seed=9)
        assert np.array_equal(perm.reorder_rows(tetra.vertices), shuffled.vertices)

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_random_seeds_round_trip(self, seed):
        m = grid_mesh(3, 4)
        shuffled, perm = shuffle_vertices(m, seed=seed)
        assert np.array_equal(perm.undo(shuffled).vertices, m.vertices)

    def test_invalid_permutation_rejected(self):
        with pytest.raises(MeshError):
            VertexPermutation(np.array([0, 0, 1]))


class TestCenter:
    def test_bbox_center_lands_at_origin(self, grid5):
        c = center_by_bbox(grid5)
        lo, hi = c.vertices.min(axis=0), c.vertices.max(axis=0)
        assert np.allclose(lo + hi, 0.0, atol=1e-12)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=20, deadline=None)
    def test_translation_invariant_and_idempotent(self, dx, dy, dz):
        m = grid_mesh(3, 3)
        moved = m.with_vertices(m.vertices + np.array([dx, dy, dz]))
        once = center_by_bbox(moved)
        assert np.allclose(once.vertices, center_by_bbox(m).vertices, atol=1e-9)
        assert np.allclose(center_by_bbox(once).vertices, once.vertices, atol=1e-12)


class TestAdjacency:
    def test_one_ring_of_grid_interior(self, grid5):
        ring = one_ring(grid5, 12)  # interior vertex of the 5x5 grid
        assert len(ring) == 6  # this triangulation gives 6 neighbors inside
        assert 12 not in ring

    def test_edge_weights_lookup(self):
        w = EdgeWeights(3, np.array([[0, 1], [1, 2]]), np.array([2.0, 3.0]))
        assert w.weight(1, 0) == 2.0
        assert w.weight(2, 1) == 3.0
        with pytest.raises(KeyError):
            w.weight(0, 2)

    def test_laplacian_row_sums_zero(self, grid5):
        L = cotangent_weights(grid5).laplacian()
        assert np.allclose(np.asarray(L.sum(axis=1)).ravel(), 0.0, atol=1e-12)


class TestCotangentWeights:
    def test_equilateral_pair(self):
        # two equilateral triangles sharing edge (0,1): both opposite angles
        # are 60 degrees, so w = cot(60)/2 + cot(60)/2 = cot(60)
        h = np.sqrt(3.0) / 2.0
        m = Mesh(
            np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0]], dtype=float),
            np.array([[0, 1, 2], [1, 0, 3]]),
        )
        w = cotangent_weights(m)
        assert w.weight(0, 1) == pytest.approx(COT_60, abs=1e-12)

    def test_boundary_edge_single_sided(self):
        h = np.sqrt(3.0) / 2.0
        m = Mesh(
            np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0]], dtype=float),
            np.array([[0, 1, 2]]),
        )
        w = cotangent_weights(m)
        assert w.weight(0, 1) == pytest.approx(HALF_COT_60, abs=1e-12)

    def test_right_triangle_values(self):
        # 3-4-5 triangle: angle at the right corner contributes cot(90)=0
        m = Mesh(
            np.array([[0, 0, 0], [4, 0, 0], [0, 3, 0]], dtype=float),
            np.array([[0, 1, 2]]),
        )
        w = cotangent_weights(m)
        assert w.weight(0, 1) == pytest.approx(0.5 * (3.0 / 4.0), abs=1e-12)
        assert w.weight(0, 2) == pytest.approx(0.5 * (4.0 / 3.0), abs=1e-12)
        assert w.weight(1, 2) == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_rigid_motion_invariance(self, seed):
        m = grid_mesh(4, 4, jitter=0.1, seed=seed)
        r = np.random.default_rng(seed)
        angle = r.uniform(0, 2 * np.pi)
        rot = np.array(
            [[np.cos(angle), -np.sin(angle), 0],
             [np.sin(angle), np.cos(angle), 0],
             [0, 0, 1.0]]
        )
        moved = m.with_vertices(m.vertices @ rot.T + r.uniform(-2, 2, 3))
        w0 = cotangent_weights(m)
        w1 = cotangent_weights(moved)
        assert np.allclose(w0.values, w1.values, atol=1e-9)

    def test_degenerate_face_reported(self):
        m = Mesh(
            np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float),
            np.array([[0, 1, 2]]),  # collinear
        )
        with pytest.raises(MeshError):
            cotangent_weights(m)

    def test_nonmanifold_edge_reported(self):
        v = np.array(
            [[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [0.5, -1, 0], [0.5, 0, 1]],
            dtype=float,
        )
        f = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
        with pytest.raises(MeshError):
            cotangent_weights(Mesh(v, f))
