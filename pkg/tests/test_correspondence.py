"""Correlation, entropic transport, and warping."""

import numpy as np
import pytest

from meshpose import autodiff as ad
from meshpose.correspondence import (
    CorrelationMatrix,
    backward_correspondence_loss,
    backward_warp,
    correlation_matrix,
    export_correspondence_ply,
    row_normalize,
    solve_ot,
    warp_pose_mesh,
    warp_vertices,
)
from meshpose.features import extract, init_extractor_params
from meshpose.mesh import Mesh
from meshpose.synthetic import SyntheticDataset

from conftest import corr_from_cost, lp_transport_cost


class TestCorrelation:
    def test_diagonal_one_for_identical_features(self, rng):
        f = ad.constant(rng.standard_normal((1, 8, 5)))
        c = correlation_matrix(f, f)
        assert np.allclose(np.diag(c.values.data), 1.0, atol=1e-12)

    def test_range_bounded(self, rng):
        a = ad.constant(rng.standard_normal((1, 6, 7)))
        b = ad.constant(rng.standard_normal((1, 6, 9)))
        c = correlation_matrix(a, b).values.data
        assert c.shape == (7, 9)
        assert np.all(c <= 1.0 + 1e-12)
        assert np.all(c >= -1.0 - 1e-12)

    def test_zero_feature_column_does_not_explode(self):
        a = np.zeros((1, 4, 3))
        a[0, 0, 0] = 1.0
        c = correlation_matrix(ad.constant(a), ad.constant(a)).values.data
        assert np.all(np.isfinite(c))


class TestSinkhorn:
    def test_row_marginals_exact_at_defaults(self, rng):
        z = rng.uniform(0, 1, (30, 40))
        t = solve_ot(corr_from_cost(z))  # paper defaults: eps 0.03, 5 rounds
        rows = t.values.data.sum(axis=1)
        assert np.allclose(rows, 1.0 / 30, atol=1e-9)

    def test_2x2_hand_oracle(self):
        # frozen: symmetric 2x2 with clear diagonal preference concentrates
        # half the mass on each diagonal entry as eps -> 0
        z = np.array([[0.0, 1.0], [1.0, 0.0]])
        t = solve_ot(corr_from_cost(z), epsilon=0.01, i_max=200).values.data
        assert np.allclose(t, [[0.5, 0.0], [0.0, 0.5]], atol=1e-3)

    def test_near_lp_at_small_epsilon(self, rng):
        z = rng.uniform(0, 1, (5, 5))
        t = solve_ot(corr_from_cost(z), epsilon=0.001, i_max=2000).values.data
        got = float((t * z).sum())
        want = lp_transport_cost(z, np.full(5, 0.2), np.full(5, 0.2))
        assert got == pytest.approx(want, rel=0.01)

    def test_log_domain_matches_plain_path(self, rng):
        # cost scaled so that eps=0.5 stays on the plain path while an
        # equivalent scaled problem (z/eps identical) hits the log path
        z = rng.uniform(0.5, 1.5, (6, 7))
        t_plain = solve_ot(corr_from_cost(z), epsilon=0.02, i_max=50).values.data
        t_log = solve_ot(corr_from_cost(z * 50.0), epsilon=1.0, i_max=50).values.data
        assert np.allclose(t_plain, t_log, atol=1e-10)

    def test_extreme_epsilon_stays_finite(self, rng):
        z = rng.uniform(0, 1, (8, 8))
        t = solve_ot(corr_from_cost(z), epsilon=0.001, i_max=500).values.data
        assert np.all(np.isfinite(t))
        assert np.all(t >= 0)

    def test_gradient_flows_to_correlation(self, rng):
        z = rng.uniform(0, 1, (4, 4))
        c = CorrelationMatrix(values=ad.parameter(1.0 - z))
        t = solve_ot(c, epsilon=0.05, i_max=5)
        ad.backward(ad.reduce_sum(ad.mul(t.values, t.values)))
        assert c.values.grad is not None
        assert np.any(c.values.grad != 0)

    def test_parameter_validation(self):
        c = corr_from_cost(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            solve_ot(c, epsilon=0.0)
        with pytest.raises(ValueError):
            solve_ot(c, i_max=0)


class TestWarp:
    def test_permutation_matching_reproduces_reordering(self, rng):
        n = 6
        perm = rng.permutation(n)
        t = np.zeros((n, n))
        t[np.arange(n), perm] = 1.0 / n  # transport mass along a permutation
        from meshpose.correspondence import MatchingMatrix

        m = MatchingMatrix(values=ad.constant(t), epsilon=0.03, iterations=5)
        v_pose = rng.standard_normal((n, 3))
        warped = warp_vertices(row_normalize(m).values, ad.constant(v_pose))
        assert np.allclose(warped.data, v_pose[perm], atol=1e-12)

    def test_warped_vertices_in_convex_hull(self, rng):
        z = rng.uniform(0, 1, (10, 12))
        t = solve_ot(corr_from_cost(z))
        v_pose = rng.standard_normal((12, 3))
        warped = warp_vertices(row_normalize(t).values, ad.constant(v_pose)).data
        # every output is a convex combination, so coordinatewise bounds hold
        assert np.all(warped >= v_pose.min(axis=0) - 1e-9)
        assert np.all(warped <= v_pose.max(axis=0) + 1e-9)

    def test_warp_pose_mesh_carries_identity_faces(self, rng):
        ds = SyntheticDataset(2, 2, 200, seed=1)
        m_id, m_pose = ds.mesh(0, 0), ds.mesh(1, 1)
        params = init_extractor_params(np.random.default_rng(0))
        c = correlation_matrix(extract(m_id, params, k=8), extract(m_pose, params, k=8))
        t = solve_ot(c)
        warped = warp_pose_mesh(row_normalize(t), m_pose.vertices, m_id.faces)
        assert warped.n_vertices == m_id.n_vertices
        assert np.array_equal(warped.faces, m_id.faces)

    def test_row_normalize_rejects_zero_row(self):
        from meshpose.correspondence import MatchingMatrix

        t = np.array([[0.0, 0.0], [0.2, 0.3]])
        m = MatchingMatrix(values=ad.constant(t), epsilon=0.03, iterations=5)
        with pytest.raises(ValueError):
            row_normalize(m)


class TestBackwardWarp:
    def test_round_trip_loss_oracle(self):
        # frozen: uniform T over a +/-1 two-point problem. Warp averages both
        # pose points to 0; backward warp averages zeros back to zeros; the
        # loss is sum of squared pose coordinates = 1 + 1 = 2.
        from meshpose.correspondence import MatchingMatrix

        t = MatchingMatrix(values=ad.constant(np.full((2, 2), 0.25)), epsilon=1.0, iterations=1)
        v_pose = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        loss = backward_correspondence_loss(t, v_pose)
        assert loss.item() == pytest.approx(2.0, abs=1e-12)

    def test_identity_matching_round_trips_exactly(self, rng):
        from meshpose.correspondence import MatchingMatrix

        n = 5
        t = MatchingMatrix(values=ad.constant(np.eye(n) / n), epsilon=1.0, iterations=1)
        v_pose = rng.standard_normal((n, 3))
        loss = backward_correspondence_loss(t, v_pose)
        assert loss.item() == pytest.approx(0.0, abs=1e-18)

    def test_zero_column_rejected(self):
        from meshpose.correspondence import MatchingMatrix

        t = np.array([[0.5, 0.0], [0.5, 0.0]])
        m = MatchingMatrix(values=ad.constant(t), epsilon=1.0, iterations=1)
        with pytest.raises(ValueError):
            backward_warp(m, ad.constant(np.zeros((2, 3))))


class TestExportPly:
    def test_writes_lines(self, tmp_path, rng):
        ds = SyntheticDataset(2, 2, 200, seed=1)
        m_a, m_b = ds.mesh(0, 0), ds.mesh(1, 0)
        params = init_extractor_params(np.random.default_rng(0))
        c = correlation_matrix(extract(m_a, params, k=8), extract(m_b, params, k=8))
        t = solve_ot(c)
        out = tmp_path / "corr.ply"
        export_correspondence_ply(out, m_a, m_b, t)
        text = out.read_text()
        assert f"element vertex {m_a.n_vertices + m_b.n_vertices}" in text
        assert f"element edge {m_a.n_vertices}" in text
