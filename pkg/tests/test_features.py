"""KNN grouping and the point-convolution feature extractor."""

import numpy as np
import pytest
from conftest import finite_difference, rel_err

from meshpose import autodiff as ad
from meshpose.features import (
    DEFAULT_K,
    STAGE_WIDTHS,
    extract,
    init_extractor_params,
    knn_index,
    mesh_knn,
    point_conv,
)
from meshpose.mesh import shuffle_vertices
from meshpose.synthetic import SyntheticDataset


@pytest.fixture(scope="module")
def body():
    return SyntheticDataset(1, 1, 300, seed=7).mesh(0, 0)


class TestKnn:
    def test_matches_brute_force(self, rng):
        pts = rng.standard_normal((40, 3))
        idx = knn_index(pts, 5)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        np.fill_diagonal(d, np.inf)
        for i in range(40):
            want = set(np.argsort(d[i])[:5])
            assert set(idx.indices[i]) == want

    def test_excludes_self(self, rng):
        pts = rng.standard_normal((10, 3))
        idx = knn_index(pts, 3)
        for i in range(10):
            assert i not in idx.indices[i]

    def test_k_bounds(self, rng):
        pts = rng.standard_normal((5, 3))
        with pytest.raises(ValueError):
            knn_index(pts, 5)  # k must leave room for self-exclusion
        with pytest.raises(ValueError):
            knn_index(pts, 0)

    def test_mesh_cache_reused(self, body):
        a = mesh_knn(body, 8)
        b = mesh_knn(body, 8)
        assert a is b
        c = mesh_knn(body, 4)
        assert c is not a


class TestPointConv:
    def _params(self, rng, d_in, d_mid, d_out, prefix="pc"):
        return {
            f"{prefix}.inner_w": ad.parameter(rng.standard_normal((d_mid, d_in + 3)) * 0.3),
            f"{prefix}.inner_b": ad.parameter(np.zeros(d_mid)),
            f"{prefix}.outer_w": ad.parameter(rng.standard_normal((d_out, d_mid + d_in)) * 0.3),
            f"{prefix}.outer_b": ad.parameter(np.zeros(d_out)),
        }

    def test_output_shape(self, rng):
        n, k = 12, 4
        pts = rng.standard_normal((n, 3))
        idx = knn_index(pts, k)
        params = self._params(rng, 6, 8, 10)
        feats = ad.constant(rng.standard_normal((1, 6, n)))
        out = point_conv(feats, pts, idx, params, "pc")
        assert out.shape == (1, 10, n)

    def test_gradients_through_params(self, rng):
        n, k = 7, 3
        pts = rng.standard_normal((n, 3))
        idx = knn_index(pts, k)
        params = self._params(rng, 2, 4, 3)
        feats = rng.standard_normal((1, 2, n))

        def run():
            out = point_conv(ad.constant(feats), pts, idx, params, "pc")
            return ad.reduce_sum(ad.mul(out, out))

        loss = run()
        ad.backward(loss)
        got = {k2: p.grad.copy() for k2, p in params.items()}
        fd = finite_difference(lambda: run().item(), [params["pc.inner_w"].data])
        assert rel_err(got["pc.inner_w"], fd[0]) <= 1e-4

    def test_tape_coords_match_constant_coords(self, rng):
        n, k = 9, 4
        pts = rng.standard_normal((n, 3))
        idx = knn_index(pts, k)
        params = self._params(rng, 2, 4, 3)
        feats = ad.constant(rng.standard_normal((1, 2, n)))
        out_const = point_conv(feats, pts, idx, params, "pc")
        out_tape = point_conv(feats, ad.constant(pts), idx, params, "pc")
        assert np.allclose(out_const.data, out_tape.data, atol=1e-12)

    def test_gradient_flows_into_tape_coords(self, rng):
        n, k = 8, 3
        pts = rng.standard_normal((n, 3))
        idx = knn_index(pts, k)
        params = self._params(rng, 2, 4, 3)
        feats = ad.constant(rng.standard_normal((1, 2, n)))
        coords = ad.parameter(pts.copy())
        out = point_conv(feats, coords, idx, params, "pc")
        ad.backward(ad.reduce_sum(ad.mul(out, out)))
        assert coords.grad is not None
        assert np.any(coords.grad != 0.0)


class TestExtract:
    def test_stage_widths_and_shape(self, body, rng):
        params = init_extractor_params(rng)
        fm = extract(body, params)
        assert fm.features.shape == (1, STAGE_WIDTHS[-1], body.n_vertices)
        assert fm.n_vertices == body.n_vertices
        assert fm.width == STAGE_WIDTHS[-1]

    def test_rows_permute_with_vertices(self, body, rng):
        """Feature columns follow vertex relabeling (the equivariance the
        whole correspondence pipeline leans on)."""
        params = init_extractor_params(rng)
        fm = extract(body, params, k=8)
        shuffled, perm = shuffle_vertices(body, seed=3)
        fm_shuffled = extract(shuffled, params, k=8)
        realigned = fm_shuffled.features.data[:, :, perm.forward]
        assert np.allclose(realigned, fm.features.data, atol=1e-8)

    def test_coords_must_match_mesh(self, body, rng):
        params = init_extractor_params(rng)
        wrong = ad.constant(np.zeros((body.n_vertices, 3)))
        with pytest.raises(ValueError):
            extract(body, params, coords=wrong)

    def test_default_k(self, body, rng):
        params = init_extractor_params(rng)
        fm = extract(body, params)
        assert mesh_knn(body, DEFAULT_K).k == 16
        assert fm.features.data.dtype == np.float64
