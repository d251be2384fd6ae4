"""Training-loop contracts: losses, schedules, the refinement window, and
the config file format."""

import csv
import re

import numpy as np
import pytest

import meshpose.autodiff as ad
import meshpose.training as tr
from meshpose.generator import init_generator_params
from meshpose.mesh import Mesh
from meshpose.synthetic import generate_synthetic_dataset
from meshpose.training import (
    LOG_COLUMNS,
    TrainConfig,
    build_pairs,
    dual_step,
    edge_loss,
    evaluate_pose_transfer,
    load_config,
    reconstruction_loss,
    save_config,
    supervised_step,
    train,
)

from conftest import finite_difference, rel_err


TINY = dict(
    epochs=2,
    arap_start_epoch=2,
    n_identities=2,
    n_poses=3,
    heldout_poses=1,
    vertices_per_mesh=150,
    pairs_per_epoch=4,
    batch_size=2,
    trunk_widths=(16, 12, 8),
)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic_dataset(2, 3, vertices_per_mesh=150, seed=3)


@pytest.fixture(scope="module")
def tiny_gp():
    return init_generator_params(seed=5, trunk_widths=(16, 12, 8))


def tiny_cfg(**over):
    return TrainConfig(**{**TINY, **over})


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="lambda_rec"):
            TrainConfig(lambda_rec=0.0)
        with pytest.raises(ValueError, match="arap_start_epoch"):
            TrainConfig(epochs=10, arap_start_epoch=11)
        with pytest.raises(ValueError, match="mode"):
            TrainConfig(mode="semi")
        with pytest.raises(ValueError, match="heldout"):
            TrainConfig(n_poses=5, heldout_poses=5)

    def test_lr_schedule_constant_then_linear(self):
        cfg = TrainConfig(epochs=60, arap_start_epoch=45, lr=1e-4)
        rates = [cfg.learning_rate(e) for e in range(60)]
        assert all(r == 1e-4 for r in rates[:30])
        assert rates[-1] == pytest.approx(1e-4 / 30, rel=1e-12)
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert all(r > 0 for r in rates)

    def test_lr_schedule_degenerate(self):
        cfg = TrainConfig(epochs=1, arap_start_epoch=1, lr=3e-4)
        assert cfg.learning_rate(0) == 3e-4

    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg(lambda_corr=123.5, mode="supervised", trunk_widths=(32, 16, 8))
        path = tmp_path / "run.cfg"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_load_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs = 3\nwarp_speed = 9\n")
        with pytest.raises(ValueError, match="warp_speed"):
            load_config(path)

    def test_load_rejects_missing_equals(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs 3\n")
        with pytest.raises(ValueError, match="bad.cfg:1"):
            load_config(path)

    def test_load_skips_comments_and_blanks(self, tmp_path):
        path = tmp_path / "ok.cfg"
        path.write_text("# a comment\n\nepochs = 4\narap_start_epoch = 3\n")
        cfg = load_config(path)
        assert cfg.epochs == 4 and cfg.arap_start_epoch == 3


class TestLosses:
    def test_reconstruction_exact(self, rng):
        a = rng.standard_normal((7, 3))
        b = rng.standard_normal((7, 3))
        got = reconstruction_loss(ad.constant(a), ad.constant(b)).item()
        assert got == pytest.approx(np.sum((a - b) ** 2), rel=1e-14)

    def test_reconstruction_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="shape"):
            reconstruction_loss(ad.constant(rng.standard_normal((4, 3))),
                                ad.constant(rng.standard_normal((5, 3))))

    def test_reconstruction_gradient(self, rng, tetra):
        v = tetra.vertices + 0.1
        probe = [v.copy()]

        x = ad.Tensor(v.copy(), requires_grad=True)
        ad.backward(reconstruction_loss(x, tetra))
        num = finite_difference(
            lambda: reconstruction_loss(ad.constant(probe[0]), tetra).item(), probe
        )
        assert rel_err(x.grad, num[0]) < 1e-6

    def test_edge_loss_oracle(self, tetra):
        """Each undirected edge contributes twice its squared length."""
        want = 0.0
        for i, j in tetra.edges():
            want += 2.0 * np.sum((tetra.vertices[i] - tetra.vertices[j]) ** 2)
        assert edge_loss(tetra).item() == pytest.approx(want, rel=1e-13)

    def test_edge_loss_gradient_through_coords(self, tetra, rng):
        v = tetra.vertices + 0.05 * rng.standard_normal(tetra.vertices.shape)
        probe = [v.copy()]

        x = ad.Tensor(v.copy(), requires_grad=True)
        ad.backward(edge_loss(tetra, coords=x))
        num = finite_difference(
            lambda: edge_loss(tetra, coords=ad.constant(probe[0])).item(), probe
        )
        assert rel_err(x.grad, num[0]) < 1e-6


class TestSteps:
    def _pair(self, ds, cfg):
        return build_pairs(ds, cfg).pairs[0]

    def test_loss_decomposition_exact(self, tiny_ds, tiny_gp):
        cfg = tiny_cfg()
        parts = dual_step(self._pair(tiny_ds, cfg), tiny_gp, cfg, epoch=0)
        reassembled = (
            cfg.lambda_rec * (parts["L_A_rec"].item() + parts["L_B_rec"].item())
            + (cfg.lambda_corr * parts["L_corr"].item() + parts["L_edge"].item())
        )
        assert parts["total"].item() == reassembled

    def test_corr_term_optional(self, tiny_ds, tiny_gp):
        cfg = tiny_cfg(lambda_corr=0.0)
        parts = dual_step(self._pair(tiny_ds, cfg), tiny_gp, cfg, epoch=0)
        assert parts["L_corr"].item() == 0.0

    def test_refinement_window_inactive_is_plain(self, tiny_ds, tiny_gp):
        """Below the start epoch the step must be bitwise identical to a
        config whose refinement never engages."""
        pair = self._pair(tiny_ds, tiny_cfg())
        early = dual_step(pair, tiny_gp, tiny_cfg(arap_start_epoch=1), cfg_epoch := 0)
        never = dual_step(pair, tiny_gp, tiny_cfg(arap_start_epoch=2), cfg_epoch)
        for key in ("L_A_rec", "L_B_rec", "L_corr", "L_edge", "total"):
            assert early[key].item() == never[key].item()
        assert np.array_equal(early["output"].vertices, never["output"].vertices)

    def test_refinement_active_changes_losses(self, tiny_ds, tiny_gp):
        pair = self._pair(tiny_ds, tiny_cfg())
        plain = dual_step(pair, tiny_gp, tiny_cfg(arap_start_epoch=2), epoch=1)
        refined = dual_step(pair, tiny_gp, tiny_cfg(arap_start_epoch=1), epoch=1, arap_seed=3)
        assert refined["total"].item() != plain["total"].item()
        # the main pass is untouched; only the rebuild passes see the splice
        assert np.array_equal(refined["output"].vertices, plain["output"].vertices)

    def test_straight_through_gradients(self, tiny_ds, tiny_gp, monkeypatch):
        """A refiner that returns its input unchanged must leave both the
        losses and every parameter gradient exactly as if the window were
        closed: the splice swaps values only, never the gradient path."""
        pair = self._pair(tiny_ds, tiny_cfg())

        def run(cfg, epoch):
            tiny_gp.zero_grad()
            parts = dual_step(pair, tiny_gp, cfg, epoch=epoch)
            ad.backward(parts["total"])
            grads = {k: p.grad.copy() for k, p in tiny_gp.params.items() if p.grad is not None}
            tiny_gp.zero_grad()
            return parts["total"].item(), grads

        base_total, base_grads = run(tiny_cfg(arap_start_epoch=2), epoch=1)
        monkeypatch.setattr(tr, "arap_deform", lambda rest, target, **kw: target)
        st_total, st_grads = run(tiny_cfg(arap_start_epoch=1), epoch=1)

        assert st_total == base_total
        assert set(st_grads) == set(base_grads)
        for k in base_grads:
            assert np.array_equal(st_grads[k], base_grads[k]), k

    def test_supervised_step_counts_one_reconstruction(self, tiny_ds, tiny_gp):
        cfg = tiny_cfg(mode="supervised")
        batch = build_pairs(tiny_ds, cfg)
        m_a, m_b = batch.pairs[0]
        parts = supervised_step((m_a, m_b, batch.gts[0]), tiny_gp, cfg)
        assert parts["L_B_rec"].item() == 0.0
        assert parts["L_A_rec"].item() > 0.0

    def test_supervised_step_order_mismatch(self, tiny_ds, tiny_gp):
        cfg = tiny_cfg(mode="supervised")
        m_a, m_b = build_pairs(tiny_ds, cfg).pairs[0]
        bad_gt = Mesh(m_a.vertices[:-8], m_a.faces[(m_a.faces < m_a.n_vertices - 8).all(axis=1)])
        with pytest.raises(ValueError, match="vertices"):
            supervised_step((m_a, m_b, bad_gt), tiny_gp, cfg)


class TestBuildPairs:
    def test_counts_and_modes(self, tiny_ds):
        batch = build_pairs(tiny_ds, tiny_cfg())
        assert len(batch) == 4
        assert batch.gts is None
        sup = build_pairs(tiny_ds, tiny_cfg(mode="supervised"))
        assert sup.gts is not None and len(sup.gts) == len(sup.pairs)

    def test_heldout_poses_never_drawn(self):
        ds = generate_synthetic_dataset(3, 6, vertices_per_mesh=150, seed=9)
        cfg = tiny_cfg(n_identities=3, n_poses=6, heldout_poses=2, pairs_per_epoch=32)
        batch = build_pairs(ds, cfg)
        for m_a, m_b in batch.pairs:
            for m in (m_a, m_b):
                pose = int(re.search(r"pose(\d+)", m.name).group(1))
                assert pose < 4

    def test_supervised_gt_matches_identity_in_pose(self, tiny_ds):
        """Ground truth carries identity A's body renamed by A's pose source:
        the name encodes (identity of A, pose of B)."""
        cfg = tiny_cfg(mode="supervised", pairs_per_epoch=8)
        batch = build_pairs(tiny_ds, cfg)
        for (m_a, m_b), gt in zip(batch.pairs, batch.gts):
            id_a = re.search(r"id(\d+)", m_a.name).group(1)
            pose_b = re.search(r"pose(\d+)", m_b.name).group(1)
            assert gt.name == f"id{id_a}_pose{pose_b}"
            assert gt.n_vertices == m_a.n_vertices

    def test_deterministic(self, tiny_ds):
        a = build_pairs(tiny_ds, tiny_cfg())
        b = build_pairs(tiny_ds, tiny_cfg())
        for (a0, a1), (b0, b1) in zip(a.pairs, b.pairs):
            assert np.array_equal(a0.vertices, b0.vertices)
            assert np.array_equal(a1.faces, b1.faces)


class TestTrainLoop:
    def test_smoke_run_writes_artifacts(self, tiny_ds, tmp_path):
        cfg = tiny_cfg(arap_start_epoch=1, checkpoint_every=1)
        result = train(tiny_ds, cfg, str(tmp_path))
        with open(result["log"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == LOG_COLUMNS
        # 4 pairs / batch 2 = 2 steps per epoch, 2 epochs
        assert len(rows) == 1 + 4
        for row in rows[1:]:
            assert np.isfinite([float(x) for x in row]).all()
        assert (tmp_path / "model.ckpt").exists()
        assert (tmp_path / "model_ep0001.ckpt").exists()

    def test_zero_epochs(self, tiny_ds, tmp_path):
        cfg = tiny_cfg(epochs=0, arap_start_epoch=0)
        result = train(tiny_ds, cfg, str(tmp_path))
        with open(result["log"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows == [LOG_COLUMNS]
        assert (tmp_path / "model.ckpt").exists()

    def test_deterministic_log(self, tiny_ds, tmp_path):
        cfg = tiny_cfg(epochs=1, arap_start_epoch=1)
        a = train(tiny_ds, cfg, str(tmp_path / "a"))
        b = train(tiny_ds, cfg, str(tmp_path / "b"))
        assert open(a["log"]).read() == open(b["log"]).read()

    def test_nonfinite_loss_aborts_with_batch_id(self, tiny_ds, tmp_path, monkeypatch):
        monkeypatch.setattr(
            tr, "dual_step",
            lambda pair, gp, cfg, epoch=0, arap_seed=0: {"total": ad.constant(np.nan)},
        )
        with pytest.raises(RuntimeError, match="non-finite loss in epoch 0"):
            train(tiny_ds, tiny_cfg(), str(tmp_path))

    def test_supervised_smoke(self, tiny_ds, tmp_path):
        cfg = tiny_cfg(mode="supervised")
        result = train(tiny_ds, cfg, str(tmp_path))
        with open(result["log"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 4
        # supervised items leave the second reconstruction column at zero
        col = LOG_COLUMNS.index("L_B_rec")
        assert all(float(r[col]) == 0.0 for r in rows[1:])


def test_evaluate_pose_transfer_shape(tiny_ds, tiny_gp):
    cfg = tiny_cfg()
    out = evaluate_pose_transfer(tiny_gp, tiny_ds, cfg, count=4, seed=1)
    assert set(out) == {"pmd_model", "pmd_identity_copy", "pairs"}
    assert len(out["pairs"]) == 4
    assert out["pmd_model"] > 0
    for row in out["pairs"]:
        # pose column must come from the held-out tail
        assert row["pose"] >= cfg.n_poses - cfg.heldout_poses
