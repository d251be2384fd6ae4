"""Pilot 6: (a) unsup warp-vs-full PMD trajectory, (b) supervised update-count scaling."""
import time

import numpy as np

from meshpose import autodiff as ad
from meshpose.generator import generate, init_generator_params
from meshpose.mesh import Mesh, center_by_bbox, shuffle_vertices
from meshpose.metrics import pmd
from meshpose.synthetic import generate_synthetic_dataset
from meshpose.training import TrainConfig, build_pairs, dual_step, train

cfg = TrainConfig()
ds = generate_synthetic_dataset(cfg.n_identities, cfg.n_poses, cfg.vertices_per_mesh, seed=cfg.seed)


def eval_both(gp, count=48, seed=12345):
    rng = np.random.default_rng(seed)
    train_poses = cfg.n_poses - cfg.heldout_poses
    fulls, warps = [], []
    for _ in range(count):
        i_a, i_b = rng.integers(0, ds.n_identities, size=2)
        p_a = int(rng.integers(0, train_poses))
        p_b = int(rng.integers(train_poses, cfg.n_poses))
        id_raw = ds.mesh(int(i_a), p_a)
        pose_raw = ds.mesh(int(i_b), p_b)
        gt = center_by_bbox(ds.mesh(int(i_a), p_b))
        m_a, perm_a = shuffle_vertices(center_by_bbox(id_raw), seed=int(rng.integers(2**31)))
        m_b, _ = shuffle_vertices(center_by_bbox(pose_raw), seed=int(rng.integers(2**31)))
        res = generate(m_a, m_b, gp)
        fulls.append(pmd(center_by_bbox(perm_a.undo(res.output)), gt))
        warps.append(pmd(center_by_bbox(perm_a.undo(Mesh(res.v_warp.data, m_a.faces))), gt))
    return float(np.mean(fulls)), float(np.mean(warps))


t0 = time.time()
gp = init_generator_params(seed=cfg.seed, trunk_widths=cfg.trunk_widths,
                           sinkhorn_epsilon=cfg.sinkhorn_epsilon,
                           sinkhorn_iterations=cfg.sinkhorn_iterations)
f0, w0 = eval_both(gp)
print(f"unsup epoch 0: full={f0:.6f} warp={w0:.6f}", flush=True)

state = ad.AdamState(gp.params, lr=cfg.lr)
for epoch in range(9):
    batch = build_pairs(ds, cfg, epoch)
    state.lr = cfg.learning_rate(epoch)
    comp = dict.fromkeys(["L_A_rec", "L_B_rec", "L_corr", "L_edge", "total"], 0.0)
    nb = 0
    for start in range(0, len(batch), cfg.batch_size):
        idxs = range(start, min(start + cfg.batch_size, len(batch)))
        for j in idxs:
            parts = dual_step(batch.pairs[j], gp, cfg, epoch=epoch, arap_seed=0)
            ad.backward(ad.mul(parts["total"], 1.0 / len(idxs)))
            for key in comp:
                comp[key] += parts[key].item() / len(idxs)
        ad.adam_step(gp.params, None, state)
        nb += 1
    if (epoch + 1) % 3 == 0:
        f, w = eval_both(gp)
        parts = {kk: comp[kk] / nb for kk in comp}
        print(f"unsup epoch {epoch+1}: full={f:.6f} warp={w:.6f} "
              f"LA={parts['L_A_rec']:.4f} LB={parts['L_B_rec']:.4f} "
              f"Lcorr={parts['L_corr']:.4f} Ledge={parts['L_edge']:.4f} total={parts['total']:.1f} "
              f"({(time.time()-t0)/60:.1f} min)", flush=True)

# (b) supervised with 4x updates per epoch
cfg2 = TrainConfig(mode="supervised", pairs_per_epoch=192, epochs=10)
out = train(ds, cfg2, "/tmp/pilot6_sup")
gp2 = out["params"]
f, w = eval_both(gp2)
print(f"sup 192x10: full={f:.6f} warp={w:.6f} ({(time.time()-t0)/60:.1f} min)", flush=True)
