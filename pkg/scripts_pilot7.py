"""Pilot 7: what do 15 refinement epochs buy, and supervised update scaling.

(a) unsup 20 epochs, refinement from epoch 5 (same 15-epoch window as the
    full run), zero-init residual head; PMD probes every 5 epochs via
    checkpoints and the epoch-mean loss series for the onset jump.
(b) supervised 192 pairs x 10 epochs.
"""
import csv
import time

import numpy as np

from meshpose.generator import GeneratorParams, generate, init_generator_params
from meshpose.mesh import Mesh, center_by_bbox, shuffle_vertices
from meshpose.metrics import pmd
from meshpose.synthetic import generate_synthetic_dataset
from meshpose.training import TrainConfig, train

cfg_probe = TrainConfig()
ds = generate_synthetic_dataset(8, 40, 600, seed=0)


def eval_both(gp, count=48, seed=12345):
    rng = np.random.default_rng(seed)
    train_poses = cfg_probe.n_poses - cfg_probe.heldout_poses
    fulls, warps = [], []
    for _ in range(count):
        i_a, i_b = rng.integers(0, ds.n_identities, size=2)
        p_a = int(rng.integers(0, train_poses))
        p_b = int(rng.integers(train_poses, cfg_probe.n_poses))
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
gp0 = init_generator_params(seed=0, trunk_widths=cfg_probe.trunk_widths)
f0, w0 = eval_both(gp0)
print(f"epoch 0 (zero-init head): full={f0:.6f} warp={w0:.6f}", flush=True)

cfg = TrainConfig(epochs=20, arap_start_epoch=5, mode="unsupervised", checkpoint_every=5)
out = train(ds, cfg, "/tmp/p7_unsup")
by_epoch = {}
with open(out["log"]) as fh:
    for row in csv.DictReader(fh):
        by_epoch.setdefault(int(row["epoch"]), []).append(float(row["total"]))
means = [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
print(f"epoch means: {['%.0f' % m for m in means]}", flush=True)
print(f"onset jump means[5]/means[4] = {means[5]/means[4]:.3f}", flush=True)
for upto in (5, 10, 15, 20):
    path = f"/tmp/p7_unsup/model_ep{upto:04d}.ckpt"
    gp, _, _ = GeneratorParams.load(path)
    f, w = eval_both(gp)
    print(f"unsup ep{upto}: full={f:.6f} warp={w:.6f} ({(time.time()-t0)/60:.1f} min)", flush=True)

cfg2 = TrainConfig(mode="supervised", pairs_per_epoch=192, epochs=10, arap_start_epoch=10)
out = train(ds, cfg2, "/tmp/p7_sup192")
f, w = eval_both(out["params"])
print(f"sup 192x10: full={f:.6f} warp={w:.6f} ({(time.time()-t0)/60:.1f} min)", flush=True)
