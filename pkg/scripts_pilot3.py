import time

import numpy as np

import meshpose.autodiff as ad
from meshpose.generator import init_generator_params
from meshpose.synthetic import generate_synthetic_dataset
from meshpose.training import (
    TrainConfig,
    build_pairs,
    dual_step,
    evaluate_pose_transfer,
    train,
)

ds = generate_synthetic_dataset(8, 40, 600, seed=0)

# --- does the rigid-refinement window move held-out PMD? --------------------
cfg = TrainConfig(epochs=12, arap_start_epoch=6, lr=3e-4)
gp = init_generator_params(seed=cfg.seed, trunk_widths=cfg.trunk_widths,
                           sinkhorn_epsilon=cfg.sinkhorn_epsilon,
                           sinkhorn_iterations=cfg.sinkhorn_iterations)
state = ad.AdamState(gp.params, lr=cfg.lr)
batch = build_pairs(ds, cfg)
order_rng = np.random.default_rng([cfg.seed, 13])

t0 = time.time()
for epoch in range(cfg.epochs):
    state.lr = cfg.learning_rate(epoch)
    order = order_rng.permutation(len(batch))
    totals = []
    for start in range(0, len(order), cfg.batch_size):
        chunk = order[start:start + cfg.batch_size]
        for j in chunk:
            parts = dual_step(batch.pairs[j], gp, cfg, epoch=epoch,
                              arap_seed=epoch * 1000 + int(j))
            ad.backward(ad.mul(parts["total"], 1.0 / len(chunk)))
            totals.append(parts["total"].item())
        ad.adam_step(gp.params, None, state)
    if (epoch + 1) % 3 == 0:
        stats = evaluate_pose_transfer(gp, ds, cfg, count=24)
        tag = "arap" if epoch >= cfg.arap_start_epoch else "pre"
        print(f"refine-pilot epoch {epoch+1} [{tag}]: pmd={stats['pmd_model']:.6f} "
              f"loss={np.mean(totals):.1f} ({(time.time()-t0)/60:.1f} min)", flush=True)

# --- supervised trajectory for the mode-comparison margin -------------------
for n_ep in (18,):
    cfg_s = TrainConfig(epochs=n_ep, arap_start_epoch=n_ep, mode="supervised")
    t0 = time.time()
    res = train(ds, cfg_s, "/tmp/pilot_sup18")
    stats = evaluate_pose_transfer(res["params"], ds, cfg_s, count=24)
    print(f"supervised-{n_ep}: pmd={stats['pmd_model']:.6f} "
          f"({(time.time()-t0)/60:.1f} min)", flush=True)
