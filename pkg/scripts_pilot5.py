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
cfg = TrainConfig(epochs=15, arap_start_epoch=15, lr=1e-4)

gp0 = init_generator_params(seed=cfg.seed, trunk_widths=cfg.trunk_widths,
                            sinkhorn_epsilon=cfg.sinkhorn_epsilon,
                            sinkhorn_iterations=cfg.sinkhorn_iterations)
base = evaluate_pose_transfer(gp0, ds, cfg, count=48)
print(f"wide untrained: pmd={base['pmd_model']:.6f} copy={base['pmd_identity_copy']:.6f}",
      flush=True)

cfg_s = TrainConfig(epochs=12, arap_start_epoch=12, mode="supervised")
t0 = time.time()
res = train(ds, cfg_s, "/tmp/pilot5_sup")
stats = evaluate_pose_transfer(res["params"], ds, cfg_s, count=48)
print(f"wide supervised-12: pmd={stats['pmd_model']:.6f} ({(time.time()-t0)/60:.1f} min)",
      flush=True)

gp = init_generator_params(seed=cfg.seed, trunk_widths=cfg.trunk_widths,
                           sinkhorn_epsilon=cfg.sinkhorn_epsilon,
                           sinkhorn_iterations=cfg.sinkhorn_iterations)
state = ad.AdamState(gp.params, lr=cfg.lr)
order_rng = np.random.default_rng([cfg.seed, 13])

t0 = time.time()
for epoch in range(cfg.epochs):
    batch = build_pairs(ds, cfg, epoch)
    state.lr = cfg.learning_rate(epoch)
    order = order_rng.permutation(len(batch))
    totals = []
    for start in range(0, len(order), cfg.batch_size):
        chunk = order[start:start + cfg.batch_size]
        for j in chunk:
            parts = dual_step(batch.pairs[j], gp, cfg, epoch=epoch)
            ad.backward(ad.mul(parts["total"], 1.0 / len(chunk)))
            totals.append(parts["total"].item())
        ad.adam_step(gp.params, None, state)
    if (epoch + 1) % 3 == 0:
        stats = evaluate_pose_transfer(gp, ds, cfg, count=48)
        print(f"wide unsup epoch {epoch+1}: pmd={stats['pmd_model']:.6f} "
              f"loss={np.mean(totals):.1f} ({(time.time()-t0)/60:.1f} min)", flush=True)
