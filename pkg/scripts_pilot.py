import time

import numpy as np

from meshpose.generator import init_generator_params
from meshpose.synthetic import generate_synthetic_dataset
from meshpose.training import TrainConfig, evaluate_pose_transfer, train

cfg = TrainConfig(epochs=6, arap_start_epoch=6)
ds = generate_synthetic_dataset(cfg.n_identities, cfg.n_poses, cfg.vertices_per_mesh, seed=cfg.seed)

gp0 = init_generator_params(seed=cfg.seed, trunk_widths=cfg.trunk_widths,
                            sinkhorn_epsilon=cfg.sinkhorn_epsilon,
                            sinkhorn_iterations=cfg.sinkhorn_iterations)
base = evaluate_pose_transfer(gp0, ds, cfg, count=24)
print(f"untrained: pmd={base['pmd_model']:.6f} copy={base['pmd_identity_copy']:.6f}", flush=True)

t0 = time.time()
result = train(ds, cfg, "/tmp/pilot")
dt = time.time() - t0
print(f"6 epochs in {dt/60:.1f} min ({dt/6:.1f} s/epoch)", flush=True)

stats = evaluate_pose_transfer(result["params"], ds, cfg, count=24)
print(f"trained-6: pmd={stats['pmd_model']:.6f} copy={stats['pmd_identity_copy']:.6f}", flush=True)

log = np.genfromtxt(result["log"], delimiter=",", names=True)
for e in range(6):
    rows = log[log["epoch"] == e]
    print(f"epoch {e}: total={rows['total'].mean():.2f} "
          f"L_A={rows['L_A_rec'].mean():.4f} L_B={rows['L_B_rec'].mean():.4f} "
          f"L_corr={rows['L_corr'].mean():.4f} L_edge={rows['L_edge'].mean():.2f}", flush=True)
