"""Anatomy of the wide-data desk task: where PMD comes from (exact eval protocol)."""
import numpy as np

from meshpose import autodiff as ad
from meshpose.generator import GeneratorParams, generate, init_generator_params
from meshpose.mesh import Mesh, center_by_bbox, shuffle_vertices
from meshpose.metrics import pmd
from meshpose.synthetic import generate_synthetic_dataset
from meshpose.training import TrainConfig

cfg = TrainConfig()
ds = generate_synthetic_dataset(cfg.n_identities, cfg.n_poses, cfg.vertices_per_mesh, seed=cfg.seed)

gp0 = init_generator_params(seed=cfg.seed, trunk_widths=cfg.trunk_widths,
                            sinkhorn_epsilon=cfg.sinkhorn_epsilon,
                            sinkhorn_iterations=cfg.sinkhorn_iterations)
gp_sup, _, _ = GeneratorParams.load("/tmp/pilot5_sup/model.ckpt")

rng = np.random.default_rng(12345)
train_poses = cfg.n_poses - cfg.heldout_poses
rows = []
for _ in range(24):
    i_a, i_b = rng.integers(0, ds.n_identities, size=2)
    p_a = int(rng.integers(0, train_poses))
    p_b = int(rng.integers(train_poses, cfg.n_poses))
    id_raw = ds.mesh(int(i_a), p_a)
    pose_raw = ds.mesh(int(i_b), p_b)
    gt = center_by_bbox(ds.mesh(int(i_a), p_b))
    m_a, perm_a = shuffle_vertices(center_by_bbox(id_raw), seed=int(rng.integers(2**31)))
    m_b, _ = shuffle_vertices(center_by_bbox(pose_raw), seed=int(rng.integers(2**31)))

    r = {}
    r["oracle_warp"] = pmd(center_by_bbox(pose_raw), gt)
    r["id_copy"] = pmd(center_by_bbox(id_raw), gt)
    for tag, gp in (("untr", gp0), ("sup", gp_sup)):
        res = generate(m_a, m_b, gp)
        r[f"{tag}_full"] = pmd(center_by_bbox(perm_a.undo(res.output)), gt)
        warp_mesh = perm_a.undo(Mesh(res.v_warp.data, m_a.faces))
        r[f"{tag}_warp"] = pmd(center_by_bbox(warp_mesh), gt)
        r[f"{tag}_dnorm"] = float(np.mean(np.linalg.norm(res.v_out.data - res.v_warp.data, axis=1)))
    rows.append(r)

for key in rows[0]:
    vals = np.array([r[key] for r in rows])
    print(f"{key:12s} mean={vals.mean():.6f}  min={vals.min():.6f}  max={vals.max():.6f}")
