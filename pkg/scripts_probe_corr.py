"""Matching quality probe: argmax accuracy and plan sharpness per checkpoint.

True correspondence on synthetic data: template vertex k of one mesh matches
template vertex k of any other.  After undoing eval shuffles, T row i should
put its mass at column i.
"""
import sys

import numpy as np

from meshpose.generator import GeneratorParams, generate, init_generator_params
from meshpose.mesh import center_by_bbox, shuffle_vertices
from meshpose.synthetic import generate_synthetic_dataset
from meshpose.training import TrainConfig

cfg = TrainConfig()
ds = generate_synthetic_dataset(8, 40, 600, seed=0)


def probe(gp, count=12, seed=12345):
    rng = np.random.default_rng(seed)
    train_poses = cfg.n_poses - cfg.heldout_poses
    hit, rad, ent = [], [], []
    for _ in range(count):
        i_a, i_b = rng.integers(0, ds.n_identities, size=2)
        p_a = int(rng.integers(0, train_poses))
        p_b = int(rng.integers(train_poses, cfg.n_poses))
        id_raw = ds.mesh(int(i_a), p_a)
        pose_raw = ds.mesh(int(i_b), p_b)
        m_a, perm_a = shuffle_vertices(center_by_bbox(id_raw), seed=int(rng.integers(2**31)))
        m_b, perm_b = shuffle_vertices(center_by_bbox(pose_raw), seed=int(rng.integers(2**31)))
        res = generate(m_a, m_b, gp)
        t = res.matching.values.data  # (N, N) in shuffled orders
        # map back to template indexing on both sides: shuffled row forward[i]
        # is template vertex i
        t_tpl = t[perm_a.forward][:, perm_b.forward]
        am = np.argmax(t_tpl, axis=1)
        n = len(am)
        # geometric miss distance in the pose mesh's frame
        vb = center_by_bbox(pose_raw).vertices
        miss = np.linalg.norm(vb[am] - vb[np.arange(n)], axis=1)
        hit.append(float(np.mean(miss < 0.05)))
        rad.append(float(np.mean(miss)))
        rows = t_tpl / t_tpl.sum(axis=1, keepdims=True)
        ent.append(float(np.mean(-np.sum(rows * np.log(rows + 1e-300), axis=1))))
    return float(np.mean(hit)), float(np.mean(rad)), float(np.mean(ent))


if __name__ == "__main__":
    paths = sys.argv[1:]
    if not paths:
        gp = init_generator_params(seed=0, trunk_widths=cfg.trunk_widths)
        h, r, e = probe(gp)
        print(f"fresh: hit@0.05={h:.3f} miss_dist={r:.4f} row_entropy={e:.3f} (uniform={np.log(580):.3f})")
    for path in paths:
        gp, _, _ = GeneratorParams.load(path)
        h, r, e = probe(gp)
        print(f"{path}: hit@0.05={h:.3f} miss_dist={r:.4f} row_entropy={e:.3f}")
