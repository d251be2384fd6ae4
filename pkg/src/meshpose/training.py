"""Training loop: dual reconstruction with shared-parameter generators.

One parameter set serves three generator roles per step: the main pass maps
(identity A, pose B) to an output mesh, and two auxiliary passes must
rebuild both inputs from that output.  In late epochs the output is refined
by the rigid deformer before re-entering the auxiliary passes; the refiner
runs off the tape and its result is spliced in with a straight-through
gradient.  A supervised single-generator mode trains against ground-truth
targets instead.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .arap import arap_deform
from .correspondence import backward_correspondence_loss
from .generator import (
    DESK_TRUNK_WIDTHS,
    GeneratorParams,
    generate,
    init_generator_params,
)
from .mesh import Mesh, center_by_bbox, shuffle_vertices
from .synthetic import SyntheticDataset, generate_synthetic_dataset

__all__ = [
    "TrainConfig",
    "MeshPairBatch",
    "reconstruction_loss",
    "edge_loss",
    "dual_step",
    "supervised_step",
    "train",
    "build_pairs",
    "evaluate_pose_transfer",
    "load_config",
    "save_config",
    "generate_synthetic_dataset",
]

LOG_COLUMNS = ["epoch", "step", "L_A_rec", "L_B_rec", "L_corr", "L_edge", "total", "lr"]


@dataclass
class TrainConfig:
    lambda_rec: float = 2000.0
    lambda_corr: float = 200.0
    epochs: int = 60
    arap_start_epoch: int = 45
    lr: float = 1e-4
    batch_size: int = 4
    sinkhorn_epsilon: float = 0.03
    sinkhorn_iterations: int = 5
    anchor_fraction: float = 0.10
    arap_iterations: int = 50
    seed: int = 0
    mode: str = "unsupervised"
    pairs_per_epoch: int = 48
    trunk_widths: tuple = DESK_TRUNK_WIDTHS
    n_identities: int = 8
    n_poses: int = 40
    heldout_poses: int = 8
    vertices_per_mesh: int = 600
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_rec <= 0:
            raise ValueError(f"lambda_rec must be > 0, got {self.lambda_rec}")
        if self.lambda_corr < 0:
            raise ValueError(f"lambda_corr must be >= 0, got {self.lambda_corr}")
        if self.arap_start_epoch > self.epochs:
            raise ValueError("arap_start_epoch must be <= epochs")
        if self.mode not in ("unsupervised", "supervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.heldout_poses >= self.n_poses:
            raise ValueError("heldout_poses must leave at least one training pose")
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)

    def learning_rate(self, epoch: int) -> float:
        """Constant for the first half of training, then a straight line
        toward zero (the final epoch runs at lr/(epochs - half))."""
        half = self.epochs // 2
        if epoch < half or self.epochs <= 1:
            return self.lr
        span = self.epochs - half
        return self.lr * (1.0 - (epoch - half) / span)


@dataclass
class MeshPairBatch:
    """Training items: (M_A, M_B) mesh pairs, independently shuffled and
    centered; ``gts`` aligns ground-truth targets to each M_A's vertex order
    in supervised mode, and stays None when training without labels."""

    pairs: list
    gts: list | None = None

    def __len__(self):
        return len(self.pairs)


# -------------------------------------------------------------------- losses


def _coords_of(obj) -> ad.Tensor:
    if isinstance(obj, ad.Tensor):
        return obj
    if isinstance(obj, Mesh):
        return ad.constant(obj.vertices)
    raise TypeError(f"expected Mesh or tensor, got {type(obj).__name__}")


def reconstruction_loss(recon, original) -> ad.Tensor:
    """Summed squared coordinate difference between two vertex sets in the
    same order (not averaged: the loss weights expect totals)."""
    a = _coords_of(recon)
    b = _coords_of(original)
    if a.shape != b.shape:
        raise ValueError(f"vertex arrays differ in shape: {a.shape} vs {b.shape}")
    d = ad.sub(a, b)
    return ad.reduce_sum(ad.mul(d, d))


def edge_loss(mesh: Mesh, coords=None) -> ad.Tensor:
    """Sum over every vertex and its one-ring of squared edge lengths; each
    edge is counted from both endpoints.  ``coords`` may carry the vertex
    positions on the tape (topology always comes from the mesh)."""
    if mesh.n_faces == 0:
        raise ValueError("edge loss needs faces")
    v = _coords_of(coords if coords is not None else mesh)
    edges = mesh.edges()
    d = ad.sub(ad.take(v, edges[:, 0], axis=0), ad.take(v, edges[:, 1], axis=0))
    return ad.mul(2.0, ad.reduce_sum(ad.mul(d, d)))


# --------------------------------------------------------------------- steps


def _loss_breakdown(l_a, l_b, l_corr, l_edge, cfg) -> dict:
    total = ad.add(
        ad.mul(cfg.lambda_rec, ad.add(l_a, l_b)),
        ad.add(ad.mul(cfg.lambda_corr, l_corr) if l_corr is not None else ad.constant(0.0), l_edge),
    )
    return {
        "L_A_rec": l_a,
        "L_B_rec": l_b,
        "L_corr": l_corr if l_corr is not None else ad.constant(0.0),
        "L_edge": l_edge,
        "total": total,
    }


def dual_step(pair, gp: GeneratorParams, cfg: TrainConfig, epoch: int = 0, arap_seed: int = 0) -> dict:
    """One unsupervised item: main pass, optional rigid refinement, and the
    two reconstruction passes, all through one shared parameter set.

    Returns the loss breakdown as live tensors (keys L_A_rec, L_B_rec,
    L_corr, L_edge, total) plus the main output under "output".
    """
    m_a, m_b = pair
    res = generate(m_a, m_b, gp)

    l_corr = None
    if cfg.lambda_corr > 0:
        l_corr = backward_correspondence_loss(res.matching, m_b.vertices)

    l_edge = edge_loss(res.output, coords=res.v_out)

    if epoch >= cfg.arap_start_epoch:
        refined = arap_deform(
            m_a,
            res.output,
            anchor_fraction=cfg.anchor_fraction,
            iterations=cfg.arap_iterations,
            seed=arap_seed,
        )
        v_hat = ad.stop_gradient(res.v_out, straight_through=True, value=refined.vertices)
        m_hat = refined
    else:
        v_hat = res.v_out
        m_hat = res.output

    res_a = generate(m_hat, m_a, gp, identity_coords=v_hat)
    res_b = generate(m_b, m_hat, gp, pose_coords=v_hat)
    l_a = reconstruction_loss(res_a.v_out, m_a)
    l_b = reconstruction_loss(res_b.v_out, m_b)

    out = _loss_breakdown(l_a, l_b, l_corr, l_edge, cfg)
    out["output"] = res.output
    return out


def supervised_step(triple, gp: GeneratorParams, cfg: TrainConfig) -> dict:
    """One supervised item: a single generator pass against a ground-truth
    mesh already reordered to the identity mesh's vertex order."""
    m_id, m_pose, gt = triple
    if gt.n_vertices != m_id.n_vertices:
        raise ValueError(
            f"ground truth has {gt.n_vertices} vertices, identity {m_id.n_vertices}"
        )
    res = generate(m_id, m_pose, gp)
    l_rec = reconstruction_loss(res.v_out, gt)
    l_corr = None
    if cfg.lambda_corr > 0:
        l_corr = backward_correspondence_loss(res.matching, m_pose.vertices)
    l_edge = edge_loss(res.output, coords=res.v_out)
    out = _loss_breakdown(l_rec, ad.constant(0.0), l_corr, l_edge, cfg)
    out["output"] = res.output
    return out


# ------------------------------------------------------------------ training


def _prepared(mesh: Mesh, seed: int):
    """Standard input conditioning: center, then randomly relabel vertices."""
    return shuffle_vertices(center_by_bbox(mesh), seed)


def build_pairs(dataset: SyntheticDataset, cfg: TrainConfig, epoch: int = 0) -> MeshPairBatch:
    """Pool of training pairs for one epoch, a pure function of (seed, epoch)
    so every epoch sees a fresh draw.

    Pairs draw identities and training poses (held-out pose indices at the
    tail are never used).  In supervised mode each item also carries
    mesh(identity_A, pose_B) rebuilt in M_A's vertex order.
    """
    rng = np.random.default_rng([cfg.seed, 11, epoch])
    train_poses = cfg.n_poses - cfg.heldout_poses
    pairs, gts = [], []
    for k in range(cfg.pairs_per_epoch):
        i_a, i_b = rng.integers(0, dataset.n_identities, size=2)
        p_a, p_b = rng.integers(0, train_poses, size=2)
        m_a, perm_a = _prepared(dataset.mesh(int(i_a), int(p_a)), seed=int(rng.integers(2**31)))
        m_b, _ = _prepared(dataset.mesh(int(i_b), int(p_b)), seed=int(rng.integers(2**31)))
        pairs.append((m_a, m_b))
        if cfg.mode == "supervised":
            gt = center_by_bbox(dataset.mesh(int(i_a), int(p_b)))
            gts.append(perm_a.apply(gt))
    return MeshPairBatch(pairs=pairs, gts=gts if cfg.mode == "supervised" else None)


def train(dataset: SyntheticDataset, cfg: TrainConfig, out_dir: str) -> dict:
    """Config-driven optimization; writes a CSV loss log and checkpoints.

    Returns {"params": GeneratorParams, "checkpoint": path, "log": path}.
    A non-finite loss aborts with the offending batch id.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "loss_log.csv")
    ckpt_path = os.path.join(out_dir, "model.ckpt")

    gp = init_generator_params(
        seed=cfg.seed,
        trunk_widths=cfg.trunk_widths,
        sinkhorn_epsilon=cfg.sinkhorn_epsilon,
        sinkhorn_iterations=cfg.sinkhorn_iterations,
    )
    state = ad.AdamState(gp.params, lr=cfg.lr)
    order_rng = np.random.default_rng([cfg.seed, 13])

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        step = 0
        for epoch in range(cfg.epochs):
            batch = build_pairs(dataset, cfg, epoch)
            state.lr = cfg.learning_rate(epoch)
            order = order_rng.permutation(len(batch))
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                sums = dict.fromkeys(["L_A_rec", "L_B_rec", "L_corr", "L_edge", "total"], 0.0)
                for j in chunk:
                    if cfg.mode == "supervised":
                        m_a, m_b = batch.pairs[j]
                        parts = supervised_step((m_a, m_b, batch.gts[j]), gp, cfg)
                    else:
                        parts = dual_step(
                            batch.pairs[j], gp, cfg, epoch=epoch,
                            arap_seed=int(np.random.default_rng([cfg.seed, 17, epoch, int(j)]).integers(2**31)),
                        )
                    total = parts["total"]
                    if not np.isfinite(total.data).all():
                        raise RuntimeError(
                            f"non-finite loss in epoch {epoch}, batch starting at step {step}, item {int(j)}"
                        )
                    ad.backward(ad.mul(total, 1.0 / len(chunk)))
                    for key in sums:
                        sums[key] += parts[key].item() / len(chunk)
                ad.adam_step(gp.params, None, state)
                writer.writerow(
                    [epoch, step]
                    + [f"{sums[k]:.10g}" for k in ("L_A_rec", "L_B_rec", "L_corr", "L_edge", "total")]
                    + [f"{state.lr:.10g}"]
                )
                step += 1
            fh.flush()
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                gp.save(os.path.join(out_dir, f"model_ep{epoch + 1:04d}.ckpt"), step=step)
    gp.save(ckpt_path, step=step, extra={"epochs": cfg.epochs, "mode": cfg.mode})
    return {"params": gp, "checkpoint": ckpt_path, "log": log_path}


# ---------------------------------------------------------------- evaluation


def evaluate_pose_transfer(
    gp: GeneratorParams,
    dataset: SyntheticDataset,
    cfg: TrainConfig,
    count: int = 24,
    seed: int = 12345,
) -> dict:
    """Held-out protocol: identity mesh in a training pose, pose mesh in a
    held-out pose, ground truth = identity's body in the held-out pose.

    Outputs are mapped back to template vertex order and re-centered before
    comparison.  Returns mean PMD for the model and for the identity-copy
    baseline, plus per-pair rows.
    """
    from .metrics import pmd

    rng = np.random.default_rng(seed)
    train_poses = cfg.n_poses - cfg.heldout_poses
    rows = []
    for _ in range(count):
        i_a, i_b = rng.integers(0, dataset.n_identities, size=2)
        p_a = int(rng.integers(0, train_poses))
        p_b = int(rng.integers(train_poses, cfg.n_poses))
        id_raw = dataset.mesh(int(i_a), p_a)
        pose_raw = dataset.mesh(int(i_b), p_b)
        gt = center_by_bbox(dataset.mesh(int(i_a), p_b))

        m_a, perm_a = _prepared(id_raw, seed=int(rng.integers(2**31)))
        m_b, _ = _prepared(pose_raw, seed=int(rng.integers(2**31)))
        res = generate(m_a, m_b, gp)
        out_template = center_by_bbox(perm_a.undo(res.output))

        rows.append(
            {
                "identity": int(i_a),
                "pose_source": int(i_b),
                "pose": p_b,
                "pmd": pmd(out_template, gt),
                "pmd_identity_copy": pmd(center_by_bbox(id_raw), gt),
            }
        )
    return {
        "pmd_model": float(np.mean([r["pmd"] for r in rows])),
        "pmd_identity_copy": float(np.mean([r["pmd_identity_copy"] for r in rows])),
        "pairs": rows,
    }


# -------------------------------------------------------------------- config


_TUPLE_FIELDS = {"trunk_widths"}


def save_config(cfg: TrainConfig, path) -> None:
    """Flat key = value file mirroring TrainConfig fields."""
    with open(path, "w") as fh:
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if f.name in _TUPLE_FIELDS:
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")


def load_config(path) -> TrainConfig:
    """Parse the flat key = value format; unknown keys are an error."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in _TUPLE_FIELDS:
                values[key] = tuple(int(v) for v in val.split(","))
            elif fields[key].type in ("int", int):
                values[key] = int(val)
            elif fields[key].type in ("float", float):
                values[key] = float(val)
            else:
                values[key] = val
    return TrainConfig(**values)
