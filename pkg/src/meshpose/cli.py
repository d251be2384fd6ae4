"""Command-line surface.

Subcommands: gen-data (write a synthetic dataset as OBJ files), train
(config-driven training run), transfer (single-pair pose transfer through
one generator), arap (standalone as-rigid-as-possible refinement), eval
(metric report over prediction/ground-truth directories), corr
(correspondence visualization as a PLY line set).  Any operation error
prints a message to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import training
from .arap import arap_deform
from .correspondence import (
    DEFAULT_EPSILON,
    DEFAULT_ITERATIONS,
    correlation_matrix,
    export_correspondence_ply,
    solve_ot,
)
from .features import extract
from .generator import GeneratorParams, generate, init_generator_params
from .mesh import MeshError, center_by_bbox, load_obj, save_obj
from .metrics import compute_report
from .synthetic import SyntheticDataset

__all__ = ["cli", "main"]


def _cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    ds = SyntheticDataset(args.identities, args.poses, args.vertices, seed=args.seed)
    files = []
    for i in range(args.identities):
        for p in range(args.poses):
            m = ds.mesh(i, p)
            fname = f"{m.name}.obj"
            save_obj(m, os.path.join(args.out, fname))
            files.append(fname)
    sample = ds.mesh(0, 0)
    manifest = {
        "identities": args.identities,
        "poses": args.poses,
        "requested_vertices": args.vertices,
        "actual_vertices": sample.n_vertices,
        "faces": sample.n_faces,
        "seed": args.seed,
        "files": files,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(
        f"wrote {len(files)} meshes ({sample.n_vertices} vertices each) to {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    if args.config is not None:
        cfg = training.load_config(args.config)
    else:
        cfg = training.TrainConfig()
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
        if args.arap_start_epoch is None and cfg.arap_start_epoch > args.epochs:
            overrides["arap_start_epoch"] = args.epochs
    if args.arap_start_epoch is not None:
        overrides["arap_start_epoch"] = args.arap_start_epoch
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    os.makedirs(args.out, exist_ok=True)
    training.save_config(cfg, os.path.join(args.out, "config.txt"))
    ds = SyntheticDataset(
        cfg.n_identities, cfg.n_poses, cfg.vertices_per_mesh, seed=cfg.seed
    )
    result = training.train(ds, cfg, args.out)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"loss log:   {result['log']}")
    if args.eval_pairs > 0:
        stats = training.evaluate_pose_transfer(
            result["params"], ds, cfg, count=args.eval_pairs
        )
        print(
            f"held-out PMD: model {stats['pmd_model']:.6g}, "
            f"identity-copy baseline {stats['pmd_identity_copy']:.6g} "
            f"({len(stats['pairs'])} pairs)"
        )
    return 0


def _cmd_transfer(args) -> int:
    identity = center_by_bbox(load_obj(args.identity))
    pose = center_by_bbox(load_obj(args.pose))
    gp, _, _ = GeneratorParams.load(args.ckpt)
    out = generate(identity, pose, gp).output
    save_obj(out, args.out)
    print(f"wrote {args.out} ({out.n_vertices} vertices, {out.n_faces} faces)")
    return 0


def _cmd_arap(args) -> int:
    rest = load_obj(args.rest)
    target = load_obj(args.target)
    refined = arap_deform(
        rest,
        target,
        anchor_fraction=args.anchor_fraction,
        iterations=args.iterations,
        seed=args.seed,
    )
    save_obj(refined, args.out)
    print(f"wrote {args.out}")
    return 0


def _obj_stems(directory):
    if not os.path.isdir(directory):
        raise MeshError(f"not a directory: {directory}")
    return {
        os.path.splitext(f)[0]: os.path.join(directory, f)
        for f in sorted(os.listdir(directory))
        if f.lower().endswith(".obj")
    }


def _cmd_eval(args) -> int:
    pred = _obj_stems(args.pred_dir)
    gt = _obj_stems(args.gt_dir)
    common = sorted(set(pred) & set(gt))
    if not common:
        raise MeshError(
            f"no matching OBJ stems between {args.pred_dir} and {args.gt_dir}"
        )
    report = compute_report(
        (stem, load_obj(pred[stem]), load_obj(gt[stem])) for stem in common
    )
    print(report.table())
    if args.csv is not None:
        report.write_csv(args.csv)
        print(f"wrote {args.csv}")
    if args.json is not None:
        report.write_json(args.json)
        print(f"wrote {args.json}")
    return 0


def _cmd_corr(args) -> int:
    mesh_a = center_by_bbox(load_obj(args.mesh_a))
    mesh_b = center_by_bbox(load_obj(args.mesh_b))
    if args.ckpt is not None:
        gp, _, _ = GeneratorParams.load(args.ckpt)
    else:
        gp = init_generator_params(seed=args.seed)
    f_a = extract(mesh_a, gp.params, k=gp.k, widths=gp.extractor_widths)
    f_b = extract(mesh_b, gp.params, k=gp.k, widths=gp.extractor_widths)
    t_m = solve_ot(
        correlation_matrix(f_a, f_b), gp.sinkhorn_epsilon, gp.sinkhorn_iterations
    )
    export_correspondence_ply(args.out, mesh_a, mesh_b, t_m)
    print(f"wrote {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshpose",
        description="Unsupervised pose transfer between meshes: optimal-transport "
        "correspondence, a conditioned generator, and ARAP refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic articulated-body dataset")
    g.add_argument("--identities", type=int, default=8)
    g.add_argument("--poses", type=int, default=40)
    g.add_argument("--vertices", type=int, default=600,
                   help="requested vertex count (rounded to the template grid)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train pose transfer on synthetic data")
    t.add_argument("--config", default=None, help="flat key = value config file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--arap-start-epoch", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--mode", choices=["unsupervised", "supervised"], default=None)
    t.add_argument("--eval-pairs", type=int, default=0,
                   help="held-out pairs to score after training (0 = skip)")
    t.set_defaults(func=_cmd_train)

    x = sub.add_parser("transfer", help="transfer the pose of one mesh onto another")
    x.add_argument("identity", help="OBJ providing body shape")
    x.add_argument("pose", help="OBJ providing the pose")
    x.add_argument("-o", "--out", required=True, help="output OBJ path")
    x.add_argument("--ckpt", required=True, help="trained checkpoint path")
    x.set_defaults(func=_cmd_transfer)

    a = sub.add_parser("arap", help="as-rigid-as-possible refinement")
    a.add_argument("rest", help="rest-shape OBJ")
    a.add_argument("target", help="target OBJ (same connectivity)")
    a.add_argument("-o", "--out", required=True, help="output OBJ path")
    a.add_argument("--anchor-fraction", type=float, default=0.1)
    a.add_argument("--iterations", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=_cmd_arap)

    e = sub.add_parser("eval", help="PMD/CD/EMD report over two mesh directories")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--csv", default=None, help="write per-pair rows here")
    e.add_argument("--json", default=None, help="write the aggregate here")
    e.set_defaults(func=_cmd_eval)

    c = sub.add_parser("corr", help="export correspondence lines as PLY")
    c.add_argument("mesh_a", help="identity OBJ")
    c.add_argument("mesh_b", help="pose OBJ")
    c.add_argument("-o", "--out", required=True, help="output PLY path")
    c.add_argument("--ckpt", default=None, help="checkpoint (default: fresh weights)")
    c.add_argument("--seed", type=int, default=0,
                   help="seed for fresh weights when no checkpoint is given")
    c.set_defaults(func=_cmd_corr)
    return parser


def cli(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MeshError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
