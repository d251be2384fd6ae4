"""Estimator-style wrappers with the familiar fit/transform surface.

PoseTransfer trains the correspondence + generator stack on a synthetic
dataset and then maps (identity mesh, pose mesh) pairs to deformed output
meshes.  ArapDeformer wraps as-rigid-as-possible refinement of a fitted
rest mesh toward target meshes.  Both follow scikit-learn conventions:
constructor stores hyperparameters untouched, fitted state lives in
trailing-underscore attributes, get_params/set_params work for free.
"""

from __future__ import annotations

import os
import tempfile

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import training
from .arap import arap_deform
from .generator import DESK_TRUNK_WIDTHS, GeneratorParams, generate
from .mesh import Mesh, center_by_bbox
from .synthetic import SyntheticDataset

__all__ = ["PoseTransfer", "ArapDeformer", "check_mesh", "check_mesh_pairs"]


def check_mesh(obj, name: str = "mesh") -> Mesh:
    if not isinstance(obj, Mesh):
        raise TypeError(f"{name} must be a Mesh, got {type(obj).__name__}")
    return obj


def check_mesh_pairs(x):
    """Validate a sequence of (identity, pose) mesh pairs."""
    pairs = list(x)
    for i, item in enumerate(pairs):
        if not isinstance(item, (tuple, list)) or len(item) != 2:
            raise TypeError(f"item {i}: expected an (identity, pose) pair")
        check_mesh(item[0], f"item {i} identity")
        check_mesh(item[1], f"item {i} pose")
    return pairs


class PoseTransfer(BaseEstimator):
    """Unsupervised pose transfer between meshes of the same connectivity
    class.

    fit(X) expects a SyntheticDataset (or None, in which case one is
    generated from the dataset_* hyperparameters).  transform(X) maps an
    iterable of (identity_mesh, pose_mesh) pairs to output meshes carrying
    the identity's shape in the pose mesh's pose.  Inputs are centered
    before inference; outputs stay in the centered frame.
    """

    def __init__(
        self,
        epochs: int = 60,
        arap_start_epoch=None,
        lr: float = 1e-4,
        lambda_rec: float = 2000.0,
        lambda_corr: float = 200.0,
        batch_size: int = 4,
        pairs_per_epoch: int = 48,
        trunk_widths=DESK_TRUNK_WIDTHS,
        sinkhorn_epsilon: float = 0.03,
        sinkhorn_iterations: int = 5,
        anchor_fraction: float = 0.1,
        arap_iterations: int = 50,
        mode: str = "unsupervised",
        dataset_identities: int = 8,
        dataset_poses: int = 40,
        dataset_vertices: int = 600,
        heldout_poses: int = 8,
        seed: int = 0,
        work_dir=None,
    ):
        self.epochs = epochs
        self.arap_start_epoch = arap_start_epoch
        self.lr = lr
        self.lambda_rec = lambda_rec
        self.lambda_corr = lambda_corr
        self.batch_size = batch_size
        self.pairs_per_epoch = pairs_per_epoch
        self.trunk_widths = trunk_widths
        self.sinkhorn_epsilon = sinkhorn_epsilon
        self.sinkhorn_iterations = sinkhorn_iterations
        self.anchor_fraction = anchor_fraction
        self.arap_iterations = arap_iterations
        self.mode = mode
        self.dataset_identities = dataset_identities
        self.dataset_poses = dataset_poses
        self.dataset_vertices = dataset_vertices
        self.heldout_poses = heldout_poses
        self.seed = seed
        self.work_dir = work_dir

    def _config(self) -> training.TrainConfig:
        start = self.arap_start_epoch
        if start is None:
            start = max(0, (self.epochs * 3) // 4)
        return training.TrainConfig(
            lambda_rec=self.lambda_rec,
            lambda_corr=self.lambda_corr,
            epochs=self.epochs,
            arap_start_epoch=start,
            lr=self.lr,
            batch_size=self.batch_size,
            sinkhorn_epsilon=self.sinkhorn_epsilon,
            sinkhorn_iterations=self.sinkhorn_iterations,
            anchor_fraction=self.anchor_fraction,
            arap_iterations=self.arap_iterations,
            seed=self.seed,
            mode=self.mode,
            pairs_per_epoch=self.pairs_per_epoch,
            trunk_widths=tuple(self.trunk_widths),
            n_identities=self.dataset_identities,
            n_poses=self.dataset_poses,
            heldout_poses=self.heldout_poses,
            vertices_per_mesh=self.dataset_vertices,
        )

    def fit(self, X=None, y=None):
        cfg = self._config()
        if X is None:
            X = SyntheticDataset(
                cfg.n_identities, cfg.n_poses, cfg.vertices_per_mesh, seed=cfg.seed
            )
        if not isinstance(X, SyntheticDataset):
            raise TypeError(
                f"fit expects a SyntheticDataset or None, got {type(X).__name__}"
            )
        out_dir = self.work_dir or tempfile.mkdtemp(prefix="posetransfer_")
        os.makedirs(out_dir, exist_ok=True)
        result = training.train(X, cfg, out_dir)
        self.params_ = result["params"]
        self.checkpoint_path_ = result["checkpoint"]
        self.log_path_ = result["log"]
        self.config_ = cfg
        self.dataset_ = X
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this PoseTransfer instance is not fitted yet; call fit first"
            )

    def transform(self, X):
        self._check_fitted()
        outputs = []
        for identity, pose in check_mesh_pairs(X):
            res = generate(center_by_bbox(identity), center_by_bbox(pose), self.params_)
            outputs.append(res.output)
        return outputs

    def predict(self, X):
        return self.transform(X)

    def score(self, X=None, y=None) -> float:
        """Negative held-out PMD on the fitted dataset (higher is better)."""
        self._check_fitted()
        stats = training.evaluate_pose_transfer(self.params_, self.dataset_, self.config_)
        return -stats["pmd_model"]

    def load_params(self, path):
        """Adopt a previously saved checkpoint instead of fitting."""
        gp, _, _ = GeneratorParams.load(path)
        self.params_ = gp
        self.checkpoint_path_ = str(path)
        self.log_path_ = None
        self.config_ = self._config()
        self.dataset_ = None
        return self


class ArapDeformer(BaseEstimator, TransformerMixin):
    """As-rigid-as-possible deformation of a fitted rest mesh toward targets.

    fit(X) stores the rest mesh; transform(X) accepts one target mesh or a
    sequence of them (same connectivity as the rest mesh) and returns the
    refined mesh(es).
    """

    def __init__(self, anchor_fraction: float = 0.1, iterations: int = 50, seed: int = 0):
        self.anchor_fraction = anchor_fraction
        self.iterations = iterations
        self.seed = seed

    def fit(self, X, y=None):
        self.rest_ = check_mesh(X, "rest mesh")
        return self

    def _deform_one(self, target: Mesh) -> Mesh:
        return arap_deform(
            self.rest_,
            target,
            anchor_fraction=self.anchor_fraction,
            iterations=self.iterations,
            seed=self.seed,
        )

    def transform(self, X):
        if not hasattr(self, "rest_"):
            raise NotFittedError(
                "this ArapDeformer instance is not fitted yet; call fit first"
            )
        if isinstance(X, Mesh):
            return self._deform_one(X)
        return [self._deform_one(check_mesh(m, f"target {i}")) for i, m in enumerate(X)]
