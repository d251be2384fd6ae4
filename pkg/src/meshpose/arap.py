"""As-rigid-as-possible deformation with cotangent weights.

Alternates per-vertex rotation fitting (SVD of the weighted edge covariance)
with a global sparse position solve while a seeded random subset of vertices
is pinned to its targets.  The Laplacian over free vertices is factored once
per problem and reused across iterations, since only the right-hand side
changes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .mesh import EdgeWeights, Mesh, MeshError, cotangent_weights

__all__ = [
    "ArapError",
    "ArapProblem",
    "arap_energy",
    "fit_rotations",
    "solve_positions",
    "arap_deform",
    "DEFAULT_ANCHOR_FRACTION",
    "DEFAULT_ITERATIONS",
]

DEFAULT_ANCHOR_FRACTION = 0.10
DEFAULT_ITERATIONS = 50


class ArapError(MeshError):
    """Ill-posed deformation problem."""


class ArapProblem:
    """State of one deformation: rest geometry, edge weights, the anchor
    set with targets, per-vertex rotations, and current positions.

    Free vertices start at rest; anchors sit at their targets from the
    start, so the energy is evaluated on feasible configurations only.
    """

    def __init__(self, rest: Mesh, weights: EdgeWeights, anchor_idx, anchor_pos):
        anchor_idx = np.asarray(anchor_idx, dtype=np.int64)
        anchor_pos = np.asarray(anchor_pos, dtype=np.float64)
        if rest.n_vertices < 4:
            raise ArapError(f"need at least 4 vertices, got {rest.n_vertices}")
        if len(np.unique(anchor_idx)) != len(anchor_idx):
            raise ArapError("anchor indices must be distinct")
        if len(anchor_idx) == 0:
            raise ArapError("anchor set is empty")
        if anchor_idx.min() < 0 or anchor_idx.max() >= rest.n_vertices:
            raise ArapError("anchor index out of range")
        if anchor_pos.shape != (len(anchor_idx), 3):
            raise ArapError(f"anchor targets {anchor_pos.shape} != ({len(anchor_idx)}, 3)")
        self.rest = rest
        self.weights = weights
        self.anchor_idx = anchor_idx
        self.anchor_pos = anchor_pos
        n = rest.n_vertices
        self.rotations = np.tile(np.eye(3), (n, 1, 1))
        self.positions = rest.vertices.copy()
        self.positions[anchor_idx] = anchor_pos
        # directed edge lists (each undirected edge twice)
        pairs, vals = weights.pairs, weights.values
        self._src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        self._dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        self._w = np.concatenate([vals, vals])
        self._rest_edges = rest.vertices[self._src] - rest.vertices[self._dst]
        self._factor = None
        self._L_fa = None
        self._free = None

    def _prepare_solver(self):
        if self._factor is not None:
            return
        n = self.rest.n_vertices
        mask = np.ones(n, dtype=bool)
        mask[self.anchor_idx] = False
        free = np.flatnonzero(mask)
        if len(free) == 0:
            self._free = free
            return
        L = self.weights.laplacian().tocsr()
        L_ff = L[free][:, free].tocsc()
        # every free component must reach an anchor, else the system splits.
        # The pattern matrix needs its own storage: eliminate_zeros compacts
        # indices/indptr in place, which must not touch L_ff's arrays.
        pattern = L_ff.tocsr(copy=True)
        pattern.data = np.ones_like(pattern.data)
        pattern.setdiag(0)
        pattern.eliminate_zeros()
        n_comp, labels = csgraph.connected_components(pattern, directed=False)
        L_fa = L[free][:, self.anchor_idx].tocsr()
        anchored = np.zeros(n_comp, dtype=bool)
        touched = np.unique(labels[np.unique(L_fa.nonzero()[0])])
        anchored[touched] = True
        if not anchored.all():
            comp = int(np.flatnonzero(~anchored)[0])
            example = int(free[np.flatnonzero(labels == comp)[0]])
            raise ArapError(
                f"free component {comp} (containing vertex {example}) has no "
                "anchored neighbor; the position system is singular"
            )
        self._free = free
        self._L_fa = L_fa
        self._factor = splu(L_ff)
        self._L_ff = L_ff


def arap_energy(p: ArapProblem) -> float:
    """E = sum_i sum_{j in N(i)} w_ij ||(v^_i - v^_j) - R_i (v_i - v_j)||^2,
    evaluated over both directions of every edge."""
    d = p.positions[p._src] - p.positions[p._dst]
    rotated = np.einsum("nij,nj->ni", p.rotations[p._src], p._rest_edges)
    r = d - rotated
    return float(np.sum(p._w * np.einsum("ni,ni->n", r, r)))


def fit_rotations(p: ArapProblem) -> np.ndarray:
    """Per-vertex optimal rotations from the weighted covariance
    S_i = sum_j w_ij (v_i - v_j)(v^_i - v^_j)^T, via SVD with the reflection
    corrected to det = +1.  Degenerate covariances keep the previous
    rotation.  Updates and returns p.rotations."""
    n = p.rest.n_vertices
    d = p.positions[p._src] - p.positions[p._dst]
    contrib = p._w[:, None, None] * (p._rest_edges[:, :, None] * d[:, None, :])
    S = np.zeros((n, 3, 3))
    np.add.at(S, p._src, contrib)

    U, sig, Vt = np.linalg.svd(S)
    R = np.matmul(Vt.transpose(0, 2, 1), U.transpose(0, 2, 1))
    dets = np.linalg.det(R)
    flip = dets < 0
    if flip.any():
        Vt_f = Vt[flip].copy()
        Vt_f[:, 2, :] *= -1.0
        R[flip] = np.matmul(Vt_f.transpose(0, 2, 1), U[flip].transpose(0, 2, 1))

    degenerate = sig[:, 1] <= 1e-12 * np.maximum(sig[:, 0], 1e-300)
    if degenerate.any():
        R[degenerate] = p.rotations[degenerate]
    p.rotations = R
    return R


def solve_positions(p: ArapProblem) -> np.ndarray:
    """Minimize the energy over free positions with rotations held fixed:
    the weighted-Laplacian system L v^ = b with
    b_i = 1/2 sum_j w_ij (R_i + R_j)(v_i - v_j), anchors moved to the
    right-hand side.  Updates and returns p.positions."""
    p._prepare_solver()
    n = p.rest.n_vertices
    rot_sum = p.rotations[p._src] + p.rotations[p._dst]
    contrib = 0.5 * p._w[:, None] * np.einsum("nij,nj->ni", rot_sum, p._rest_edges)
    b = np.zeros((n, 3))
    np.add.at(b, p._src, contrib)

    positions = np.empty((n, 3))
    positions[p.anchor_idx] = p.anchor_pos
    free = p._free
    if len(free):
        rhs = b[free] - p._L_fa @ p.anchor_pos
        x = p._factor.solve(rhs)
        resid = np.abs(p._L_ff @ x - rhs).max()
        if resid > 1e-10 * max(1.0, np.abs(rhs).max()):
            raise ArapError(f"position solve residual {resid:.3e} too large; singular system?")
        positions[free] = x
    p.positions = positions
    return positions


def arap_deform(
    rest: Mesh,
    target: Mesh,
    anchor_fraction: float = DEFAULT_ANCHOR_FRACTION,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    clamp_negative_weights: bool = False,
    anchors=None,
) -> Mesh:
    """Deform `rest` so a seeded random anchor subset matches `target`.

    ceil(anchor_fraction * N) anchors are drawn without replacement; every
    connected surface component gets at least one anchor so the solve stays
    well-posed.  Rotation fitting and position solving alternate for
    `iterations` rounds.  Pass `anchors` (index array) to pin an explicit
    set instead of sampling.
    """
    if rest.n_vertices != target.n_vertices:
        raise ArapError(
            f"vertex counts differ: rest {rest.n_vertices}, target {target.n_vertices}"
        )
    if rest.faces.shape != target.faces.shape or not np.array_equal(rest.faces, target.faces):
        raise ArapError("rest and target must share an identical face list")
    if not 0 < anchor_fraction <= 1 and anchors is None:
        raise ArapError(f"anchor_fraction must be in (0, 1], got {anchor_fraction}")
    if iterations < 1:
        raise ArapError("iterations must be >= 1")

    weights = cotangent_weights(rest)
    if clamp_negative_weights:
        weights = EdgeWeights(
            weights.n_vertices, weights.pairs, np.maximum(weights.values, 0.0)
        )

    n = rest.n_vertices
    if anchors is None:
        rng = np.random.default_rng(seed)
        count = min(n, math.ceil(anchor_fraction * n))
        anchor_idx = rng.choice(n, size=count, replace=False)
    else:
        anchor_idx = np.asarray(anchors, dtype=np.int64)

    # top up so each connected component holds an anchor
    adj = weights.laplacian()
    n_comp, labels = csgraph.connected_components(
        sparse.csr_matrix(
            (np.ones(adj.nnz), adj.indices, adj.indptr), shape=adj.shape
        ),
        directed=False,
    )
    covered = np.zeros(n_comp, dtype=bool)
    covered[np.unique(labels[anchor_idx])] = True
    extras = [
        int(np.flatnonzero(labels == c)[0])
        for c in range(n_comp)
        if not covered[c]
    ]
    if extras:
        anchor_idx = np.concatenate([anchor_idx, np.array(extras, dtype=np.int64)])

    problem = ArapProblem(rest, weights, anchor_idx, target.vertices[anchor_idx])
    for _ in range(iterations):
        fit_rotations(problem)
        solve_positions(problem)
    return rest.with_vertices(problem.positions)
