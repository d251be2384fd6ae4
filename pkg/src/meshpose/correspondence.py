"""Shape correspondence as entropic optimal transport.

Cosine correlation between per-vertex features defines the cost Z = 1 - C;
a fixed number of Sinkhorn scaling rounds yields the matching matrix.  The
iteration ends on a row update, so row marginals are exact and warping uses
row-normalized weights (convex combinations of pose vertices).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mesh import Mesh, save_ply

__all__ = [
    "CorrelationMatrix",
    "MatchingMatrix",
    "DEFAULT_EPSILON",
    "DEFAULT_ITERATIONS",
    "correlation_matrix",
    "solve_ot",
    "row_normalize",
    "warp_vertices",
    "warp_pose_mesh",
    "backward_warp",
    "backward_correspondence_loss",
    "export_correspondence_ply",
]

DEFAULT_EPSILON = 0.03
DEFAULT_ITERATIONS = 5

# margin of the log-domain switch: exp(-30) is ~1e-13, far from underflow
_LOG_DOMAIN_RATIO = 30.0


@dataclass
class CorrelationMatrix:
    """Cosine similarities between identity and pose features, in [-1, 1]."""

    values: ad.Tensor  # (N_id, N_pose)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class MatchingMatrix:
    """Nonnegative transport plan with row sums 1/N_id (or 1 once
    row-normalized for warping)."""

    values: ad.Tensor  # (N_id, N_pose)
    epsilon: float
    iterations: int

    @property
    def shape(self):
        return self.values.shape


def _norms(f: ad.Tensor, floor: float = 1e-8) -> ad.Tensor:
    """Per-column Euclidean norms of a (D, N) tensor, clamped below."""
    sq = ad.reduce_sum(ad.mul(f, f), axis=0, keepdims=True)
    n = ad.sqrt(sq)
    # clamp-below as relu(x - floor) + floor: gradient flows where x > floor
    return ad.add(ad.relu(ad.sub(n, floor)), floor)


def correlation_matrix(f_id, f_pose) -> CorrelationMatrix:
    """C(i, j) = cosine(feature column i of identity, column j of pose).

    Accepts FeatureMap-like objects (with ``.features`` of shape (1, D, N))
    or raw (D, N) tensors.  Zero feature vectors get a clamped norm instead
    of an error, so collapsed early-training features yield near-zero rows.
    """
    a = getattr(f_id, "features", f_id)
    b = getattr(f_pose, "features", f_pose)
    if not isinstance(a, ad.Tensor):
        a = ad.constant(a)
    if not isinstance(b, ad.Tensor):
        b = ad.constant(b)
    if a.ndim == 3:
        a = ad.reshape(a, a.shape[1:])
    if b.ndim == 3:
        b = ad.reshape(b, b.shape[1:])
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel widths differ: {a.shape[0]} vs {b.shape[0]}")
    a_hat = ad.div(a, _norms(a))
    b_hat = ad.div(b, _norms(b))
    c = ad.matmul(ad.moveaxis(a_hat, 0, 1), b_hat)
    return CorrelationMatrix(values=c)


def _logsumexp(t: ad.Tensor, axis: int) -> ad.Tensor:
    """Differentiable log-sum-exp with a detached max shift, keepdims."""
    shift = ad.stop_gradient(ad.reduce_max(t, axis=axis, keepdims=True))
    return ad.add(
        ad.log(ad.reduce_sum(ad.exp(ad.sub(t, shift)), axis=axis, keepdims=True)),
        shift,
    )


def _np_logsumexp(t: np.ndarray, axis: int) -> np.ndarray:
    shift = np.max(t, axis=axis, keepdims=True)
    return np.log(np.sum(np.exp(t - shift), axis=axis, keepdims=True)) + shift


def _solve_ot_raw(c: np.ndarray, epsilon: float, i_max: int) -> np.ndarray:
    """The solve_ot iteration on plain arrays, op for op.

    Used when the correlations carry no gradients; building the tape would
    only cost time.  Keep any change here in lockstep with solve_ot so both
    paths produce identical plans.
    """
    n_id, n_pose = c.shape
    z = 1.0 - c
    scaled = z / epsilon
    use_log = (
        scaled.min(axis=1).max() > _LOG_DOMAIN_RATIO
        or scaled.min(axis=0).max() > _LOG_DOMAIN_RATIO
    )
    if use_log:
        log_u = z * (-1.0 / epsilon)
        log_a = np.full((n_id, 1), -np.log(n_id))
        for _ in range(i_max):
            log_b = -np.log(n_pose) - _np_logsumexp(log_u + log_a, axis=0)
            log_a = -np.log(n_id) - _np_logsumexp(log_u + log_b, axis=1)
        return np.exp((log_u + log_a) + log_b)
    u = np.exp(z * (-1.0 / epsilon))
    a = np.full((n_id, 1), 1.0 / n_id)
    col_target = np.full((1, n_pose), 1.0 / n_pose)
    row_target = np.full((n_id, 1), 1.0 / n_id)
    for _ in range(i_max):
        b = col_target / np.sum(u * a, axis=0, keepdims=True)
        a = row_target / np.sum(u * b, axis=1, keepdims=True)
    return (a * u) * b


def solve_ot(
    C: CorrelationMatrix,
    epsilon: float = DEFAULT_EPSILON,
    i_max: int = DEFAULT_ITERATIONS,
) -> MatchingMatrix:
    """Entropic transport between uniform vertex masses, cost Z = 1 - C.

    U = exp(-Z/eps); b and a are alternately rescaled to hit the column and
    row marginals for i_max rounds; T = diag(a) U diag(b).  The final update
    is on a, so row sums equal 1/N_id exactly.  All rounds stay on the tape.

    When any row or column of Z/eps has its minimum above a safety margin,
    exp would lose the entire row to underflow, so the same iteration runs
    in the log domain (mathematically identical).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if i_max < 1:
        raise ValueError(f"i_max must be >= 1, got {i_max}")
    cv = C.values
    n_id, n_pose = cv.shape
    if not cv.requires_grad:
        plan = _solve_ot_raw(cv.data, float(epsilon), int(i_max))
        return MatchingMatrix(values=ad.constant(plan), epsilon=float(epsilon), iterations=int(i_max))
    z = ad.sub(1.0, cv)
    scaled = z.data / epsilon
    use_log = (
        scaled.min(axis=1).max() > _LOG_DOMAIN_RATIO
        or scaled.min(axis=0).max() > _LOG_DOMAIN_RATIO
    )

    if use_log:
        log_u = ad.mul(z, -1.0 / epsilon)
        log_a = ad.constant(np.full((n_id, 1), -np.log(n_id)))
        for _ in range(i_max):
            log_b = ad.sub(-np.log(n_pose), _logsumexp(ad.add(log_u, log_a), axis=0))
            log_a = ad.sub(-np.log(n_id), _logsumexp(ad.add(log_u, log_b), axis=1))
        t = ad.exp(ad.add(ad.add(log_u, log_a), log_b))
    else:
        u = ad.exp(ad.mul(z, -1.0 / epsilon))
        a = ad.constant(np.full((n_id, 1), 1.0 / n_id))
        col_target = ad.constant(np.full((1, n_pose), 1.0 / n_pose))
        row_target = ad.constant(np.full((n_id, 1), 1.0 / n_id))
        for _ in range(i_max):
            ua = ad.reduce_sum(ad.mul(u, a), axis=0, keepdims=True)  # Uᵀa as row
            b = ad.div(col_target, ua)
            ub = ad.reduce_sum(ad.mul(u, b), axis=1, keepdims=True)  # U b as column
            a = ad.div(row_target, ub)
        t = ad.mul(ad.mul(a, u), b)
    return MatchingMatrix(values=t, epsilon=float(epsilon), iterations=int(i_max))


def row_normalize(T: MatchingMatrix) -> MatchingMatrix:
    """Rescale every row to sum to exactly 1; zero rows are an error."""
    sums = ad.reduce_sum(T.values, axis=1, keepdims=True)
    if (sums.data <= 0).any():
        bad = int(np.flatnonzero(sums.data.reshape(-1) <= 0)[0])
        raise ValueError(f"row {bad} of the matching matrix sums to zero")
    return MatchingMatrix(
        values=ad.div(T.values, sums), epsilon=T.epsilon, iterations=T.iterations
    )


def warp_vertices(T_norm: ad.Tensor, v_pose) -> ad.Tensor:
    """V_warp = T_norm @ V_pose; rows of T_norm must sum to 1."""
    if not isinstance(v_pose, ad.Tensor):
        v_pose = ad.constant(v_pose)
    return ad.matmul(T_norm, v_pose)


def warp_pose_mesh(T: MatchingMatrix, v_pose, faces_id) -> Mesh:
    """Move every identity vertex to its transport-weighted average of pose
    vertices, keeping the identity mesh's triangulation.

    ``T`` must already be row-normalized (rows sum to 1 within 1e-6).
    """
    rows = T.values.data.sum(axis=1)
    if not np.allclose(rows, 1.0, atol=1e-6):
        raise ValueError("matching matrix is not row-normalized; call row_normalize")
    faces_id = np.asarray(faces_id, dtype=np.int64)
    if faces_id.size and faces_id.max() >= T.shape[0]:
        raise ValueError(
            f"face index {faces_id.max()} exceeds warped vertex count {T.shape[0]}"
        )
    v = warp_vertices(T.values, v_pose)
    return Mesh(v.data, faces_id)


def backward_warp(T: MatchingMatrix, v_warp) -> ad.Tensor:
    """Reconstruct pose vertices through the transpose plan:
    V'_pose = colnorm(Tᵀ) @ V_warp.  A zero column of T is an error."""
    if not isinstance(v_warp, ad.Tensor):
        v_warp = ad.constant(v_warp)
    tt = ad.moveaxis(T.values, 0, 1)  # (N_pose, N_id)
    sums = ad.reduce_sum(tt, axis=1, keepdims=True)
    if (sums.data <= 0).any():
        bad = int(np.flatnonzero(sums.data.reshape(-1) <= 0)[0])
        raise ValueError(f"column {bad} of the matching matrix sums to zero")
    return ad.matmul(ad.div(tt, sums), v_warp)


def backward_correspondence_loss(T: MatchingMatrix, v_pose) -> ad.Tensor:
    """Round-trip reconstruction error of the pose vertices.

    The pose mesh is warped forward with row-normalized T and pulled back
    with the column-normalized transpose; the loss is the total squared
    deviation from the original vertices (summed, not averaged).
    """
    if not isinstance(v_pose, ad.Tensor):
        v_pose = ad.constant(v_pose)
    t_norm = row_normalize(T)
    v_warp = warp_vertices(t_norm.values, v_pose)
    v_back = backward_warp(T, v_warp)
    diff = ad.sub(v_back, v_pose)
    return ad.reduce_sum(ad.mul(diff, diff))


def export_correspondence_ply(path, mesh_id: Mesh, mesh_pose: Mesh, T: MatchingMatrix) -> None:
    """PLY line set joining each identity vertex to its best-matching pose
    vertex (per-row argmax).  Identity vertices are red, pose blue."""
    n_id = mesh_id.n_vertices
    match = np.argmax(T.values.data, axis=1)
    verts = np.vstack([mesh_id.vertices, mesh_pose.vertices])
    colors = np.vstack(
        [
            np.tile([220, 40, 40], (n_id, 1)),
            np.tile([40, 40, 220], (mesh_pose.n_vertices, 1)),
        ]
    ).astype(np.uint8)
    edges = np.stack([np.arange(n_id), n_id + match], axis=1)
    save_ply(path, verts, colors=colors, edges=edges)
