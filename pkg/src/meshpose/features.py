"""Per-vertex deep features via a flat ladder of point convolutions.

Each stage gathers k-nearest-neighbor features plus neighbor-relative
coordinates, maps them through a shared affine + LeakyReLU, max-pools over
the neighborhood, concatenates the center's own feature, and applies a
second affine.  Three stages widen channels 32 -> 64 -> 128 with the vertex
count unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mesh import Mesh, MeshError

__all__ = [
    "NeighborIndex",
    "FeatureMap",
    "DEFAULT_K",
    "STAGE_WIDTHS",
    "knn_index",
    "mesh_knn",
    "point_conv",
    "extract",
    "init_extractor_params",
]

DEFAULT_K = 16
STAGE_WIDTHS = (32, 64, 128)


@dataclass(frozen=True)
class NeighborIndex:
    """k nearest neighbors per vertex, nearest first, self excluded."""

    indices: np.ndarray  # (N, k) int64
    k: int

    def __post_init__(self):
        if self.indices.ndim != 2 or self.indices.shape[1] != self.k:
            raise ValueError(f"index array {self.indices.shape} does not match k={self.k}")


@dataclass
class FeatureMap:
    """Stack of per-vertex channels: features has shape (S, D, N)."""

    features: ad.Tensor
    n_vertices: int
    width: int

    def __post_init__(self):
        s = self.features.shape
        if len(s) != 3 or s[1] != self.width or s[2] != self.n_vertices:
            raise ValueError(f"feature tensor {s} inconsistent with (*, {self.width}, {self.n_vertices})")


def knn_index(vertices, k: int) -> NeighborIndex:
    """Brute-force k nearest neighbors by Euclidean distance.

    Ordering is by ascending distance with ties broken toward the lower
    vertex index (stable sort).  A vertex never lists itself, but duplicate
    positions at other indices are legitimate neighbors.
    """
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    if k >= n:
        raise ValueError(f"k={k} must be < vertex count {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    sq = np.sum(v * v, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return NeighborIndex(indices=order[:, :k].astype(np.int64), k=k)


def mesh_knn(mesh: Mesh, k: int = DEFAULT_K) -> NeighborIndex:
    """knn_index over mesh vertices, cached on the mesh per k."""
    cached = mesh._knn_cache.get(k)
    if cached is None:
        cached = knn_index(mesh.vertices, k)
        mesh._knn_cache[k] = cached
    return cached


def point_conv(features: ad.Tensor, coords, idx: NeighborIndex, params: dict, prefix: str) -> ad.Tensor:
    """One neighborhood convolution stage: (S, D_in, N) -> (S, D_out, N).

    params holds `{prefix}.inner_w/inner_b` mapping D_in+4 -> D_out over
    (neighbor feature, neighbor-relative offset, neighbor distance) tuples,
    and `{prefix}.outer_w/outer_b` mapping D_out+D_in -> D_out over the
    pooled neighborhood feature concatenated with the center feature.  The
    distance channel hands each stage a rotation-invariant view of the local
    relief, so surface detail reads the same on a bent limb as on a straight
    one.

    ``coords`` may be a plain array or a tape tensor of shape (N, 3); in the
    tensor case gradients flow into the coordinates through the
    neighbor-relative offsets.
    """
    inner_w = params[f"{prefix}.inner_w"]
    inner_b = params[f"{prefix}.inner_b"]
    outer_w = params[f"{prefix}.outer_w"]
    outer_b = params[f"{prefix}.outer_b"]

    s, d_in, n = features.shape
    kk = idx.k
    if inner_w.shape[1] != d_in + 4:
        raise ValueError(
            f"{prefix}: inner map expects {inner_w.shape[1]} channels, "
            f"got {d_in} features + 3 offsets + 1 distance"
        )

    nbr = ad.take(features, idx.indices, axis=2)  # (S, D_in, N, k)
    if isinstance(coords, ad.Tensor):
        if coords.shape != (n, 3):
            raise ValueError(f"coords {coords.shape} do not match N={n}")
        if s != 1:
            raise ValueError("tape coordinates require a single-sample batch")
        nbrc = ad.take(coords, idx.indices, axis=0)  # (N, k, 3)
        rel = ad.sub(nbrc, ad.reshape(coords, (n, 1, 3)))
        d2 = ad.reduce_sum(ad.mul(rel, rel), axis=2)  # (N, k)
        dist = ad.reshape(ad.sqrt(ad.add(d2, 1e-12)), (1, 1, n, kk))
        rel = ad.reshape(ad.moveaxis(rel, 2, 0), (1, 3, n, kk))
        geo = ad.concat([rel, dist], axis=1)  # (1, 4, N, k)
    else:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (n, 3):
            raise ValueError(f"coords {coords.shape} do not match N={n}")
        rel_np = coords[idx.indices] - coords[:, None, :]  # (N, k, 3)
        dist_np = np.linalg.norm(rel_np, axis=2)  # (N, k)
        geo_np = np.concatenate([np.transpose(rel_np, (2, 0, 1)), dist_np[None]], axis=0)
        geo = ad.constant(np.broadcast_to(geo_np[None], (s, 4, n, kk)).copy())
    stacked = ad.concat([nbr, geo], axis=1)  # (S, D_in+4, N, k)

    flat = ad.reshape(stacked, (s, d_in + 4, n * kk))
    mapped = ad.leaky_relu(ad.conv1d_pointwise(flat, inner_w, inner_b))
    pooled = ad.reduce_max(ad.reshape(mapped, (s, inner_w.shape[0], n, kk)), axis=3)

    combined = ad.concat([pooled, features], axis=1)  # (S, D_out+D_in, N)
    return ad.leaky_relu(ad.conv1d_pointwise(combined, outer_w, outer_b))


def extract(mesh: Mesh, params: dict, k: int = DEFAULT_K, widths=STAGE_WIDTHS, coords=None) -> FeatureMap:
    """Three point_conv stages over the mesh; stage-1 input features are the
    raw vertex coordinates.  Output width is the last stage width, vertex
    count is unchanged.

    Pass ``coords`` (a tape tensor carrying the same coordinates as
    ``mesh.vertices``) to keep the input geometry differentiable; neighbor
    indices are still built from the mesh.
    """
    if mesh.n_vertices <= k:
        raise MeshError(f"mesh with {mesh.n_vertices} vertices is too small for k={k}")
    idx = mesh_knn(mesh, k)
    if coords is None:
        coords = mesh.vertices
        h = ad.constant(coords.T[None])  # (1, 3, N)
    else:
        if not isinstance(coords, ad.Tensor):
            raise TypeError("coords must be a tape tensor; omit it for plain arrays")
        if not np.array_equal(coords.data, mesh.vertices):
            raise ValueError("coords disagree with mesh.vertices")
        h = ad.moveaxis(ad.reshape(coords, (1, mesh.n_vertices, 3)), 1, 2)
    for stage in range(len(widths)):
        h = point_conv(h, coords, idx, params, prefix=f"ext{stage}")
    return FeatureMap(features=h, n_vertices=mesh.n_vertices, width=widths[-1])


def _fan_in_uniform(rng, shape):
    fan_in = shape[1] if len(shape) > 1 else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_extractor_params(rng, widths=STAGE_WIDTHS) -> dict:
    """Fresh extractor parameters as requires-grad tensors."""
    params = {}
    d_in = 3
    for stage, d_out in enumerate(widths):
        p = f"ext{stage}"
        params[f"{p}.inner_w"] = ad.parameter(_fan_in_uniform(rng, (d_out, d_in + 3)))
        params[f"{p}.inner_b"] = ad.parameter(np.zeros(d_out))
        params[f"{p}.outer_w"] = ad.parameter(_fan_in_uniform(rng, (d_out, d_out + d_in)))
        params[f"{p}.outer_b"] = ad.parameter(np.zeros(d_out))
        d_in = d_out
    return params
