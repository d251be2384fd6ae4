"""Triangle mesh container, OBJ/PLY I/O, preprocessing and adjacency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mesh",
    "MeshError",
    "ObjParseError",
    "VertexPermutation",
    "EdgeWeights",
    "load_obj",
    "save_obj",
    "save_ply",
    "center_by_bbox",
    "shuffle_vertices",
    "one_ring",
    "cotangent_weights",
]


class MeshError(ValueError):
    """Invalid mesh data or mesh operation."""


class ObjParseError(MeshError):
    """OBJ file could not be parsed; carries the offending line number."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class Mesh:
    """Immutable triangle mesh: double-precision vertices plus integer faces.

    Vertices are an (N, 3) array in model units, faces an (F, 3) array of
    vertex indices.  Face indices must be in range and no face may repeat a
    vertex.  Arrays are frozen after construction so meshes can be shared
    freely across threads.
    """

    __slots__ = ("vertices", "faces", "name", "_adjacency", "_knn_cache")

    def __init__(self, vertices, faces, name=None):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {vertices.shape}")
        if not np.isfinite(vertices).all():
            bad = int(np.flatnonzero(~np.isfinite(vertices).all(axis=1))[0])
            raise MeshError(f"vertex {bad} has a non-finite coordinate")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise MeshError(
                    f"face index out of range [0, {len(vertices)}): "
                    f"min={faces.min()}, max={faces.max()}"
                )
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if degenerate.any():
                raise MeshError(
                    f"face {int(np.flatnonzero(degenerate)[0])} repeats a vertex index"
                )
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "_adjacency", None)
        object.__setattr__(self, "_knn_cache", {})

    def __setattr__(self, key, value):
        raise AttributeError("Mesh is immutable")

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def with_vertices(self, vertices, name=None):
        """Same topology, new vertex positions."""
        return Mesh(vertices, self.faces, name=name if name is not None else self.name)

    def edges(self):
        """Unique undirected edges as an (E, 2) array with i < j."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def adjacency(self):
        """Per-vertex neighbor lists (vertices sharing a face edge)."""
        if self._adjacency is None:
            nbrs = [[] for _ in range(self.n_vertices)]
            for i, j in self.edges():
                nbrs[i].append(j)
                nbrs[j].append(i)
            adj = [np.array(sorted(n), dtype=np.int64) for n in nbrs]
            object.__setattr__(self, "_adjacency", adj)
        return self._adjacency

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Mesh(n_vertices={self.n_vertices}, n_faces={self.n_faces}{tag})"


@dataclass(frozen=True)
class VertexPermutation:
    """Relabeling of mesh vertices; forward maps old index -> new index."""

    forward: np.ndarray
    inverse: np.ndarray = None

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int64)
        n = len(fwd)
        counts = np.zeros(n, dtype=np.int64)
        if fwd.min(initial=0) < 0 or fwd.max(initial=-1) >= n:
            raise MeshError("forward map has out-of-range entries")
        np.add.at(counts, fwd, 1)
        if not np.all(counts == 1):
            raise MeshError("forward map is not a permutation")
        inv = self.inverse if self.inverse is not None else np.argsort(fwd)
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "inverse", np.asarray(inv, dtype=np.int64))

    def apply(self, mesh: Mesh) -> Mesh:
        """Reorder vertices by this permutation, reindexing faces to match."""
        new_vertices = np.empty_like(mesh.vertices)
        new_vertices[self.forward] = mesh.vertices
        return Mesh(new_vertices, self.forward[mesh.faces], name=mesh.name)

    def undo(self, mesh: Mesh) -> Mesh:
        """Inverse relabeling; undo(apply(m)) == m."""
        return VertexPermutation(self.inverse, self.forward).apply(mesh)

    def reorder_rows(self, array: np.ndarray) -> np.ndarray:
        """Apply the relabeling to any per-vertex row array."""
        out = np.empty_like(array)
        out[self.forward] = array
        return out


class EdgeWeights:
    """Sparse symmetric per-edge weights, defined on face edges only."""

    def __init__(self, n_vertices, pairs, values):
        pairs = np.asarray(pairs, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        self.n_vertices = int(n_vertices)
        self.pairs = pairs[order]  # canonical i < j rows
        self.values = values[order]
        self._lookup = None

    def __len__(self):
        return len(self.values)

    def weight(self, i, j):
        if self._lookup is None:
            self._lookup = {
                (int(a), int(b)): float(w)
                for (a, b), w in zip(self.pairs, self.values)
            }
        key = (i, j) if i < j else (j, i)
        if key not in self._lookup:
            raise KeyError(f"no weight for vertex pair {(i, j)}; not a face edge")
        return self._lookup[key]

    def laplacian(self):
        """Weighted graph Laplacian L = D - W as a CSR matrix."""
        from scipy import sparse

        i, j = self.pairs[:, 0], self.pairs[:, 1]
        w = self.values
        rows = np.concatenate([i, j, i, j])
        cols = np.concatenate([j, i, i, j])
        vals = np.concatenate([-w, -w, w, w])
        n = self.n_vertices
        return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def load_obj(path) -> Mesh:
    """Parse an ASCII OBJ triangle mesh (v/f records, 1-based indices).

    Faces with normal/texture suffixes ("f 1/2/3 ...") keep only the vertex
    index.  Non-triangular faces and out-of-range indices are rejected with
    the offending line number.
    """
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(path, lineno, "vertex record needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise ObjParseError(path, lineno, f"bad vertex coordinate: {exc}")
            elif tag == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise ObjParseError(
                        path, lineno, f"non-triangular face with {len(corners)} corners"
                    )
                idx = []
                for c in corners:
                    token = c.split("/")[0]
                    try:
                        k = int(token)
                    except ValueError:
                        raise ObjParseError(path, lineno, f"bad face index {token!r}")
                    if k <= 0:
                        raise ObjParseError(path, lineno, f"index out of range: {k}")
                    idx.append(k - 1)
                faces.append(idx)
            # other record types (vn, vt, o, g, s, usemtl, ...) are ignored
    n = len(vertices)
    for fi, tri in enumerate(faces):
        if max(tri) >= n:
            raise ObjParseError(path, 0, f"face {fi}: index out of range (>{n})")
    try:
        return Mesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise ObjParseError(path, 0, str(exc))


def save_obj(mesh: Mesh, path) -> None:
    """Write an ASCII OBJ; coordinates keep 6 decimal digits."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_ply(path, vertices, colors=None, edges=None, faces=None) -> None:
    """Write an ASCII PLY with optional per-vertex colors, edges and faces.

    Used for correspondence visualizations: vertices of two meshes plus a
    line (edge) set connecting matched pairs.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    n = len(vertices)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        if colors.shape != (n, 3):
            raise MeshError(f"colors must be ({n}, 3) uint8, got {colors.shape}")
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += ["property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64)
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    if edges is not None:
        edges = np.asarray(edges, dtype=np.int64)
        lines.append(f"element edge {len(edges)}")
        lines += ["property int vertex1", "property int vertex2"]
    lines.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i, v in enumerate(vertices):
            row = f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}"
            if colors is not None:
                c = colors[i]
                row += f" {c[0]} {c[1]} {c[2]}"
            fh.write(row + "\n")
        if faces is not None:
            for f in faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        if edges is not None:
            for e in edges:
                fh.write(f"{e[0]} {e[1]}\n")


def center_by_bbox(mesh: Mesh) -> Mesh:
    """Shift the mesh so its axis-aligned bounding-box center is the origin."""
    if mesh.n_vertices < 1:
        raise MeshError("cannot center an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return mesh.with_vertices(mesh.vertices - (lo + hi) / 2.0)


def shuffle_vertices(mesh: Mesh, seed: int):
    """Randomly relabel vertices (seeded); geometry is unchanged.

    Returns the shuffled mesh and the :class:`VertexPermutation` that maps
    original indices to shuffled ones.
    """
    rng = np.random.default_rng(seed)
    forward = rng.permutation(mesh.n_vertices)
    inverse = np.argsort(forward)
    perm = VertexPermutation(forward=forward, inverse=inverse)
    return perm.apply(mesh), perm


def one_ring(mesh: Mesh, i: int):
    """Set of vertices sharing a face edge with vertex ``i``."""
    if not 0 <= i < mesh.n_vertices:
        raise MeshError(f"vertex index {i} out of range [0, {mesh.n_vertices})")
    return set(int(v) for v in mesh.adjacency()[i])


def cotangent_weights(mesh: Mesh) -> EdgeWeights:
    """Per-edge cotangent weights w_ij = 1/2 * sum of cot(angle) over the one
    or two face corners opposite edge (i, j).

    Boundary edges keep the single available cotangent.  Zero-area faces are
    a hard error.  Edges shared by more than two faces are rejected as
    non-manifold.
    """
    V, F = mesh.vertices, mesh.faces
    if len(F) == 0:
        raise MeshError("cotangent weights need at least one face")

    # corner k of each face is opposite edge (k+1, k+2)
    acc = {}
    counts = {}
    for k in range(3):
        a = V[F[:, k]]
        b = V[F[:, (k + 1) % 3]]
        c = V[F[:, (k + 2) % 3]]
        u = b - a
        w = c - a
        cross = np.cross(u, w)
        double_area = np.linalg.norm(cross, axis=1)
        scale = np.maximum(np.linalg.norm(u, axis=1), np.linalg.norm(w, axis=1))
        bad = double_area <= 1e-12 * scale**2
        if bad.any():
            raise MeshError(f"degenerate (zero-area) face {int(np.flatnonzero(bad)[0])}")
        cot = np.einsum("ij,ij->i", u, w) / double_area
        e = np.sort(F[:, [(k + 1) % 3, (k + 2) % 3]], axis=1)
        for (i, j), ck in zip(e, cot):
            key = (int(i), int(j))
            acc[key] = acc.get(key, 0.0) + 0.5 * ck
            counts[key] = counts.get(key, 0) + 1

    over = [k for k, c in counts.items() if c > 2]
    if over:
        raise MeshError(f"non-manifold edge {over[0]} belongs to {counts[over[0]]} faces")
    pairs = np.array(list(acc.keys()), dtype=np.int64).reshape(-1, 2)
    values = np.array(list(acc.values()), dtype=np.float64)
    return EdgeWeights(mesh.n_vertices, pairs, values)
