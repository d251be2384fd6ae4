"""Procedural articulated bodies standing in for scanned mesh datasets.

A fixed 10-bone skeleton (torso, head, two-segment arms and legs) is skinned
with capped capsule tubes.  Identity parameters scale bone lengths, radii
and surface detail; pose parameters set joint angles.  Every mesh shares one
template topology, so ground-truth triplets (identity, pose, mesh) are
directly comparable vertex-by-vertex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

__all__ = ["BoneSpec", "SyntheticDataset", "generate_synthetic_dataset", "RING_SIZE"]

RING_SIZE = 8
_BLEND_SPAN = 0.25  # fraction of bone length blended toward the parent
_LIMB_TAPER = 0.3


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _align_to(direction):
    """Rotation taking +Z to `direction` (unit), chosen deterministically."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, d)
    c = float(z @ d)
    if np.linalg.norm(v) < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


@dataclass(frozen=True)
class BoneSpec:
    """Skeleton entry: where the bone hangs off its parent, its rest
    direction, which identity parameters size it, and its joint ranges."""

    name: str
    parent: int  # -1 for the root
    attach_t: float  # position along the parent axis, 0..1
    offset: tuple  # lateral attach offset in parent frame, scaled by identity
    base_dir: tuple  # rest direction of the bone axis
    length_key: str
    radius_key: str
    taper: float
    angle_ranges: tuple  # ((lo, hi) radians for rx, ry, rz)


def _deg(lo, hi):
    return (math.radians(lo), math.radians(hi))


_Z = (0.0, 0.0, 1.0)
_NZ = (0.0, 0.0, -1.0)

SKELETON = (
    BoneSpec("torso", -1, 0.0, (0, 0, 0), _Z, "torso_len", "torso_r", 0.0,
             (_deg(-10, 10), _deg(-10, 10), _deg(-25, 25))),
    BoneSpec("head", 0, 1.0, (0, 0, 0), _Z, "head_len", "head_r", 0.1,
             (_deg(-20, 20), _deg(-15, 15), _deg(-20, 20))),
    BoneSpec("l_uarm", 0, 0.92, (-1.0, 0, 0), (-1.0, 0, 0), "uarm_len", "arm_r", _LIMB_TAPER,
             (_deg(-20, 20), _deg(-65, 65), _deg(-45, 45))),
    BoneSpec("l_farm", 2, 1.0, (0, 0, 0), (-1.0, 0, 0), "farm_len", "arm_r", _LIMB_TAPER,
             (_deg(0, 0), _deg(0, 95), _deg(0, 0))),
    BoneSpec("r_uarm", 0, 0.92, (1.0, 0, 0), (1.0, 0, 0), "uarm_len", "arm_r", _LIMB_TAPER,
             (_deg(-20, 20), _deg(-65, 65), _deg(-45, 45))),
    BoneSpec("r_farm", 4, 1.0, (0, 0, 0), (1.0, 0, 0), "farm_len", "arm_r", _LIMB_TAPER,
             (_deg(0, 0), _deg(-95, 0), _deg(0, 0))),
    BoneSpec("l_thigh", 0, 0.0, (-0.6, 0, 0), _NZ, "thigh_len", "leg_r", _LIMB_TAPER,
             (_deg(-15, 15), _deg(-50, 50), _deg(0, 0))),
    BoneSpec("l_shin", 6, 1.0, (0, 0, 0), _NZ, "shin_len", "leg_r", _LIMB_TAPER,
             (_deg(0, 0), _deg(0, 85), _deg(0, 0))),
    BoneSpec("r_thigh", 0, 0.0, (0.6, 0, 0), _NZ, "thigh_len", "leg_r", _LIMB_TAPER,
             (_deg(-15, 15), _deg(-50, 50), _deg(0, 0))),
    BoneSpec("r_shin", 8, 1.0, (0, 0, 0), _NZ, "shin_len", "leg_r", _LIMB_TAPER,
             (_deg(0, 0), _deg(0, 85), _deg(0, 0))),
)

# Body proportions vary the way a population of scans would: every body is
# recognisably the same species, differing by modest limb lengths and girths.
# Keeping the spread subtle matters twice over.  Pose transfer ground truth
# is "identity A in pose B", so the pose signal should dominate the identity
# signal, and the rigidity-based refiner is meant to be a gentle correction
# of an almost-right mesh rather than a cross-body morph.
_IDENTITY_RANGES = {
    "torso_len": (0.51, 0.55),
    "torso_r": (0.091, 0.099),
    "head_len": (0.182, 0.198),
    "head_r": (0.067, 0.073),
    "uarm_len": (0.26, 0.28),
    "farm_len": (0.24, 0.26),
    "arm_r": (0.0365, 0.0395),
    "thigh_len": (0.33, 0.35),
    "shin_len": (0.31, 0.33),
    "leg_r": (0.050, 0.054),
    "hip_width": (0.125, 0.135),
}


@dataclass
class _Template:
    """Shared topology: per-bone local ring layout plus the global face list."""

    locals_: list  # per bone: (n_b, 3) local coordinates, axis along +Z
    z_fracs: list  # per bone: local z as a fraction of bone length (caps < 0, > 1)
    radial: list  # per bone: unit radial direction (x, y, 0) per vertex
    bone_of: np.ndarray
    faces: np.ndarray
    offsets: list  # start index of each bone's vertices

    @property
    def n_vertices(self):
        return len(self.bone_of)


def _build_template(vertices_per_mesh: int) -> _Template:
    if vertices_per_mesh < 100:
        raise ValueError(f"vertices_per_mesh must be >= 100, got {vertices_per_mesh}")
    n_bones = len(SKELETON)
    per_bone = vertices_per_mesh / n_bones
    rows = max(3, round((per_bone - 2) / RING_SIZE))

    locals_, z_fracs, radial, bone_of, faces, offsets = [], [], [], [], [], []
    base = 0
    for b in range(n_bones):
        offsets.append(base)
        pts, fracs, rads = [], [], []
        for j in range(rows):
            u = j / (rows - 1)
            for q in range(RING_SIZE):
                ang = 2 * math.pi * (q + 0.5 * (j % 2)) / RING_SIZE
                pts.append([math.cos(ang), math.sin(ang), u])
                fracs.append(u)
                rads.append([math.cos(ang), math.sin(ang), 0.0])
        bottom = len(pts)
        pts.append([0.0, 0.0, -0.35])
        fracs.append(-0.35)
        rads.append([0.0, 0.0, 0.0])
        top = len(pts)
        pts.append([0.0, 0.0, 1.35])
        fracs.append(1.35)
        rads.append([0.0, 0.0, 0.0])

        for j in range(rows - 1):
            for q in range(RING_SIZE):
                a = base + j * RING_SIZE + q
                a2 = base + j * RING_SIZE + (q + 1) % RING_SIZE
                c = base + (j + 1) * RING_SIZE + q
                c2 = base + (j + 1) * RING_SIZE + (q + 1) % RING_SIZE
                faces.append([a, a2, c])
                faces.append([a2, c2, c])
        for q in range(RING_SIZE):
            faces.append([base + bottom, base + (q + 1) % RING_SIZE, base + q])
            last = (rows - 1) * RING_SIZE
            faces.append([base + top, base + last + q, base + last + (q + 1) % RING_SIZE])

        locals_.append(np.array(pts))
        z_fracs.append(np.array(fracs))
        radial.append(np.array(rads))
        bone_of.extend([b] * len(pts))
        base += len(pts)

    return _Template(
        locals_=locals_,
        z_fracs=z_fracs,
        radial=radial,
        bone_of=np.array(bone_of, dtype=np.int64),
        faces=np.array(faces, dtype=np.int64),
        offsets=offsets,
    )


class SyntheticDataset:
    """Deterministic factory of ground-truth triplets mesh(identity, pose).

    All meshes share one face list and vertex count; ``mesh(i, p)`` is the
    body of identity ``i`` articulated by pose ``p``.  Pose index -1 is the
    rest pose (all joint angles zero).
    """

    def __init__(self, n_identities: int, n_poses: int, vertices_per_mesh: int = 600, seed: int = 0):
        if n_identities < 1 or n_poses < 1:
            raise ValueError("need at least one identity and one pose")
        self.n_identities = int(n_identities)
        self.n_poses = int(n_poses)
        self.seed = int(seed)
        self.template = _build_template(vertices_per_mesh)
        self.faces = self.template.faces
        self.n_vertices = self.template.n_vertices
        # every body wears the same per-vertex relief pattern, the way scans
        # of different people share anatomical landmarks; it is the stable
        # local signature that makes shape correspondence learnable at all
        tex_rng = np.random.default_rng([self.seed, 3])
        self.texture = np.clip(tex_rng.normal(0.0, 0.15, size=self.n_vertices), -0.4, 0.4)
        self._identities = [self._sample_identity(i) for i in range(n_identities)]
        self._poses = [self._sample_pose(p) for p in range(n_poses)]

    # ------------------------------------------------------------ sampling

    def _sample_identity(self, i: int) -> dict:
        rng = np.random.default_rng([self.seed, 1, i])
        params = {k: rng.uniform(lo, hi) for k, (lo, hi) in _IDENTITY_RANGES.items()}
        # identity-specific modulation on top of the shared relief, plus a
        # whisper of positional noise so no two inter-vertex distances tie
        params["bumps"] = rng.normal(0.0, rng.uniform(0.01, 0.03), size=self.n_vertices)
        params["micro"] = rng.normal(0.0, 8e-4, size=(self.n_vertices, 3))
        return params

    def _sample_pose(self, p: int) -> list:
        rng = np.random.default_rng([self.seed, 2, p])
        angles = []
        for bone in SKELETON:
            angles.append([rng.uniform(lo, hi) if hi > lo else 0.0 for lo, hi in bone.angle_ranges])
        return angles

    def identity_params(self, i: int) -> dict:
        return self._identities[i]

    def pose_params(self, p: int) -> list:
        if p == -1:
            return [[0.0, 0.0, 0.0] for _ in SKELETON]
        return self._poses[p]

    # ---------------------------------------------------------------- bones

    def _bone_geometry(self, ident: dict, angles: list):
        """Forward kinematics: per-bone start positions and cumulative
        rotations for the given joint angles."""
        n_bones = len(SKELETON)
        starts = [None] * n_bones
        frames = [None] * n_bones
        for b, bone in enumerate(SKELETON):
            rx, ry, rz = angles[b]
            joint = _rot_x(rx) @ _rot_y(ry) @ _rot_z(rz)
            if bone.parent < 0:
                starts[b] = np.zeros(3)
                frames[b] = joint
                continue
            par = SKELETON[bone.parent]
            p_start = starts[bone.parent]
            p_frame = frames[bone.parent]
            p_axis = p_frame @ np.asarray(par.base_dir, dtype=np.float64)
            if bone.name.endswith("thigh"):
                offset_scale = ident["hip_width"]
            else:
                offset_scale = ident[par.radius_key]
            offset = np.asarray(bone.offset) * offset_scale
            starts[b] = p_start + p_axis * (bone.attach_t * ident[par.length_key]) + p_frame @ offset
            frames[b] = p_frame @ joint
        return starts, frames

    def _skin(self, ident: dict, angles: list) -> np.ndarray:
        tpl = self.template
        starts, frames = self._bone_geometry(ident, angles)
        rest_starts, rest_frames = self._bone_geometry(ident, self.pose_params(-1))

        verts = np.empty((tpl.n_vertices, 3))
        for b, bone in enumerate(SKELETON):
            length = ident[bone.length_key]
            radius = ident[bone.radius_key]
            align = _align_to(bone.base_dir)
            loc = tpl.locals_[b].copy()
            frac = tpl.z_fracs[b]
            sl = slice(tpl.offsets[b], tpl.offsets[b] + len(loc))

            profile = radius * (1.0 - bone.taper * np.clip(frac, 0.0, 1.0))
            profile = profile * (1.0 + self.texture[sl] + ident["bumps"][sl])
            local = np.empty_like(loc)
            local[:, 0] = loc[:, 0] * profile
            local[:, 1] = loc[:, 1] * profile
            local[:, 2] = frac * length
            local += ident["micro"][sl]

            rest_world = rest_starts[b] + (rest_frames[b] @ align @ local.T).T
            bone_world = starts[b] + (frames[b] @ rest_frames[b].T @ (rest_world - rest_starts[b]).T).T

            if bone.parent >= 0:
                pb = bone.parent
                par_world = starts[pb] + (frames[pb] @ rest_frames[pb].T @ (rest_world - rest_starts[pb]).T).T
                w = 0.5 * np.clip(1.0 - frac / _BLEND_SPAN, 0.0, 1.0)[:, None]
                verts[sl] = (1.0 - w) * bone_world + w * par_world
            else:
                verts[sl] = bone_world
        return verts

    # ----------------------------------------------------------------- API

    def mesh(self, i: int, p: int) -> Mesh:
        """Ground-truth mesh of identity ``i`` in pose ``p`` (template vertex
        order, not centered)."""
        verts = self._skin(self._identities[i], self.pose_params(p))
        return Mesh(verts, self.faces, name=f"id{i:02d}_pose{p:03d}")

    def rest_mesh(self, i: int) -> Mesh:
        verts = self._skin(self._identities[i], self.pose_params(-1))
        return Mesh(verts, self.faces, name=f"id{i:02d}_rest")


def generate_synthetic_dataset(
    n_identities: int, n_poses: int, vertices_per_mesh: int = 600, seed: int = 0
) -> SyntheticDataset:
    """Procedural dataset of articulated capsule bodies; see SyntheticDataset."""
    return SyntheticDataset(n_identities, n_poses, vertices_per_mesh, seed)
