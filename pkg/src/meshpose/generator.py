"""Mesh generator: transport-based warping plus a conditioned refinement trunk.

The pose mesh is warped onto the identity mesh's vertex indexing through the
matching matrix, then a stack of per-vertex convolutions and three
residual blocks refines the warped coordinates.  Each residual block runs an
elastic conditional normalization: denormalization parameters are a learned
blend between statistics predicted from the identity features and the warped
activations' own statistics, with the blend weight itself predicted from
both streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .correspondence import (
    DEFAULT_EPSILON,
    DEFAULT_ITERATIONS,
    MatchingMatrix,
    correlation_matrix,
    row_normalize,
    solve_ot,
    warp_vertices,
)
from .features import DEFAULT_K, STAGE_WIDTHS, extract, init_extractor_params
from .mesh import Mesh

__all__ = [
    "ElainParams",
    "GeneratorParams",
    "GenerateResult",
    "PAPER_TRUNK_WIDTHS",
    "DESK_TRUNK_WIDTHS",
    "STATS_EPS",
    "instance_stats",
    "elain_forward",
    "elain_resblock",
    "generate",
    "init_generator_params",
]

PAPER_TRUNK_WIDTHS = (1024, 512, 256)
DESK_TRUNK_WIDTHS = (256, 128, 64)
STATS_EPS = 1e-5


@dataclass(frozen=True)
class ElainParams:
    """Names of one normalization block's parameter tensors inside the shared
    parameter dict: an identity projection, the two stat-producing affine
    maps, and the blend-weight map over concatenated channel means."""

    prefix: str

    def keys(self):
        p = self.prefix
        return [
            f"{p}.proj_w", f"{p}.proj_b",
            f"{p}.gamma_w", f"{p}.gamma_b",
            f"{p}.beta_w", f"{p}.beta_b",
            f"{p}.fc_w", f"{p}.fc_b",
        ]


class GeneratorParams:
    """One shared parameter set for every generator role, plus the
    architecture facts needed to rebuild the model from a checkpoint."""

    def __init__(
        self,
        params: dict,
        trunk_widths=DESK_TRUNK_WIDTHS,
        extractor_widths=STAGE_WIDTHS,
        k: int = DEFAULT_K,
        sinkhorn_epsilon: float = DEFAULT_EPSILON,
        sinkhorn_iterations: int = DEFAULT_ITERATIONS,
    ):
        self.params = params
        self.trunk_widths = tuple(int(w) for w in trunk_widths)
        self.extractor_widths = tuple(int(w) for w in extractor_widths)
        self.k = int(k)
        self.sinkhorn_epsilon = float(sinkhorn_epsilon)
        self.sinkhorn_iterations = int(sinkhorn_iterations)

    def arch_extra(self) -> dict:
        return {
            "trunk_widths": list(self.trunk_widths),
            "extractor_widths": list(self.extractor_widths),
            "k": self.k,
            "sinkhorn_epsilon": self.sinkhorn_epsilon,
            "sinkhorn_iterations": self.sinkhorn_iterations,
        }

    def save(self, path, step: int = 0, extra: dict | None = None) -> None:
        merged = dict(self.arch_extra())
        if extra:
            merged.update(extra)
        ad.save_checkpoint(path, self.params, step=step, extra=merged)

    @classmethod
    def load(cls, path):
        """Returns (GeneratorParams, step, extra)."""
        arrays, step, extra = ad.load_checkpoint(path)
        params = {k: ad.parameter(v) for k, v in arrays.items()}
        gp = cls(
            params,
            trunk_widths=extra.get("trunk_widths", DESK_TRUNK_WIDTHS),
            extractor_widths=extra.get("extractor_widths", STAGE_WIDTHS),
            k=extra.get("k", DEFAULT_K),
            sinkhorn_epsilon=extra.get("sinkhorn_epsilon", DEFAULT_EPSILON),
            sinkhorn_iterations=extra.get("sinkhorn_iterations", DEFAULT_ITERATIONS),
        )
        return gp, step, extra

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class GenerateResult:
    """Outputs of one generator pass.  ``output``/``warped`` are meshes over
    the identity topology; the tensors keep the tape alive for training."""

    output: Mesh
    matching: MatchingMatrix
    warped: Mesh
    v_out: ad.Tensor
    v_warp: ad.Tensor


def instance_stats(h: ad.Tensor, eps: float = STATS_EPS):
    """Per-sample, per-channel mean and std over the vertex axis of an
    (S, D, N) tensor; std uses the biased variance plus ``eps`` under the
    square root.  Returns ((S, D, 1), (S, D, 1))."""
    if h.ndim != 3:
        raise ValueError(f"instance_stats expects (S, D, N), got {h.shape}")
    if h.shape[2] < 1:
        raise ValueError("empty vertex axis")
    mu = ad.reduce_mean(h, axis=2, keepdims=True)
    sigma = ad.reduce_std(h, axis=2, eps=eps, keepdims=True)
    return mu, sigma


def elain_forward(
    h_warp: ad.Tensor,
    identity_features: ad.Tensor,
    params: dict,
    prefix: str,
    force_w=None,
) -> ad.Tensor:
    """Elastic conditional normalization of (S, D, N) activations.

    gamma/beta are per-channel predictions from the projected identity
    features; the blend weight w (per channel, squashed to (0,1)) mixes them
    with the warped activations' own sigma/mu, so w=0 reproduces the input
    exactly and w=1 is the fully conditioned limit.  ``force_w`` overrides
    the predicted weight with a constant for diagnostics.
    """
    if isinstance(identity_features, ad.Tensor):
        f_id = identity_features
    else:  # FeatureMap
        f_id = identity_features.features
    s, d, n = h_warp.shape
    h_id = ad.conv1d_pointwise(f_id, params[f"{prefix}.proj_w"], params[f"{prefix}.proj_b"])
    if h_id.shape != (s, d, h_id.shape[2]):
        raise ValueError(f"projected identity features {h_id.shape} mismatch ({s}, {d}, *)")

    mu, sigma = instance_stats(h_warp)

    id_mean = ad.reduce_mean(h_id, axis=2, keepdims=True)  # (S, D, 1)
    gamma = ad.conv1d_pointwise(id_mean, params[f"{prefix}.gamma_w"], params[f"{prefix}.gamma_b"])
    beta = ad.conv1d_pointwise(id_mean, params[f"{prefix}.beta_w"], params[f"{prefix}.beta_b"])

    if force_w is None:
        means = ad.concat(
            [ad.reduce_mean(h_warp, axis=2), ad.reduce_mean(h_id, axis=2)], axis=1
        )  # (S, 2D)
        fc_b = ad.reshape(params[f"{prefix}.fc_b"], (1, d))
        w = ad.sigmoid(ad.add(ad.matmul(means, params[f"{prefix}.fc_w"]), fc_b))
        w = ad.reshape(w, (s, d, 1))
    else:
        w = ad.constant(np.full((s, d, 1), float(force_w)))

    one_minus_w = ad.sub(1.0, w)
    gamma_eff = ad.add(ad.mul(w, gamma), ad.mul(one_minus_w, sigma))
    beta_eff = ad.add(ad.mul(w, beta), ad.mul(one_minus_w, mu))
    normalized = ad.div(ad.sub(h_warp, mu), sigma)
    return ad.add(ad.mul(gamma_eff, normalized), beta_eff)


def elain_resblock(
    h: ad.Tensor,
    identity_features,
    params: dict,
    prefix: str,
    slope: float = 0.2,
) -> ad.Tensor:
    """Residual block: skip(h) + conv(leaky_relu(normalized h)).

    The skip is the identity when input and output widths match, else the
    `{prefix}.skip_w` 1x1 conv.
    """
    inner = elain_forward(h, identity_features, params, prefix)
    inner = ad.conv1d_pointwise(
        ad.leaky_relu(inner, slope), params[f"{prefix}.conv_w"], params[f"{prefix}.conv_b"]
    )
    if f"{prefix}.skip_w" in params:
        skip = ad.conv1d_pointwise(h, params[f"{prefix}.skip_w"], params.get(f"{prefix}.skip_b"))
    else:
        if params[f"{prefix}.conv_w"].shape[0] != h.shape[1]:
            raise ValueError(f"{prefix}: width change needs a skip conv")
        skip = h
    return ad.add(skip, inner)


def _conv_lrelu(h, params, name, slope=0.2):
    return ad.leaky_relu(
        ad.conv1d_pointwise(h, params[f"{name}_w"], params[f"{name}_b"]), slope
    )


def generate(
    identity: Mesh,
    pose: Mesh,
    gp: GeneratorParams,
    identity_coords: ad.Tensor | None = None,
    pose_coords: ad.Tensor | None = None,
) -> GenerateResult:
    """Full forward pass: features -> correlation -> transport -> warp ->
    conditioned trunk.  The output mesh keeps the identity mesh's face list
    and vertex count; the trunk's final 3-channel conv is a correction added
    to the warped coordinates.

    ``identity_coords``/``pose_coords`` optionally supply the same vertex
    coordinates as live tape tensors, so a generator consuming another
    generator's output keeps one connected tape (the dual-reconstruction
    training path).
    """
    p = gp.params
    f_id = extract(identity, p, k=gp.k, widths=gp.extractor_widths, coords=identity_coords)
    f_pose = extract(pose, p, k=gp.k, widths=gp.extractor_widths, coords=pose_coords)

    corr = correlation_matrix(f_id, f_pose)
    t_m = solve_ot(corr, gp.sinkhorn_epsilon, gp.sinkhorn_iterations)
    t_norm = row_normalize(t_m)
    v_pose_src = pose_coords if pose_coords is not None else ad.constant(pose.vertices)
    v_warp = warp_vertices(t_norm.values, v_pose_src)  # (N_id, 3)

    n_id = identity.n_vertices
    x = ad.moveaxis(ad.reshape(v_warp, (1, n_id, 3)), 1, 2)  # (1, 3, N_id)

    h = _conv_lrelu(x, p, "trunk.in0")
    h = _conv_lrelu(h, p, "trunk.in1")
    h = elain_resblock(h, f_id.features, p, "rb0")
    h = _conv_lrelu(h, p, "trunk.mid1")
    h = elain_resblock(h, f_id.features, p, "rb1")
    h = _conv_lrelu(h, p, "trunk.mid2")
    h = elain_resblock(h, f_id.features, p, "rb2")
    delta = ad.conv1d_pointwise(h, p["trunk.out_w"], p["trunk.out_b"])  # (1, 3, N)

    v_out = ad.add(v_warp, ad.reshape(ad.moveaxis(delta, 1, 2), (n_id, 3)))
    return GenerateResult(
        output=Mesh(v_out.data, identity.faces),
        matching=t_m,
        warped=Mesh(v_warp.data, identity.faces),
        v_out=v_out,
        v_warp=v_warp,
    )


def _uniform(rng, shape, fan_in=None):
    fan_in = fan_in if fan_in is not None else shape[-1]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_elain_block(rng, params, prefix, width, cond_width):
    params[f"{prefix}.proj_w"] = ad.parameter(_uniform(rng, (width, cond_width)))
    params[f"{prefix}.proj_b"] = ad.parameter(np.zeros(width))
    params[f"{prefix}.gamma_w"] = ad.parameter(_uniform(rng, (width, width)))
    # centre gamma at 1 so the conditioned limit starts near unit scale
    params[f"{prefix}.gamma_b"] = ad.parameter(np.ones(width))
    params[f"{prefix}.beta_w"] = ad.parameter(_uniform(rng, (width, width)))
    params[f"{prefix}.beta_b"] = ad.parameter(np.zeros(width))
    params[f"{prefix}.fc_w"] = ad.parameter(_uniform(rng, (2 * width, width), fan_in=2 * width))
    params[f"{prefix}.fc_b"] = ad.parameter(np.zeros(width))
    params[f"{prefix}.conv_w"] = ad.parameter(_uniform(rng, (width, width)))
    params[f"{prefix}.conv_b"] = ad.parameter(np.zeros(width))


def init_generator_params(
    seed: int = 0,
    trunk_widths=DESK_TRUNK_WIDTHS,
    extractor_widths=STAGE_WIDTHS,
    k: int = DEFAULT_K,
    sinkhorn_epsilon: float = DEFAULT_EPSILON,
    sinkhorn_iterations: int = DEFAULT_ITERATIONS,
) -> GeneratorParams:
    """Fresh shared parameters.  Affine maps use fan-in-scaled uniform init;
    the final 3-channel conv starts at zero so a fresh generator outputs the
    warped mesh unchanged."""
    rng = np.random.default_rng(seed)
    w0, w1, w2 = trunk_widths
    cond = extractor_widths[-1]
    params = init_extractor_params(rng, widths=extractor_widths)

    params["trunk.in0_w"] = ad.parameter(_uniform(rng, (w0, 3)))
    params["trunk.in0_b"] = ad.parameter(np.zeros(w0))
    params["trunk.in1_w"] = ad.parameter(_uniform(rng, (w0, w0)))
    params["trunk.in1_b"] = ad.parameter(np.zeros(w0))
    _init_elain_block(rng, params, "rb0", w0, cond)
    params["trunk.mid1_w"] = ad.parameter(_uniform(rng, (w1, w0)))
    params["trunk.mid1_b"] = ad.parameter(np.zeros(w1))
    _init_elain_block(rng, params, "rb1", w1, cond)
    params["trunk.mid2_w"] = ad.parameter(_uniform(rng, (w2, w1)))
    params["trunk.mid2_b"] = ad.parameter(np.zeros(w2))
    _init_elain_block(rng, params, "rb2", w2, cond)
    # zero-init residual head: a fresh generator reproduces its warp exactly,
    # and the correction grows only as the loss asks for it
    params["trunk.out_w"] = ad.parameter(np.zeros((3, w2)))
    params["trunk.out_b"] = ad.parameter(np.zeros(3))

    return GeneratorParams(
        params,
        trunk_widths=trunk_widths,
        extractor_widths=extractor_widths,
        k=k,
        sinkhorn_epsilon=sinkhorn_epsilon,
        sinkhorn_iterations=sinkhorn_iterations,
    )
