"""Selective state-space scan and the voxel-grid sequence operators.

The scan is a diagonal-A, input-selective recurrence: per step k the
projections of the input give a positive step size (softplus), an input
vector B_k and an output vector C_k; zero-order-hold discretization turns
the continuous diagonal system into

    h_k = exp(delta_k a) h_{k-1} + ((exp(delta_k a) - 1)/a) B_k x_k
    y_k = C_k . h_k + skip * x_k

The diagonal is parameterized as a = -exp(a_log) so it stays negative
(stable) throughout training; it is initialized to a_n = -(n+1).

Grid operators: voxel_state_op serializes a feature volume along a
Hilbert order, layer-norms each element, scans, and scatters back; the
chunk operator runs the same machinery over a folded chunk grid behind
linear embed/unembed maps; multiscale_refine sums the full-resolution
branch, two chunk branches and the input residually.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode
from .serialization import HilbertOrder, hilbert_build
from .volumes import FeatureVolume

__all__ = [
    "SsmParams",
    "VoxelStateParams",
    "ChunkStateParams",
    "MultiscaleParams",
    "discretize",
    "scan",
    "scan_node",
    "layer_norm",
    "voxel_state_op",
    "chunk_state_op",
    "multiscale_refine",
]


def discretize(a: float, delta: float, b: float) -> tuple[float, float]:
    """Zero-order-hold discretization of one diagonal entry.

    a_bar = exp(delta*a); b_bar = ((exp(delta*a) - 1)/a) * b, with the
    series limit b_bar = delta*b*(1 + x/2 + x^2/6) when |delta*a| < 1e-6.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = delta * a
    a_bar = float(np.exp(x))
    if abs(x) < 1e-6:
        b_bar = delta * (1.0 + x / 2.0 + x * x / 6.0) * b
    else:
        b_bar = float(np.expm1(x)) / a * b
    return a_bar, float(b_bar)


@dataclass
class SsmParams:
    """Learnable pieces of one selective scan block.

    a_log: (C, N), diagonal is -exp(a_log). skip: (C,). delta/b/c
    projections are linear maps from the C-dim input vector.
    """

    state_dim: int
    channels: int
    a_log: DiffNode
    skip: DiffNode
    delta_w: DiffNode
    delta_b: DiffNode
    b_w: DiffNode
    b_b: DiffNode
    c_w: DiffNode
    c_b: DiffNode

    @property
    def a_diag(self) -> np.ndarray:
        """Current (C, N) diagonal; negative by construction."""
        return -np.exp(self.a_log.data)

    def named_params(self, prefix: str = "") -> dict[str, DiffNode]:
        names = ["a_log", "skip", "delta_w", "delta_b", "b_w", "b_b", "c_w", "c_b"]
        return {prefix + n: getattr(self, n) for n in names}


def ssm_init(channels: int, state_dim: int, rng: np.random.Generator) -> SsmParams:
    n = state_dim
    a_log = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (channels, 1))
    dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
    delta_b = dt0 + np.log(-np.expm1(-dt0))  # softplus inverse
    return SsmParams(
        state_dim=n,
        channels=channels,
        a_log=ad.parameter(a_log),
        skip=ad.parameter(np.ones(channels)),
        delta_w=ad.parameter(rng.normal(size=(channels, channels)) * (0.1 / np.sqrt(channels))),
        delta_b=ad.parameter(delta_b),
        b_w=ad.parameter(rng.normal(size=(state_dim, channels)) / np.sqrt(channels)),
        b_b=ad.parameter(np.zeros(state_dim)),
        c_w=ad.parameter(rng.normal(size=(state_dim, channels)) / np.sqrt(channels)),
        c_b=ad.parameter(np.zeros(state_dim)),
    )


def scan_node(params: SsmParams, x: DiffNode) -> DiffNode:
    """Selective scan over an (L, C) sequence node."""
    _, c = x.shape
    if c != params.channels:
        raise ValueError(f"scan: {c} channels, params expect {params.channels}")
    delta = ad.softplus(ad.linear(x, params.delta_w, params.delta_b))  # (L, C)
    b_k = ad.linear(x, params.b_w, params.b_b)  # (L, N)
    c_k = ad.linear(x, params.c_w, params.c_b)  # (L, N)
    a = ad.neg(ad.exp(params.a_log))  # (C, N)
    return ad.selective_scan(x, delta, b_k, c_k, a, params.skip)


def scan(params: SsmParams, seq: np.ndarray) -> np.ndarray:
    """Numpy-level scan over an (L, C) sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValueError(f"scan expects (L, C) with L >= 1, got {seq.shape}")
    return scan_node(params, ad.constant(seq)).data


def layer_norm(vec: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numpy-level layer norm over the last axis (eps inside the sqrt)."""
    out = ad.layer_norm(ad.constant(vec), ad.constant(gain), ad.constant(bias), eps)
    return out.data


@dataclass
class VoxelStateParams:
    """Layer norm + scan bundle used by the grid-level operator."""

    ln_gain: DiffNode
    ln_bias: DiffNode
    ssm: SsmParams

    def named_params(self, prefix: str = "") -> dict[str, DiffNode]:
        out = {prefix + "ln_gain": self.ln_gain, prefix + "ln_bias": self.ln_bias}
        out.update(self.ssm.named_params(prefix + "ssm."))
        return out


def voxel_state_init(channels: int, state_dim: int, rng: np.random.Generator) -> VoxelStateParams:
    return VoxelStateParams(
        ln_gain=ad.parameter(np.ones(channels)),
        ln_bias=ad.parameter(np.zeros(channels)),
        ssm=ssm_init(channels, state_dim, rng),
    )


def _serialize_node(x: DiffNode, order: HilbertOrder) -> DiffNode:
    c = x.shape[0]
    flat = ad.reshape(x, (c, order.edge**3))
    return ad.transpose(ad.take(flat, order.forward_flat, axis=1), (1, 0))


def _deserialize_node(y: DiffNode, order: HilbertOrder, channels: int) -> DiffNode:
    g = order.edge
    flat = ad.take(ad.transpose(y, (1, 0)), order.inverse_flat, axis=1)
    return ad.reshape(flat, (channels, g, g, g))


def voxel_state_op_node(x: DiffNode, params: VoxelStateParams, order: HilbertOrder) -> DiffNode:
    """serialize -> layer norm -> scan -> deserialize, shape preserved."""
    if x.shape[1] != order.edge:
        raise ValueError(f"volume edge {x.shape[1]} != order edge {order.edge}")
    c = x.shape[0]
    seq = _serialize_node(x, order)
    seq = ad.layer_norm(seq, params.ln_gain, params.ln_bias)
    y = scan_node(params.ssm, seq)
    return _deserialize_node(y, order, c)


def voxel_state_op(vol: FeatureVolume, params: VoxelStateParams, order: HilbertOrder | None = None) -> FeatureVolume:
    if order is None:
        order = hilbert_build(vol.spec.edge)
    out = voxel_state_op_node(ad.constant(vol.values), params, order)
    return FeatureVolume(vol.spec, vol.channels, out.data)


@dataclass
class ChunkStateParams:
    """Chunk fold + linear embed/unembed around an inner state operator."""

    chunk: int
    embed_w: DiffNode
    embed_b: DiffNode
    unembed_w: DiffNode
    unembed_b: DiffNode
    inner: VoxelStateParams

    def named_params(self, prefix: str = "") -> dict[str, DiffNode]:
        out = {
            prefix + "embed_w": self.embed_w,
            prefix + "embed_b": self.embed_b,
            prefix + "unembed_w": self.unembed_w,
            prefix + "unembed_b": self.unembed_b,
        }
        out.update(self.inner.named_params(prefix + "inner."))
        return out


def chunk_state_init(channels: int, chunk: int, token_dim: int, state_dim: int,
                     rng: np.random.Generator) -> ChunkStateParams:
    d_in = channels * chunk**3
    return ChunkStateParams(
        chunk=chunk,
        embed_w=ad.parameter(rng.normal(size=(token_dim, d_in)) / np.sqrt(d_in)),
        embed_b=ad.parameter(np.zeros(token_dim)),
        unembed_w=ad.parameter(rng.normal(size=(d_in, token_dim)) / np.sqrt(token_dim)),
        unembed_b=ad.parameter(np.zeros(d_in)),
        inner=voxel_state_init(token_dim, state_dim, rng),
    )


def _chunkify_node(x: DiffNode, chunk: int) -> DiffNode:
    c, g = x.shape[0], x.shape[1]
    b = g // chunk
    v = ad.reshape(x, (c, b, chunk, b, chunk, b, chunk))
    v = ad.transpose(v, (0, 2, 4, 6, 1, 3, 5))
    return ad.reshape(v, (c * chunk**3, b, b, b))


def _unchunkify_node(x: DiffNode, chunk: int, channels: int) -> DiffNode:
    b = x.shape[1]
    v = ad.reshape(x, (channels, chunk, chunk, chunk, b, b, b))
    v = ad.transpose(v, (0, 4, 1, 5, 2, 6, 3))
    return ad.reshape(v, (channels, b * chunk, b * chunk, b * chunk))


def chunk_state_op_node(x: DiffNode, params: ChunkStateParams, order: HilbertOrder | None = None) -> DiffNode:
    """chunkify -> embed -> state op over the chunk grid -> unembed -> unchunkify."""
    c, g = x.shape[0], x.shape[1]
    r = params.chunk
    if g % r != 0:
        raise ValueError(f"chunk {r} does not divide edge {g}")
    b = g // r
    if order is None:
        order = hilbert_build(b)
    folded = _chunkify_node(x, r)  # (C*R^3, b, b, b)
    d_in = c * r**3
    tokens = ad.transpose(ad.reshape(folded, (d_in, b**3)), (1, 0))  # (b^3, d_in)
    tokens = ad.linear(tokens, params.embed_w, params.embed_b)  # (b^3, d_tok)
    d_tok = tokens.shape[1]
    tok_vol = ad.reshape(ad.transpose(tokens, (1, 0)), (d_tok, b, b, b))
    tok_vol = voxel_state_op_node(tok_vol, params.inner, order)
    tokens = ad.transpose(ad.reshape(tok_vol, (d_tok, b**3)), (1, 0))
    tokens = ad.linear(tokens, params.unembed_w, params.unembed_b)  # (b^3, d_in)
    folded = ad.reshape(ad.transpose(tokens, (1, 0)), (d_in, b, b, b))
    return _unchunkify_node(folded, r, c)


def chunk_state_op(vol: FeatureVolume, params: ChunkStateParams, order: HilbertOrder | None = None) -> FeatureVolume:
    out = chunk_state_op_node(ad.constant(vol.values), params, order)
    return FeatureVolume(vol.spec, vol.channels, out.data)


@dataclass
class MultiscaleParams:
    """Full-grid branch plus two chunk branches, fused residually."""

    phi: VoxelStateParams
    psi_a: ChunkStateParams
    psi_b: ChunkStateParams

    def named_params(self, prefix: str = "") -> dict[str, DiffNode]:
        out = {}
        out.update(self.phi.named_params(prefix + "phi."))
        out.update(self.psi_a.named_params(prefix + "psi_a."))
        out.update(self.psi_b.named_params(prefix + "psi_b."))
        return out


def multiscale_init(channels: int, chunk_a: int, chunk_b: int, token_dim: int,
                    state_dim: int, rng: np.random.Generator) -> MultiscaleParams:
    return MultiscaleParams(
        phi=voxel_state_init(channels, state_dim, rng),
        psi_a=chunk_state_init(channels, chunk_a, token_dim, state_dim, rng),
        psi_b=chunk_state_init(channels, chunk_b, token_dim, state_dim, rng),
    )


def multiscale_refine_node(x: DiffNode, params: MultiscaleParams) -> DiffNode:
    g = x.shape[1]
    if params.psi_a.chunk * params.psi_b.chunk != g:
        raise ValueError(
            f"chunk sizes ({params.psi_a.chunk}, {params.psi_b.chunk}) do not factor edge {g}"
        )
    full = voxel_state_op_node(x, params.phi, hilbert_build(g))
    part_a = chunk_state_op_node(x, params.psi_a)
    part_b = chunk_state_op_node(x, params.psi_b)
    return ad.add(ad.add(full, part_a), ad.add(part_b, x))


def multiscale_refine(vol: FeatureVolume, params: MultiscaleParams) -> FeatureVolume:
    out = multiscale_refine_node(ad.constant(vol.values), params)
    return FeatureVolume(vol.spec, vol.channels, out.data)


def zero_output_projections(params) -> None:
    """Zero every path by which a state operator writes to its output.

    For an SsmParams this zeroes the C projection and the skip; for the
    bundled operators it also zeroes unembed maps, making phi/psi vanish
    and the residual aggregations collapse to identity. Test hook.
    """
    if isinstance(params, SsmParams):
        for p in (params.c_w, params.c_b, params.skip):
            p.data[...] = 0.0
    elif isinstance(params, VoxelStateParams):
        zero_output_projections(params.ssm)
    elif isinstance(params, ChunkStateParams):
        params.unembed_w.data[...] = 0.0
        params.unembed_b.data[...] = 0.0
        zero_output_projections(params.inner)
    elif isinstance(params, MultiscaleParams):
        zero_output_projections(params.phi)
        zero_output_projections(params.psi_a)
        zero_output_projections(params.psi_b)
    else:
        raise TypeError(f"no output projections on {type(params)!r}")
