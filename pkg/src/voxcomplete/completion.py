"""The desk-scale completion network and both training losses.

Two encoders read the partial TSDF: a geometric encoder and a distilled
semantic student (conv encoder-decoder with a feature head and a sigmoid
gating head whose output multiplies the features). At the 1/4-resolution
fusion grid the two streams pass through independent voxel state
operators and combine residually,

    z_fused = phi_tsdf(z_tsdf) + phi_dino(z_dino) + z_tsdf,

a conv decoder restores full resolution, the multi-scale state operator
refines, and a scaled tanh squashes the prediction into the truncation
band. The distillation loss is cosine + squared-error alignment over the
teacher-validity support plus BCE on the gate; the reconstruction loss is
sign-aware weighted smooth-l1 with false-negative/false-positive/correct
weights 5/3/1 (masks are stop-gradient indicators).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ssm
from .autodiff import DiffNode
from .volumes import FeatureVolume, GridSpec, MaskVolume, TsdfVolume, occupancy
from .vxl_io import atomic_write_bytes

__all__ = [
    "LossWeights",
    "StudentNet",
    "CompletionNet",
    "student_forward",
    "distill_loss",
    "fuse",
    "complete_forward",
    "tsdf_masks",
    "tsdf_loss",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class LossWeights:
    """Sign-aware reconstruction weights plus distillation coefficients."""

    w_fn: float = 5.0
    w_fp: float = 3.0
    w_correct: float = 1.0
    lambda_cos: float = 1.0
    lambda_mse: float = 1.0
    lambda_mask: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        vals = (self.w_fn, self.w_fp, self.w_correct, self.lambda_cos,
                self.lambda_mse, self.lambda_mask, self.beta)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")


# ---------------------------------------------------------------------------
# Conv layer plumbing
# ---------------------------------------------------------------------------


@dataclass
class Conv:
    w: DiffNode
    b: DiffNode
    stride: int
    pad: int
    transposed: bool = False
    norm_gain: DiffNode | None = None  # per-voxel channel layer norm
    norm_bias: DiffNode | None = None

    def __call__(self, x: DiffNode) -> DiffNode:
        if self.transposed:
            h = ad.conv3_transpose(x, self.w, self.b, self.stride, self.pad)
        else:
            h = ad.conv3(x, self.w, self.b, self.stride, self.pad)
        if self.norm_gain is not None:
            h = _channel_norm(h, self.norm_gain, self.norm_bias)
        return h

    def named_params(self, prefix: str) -> dict[str, DiffNode]:
        out = {prefix + ".w": self.w, prefix + ".b": self.b}
        if self.norm_gain is not None:
            out[prefix + ".ng"] = self.norm_gain
            out[prefix + ".nb"] = self.norm_bias
        return out


def _channel_norm(x: DiffNode, gain: DiffNode, bias: DiffNode) -> DiffNode:
    """Instance norm: zero-mean/unit-variance per channel over space,
    then a per-channel affine.

    Without it the stack's input-independent DC component swamps the
    signal (softplus halves signal variance per layer while feeding the
    DC), and training collapses onto a constant-output solution.
    """
    c, spatial = x.shape[0], x.shape[1:]
    p = int(np.prod(spatial))
    flat = ad.reshape(x, (c, p))
    normed = ad.layer_norm(flat, ad.constant(np.ones(p)), ad.constant(np.zeros(p)))
    g = ad.broadcast_to(ad.reshape(gain, (c, 1)), (c, p))
    b = ad.broadcast_to(ad.reshape(bias, (c, 1)), (c, p))
    return ad.reshape(ad.add(ad.mul(normed, g), b), x.shape)


def _conv_init(c_in: int, c_out: int, k: int, stride: int, pad: int,
               rng: np.random.Generator, transposed: bool = False,
               scale: float | None = None, norm: bool = False) -> Conv:
    fan_in = c_in * k**3
    std = (scale if scale is not None else np.sqrt(2.0)) / np.sqrt(fan_in)
    shape = (c_in, c_out, k, k, k) if transposed else (c_out, c_in, k, k, k)
    return Conv(
        w=ad.parameter(rng.normal(size=shape) * std),
        b=ad.parameter(np.zeros(c_out)),
        stride=stride,
        pad=pad,
        transposed=transposed,
        norm_gain=ad.parameter(np.ones(c_out)) if norm else None,
        norm_bias=ad.parameter(np.zeros(c_out)) if norm else None,
    )


def _act(x: DiffNode) -> DiffNode:
    return ad.softplus(x)


def _encoder_input(x: DiffNode) -> DiffNode:
    """Stack the normalized TSDF with its occupancy indicator."""
    occ = ad.constant((x.data <= 0.0).astype(np.float64))
    return ad.concat([x, occ], axis=0)


# ---------------------------------------------------------------------------
# Student network (distilled-feature branch)
# ---------------------------------------------------------------------------


@dataclass
class StudentNet:
    """Encoder 32^3 -> 8^3 (widths 16/32/64), skip-connected decoder back
    to 32^3, feature head -> feat_dim channels, gating head -> sigmoid."""

    feat_dim: int
    enc1: Conv
    enc2: Conv
    enc3: Conv
    dec1: Conv
    dec2: Conv
    trunk: Conv
    feat_head: Conv
    mask_head: Conv

    def named_params(self, prefix: str = "") -> dict[str, DiffNode]:
        out = {}
        for name in ("enc1", "enc2", "enc3", "dec1", "dec2", "trunk",
                     "feat_head", "mask_head"):
            out.update(getattr(self, name).named_params(prefix + name))
        return out

    def forward_node(self, x: DiffNode) -> tuple[DiffNode, DiffNode]:
        xin = _encoder_input(x)          # (2, G^3)
        e1 = _act(self.enc1(xin))        # (w1, G/2^3)
        e2 = _act(self.enc2(e1))         # (w2, G/4^3)
        e3 = _act(self.enc3(e2))         # (w3, G/4^3)
        d1 = _act(self.dec1(e3))         # (w2, G/2^3)
        d2 = _act(self.dec2(ad.concat([d1, e1], axis=0)))  # (w1, G^3)
        h = _act(self.trunk(d2))
        feats = self.feat_head(h)
        gate = ad.sigmoid(self.mask_head(h))
        return feats, gate


def build_student(feat_dim: int, rng: np.random.Generator, widths=(16, 32, 64)) -> StudentNet:
    w1, w2, w3 = widths
    return StudentNet(
        feat_dim=feat_dim,
        enc1=_conv_init(2, w1, 4, 2, 1, rng, norm=True),
        enc2=_conv_init(w1, w2, 4, 2, 1, rng, norm=True),
        enc3=_conv_init(w2, w3, 3, 1, 1, rng, norm=True),
        dec1=_conv_init(w3, w2, 4, 2, 1, rng, transposed=True, norm=True),
        dec2=_conv_init(w2 + w1, w1, 4, 2, 1, rng, transposed=True, norm=True),
        trunk=_conv_init(w1, w1, 1, 1, 0, rng, norm=True),
        feat_head=_conv_init(w1, feat_dim, 1, 1, 0, rng, scale=1.0),
        mask_head=_conv_init(w1, 1, 1, 1, 0, rng, scale=0.1),
    )


def student_forward(net: StudentNet, x: TsdfVolume) -> tuple[FeatureVolume, MaskVolume]:
    """Predict semantic features and the gating mask from a partial TSDF."""
    inp = ad.constant(x.values[None].astype(np.float64) / x.spec.truncation)
    feats, gate = net.forward_node(inp)
    return (
        FeatureVolume(x.spec, net.feat_dim, feats.data.astype(np.float32)),
        MaskVolume(x.spec, gate.data[0].astype(np.float32)),
    )


# ---------------------------------------------------------------------------
# Distillation loss
# ---------------------------------------------------------------------------

_COS_EPS = 1e-8
_BCE_EPS = 1e-12


def distill_loss_node(z: DiffNode, z_hat: np.ndarray, m: DiffNode, m_hat: np.ndarray,
                      w: LossWeights) -> DiffNode:
    """Graph-level distillation objective.

    Cosine and squared-error terms run over the voxels where m_hat = 1;
    BCE runs over every voxel. An empty support defines the first two
    terms as zero (with a warning).
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    support = np.asarray(m_hat, dtype=np.float64).reshape(z_hat.shape[1:])
    count = float(support.sum())
    if count == 0:
        warnings.warn("distillation support is empty; cosine/mse terms are 0")
        loss_cos = ad.constant(0.0)
        loss_mse = ad.constant(0.0)
    else:
        zc = ad.constant(z_hat)
        sup = ad.constant(support)
        dot = ad.reduce_sum(ad.mul(z, zc), axis=0)
        nz = ad.sqrt(ad.reduce_sum(ad.mul(z, z), axis=0) + _COS_EPS**2)
        nzh = np.sqrt((z_hat * z_hat).sum(axis=0) + _COS_EPS**2)
        cos = ad.div(dot, ad.mul(nz, ad.constant(nzh)) + _COS_EPS)
        loss_cos = ad.div(ad.reduce_sum(ad.mul(ad.constant(1.0) - cos, sup)), ad.constant(count))
        diff = ad.sub(z, zc)
        sq = ad.reduce_sum(ad.mul(diff, diff), axis=0)
        loss_mse = ad.div(ad.reduce_sum(ad.mul(sq, sup)), ad.constant(count))
    m_flat = ad.reshape(m, np.asarray(m_hat).shape) if m.shape != np.asarray(m_hat).shape else m
    target = np.asarray(m_hat, dtype=np.float64)
    mc = ad.add(ad.mul(m_flat, ad.constant(1.0 - 2.0 * _BCE_EPS)), ad.constant(_BCE_EPS))
    bce_terms = ad.add(
        ad.mul(ad.constant(target), ad.log(mc)),
        ad.mul(ad.constant(1.0 - target), ad.log(ad.constant(1.0) - mc)),
    )
    loss_mask = ad.neg(ad.reduce_mean(bce_terms))
    return (
        ad.constant(w.lambda_cos) * loss_cos
        + ad.constant(w.lambda_mse) * loss_mse
        + ad.constant(w.lambda_mask) * loss_mask
    )


def distill_loss(z: FeatureVolume, z_hat: FeatureVolume, m: MaskVolume,
                 m_hat: MaskVolume, w: LossWeights = LossWeights()) -> float:
    """Scalar distillation loss at the volume level."""
    node = distill_loss_node(
        ad.constant(z.values.astype(np.float64)),
        z_hat.values.astype(np.float64),
        ad.constant(m.values[None].astype(np.float64)),
        m_hat.values.astype(np.float64),
        w,
    )
    return float(node.data)


# ---------------------------------------------------------------------------
# Sign-aware TSDF loss
# ---------------------------------------------------------------------------


def tsdf_masks(pred: TsdfVolume, gt: TsdfVolume):
    """False-positive / false-negative / correct partition masks."""
    if pred.spec.shape != gt.spec.shape:
        raise ValueError("tsdf_masks: shape mismatch")
    m_pred = occupancy(pred).values
    m_gt = occupancy(gt).values
    m_fp = m_pred * (1.0 - m_gt)
    m_fn = (1.0 - m_pred) * m_gt
    m_correct = 1.0 - m_fp - m_fn
    spec = pred.spec
    return MaskVolume(spec, m_fp), MaskVolume(spec, m_fn), MaskVolume(spec, m_correct)


def _sign_weight_map(pred_vals: np.ndarray, gt_vals: np.ndarray, w: LossWeights) -> np.ndarray:
    m_pred = (pred_vals <= 0.0).astype(np.float64)
    m_gt = (gt_vals <= 0.0).astype(np.float64)
    m_fp = m_pred * (1.0 - m_gt)
    m_fn = (1.0 - m_pred) * m_gt
    m_correct = 1.0 - m_fp - m_fn
    return w.w_fn * m_fn + w.w_fp * m_fp + w.w_correct * m_correct


def tsdf_loss_node(pred: DiffNode, gt_vals: np.ndarray, w: LossWeights) -> DiffNode:
    """Mean over voxels of sign-weighted smooth-l1(pred - gt).

    The sign masks come from current values and are treated as constants:
    no gradient flows through the occupancy indicators.
    """
    gt_vals = np.asarray(gt_vals, dtype=np.float64)
    if pred.shape != gt_vals.shape:
        raise ValueError(f"tsdf_loss: pred {pred.shape} vs gt {gt_vals.shape}")
    weight = ad.constant(_sign_weight_map(pred.data, gt_vals, w))
    err = ad.sub(pred, ad.constant(gt_vals))
    abs_err = ad.absolute(err)
    small = ad.constant((np.abs(err.data) < w.beta).astype(np.float64))
    quad = ad.mul(ad.mul(err, err), ad.constant(0.5 / w.beta))
    lin = ad.sub(abs_err, ad.constant(0.5 * w.beta))
    per_vox = ad.add(ad.mul(small, quad), ad.mul(ad.constant(1.0) - small, lin))
    return ad.reduce_mean(ad.mul(weight, per_vox))


def tsdf_loss(pred: TsdfVolume, gt: TsdfVolume, w: LossWeights = LossWeights()) -> float:
    if pred.spec.shape != gt.spec.shape:
        raise ValueError("tsdf_loss: shape mismatch")
    node = tsdf_loss_node(
        ad.constant(pred.values.astype(np.float64)), gt.values.astype(np.float64), w
    )
    return float(node.data)


# ---------------------------------------------------------------------------
# Completion network
# ---------------------------------------------------------------------------


@dataclass
class CompletionConfig:
    feat_dim: int = 16
    fuse_dim: int = 64
    dec_dim: int = 8
    state_dim: int = 16
    token_dim: int = 64
    chunk_a: int = 4
    chunk_b: int = 8
    truncation: float = 3.0
    use_dino: bool = True
    use_msm: bool = True


@dataclass
class CompletionNet:
    cfg: CompletionConfig
    e1: Conv
    e2: Conv
    e3: Conv
    student: StudentNet | None
    p1: Conv | None
    p2: Conv | None
    phi_tsdf: ssm.VoxelStateParams | None
    phi_dino: ssm.VoxelStateParams | None
    d1: Conv
    d2: Conv
    d3: Conv
    msm: ssm.MultiscaleParams | None
    head: Conv

    def named_params(self, include_student: bool = True) -> dict[str, DiffNode]:
        out = {}
        for name in ("e1", "e2", "e3", "d1", "d2", "d3", "head"):
            out.update(getattr(self, name).named_params(name))
        if self.cfg.use_dino:
            if include_student:
                out.update(self.student.named_params("student."))
            out.update(self.p1.named_params("p1"))
            out.update(self.p2.named_params("p2"))
            out.update(self.phi_tsdf.named_params("phi_tsdf."))
            out.update(self.phi_dino.named_params("phi_dino."))
        if self.cfg.use_msm:
            out.update(self.msm.named_params("msm."))
        return out

    def forward_node(self, x: DiffNode) -> DiffNode:
        """Partial TSDF (1, G, G, G), raw voxel units, to predicted TSDF."""
        cfg = self.cfg
        xn = ad.mul(x, ad.constant(1.0 / cfg.truncation))
        z = _act(self.e1(_encoder_input(xn)))
        z = _act(self.e2(z))
        z_tsdf = _act(self.e3(z))
        if cfg.use_dino:
            feats, gate = self.student.forward_node(xn)
            gated = ad.mul(feats, ad.broadcast_to(gate, feats.shape))
            zd = _act(self.p1(gated))
            zd = _act(self.p2(zd))
            z_fused = fuse_node(z_tsdf, zd, self.phi_tsdf, self.phi_dino)
        else:
            z_fused = z_tsdf
        h = _act(self.d1(z_fused))
        h = _act(self.d2(h))
        h = self.d3(h)
        if cfg.use_msm:
            h = ssm.multiscale_refine_node(h, self.msm)
        out = ad.tanh(self.head(h))
        return ad.mul(out, ad.constant(cfg.truncation))


def fuse_node(z_tsdf: DiffNode, z_dino: DiffNode, phi_tsdf: ssm.VoxelStateParams,
              phi_dino: ssm.VoxelStateParams) -> DiffNode:
    """Voxel-state residual fusion of the two feature streams."""
    if z_tsdf.shape != z_dino.shape:
        raise ValueError(f"fuse: {z_tsdf.shape} vs {z_dino.shape}")
    from .serialization import hilbert_build

    order = hilbert_build(z_tsdf.shape[1])
    a = ssm.voxel_state_op_node(z_tsdf, phi_tsdf, order)
    b = ssm.voxel_state_op_node(z_dino, phi_dino, order)
    return ad.add(ad.add(a, b), z_tsdf)


def fuse(z_tsdf: FeatureVolume, z_dino_gated: FeatureVolume,
         phi_tsdf: ssm.VoxelStateParams, phi_dino: ssm.VoxelStateParams) -> FeatureVolume:
    out = fuse_node(
        ad.constant(z_tsdf.values.astype(np.float64)),
        ad.constant(z_dino_gated.values.astype(np.float64)),
        phi_tsdf,
        phi_dino,
    )
    return FeatureVolume(z_tsdf.spec, z_tsdf.channels, out.data.astype(np.float32))


def build_completion(cfg: CompletionConfig, rng: np.random.Generator) -> CompletionNet:
    f = cfg.fuse_dim
    student = p1 = p2 = phi_t = phi_d = msm_params = None
    e1 = _conv_init(2, 16, 4, 2, 1, rng, norm=True)
    e2 = _conv_init(16, 32, 4, 2, 1, rng, norm=True)
    e3 = _conv_init(32, f, 3, 1, 1, rng, norm=True)
    if cfg.use_dino:
        student = build_student(cfg.feat_dim, rng)
        p1 = _conv_init(cfg.feat_dim, 32, 4, 2, 1, rng, norm=True)
        p2 = _conv_init(32, f, 4, 2, 1, rng, norm=True)
        phi_t = ssm.voxel_state_init(f, cfg.state_dim, rng)
        phi_d = ssm.voxel_state_init(f, cfg.state_dim, rng)
    d1 = _conv_init(f, 32, 4, 2, 1, rng, transposed=True, norm=True)
    d2 = _conv_init(32, 16, 4, 2, 1, rng, transposed=True, norm=True)
    d3 = _conv_init(16, cfg.dec_dim, 1, 1, 0, rng, scale=1.0)
    if cfg.use_msm:
        msm_params = ssm.multiscale_init(cfg.dec_dim, cfg.chunk_a, cfg.chunk_b,
                                         cfg.token_dim, cfg.state_dim, rng)
    head = _conv_init(cfg.dec_dim, 1, 1, 1, 0, rng, scale=0.1)
    return CompletionNet(cfg, e1, e2, e3, student, p1, p2, phi_t, phi_d,
                         d1, d2, d3, msm_params, head)


def complete_forward(net: CompletionNet, x: TsdfVolume) -> TsdfVolume:
    """Deterministic end-to-end completion of one partial TSDF."""
    if net.cfg.use_msm and x.spec.edge != net.cfg.chunk_a * net.cfg.chunk_b:
        raise ValueError(
            f"edge {x.spec.edge} incompatible with chunks "
            f"({net.cfg.chunk_a}, {net.cfg.chunk_b})"
        )
    if x.spec.edge < 8:
        raise ValueError(f"edge {x.spec.edge} too small for the encoder stack")
    out = net.forward_node(ad.constant(x.values[None].astype(np.float64)))
    vals = np.clip(out.data[0], -x.spec.truncation, x.spec.truncation)
    return TsdfVolume(x.spec, vals.astype(np.float32))


# ---------------------------------------------------------------------------
# Checkpoint container: magic + JSON index + raw float64 payload
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"VXPK"


def save_checkpoint(path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Atomic write of named parameter arrays with a JSON index."""
    names = sorted(named)
    index = {
        "meta": meta or {},
        "params": [{"name": n, "shape": list(np.shape(named[n]))} for n in names],
    }
    blob = json.dumps(index).encode()
    parts = [_CKPT_MAGIC, struct.pack("<I", len(blob)), blob]
    for n in names:
        parts.append(np.ascontiguousarray(named[n], dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path):
    """Returns (dict name -> float64 array, meta dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (jlen,) = struct.unpack_from("<I", blob, 4)
    index = json.loads(blob[8 : 8 + jlen].decode())
    out = {}
    off = 8 + jlen
    for entry in index["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        out[entry["name"]] = arr
        off += 8 * n
    return out, index.get("meta", {})


def apply_checkpoint(named_params: dict[str, DiffNode], stored: dict[str, np.ndarray],
                     prefix: str = "") -> None:
    """Copy stored arrays into live parameters (names must match)."""
    for name, node in named_params.items():
        key = prefix + name
        if key not in stored:
            raise KeyError(f"checkpoint missing parameter {key!r}")
        arr = stored[key]
        if arr.shape != node.data.shape:
            raise ValueError(f"{key}: checkpoint shape {arr.shape} != {node.data.shape}")
        node.data[...] = arr
