"""Decoder building blocks.

Two parameterized units live here:

* the rectangular-calibration mixer (``RcmParams`` / ``rcm_forward``): an
  axis-pooled strip-convolution attention gate, a depthwise fuse, and a
  pointwise MLP wrapped in a residual connection;
* the prototype-guided classifier head (``DpgParams`` / ``dpg_head_forward``):
  per-image class prototypes, a class-embedding softmax, a learned channel
  gate, and the final 1x1 classifier.

Every op is a pure function of (input, params) built from tensor-core ops,
so gradients come for free from the tape.  Batch-norm running buffers are
the only state that moves (in train mode), exactly as in the tensor core.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    Rng,
    Tensor,
    add_broadcast,
    batch_norm,
    concat_batch,
    conv2d,
    layer_norm,
    matmul,
    mul_hadamard,
    pool_cols,
    pool_rows,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    take_batch,
    transpose_mat,
)

__all__ = [
    "BnParams",
    "RcmParams",
    "DpgParams",
    "init_rcm_params",
    "init_dpg_params",
    "kaiming_uniform",
    "rca_attention",
    "rca_fuse",
    "rcm_forward",
    "dpg_prototype",
    "dpg_class_embed",
    "dpg_attend",
    "dpg_head_forward",
]


def kaiming_uniform(rng: Rng, dims: tuple[int, ...], fan_in: int) -> Tensor:
    """Fan-in-scaled uniform init: bound = sqrt(6 / fan_in)."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    bound = float(np.sqrt(6.0 / fan_in))
    return Tensor(rng.uniform(dims, -bound, bound), copy=False)


@dataclass
class BnParams:
    """One batch-norm layer: affine params plus running buffers."""

    gamma: Tensor
    beta: Tensor
    mean: Tensor
    var: Tensor

    @classmethod
    def identity(cls, c: int) -> "BnParams":
        return cls(
            gamma=Tensor.full((1, c, 1, 1), 1.0),
            beta=Tensor.zeros(1, c, 1, 1),
            mean=Tensor.zeros(1, c, 1, 1),
            var=Tensor.full((1, c, 1, 1), 1.0),
        )

    def apply(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.mean, self.var, mode=mode)

    def tensors(self, prefix: str) -> Iterator[tuple[str, str, Tensor]]:
        yield f"{prefix}.gamma", "param", self.gamma
        yield f"{prefix}.beta", "param", self.beta
        yield f"{prefix}.mean", "buffer", self.mean
        yield f"{prefix}.var", "buffer", self.var


@dataclass
class RcmParams:
    """Parameters of one rectangular-calibration mixer block.

    Strip convs are depthwise with odd kernels so same-padding preserves
    shape.  ``strip_h`` and ``mlp_w1``-after-norm carry no bias where a
    norm directly follows; everything else has one.  ``mlp_w2`` starts at
    zero so a fresh block is an exact identity.
    """

    strip_h: Tensor  # (C, 1, 1, k) depthwise, no bias (norm follows)
    bn_cal: BnParams
    strip_v: Tensor  # (C, 1, k, 1) depthwise
    strip_v_b: Tensor
    fuse_dw: Tensor  # (C, 1, kf, kf) depthwise
    fuse_b: Tensor
    bn_out: BnParams
    mlp_w1: Tensor  # (C*r, C, 1, 1)
    mlp_b1: Tensor
    mlp_w2: Tensor  # (C, C*r, 1, 1), zero-initialized
    mlp_b2: Tensor

    @property
    def channels(self) -> int:
        return self.strip_h.dims[0]

    def tensors(self, prefix: str) -> Iterator[tuple[str, str, Tensor]]:
        yield f"{prefix}.strip_h.w", "param", self.strip_h
        yield from self.bn_cal.tensors(f"{prefix}.bn_cal")
        yield f"{prefix}.strip_v.w", "param", self.strip_v
        yield f"{prefix}.strip_v.b", "param", self.strip_v_b
        yield f"{prefix}.fuse.w", "param", self.fuse_dw
        yield f"{prefix}.fuse.b", "param", self.fuse_b
        yield from self.bn_out.tensors(f"{prefix}.bn_out")
        yield f"{prefix}.mlp1.w", "param", self.mlp_w1
        yield f"{prefix}.mlp1.b", "param", self.mlp_b1
        yield f"{prefix}.mlp2.w", "param", self.mlp_w2
        yield f"{prefix}.mlp2.b", "param", self.mlp_b2


def init_rcm_params(
    rng: Rng,
    channels: int,
    *,
    strip_kernel: int = 11,
    fusion_kernel: int = 3,
    mlp_ratio: int = 4,
) -> RcmParams:
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if strip_kernel % 2 == 0 or fusion_kernel % 2 == 0:
        raise ValueError("strip and fusion kernels must be odd")
    if mlp_ratio < 1:
        raise ValueError("mlp_ratio must be >= 1")
    c, k, kf, r = channels, strip_kernel, fusion_kernel, mlp_ratio
    return RcmParams(
        strip_h=kaiming_uniform(rng, (c, 1, 1, k), k),
        bn_cal=BnParams.identity(c),
        strip_v=kaiming_uniform(rng, (c, 1, k, 1), k),
        strip_v_b=Tensor.zeros(1, c, 1, 1),
        fuse_dw=kaiming_uniform(rng, (c, 1, kf, kf), kf * kf),
        fuse_b=Tensor.zeros(1, c, 1, 1),
        bn_out=BnParams.identity(c),
        mlp_w1=kaiming_uniform(rng, (c * r, c, 1, 1), c),
        mlp_b1=Tensor.zeros(1, c * r, 1, 1),
        mlp_w2=Tensor.zeros(c, c * r, 1, 1),
        mlp_b2=Tensor.zeros(1, c, 1, 1),
    )


_VARIANTS = ("add", "mul")


def rca_attention(
    x: Tensor, p: RcmParams, *, variant: str = "add", mode: str = "train"
) -> Tensor:
    """Axis-pooled strip-convolution attention gate, values in (0, 1).

    Row and column mean-pools broadcast back to a full map (summed under
    ``variant='add'``, multiplied under ``'mul'``), then a horizontal 1xk
    depthwise strip, norm + relu, a vertical kx1 strip, and a sigmoid.
    """
    if variant not in _VARIANTS:
        raise ValueError(f"variant must be one of {_VARIANTS}, got {variant!r}")
    c = p.channels
    r, col = pool_rows(x), pool_cols(x)
    y = add_broadcast(r, col) if variant == "add" else mul_hadamard(r, col)
    y = conv2d(y, p.strip_h, pad="same", groups=c)
    y = relu(p.bn_cal.apply(y, mode))
    y = conv2d(y, p.strip_v, p.strip_v_b, pad="same", groups=c)
    return sigmoid(y)


def rca_fuse(x: Tensor, a: Tensor, p: RcmParams) -> Tensor:
    """Depthwise-convolve the feature map, then gate it with the attention."""
    if x.dims != a.dims:
        raise ValueError(f"feature/attention shape mismatch: {x.dims} vs {a.dims}")
    y = conv2d(x, p.fuse_dw, p.fuse_b, pad="same", groups=p.channels)
    return mul_hadamard(y, a)


def rcm_forward(
    x: Tensor,
    p: RcmParams,
    variant: str = "add",
    *,
    mode: str = "train",
    attention_sink: list | None = None,
) -> Tensor:
    """Full mixer block: gate, fuse, norm, pointwise MLP, residual add.

    Pass a list as ``attention_sink`` to also receive the gate map (used by
    the attention-export path).
    """
    a = rca_attention(x, p, variant=variant, mode=mode)
    if attention_sink is not None:
        attention_sink.append(a)
    h = rca_fuse(x, a, p)
    h = p.bn_out.apply(h, mode)
    h = conv2d(h, p.mlp_w1, p.mlp_b1)
    h = relu(h)
    h = conv2d(h, p.mlp_w2, p.mlp_b2)
    return add_broadcast(h, x)


# ---------------------------------------------------------------------------
# prototype-guided head
# ---------------------------------------------------------------------------


@dataclass
class DpgParams:
    """Parameters of the prototype-guided classifier head.

    Matrix-shaped weights are stored in the (1, M, K, 1) layout the matmul
    op expects; logical shapes are noted per field.  ``fc_compress`` has no
    bias (a shared logit offset cancels in the softmax) and ``fc1`` has none
    because layer-norm follows it.
    """

    proj_cls: Tensor  # (C_cls, D, 1, 1) pointwise conv
    proj_cls_b: Tensor
    fc_compress: Tensor  # logical (1, D) row, stored (1, D, 1, 1)
    fc1: Tensor  # logical (D_mid, D), stored (1, D_mid, D, 1)
    ln_gamma: Tensor  # (1, D_mid, 1, 1)
    ln_beta: Tensor
    fc2: Tensor  # logical (D, D_mid), stored (1, D, D_mid, 1)
    fc2_b: Tensor  # (1, D, 1, 1)
    cls_conv: Tensor  # (C_cls, D, 1, 1)
    cls_b: Tensor

    @property
    def n_classes(self) -> int:
        return self.proj_cls.dims[0]

    @property
    def width(self) -> int:
        return self.proj_cls.dims[1]

    def tensors(self, prefix: str) -> Iterator[tuple[str, str, Tensor]]:
        yield f"{prefix}.proj_cls.w", "param", self.proj_cls
        yield f"{prefix}.proj_cls.b", "param", self.proj_cls_b
        yield f"{prefix}.fc_compress.w", "param", self.fc_compress
        yield f"{prefix}.fc1.w", "param", self.fc1
        yield f"{prefix}.ln.gamma", "param", self.ln_gamma
        yield f"{prefix}.ln.beta", "param", self.ln_beta
        yield f"{prefix}.fc2.w", "param", self.fc2
        yield f"{prefix}.fc2.b", "param", self.fc2_b
        yield f"{prefix}.cls.w", "param", self.cls_conv
        yield f"{prefix}.cls.b", "param", self.cls_b


def init_dpg_params(
    rng: Rng, width: int, n_classes: int, *, mid: int | None = None
) -> DpgParams:
    if width < 1 or n_classes < 2:
        raise ValueError("need width >= 1 and n_classes >= 2")
    d = width
    d_mid = max(d // 4, 1) if mid is None else mid
    if d_mid < 1:
        raise ValueError("mid must be >= 1")
    return DpgParams(
        proj_cls=kaiming_uniform(rng, (n_classes, d, 1, 1), d),
        proj_cls_b=Tensor.zeros(1, n_classes, 1, 1),
        fc_compress=kaiming_uniform(rng, (1, d, 1, 1), d),
        fc1=kaiming_uniform(rng, (1, d_mid, d, 1), d),
        ln_gamma=Tensor.full((1, d_mid, 1, 1), 1.0),
        ln_beta=Tensor.zeros(1, d_mid, 1, 1),
        # zero weights + unit bias start the channel gate as an exact
        # pass-through, decoupling the prototype feedback loop early on
        fc2=Tensor.zeros(1, d, d_mid, 1),
        fc2_b=Tensor.full((1, d, 1, 1), 1.0),
        # zero classifier => exactly uniform logits at init, so the first
        # loss is ln(n_classes) regardless of the rest of the model
        cls_conv=Tensor.zeros(n_classes, d, 1, 1),
        cls_b=Tensor.zeros(1, n_classes, 1, 1),
    )


def dpg_prototype(fx: Tensor, p: DpgParams) -> Tensor:
    """Per-image class prototypes, one averaged feature vector per class.

    A pointwise projection scores every pixel against every class; the
    score-weighted pixel features are summed and divided by H*W so the
    prototype magnitude does not grow with image area.  Returns the
    (n_classes x width) matrix as a (1, C_cls, D, 1) tensor.
    """
    n, d, h, w = fx.dims
    if n != 1:
        raise ValueError(f"dpg_prototype expects batch 1, got {n}")
    if d != p.width:
        raise ValueError(f"feature width {d} != head width {p.width}")
    m = conv2d(fx, p.proj_cls, p.proj_cls_b)  # (1, C_cls, H, W)
    m = reshape(m, (1, p.n_classes, h * w, 1))
    q = transpose_mat(reshape(fx, (1, d, h * w, 1)))  # (1, H*W, D, 1)
    return scale(matmul(m, q), 1.0 / (h * w))


def dpg_class_embed(fp: Tensor, p: DpgParams) -> Tensor:
    """Compress each prototype row to a logit; softmax over classes.

    Returns a (1, C_cls, 1, 1) probability vector (sums to 1).
    """
    n, c, d, w = fp.dims
    if (n, c, d, w) != (1, p.n_classes, p.width, 1):
        raise ValueError(f"prototype dims {fp.dims} do not match head")
    logits = matmul(fp, p.fc_compress)  # (1, C_cls, 1, 1)
    return softmax(logits, axis=1)


def dpg_attend(fp: Tensor, fgp: Tensor, fx: Tensor, p: DpgParams) -> Tensor:
    """Gate the feature map channel-wise by the embedded prototype mix.

    The class-probability-weighted prototype (prototype^T x class embed)
    runs through a small bottleneck (fc1, layer-norm, relu, fc2) to produce
    one gate value per channel, which multiplies fx everywhere.
    """
    if fgp.dims != (1, p.n_classes, 1, 1):
        raise ValueError(f"class embedding dims {fgp.dims} do not match head")
    if fx.dims[1] != p.width:
        raise ValueError(f"feature width {fx.dims[1]} != head width {p.width}")
    v = matmul(transpose_mat(fp), fgp)  # (1, D, 1, 1)
    hdn = matmul(p.fc1, v)  # (1, D_mid, 1, 1)
    hdn = relu(layer_norm(hdn, p.ln_gamma, p.ln_beta))
    gate = add_broadcast(matmul(p.fc2, hdn), p.fc2_b)  # (1, D, 1, 1)
    return mul_hadamard(fx, gate)


def dpg_head_forward(fx: Tensor, p: DpgParams) -> Tensor:
    """Prototype, embed, gate, classify — independently per batch element."""
    outs = []
    for i in range(fx.dims[0]):
        sub = take_batch(fx, i)
        fp = dpg_prototype(sub, p)
        fgp = dpg_class_embed(fp, p)
        gated = dpg_attend(fp, fgp, sub, p)
        outs.append(conv2d(gated, p.cls_conv, p.cls_b))
    return concat_batch(outs)
