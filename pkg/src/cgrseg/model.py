"""Full segmentation model: stem backbone, pooled-pyramid context,
top-down reconstruction, and the prototype-guided head.

Scale layout for an (H, W) input, H and W divisible by 64:

    stem        f1 H/4   f2 H/8   f3 H/16   f4 H/32
    pyramid     f2, f3, f4 pooled to a shared H/64 grid, mixed, re-expanded
    top-down    H/32 -> H/16 -> H/8, one mixer block per scale
    head        prototype-guided classifier at H/8, logits upsampled to H x W

The backbone is deliberately plain (stride-2 conv + norm + relu stages);
it exists to feed the decoder, not to be interesting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from .blocks import (
    BnParams,
    DpgParams,
    RcmParams,
    dpg_head_forward,
    init_dpg_params,
    init_rcm_params,
    kaiming_uniform,
    rcm_forward,
)
from .tensor import (
    Rng,
    Tensor,
    add_broadcast,
    avg_pool2d,
    concat_channels,
    conv2d,
    relu,
    scale as scale_op,
    split_channels,
    upsample_bilinear,
)

__all__ = [
    "ModelConfig",
    "ModelParams",
    "init_model_params",
    "named_tensors",
    "backbone_forward",
    "pyramid_context",
    "sfr_stage",
    "model_forward",
    "attention_stages",
    "export_attention",
    "heatmap_from_attention",
]

_GRID = 64  # coarsest grid: every input side must be a multiple of this


@dataclass
class ModelConfig:
    """Architecture hyperparameters; validated on construction."""

    num_classes: int
    in_channels: int = 3
    stage_channels: tuple[int, int, int, int] = (8, 16, 24, 32)
    strip_kernel: int = 11
    fusion_kernel: int = 3
    mlp_ratio: int = 4
    num_pyramid_rcm: int = 2
    rca_variant: str = "add"
    head_width: int = 16
    input_size: tuple[int, int] = (128, 128)

    def __post_init__(self) -> None:
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ValueError("stage_channels must be 4 positive integers")
        if self.strip_kernel % 2 == 0 or self.strip_kernel < 1:
            raise ValueError("strip_kernel must be odd and >= 1")
        if self.fusion_kernel % 2 == 0 or self.fusion_kernel < 1:
            raise ValueError("fusion_kernel must be odd and >= 1")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.num_pyramid_rcm < 1:
            raise ValueError("num_pyramid_rcm must be >= 1")
        if self.rca_variant not in ("add", "mul"):
            raise ValueError("rca_variant must be 'add' or 'mul'")
        if self.head_width < 1:
            raise ValueError("head_width must be >= 1")
        h, w = self.input_size
        if h % _GRID or w % _GRID or h < _GRID or w < _GRID:
            raise ValueError(f"input_size sides must be positive multiples of {_GRID}")


def _check_input(img: Tensor, cfg: ModelConfig) -> None:
    n, c, h, w = img.dims
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
    if h % _GRID or w % _GRID:
        raise ValueError(f"input sides must be multiples of {_GRID}, got {h}x{w}")


@dataclass
class ConvBn:
    """Stride-2 3x3 conv (no bias) + batch norm, the backbone unit."""

    w: Tensor
    bn: BnParams

    def tensors(self, prefix: str) -> Iterator[tuple[str, str, Tensor]]:
        yield f"{prefix}.conv.w", "param", self.w
        yield from self.bn.tensors(f"{prefix}.bn")


@dataclass
class SfrStage:
    """One top-down reconstruction stage.

    ``enc_align`` remixes the encoder feature (1x1, no bias so zero input
    stays zero); ``dec_align`` projects the coarser decoder feature onto
    this stage's width (absent at the deepest stage).
    """

    enc_align: Tensor
    rcm: RcmParams
    dec_align: Tensor | None = None

    def tensors(self, prefix: str) -> Iterator[tuple[str, str, Tensor]]:
        yield f"{prefix}.enc_align.w", "param", self.enc_align
        if self.dec_align is not None:
            yield f"{prefix}.dec_align.w", "param", self.dec_align
        yield from self.rcm.tensors(f"{prefix}.rcm")


@dataclass
class ModelParams:
    stem: list[ConvBn] = field(default_factory=list)
    pyramid: list[RcmParams] = field(default_factory=list)
    sfr: list[SfrStage] = field(default_factory=list)  # deepest (1/32) first
    head_align: Tensor | None = None
    head_align_b: Tensor | None = None
    head: DpgParams | None = None


_SFR_SCALES = (32, 16, 8)


def init_model_params(rng: Rng, cfg: ModelConfig) -> ModelParams:
    c1, c2, c3, c4 = cfg.stage_channels
    p = ModelParams()

    def conv_bn(cin, cout):
        w = kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9)
        return ConvBn(w=w, bn=BnParams.identity(cout))

    for cin, cout in ((cfg.in_channels, c1), (c1, c1), (c1, c2), (c2, c3), (c3, c4)):
        p.stem.append(conv_bn(cin, cout))

    def rcm(channels):
        return init_rcm_params(
            rng,
            channels,
            strip_kernel=cfg.strip_kernel,
            fusion_kernel=cfg.fusion_kernel,
            mlp_ratio=cfg.mlp_ratio,
        )

    pooled = c2 + c3 + c4
    p.pyramid = [rcm(pooled) for _ in range(cfg.num_pyramid_rcm)]

    def align(cin, cout):
        return kaiming_uniform(rng, (cout, cin, 1, 1), cin)

    enc_ch = {32: c4, 16: c3, 8: c2}
    coarser = {16: c4, 8: c3}
    for s in _SFR_SCALES:
        dec = align(coarser[s], enc_ch[s]) if s in coarser else None
        p.sfr.append(SfrStage(enc_align=align(enc_ch[s], enc_ch[s]),
                              rcm=rcm(enc_ch[s]), dec_align=dec))

    p.head_align = align(c2, cfg.head_width)
    p.head_align_b = Tensor.zeros(1, cfg.head_width, 1, 1)
    p.head = init_dpg_params(rng, cfg.head_width, cfg.num_classes)
    return p


def named_tensors(params: ModelParams) -> Iterator[tuple[str, str, Tensor]]:
    """Flat (name, kind, tensor) registry; kind is 'param' or 'buffer'."""
    for i, stage in enumerate(params.stem):
        yield from stage.tensors(f"stem.{i}")
    for j, r in enumerate(params.pyramid):
        yield from r.tensors(f"pyramid.{j}")
    for s, stage in zip(_SFR_SCALES, params.sfr):
        yield from stage.tensors(f"sfr.{s}")
    yield "head.align.w", "param", params.head_align
    yield "head.align.b", "param", params.head_align_b
    yield from params.head.tensors("head.dpg")


def backbone_forward(
    img: Tensor, params: ModelParams, cfg: ModelConfig, *, mode: str = "train"
) -> list[Tensor]:
    """Five stride-2 stages; returns features at strides 4, 8, 16, 32."""
    _check_input(img, cfg)
    x = img
    feats = []
    for i, stage in enumerate(params.stem):
        x = relu(stage.bn.apply(conv2d(x, stage.w, stride=2, pad=1), mode))
        if i >= 1:
            feats.append(x)
    return feats


def _run_rcm(x, p, cfg, mode, taps, name):
    sink = [] if taps is not None else None
    out = rcm_forward(x, p, cfg.rca_variant, mode=mode, attention_sink=sink)
    if taps is not None:
        taps[name] = sink[0]
    return out


def pyramid_context(
    f2: Tensor,
    f3: Tensor,
    f4: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    *,
    mode: str = "train",
    taps: dict | None = None,
) -> list[Tensor]:
    """Pool the three coarse features to a shared 1/64 grid, mix them with
    the stacked blocks, then hand each slice back at its source scale."""
    for f, factor in ((f2, 8), (f3, 4), (f4, 2)):
        if f.dims[2] % factor or f.dims[3] % factor:
            raise ValueError(
                f"feature {f.dims} not divisible by pool factor {factor}"
            )
    pooled = concat_channels(
        [avg_pool2d(f2, 8), avg_pool2d(f3, 4), avg_pool2d(f4, 2)]
    )
    for j, r in enumerate(params.pyramid):
        pooled = _run_rcm(pooled, r, cfg, mode, taps, f"pyramid.{j}")
    sizes = [f2.dims[1], f3.dims[1], f4.dims[1]]
    parts = split_channels(pooled, sizes)
    outs = []
    for part, src in zip(parts, (f2, f3, f4)):
        outs.append(upsample_bilinear(part, src.dims[2], src.dims[3]))
    return outs


def sfr_stage(
    enc: Tensor,
    dec_prev: Tensor | None,
    pyr: Tensor,
    stage: SfrStage,
    cfg: ModelConfig,
    *,
    mode: str = "train",
    taps: dict | None = None,
    name: str = "sfr",
) -> Tensor:
    """Sum the aligned encoder feature, the upsampled coarser decoder
    feature (if any), and the pyramid guidance; reconstruct with one block."""
    fused = conv2d(enc, stage.enc_align)
    if dec_prev is not None:
        if stage.dec_align is None:
            raise ValueError(f"stage {name} has no coarser-input alignment")
        up = upsample_bilinear(dec_prev, enc.dims[2], enc.dims[3])
        fused = add_broadcast(fused, conv2d(up, stage.dec_align))
    if fused.dims != pyr.dims:
        raise ValueError(
            f"stage {name}: fused dims {fused.dims} != pyramid dims {pyr.dims}"
        )
    fused = add_broadcast(fused, pyr)
    return _run_rcm(fused, stage.rcm, cfg, mode, taps, name)


def model_forward(
    img: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    *,
    mode: str = "train",
    taps: dict | None = None,
) -> Tensor:
    """Whole pipeline; returns (N, num_classes, H, W) logits."""
    f1, f2, f3, f4 = backbone_forward(img, params, cfg, mode=mode)
    p2, p3, p4 = pyramid_context(f2, f3, f4, params, cfg, mode=mode, taps=taps)
    d32 = sfr_stage(f4, None, p4, params.sfr[0], cfg, mode=mode, taps=taps,
                    name="sfr.32")
    d16 = sfr_stage(f3, d32, p3, params.sfr[1], cfg, mode=mode, taps=taps,
                    name="sfr.16")
    d8 = sfr_stage(f2, d16, p2, params.sfr[2], cfg, mode=mode, taps=taps,
                   name="sfr.8")
    feat = conv2d(d8, params.head_align, params.head_align_b)
    logits = dpg_head_forward(feat, params.head)
    return upsample_bilinear(logits, img.dims[2], img.dims[3])


def attention_stages(cfg: ModelConfig) -> list[str]:
    """Valid stage names for export_attention, in forward order."""
    return [f"pyramid.{j}" for j in range(cfg.num_pyramid_rcm)] + [
        f"sfr.{s}" for s in _SFR_SCALES
    ]


def heatmap_from_attention(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Channel-mean -> bilinear upsample -> min-max normalize to [0, 1].

    A spatially flat map has no contrast to show; it normalizes to zeros.
    """
    n, c, h, w = a.dims
    mean = scale_op(
        conv2d(a, Tensor.full((1, c, 1, 1), 1.0)), 1.0 / c
    )  # (N, 1, h, w) channel mean via an all-ones 1x1 conv
    up = upsample_bilinear(mean, out_h, out_w)
    lo, hi = float(up.data.min()), float(up.data.max())
    if hi - lo <= 0.0:
        return Tensor.zeros(n, 1, out_h, out_w)
    return scale_op(add_broadcast(up, Tensor.full((1, 1, 1, 1), -lo)), 1.0 / (hi - lo))


def export_attention(
    img: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    stage: str,
    *,
    mode: str = "eval",
) -> Tensor:
    """Heatmap of one block's gate over the input image, in [0, 1]."""
    valid = attention_stages(cfg)
    if stage not in valid:
        raise ValueError(f"unknown stage {stage!r}; expected one of {valid}")
    if img.dims[0] != 1:
        raise ValueError("attention export expects a single image")
    taps: dict = {}
    model_forward(img, params, cfg, mode=mode, taps=taps)
    return heatmap_from_attention(taps[stage], img.dims[2], img.dims[3])
