"""Closed-form compute/parameter ledger for the model.

Counting convention (kept deliberately auditable):

* macs: one multiply-accumulate.  conv = Cout*Hout*Wout*(Cin/groups)*kh*kw,
  matrix product = M*K*P.  Reported per batch element.
* elementwise: output element count of every zero-mac op (norms,
  activations, pools, adds, gates, interpolation) — informational, never
  mixed into the mac column.
* params: learnable element counts; batch-norm running stats are tallied
  separately as buffers.

The report is a pure function of the configuration and input size; a test
cross-checks its param column against the instantiated tensor registry.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig, ModelParams, named_tensors

__all__ = ["FlopsEntry", "FlopsReport", "conv_macs", "matmul_macs",
           "count_flops", "count_params"]


def conv_macs(cin: int, cout: int, kh: int, kw: int, out_h: int, out_w: int,
              groups: int = 1) -> int:
    """Multiply-accumulates of one convolution, per image."""
    return cout * out_h * out_w * (cin // groups) * kh * kw


def matmul_macs(m: int, k: int, p: int) -> int:
    return m * k * p


@dataclass
class FlopsEntry:
    name: str
    macs: int
    params: int
    buffers: int
    elementwise: int


@dataclass
class FlopsReport:
    input_size: tuple[int, int]
    entries: list[FlopsEntry]

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_buffers(self) -> int:
        return sum(e.buffers for e in self.entries)

    @property
    def total_elementwise(self) -> int:
        return sum(e.elementwise for e in self.entries)

    def table(self) -> str:
        rows = [f"{'module':<12} {'macs':>14} {'2*macs':>14} {'params':>10} "
                f"{'buffers':>8} {'elementwise':>12}"]
        for e in self.entries:
            rows.append(f"{e.name:<12} {e.macs:>14,} {2 * e.macs:>14,} "
                        f"{e.params:>10,} {e.buffers:>8,} {e.elementwise:>12,}")
        rows.append(f"{'total':<12} {self.total_macs:>14,} "
                    f"{2 * self.total_macs:>14,} {self.total_params:>10,} "
                    f"{self.total_buffers:>8,} {self.total_elementwise:>12,}")
        h, w = self.input_size
        rows.append(f"input {h}x{w}; macs are per image "
                    f"(multiply-accumulates); 2*macs given for the "
                    f"multiply+add convention")
        return "\n".join(rows)


class _Acc:
    def __init__(self):
        self.macs = 0
        self.params = 0
        self.buffers = 0
        self.elementwise = 0

    def conv(self, cin, cout, k2, h, w, groups=1, bias=False):
        self.macs += conv_macs(cin, cout, k2, 1, h, w, groups=groups)
        self.params += cout * (cin // groups) * k2 + (cout if bias else 0)

    def mat(self, m, k, p):
        self.macs += matmul_macs(m, k, p)

    def bn(self, c, h, w):
        self.params += 2 * c
        self.buffers += 2 * c
        self.elementwise += c * h * w

    def ew(self, count):
        self.elementwise += count


def _rcm(a: _Acc, c: int, h: int, w: int, cfg: ModelConfig) -> None:
    k, kf, r = cfg.strip_kernel, cfg.fusion_kernel, cfg.mlp_ratio
    a.ew(2 * c * h * w)  # row/col pools (per input element read)
    a.ew(c * h * w)  # broadcast combine
    a.conv(c, c, k, h, w, groups=c)  # 1xk strip
    a.bn(c, h, w)
    a.ew(c * h * w)  # relu
    a.conv(c, c, k, h, w, groups=c, bias=True)  # kx1 strip
    a.ew(c * h * w)  # sigmoid
    a.conv(c, c, kf * kf, h, w, groups=c, bias=True)  # depthwise fuse
    a.ew(c * h * w)  # gate multiply
    a.bn(c, h, w)
    a.conv(c, c * r, 1, h, w, bias=True)  # mlp expand
    a.ew(c * r * h * w)  # relu
    a.conv(c * r, c, 1, h, w, bias=True)  # mlp reduce
    a.ew(c * h * w)  # residual add


def count_flops(cfg: ModelConfig, h: int, w: int) -> FlopsReport:
    if h % 64 or w % 64 or h < 64 or w < 64:
        raise ValueError("input sides must be positive multiples of 64")
    c1, c2, c3, c4 = cfg.stage_channels
    entries: list[FlopsEntry] = []

    def emit(name, fill):
        a = _Acc()
        fill(a)
        entries.append(FlopsEntry(name, a.macs, a.params, a.buffers,
                                  a.elementwise))

    # backbone: five stride-2 conv+bn+relu stages
    chans = [(cfg.in_channels, c1), (c1, c1), (c1, c2), (c2, c3), (c3, c4)]
    hh, ww = h, w
    for i, (cin, cout) in enumerate(chans):
        hh, ww = hh // 2, ww // 2
        ho, wo = hh, ww

        def stem(a, cin=cin, cout=cout, ho=ho, wo=wo):
            a.conv(cin, cout, 9, ho, wo)
            a.bn(cout, ho, wo)
            a.ew(cout * ho * wo)  # relu

        emit(f"stem.{i}", stem)

    h8, w8 = h // 8, w // 8
    h16, w16 = h // 16, w // 16
    h32, w32 = h // 32, w // 32
    h64, w64 = h // 64, w // 64
    pooled = c2 + c3 + c4

    def pyramid(a):
        a.ew(c2 * h8 * w8 + c3 * h16 * w16 + c4 * h32 * w32)  # pools (reads)
        for _ in range(cfg.num_pyramid_rcm):
            _rcm(a, pooled, h64, w64, cfg)
        # re-expansion to the three source scales
        a.ew(c2 * h8 * w8 + c3 * h16 * w16 + c4 * h32 * w32)

    emit("pyramid", pyramid)

    scales = ((32, c4, None, h32, w32), (16, c3, c4, h16, w16),
              (8, c2, c3, h8, w8))
    for s, cs, c_coarse, hs, ws in scales:
        def sfr(a, cs=cs, c_coarse=c_coarse, hs=hs, ws=ws):
            a.conv(cs, cs, 1, hs, ws)  # encoder alignment
            if c_coarse is not None:
                a.ew(cs * hs * ws)  # upsample of the coarser decoder feature
                a.conv(c_coarse, cs, 1, hs, ws)  # coarser-input alignment
                a.ew(cs * hs * ws)  # add
            a.ew(cs * hs * ws)  # pyramid add
            _rcm(a, cs, hs, ws, cfg)

        emit(f"sfr.{s}", sfr)

    d, ncls = cfg.head_width, cfg.num_classes
    d_mid = max(d // 4, 1)

    def head(a):
        a.conv(c2, d, 1, h8, w8, bias=True)  # head alignment
        a.conv(d, ncls, 1, h8, w8, bias=True)  # class projection
        a.mat(ncls, h8 * w8, d)  # prototype accumulation
        a.ew(ncls * d)  # prototype scaling
        a.mat(ncls, d, 1)  # compress to class logits
        a.params += d  # compress weights
        a.ew(ncls)  # softmax
        a.mat(d, ncls, 1)  # embed-weighted prototype
        a.mat(d_mid, d, 1)  # gate fc1
        a.params += d_mid * d
        a.ew(2 * d_mid)  # layer norm + relu
        a.params += 2 * d_mid  # layer norm affine
        a.mat(d, d_mid, 1)  # gate fc2
        a.params += d * d_mid + d
        a.ew(d * h8 * w8)  # channel gate
        a.conv(d, ncls, 1, h8, w8, bias=True)  # classifier
        a.ew(ncls * h * w)  # logit upsample

    emit("head", head)
    return FlopsReport(input_size=(h, w), entries=entries)


def count_params(params: ModelParams) -> dict[str, dict[str, int]]:
    """Per-module learnable/buffer element counts from the live registry."""
    ledger: dict[str, dict[str, int]] = {}
    for name, kind, t in named_tensors(params):
        top = name.split(".", 1)[0]
        if top == "pyramid":
            module = "pyramid"
        elif top in ("stem", "sfr"):
            module = ".".join(name.split(".")[:2])
        else:
            module = "head"
        entry = ledger.setdefault(module, {"params": 0, "buffers": 0})
        key = "params" if kind == "param" else "buffers"
        entry[key] += t.data.size
    return ledger
