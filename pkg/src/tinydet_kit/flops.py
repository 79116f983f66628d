"""Exact FLOP accounting for every layer kind and for whole models.

Counting convention (calibrated against the reference cost tables for the
TinyDet variants, and frozen):

* one multiply-accumulate counts as one FLOP;
* backbone convolutions carry no bias (batch norm follows them);
* head convolutions (FPN laterals, SCConvs, RPN score/box convs) count one
  extra FLOP per output element per constituent convolution (the bias add);
* a squeeze-excitation block counts only its two FC layers,
  ``2 * E * (E // 4)`` for expansion width E;
* pooling, activations and the SE channel rescale count zero.

MFLOPs presentation rounds half-up at the third decimal and then again at
the second; this two-step rounding is what the reference tables use (it is
visible in rows whose exact value ends in ...45x), so matching them requires
reproducing it.  Table totals are the sum of the rounded per-row values,
again matching the source material; exact integer totals are always carried
alongside.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .archspec import (
    AVGPOOL2,
    BNECK,
    CONV2D,
    SCCONV,
    ArchSpec,
    LayerSpec,
    RcnnConfig,
    conv_out_size,
    require_valid,
    shape_trace,
)

__all__ = [
    "FlopCount",
    "FlopsReport",
    "HeadOp",
    "mflops",
    "layer_flops",
    "head_flops",
    "rcnn_flops",
    "model_flops",
    "COMPONENTS",
]

COMPONENTS = ("backbone", "fpn", "rpn", "rcnn")

_MILLION = Decimal(10) ** 6


def mflops(exact: int) -> Decimal:
    """Exact FLOPs -> MFLOPs with the calibrated two-step half-up rounding."""
    at3 = (Decimal(exact) / _MILLION).quantize(Decimal("0.001"), ROUND_HALF_UP)
    return at3.quantize(Decimal("0.01"), ROUND_HALF_UP)


@dataclass(frozen=True)
class FlopCount:
    exact: int

    @property
    def mflops_2dp(self) -> Decimal:
        return mflops(self.exact)

    def __add__(self, other: "FlopCount") -> "FlopCount":
        return FlopCount(self.exact + other.exact)


def _se_flops(expansion: int) -> int:
    squeeze = expansion // 4
    return 2 * expansion * squeeze


def layer_flops(layer: LayerSpec, in_shape: tuple[int, int, int]) -> FlopCount:
    """FLOPs of one backbone layer given its input (channels, height, width).

    ``align_pool`` is free: the averaging window is fused into the strided
    stage, and the strided stage's output extent is unchanged on even inputs.
    """
    cin, h, w = in_shape
    if layer.kind == AVGPOOL2:
        return FlopCount(0)
    if cin != layer.in_channels:
        raise ValueError(
            f"input has {cin} channels but layer expects {layer.in_channels}"
        )
    if layer.align_pool:
        h, w = h - 1, w - 1
    if layer.kind == CONV2D:
        ho = conv_out_size(h, layer.kernel, layer.stride)
        wo = conv_out_size(w, layer.kernel, layer.stride)
        macs = ho * wo * layer.out_channels * layer.kernel ** 2 * cin // layer.groups
        return FlopCount(macs)
    if layer.kind == BNECK:
        expansion = layer.expansion_size
        if expansion is None:
            raise ValueError("bneck layer requires expansion_size")
        total = 0
        if expansion != cin:
            # pointwise expansion runs at the (pre-pool) input extent
            total += in_shape[1] * in_shape[2] * expansion * cin
        ho = conv_out_size(h, layer.kernel, layer.stride)
        wo = conv_out_size(w, layer.kernel, layer.stride)
        total += ho * wo * expansion * layer.kernel ** 2          # depthwise
        if layer.use_se:
            total += _se_flops(expansion)
        total += ho * wo * layer.out_channels * expansion          # projection
        return FlopCount(total)
    if layer.kind == SCCONV:
        if layer.in_channels != layer.out_channels:
            raise ValueError("scconv preserves channel count")
        return head_flops(
            HeadOp("fpn_scconv", layer.in_channels, layer.out_channels, layer.groups),
            [(h, w)],
        )
    raise ValueError(f"unsupported backbone layer kind {layer.kind!r}")


@dataclass(frozen=True)
class HeadOp:
    """Descriptor for one detection-head operation.

    kind: ``fpn_lateral`` | ``fpn_scconv`` | ``rpn_scconv`` | ``rpn_score`` |
    ``rpn_box``.  SCConv uses a 3x3 depthwise stage; every head convolution
    carries a bias.
    """

    kind: str
    in_channels: int
    out_channels: int
    groups: int = 1


_SCCONV_KERNEL = 3


def head_flops(op: HeadOp, level_shapes) -> FlopCount:
    """Cost of a head operation summed over the given (height, width) levels."""
    total = 0
    if op.kind in ("fpn_scconv", "rpn_scconv"):
        if op.in_channels != op.out_channels:
            raise ValueError("scconv preserves channel count")
        c = op.in_channels
        if c % op.groups:
            raise ValueError(f"groups {op.groups} must divide channels {c}")
        per_element = (_SCCONV_KERNEL ** 2 + 1) + (c // op.groups + 1)
        for h, w in level_shapes:
            total += h * w * c * per_element
    elif op.kind in ("fpn_lateral", "rpn_score", "rpn_box"):
        for h, w in level_shapes:
            total += h * w * op.out_channels * (op.in_channels + 1)
    else:
        raise ValueError(f"unknown head op kind {op.kind!r}")
    return FlopCount(total)


def rcnn_flops(cfg: RcnnConfig) -> FlopCount:
    """Cost of the three-FC R-CNN head over ``num_rois`` proposals."""
    per_roi = (
        cfg.roi_feature_dim * cfg.hidden_dim
        + cfg.hidden_dim * cfg.num_classes_plus_bg
        + cfg.hidden_dim * cfg.box_dim
    )
    return FlopCount(cfg.num_rois * per_roi)


@dataclass(frozen=True)
class ReportRow:
    component: str
    label: str
    count: FlopCount


@dataclass(frozen=True)
class FlopsReport:
    rows: tuple[ReportRow, ...]

    @property
    def per_layer(self) -> list[tuple[str, FlopCount]]:
        return [(row.label, row.count) for row in self.rows]

    def component_exact(self, component: str) -> FlopCount:
        return FlopCount(sum(r.count.exact for r in self.rows if r.component == component))

    @property
    def per_component(self) -> dict[str, FlopCount]:
        return {c: self.component_exact(c) for c in COMPONENTS}

    @property
    def total(self) -> FlopCount:
        return FlopCount(sum(r.count.exact for r in self.rows))

    def component_table_mflops(self, component: str) -> Decimal:
        """The component's "in total" figure: sum of the rounded row values."""
        return sum(
            (r.count.mflops_2dp for r in self.rows if r.component == component),
            Decimal("0.00"),
        )

    @property
    def total_rounded_mflops(self) -> int:
        return int((Decimal(self.total.exact) / _MILLION)
                   .quantize(Decimal("1"), ROUND_HALF_UP))

    def component_rounded_mflops(self, component: str) -> int:
        return int((Decimal(self.component_exact(component).exact) / _MILLION)
                   .quantize(Decimal("1"), ROUND_HALF_UP))

    @property
    def allocation(self) -> dict[str, int]:
        """Integer percentage of the total per component (half-up).

        The percentages are rounded independently and may not sum to 100;
        presentation layers flag that case instead of renormalizing.
        """
        total = self.total.exact
        out = {}
        for c in COMPONENTS:
            share = Decimal(self.component_exact(c).exact) * 100 / Decimal(total)
            out[c] = int(share.quantize(Decimal("1"), ROUND_HALF_UP))
        return out


def _backbone_label(i: int, layer: LayerSpec) -> str:
    bits = [f"{i:02d}", layer.kind]
    if layer.kind != AVGPOOL2:
        bits.append(f"{layer.kernel}x{layer.kernel}")
        if layer.stride != 1:
            bits.append(f"s{layer.stride}")
        bits.append(f"{layer.in_channels}->{layer.out_channels}")
        if layer.use_se:
            bits.append("se")
    if layer.align_pool:
        bits.append("pooled")
    return " ".join(bits)


def model_flops(spec: ArchSpec) -> FlopsReport:
    """Per-layer, per-component and total FLOPs for a validated spec."""
    require_valid(spec)
    rows: list[ReportRow] = []

    trace = shape_trace(spec)
    in_shapes = [shape for _, shape in trace[:-1]]
    for i, layer in enumerate(spec.backbone):
        rows.append(ReportRow("backbone", _backbone_label(i, layer),
                              layer_flops(layer, in_shapes[i])))

    level_shapes = [(spec.input_size // lv.stride,) * 2 for lv in spec.fpn_levels]
    for lv, shape in zip(spec.fpn_levels, level_shapes):
        rows.append(ReportRow(
            "fpn",
            f"p{lv.stride} lateral 1x1 {lv.lateral_in_channels}->{lv.channels}",
            head_flops(HeadOp("fpn_lateral", lv.lateral_in_channels, lv.channels),
                       [shape]),
        ))
    for lv, shape in zip(spec.fpn_levels, level_shapes):
        rows.append(ReportRow(
            "fpn",
            f"p{lv.stride} scconv g={lv.scconv_groups}",
            head_flops(HeadOp("fpn_scconv", lv.channels, lv.channels, lv.scconv_groups),
                       [shape]),
        ))

    channels = spec.fpn_levels[0].channels if spec.fpn_levels else 245
    rpn = spec.rpn
    rows.append(ReportRow(
        "rpn", f"scconv g={rpn.scconv_groups} (all levels)",
        head_flops(HeadOp("rpn_scconv", channels, channels, rpn.scconv_groups),
                   level_shapes),
    ))
    rows.append(ReportRow(
        "rpn", f"score 1x1 {channels}->{rpn.anchors_per_location}",
        head_flops(HeadOp("rpn_score", channels, rpn.anchors_per_location),
                   level_shapes),
    ))
    rows.append(ReportRow(
        "rpn", f"box 1x1 {channels}->{4 * rpn.anchors_per_location}",
        head_flops(HeadOp("rpn_box", channels, 4 * rpn.anchors_per_location),
                   level_shapes),
    ))

    rows.append(ReportRow(
        "rcnn", f"fc head ({spec.rcnn.num_rois} rois)", rcnn_flops(spec.rcnn)
    ))
    return FlopsReport(tuple(rows))
