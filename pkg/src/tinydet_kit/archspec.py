"""Architecture data model for the TinyDet detector family.

An ``ArchSpec`` is a declarative description of one detector: the ordered
backbone rows, the pyramid levels fed by it, and the RPN / R-CNN head
configuration.  Everything else in this package (cost accounting, alignment
traces, anchor tiling) is a pure function of this value.

The three built-in specs (``tinydet-s``, ``tinydet-m``, ``tinydet-l``) are
transcriptions of the reference configuration tables for those variants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

__all__ = [
    "CONV2D",
    "BNECK",
    "AVGPOOL2",
    "SCCONV",
    "LayerSpec",
    "PyramidLevel",
    "RpnConfig",
    "RcnnConfig",
    "ArchSpec",
    "Violation",
    "ParseError",
    "ValidationError",
    "BUILTIN_NAMES",
    "builtin_arch",
    "parse_arch",
    "serialize_arch",
    "validate_arch",
    "shape_trace",
]

# Layer kinds.  The backbone uses the first three; "scconv" appears in
# user-supplied configs that describe head-style blocks explicitly.
CONV2D = "conv2d"
BNECK = "bneck"
AVGPOOL2 = "avgpool2"
SCCONV = "scconv"

_LAYER_KINDS = (CONV2D, BNECK, AVGPOOL2, SCCONV)
_NONLINEARITIES = ("relu", "hswish", "none")

RELU = "relu"
HSWISH = "hswish"


class ParseError(ValueError):
    """Raised for malformed architecture config documents."""


class ValidationError(ValueError):
    """Raised when an operation requires a spec that fails validation."""


@dataclass(frozen=True)
class LayerSpec:
    """One backbone row.

    ``align_pool`` marks a 2x2 averaging window applied before the layer's
    strided stage (before the whole conv for ``conv2d``, between expansion
    and the strided depthwise stage for ``bneck``).  It converts the strided
    stage's even-sized input to an odd one and costs nothing under the fused
    accounting convention.
    """

    kind: str
    kernel: int = 1
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    expansion_size: int | None = None
    use_se: bool = False
    nonlinearity: str = "none"
    groups: int = 1
    bias: bool = False
    feeds_fpn: bool = False
    align_pool: bool = False


@dataclass(frozen=True)
class PyramidLevel:
    stride: int
    lateral_in_channels: int
    channels: int = 245
    scconv_groups: int = 1


@dataclass(frozen=True)
class RpnConfig:
    scconv_groups: int = 49
    anchors_per_location: int = 3
    anchor_sizes: tuple[float, ...] = ()
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class RcnnConfig:
    roi_feature_dim: int = 245
    hidden_dim: int = 1024
    num_classes_plus_bg: int = 81
    box_dim: int = 4
    num_rois: int = 200


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_size: int
    backbone: tuple[LayerSpec, ...]
    fpn_levels: tuple[PyramidLevel, ...]
    rpn: RpnConfig
    rcnn: RcnnConfig

    @property
    def input_channels(self) -> int:
        return self.backbone[0].in_channels if self.backbone else 3


@dataclass(frozen=True)
class Violation:
    """A single validation failure; ``layer_index`` is None for spec-level rules."""

    layer_index: int | None
    rule: str
    message: str

    def __str__(self) -> str:
        where = "spec" if self.layer_index is None else f"backbone[{self.layer_index}]"
        return f"{where}: {self.rule}: {self.message}"


# ---------------------------------------------------------------------------
# Built-in specifications
# ---------------------------------------------------------------------------

# Backbone rows as (kind, kernel, expansion, out_channels, se, nl, stride, fpn).
# in_channels follows by chaining from the input.
_M_ROWS = [
    (CONV2D, 3, None, 24, False, HSWISH, 2, False),
    (BNECK, 3, 24, 24, False, RELU, 1, False),
    (BNECK, 3, 72, 36, False, RELU, 2, False),
    (BNECK, 3, 108, 36, False, RELU, 1, False),
    (BNECK, 3, 108, 36, False, RELU, 1, False),
    (BNECK, 3, 108, 36, False, RELU, 1, True),
    (BNECK, 5, 108, 60, True, RELU, 2, False),
    (BNECK, 5, 180, 60, True, RELU, 1, False),
    (BNECK, 5, 180, 60, True, RELU, 1, True),
    (BNECK, 3, 240, 80, False, HSWISH, 2, False),
    (BNECK, 3, 200, 80, False, HSWISH, 1, False),
    (BNECK, 3, 184, 80, False, HSWISH, 1, False),
    (BNECK, 3, 184, 80, False, HSWISH, 1, False),
    (BNECK, 3, 480, 112, True, HSWISH, 1, False),
    (BNECK, 3, 672, 112, True, HSWISH, 1, True),
    (BNECK, 5, 672, 160, True, HSWISH, 2, False),
    (BNECK, 5, 960, 160, True, HSWISH, 1, False),
    (BNECK, 5, 960, 160, True, HSWISH, 1, True),
    (BNECK, 5, 960, 160, True, HSWISH, 2, False),
    (BNECK, 5, 960, 160, True, HSWISH, 1, True),
]

_S_ROWS = [
    (CONV2D, 3, None, 16, False, HSWISH, 2, False),
    (BNECK, 3, 16, 16, False, RELU, 1, False),
    (BNECK, 3, 64, 24, False, RELU, 2, False),
    (BNECK, 3, 72, 24, False, RELU, 1, False),
    (BNECK, 5, 72, 40, True, RELU, 2, False),
    (BNECK, 5, 120, 40, True, RELU, 1, False),
    (BNECK, 5, 120, 40, True, RELU, 1, True),
    (BNECK, 3, 240, 80, False, HSWISH, 2, False),
    (BNECK, 3, 240, 80, False, HSWISH, 1, False),
    (BNECK, 5, 240, 80, False, HSWISH, 1, False),
    (BNECK, 5, 240, 80, False, HSWISH, 1, False),
    (BNECK, 3, 240, 112, True, HSWISH, 1, False),
    (BNECK, 3, 336, 112, True, HSWISH, 1, True),
    (BNECK, 5, 336, 160, True, HSWISH, 2, False),
    (BNECK, 5, 480, 160, True, HSWISH, 1, False),
    (BNECK, 5, 480, 160, True, HSWISH, 1, True),
    # The final stride-2 block doubles as the coarsest pyramid tap.
    (BNECK, 5, 960, 160, True, HSWISH, 2, True),
]

_ANCHOR_SIZE_PER_STRIDE = 3.2  # anchor side = 3.2 * level stride, all variants

_BUILTIN_TABLES = {
    "tinydet-s": (_S_ROWS, 320, (8, 16, 32, 64), (7, 5, 1, 1)),
    "tinydet-m": (_M_ROWS, 320, (4, 8, 16, 32, 64), (49, 7, 5, 1, 1)),
    "tinydet-l": (_M_ROWS, 512, (4, 8, 16, 32, 64), (49, 7, 5, 1, 1)),
}

BUILTIN_NAMES = tuple(sorted(_BUILTIN_TABLES))


def _build_backbone(rows, input_channels=3) -> tuple[LayerSpec, ...]:
    layers = []
    cin = input_channels
    for kind, kernel, expansion, cout, se, nl, stride, fpn in rows:
        layers.append(
            LayerSpec(
                kind=kind,
                kernel=kernel,
                stride=stride,
                in_channels=cin,
                out_channels=cout,
                expansion_size=expansion,
                use_se=se,
                nonlinearity=nl,
                feeds_fpn=fpn,
            )
        )
        cin = cout
    return tuple(layers)


def builtin_arch(name: str) -> ArchSpec:
    """Return one of the built-in TinyDet specifications.

    Valid names: ``tinydet-s``, ``tinydet-m``, ``tinydet-l``.
    """
    key = name.lower()
    if key not in _BUILTIN_TABLES:
        raise ValueError(
            f"unknown architecture {name!r}; valid names: {', '.join(BUILTIN_NAMES)}"
        )
    rows, input_size, strides, fpn_groups = _BUILTIN_TABLES[key]
    backbone = _build_backbone(rows)
    taps = [layer for layer in backbone if layer.feeds_fpn]
    levels = tuple(
        PyramidLevel(stride=s, lateral_in_channels=tap.out_channels, scconv_groups=g)
        for s, tap, g in zip(strides, taps, fpn_groups)
    )
    rpn = RpnConfig(
        scconv_groups=49,
        anchors_per_location=3,
        anchor_sizes=tuple(_ANCHOR_SIZE_PER_STRIDE * s for s in strides),
        aspect_ratios=(0.5, 1.0, 2.0),
    )
    return ArchSpec(
        name=key,
        input_size=input_size,
        backbone=backbone,
        fpn_levels=levels,
        rpn=rpn,
        rcnn=RcnnConfig(),
    )


# ---------------------------------------------------------------------------
# Config document parsing / serialization
# ---------------------------------------------------------------------------

_LAYER_REQUIRED = ("kind", "in_channels", "out_channels")
_LAYER_KEY_ORDER = (
    "kind",
    "kernel",
    "stride",
    "in_channels",
    "out_channels",
    "expansion_size",
    "use_se",
    "nonlinearity",
    "groups",
    "bias",
    "feeds_fpn",
    "align_pool",
)


def _require(obj: dict, key: str, context: str):
    if key not in obj:
        raise ParseError(f"{context}: missing required field {key!r}")
    return obj[key]


def _layer_from_dict(obj: dict, index: int) -> LayerSpec:
    ctx = f"backbone[{index}]"
    if not isinstance(obj, dict):
        raise ParseError(f"{ctx}: expected an object, got {type(obj).__name__}")
    kind = _require(obj, "kind", ctx)
    if kind not in _LAYER_KINDS:
        raise ParseError(f"{ctx}: unknown kind {kind!r}; expected one of {_LAYER_KINDS}")
    if kind == AVGPOOL2:
        channels = obj.get("in_channels", obj.get("out_channels", 1))
        return LayerSpec(kind=AVGPOOL2, in_channels=channels, out_channels=channels)
    for key in _LAYER_REQUIRED:
        _require(obj, key, ctx)
    unknown = set(obj) - set(_LAYER_KEY_ORDER)
    if unknown:
        raise ParseError(f"{ctx}: unknown fields {sorted(unknown)}")
    return LayerSpec(
        kind=kind,
        kernel=int(obj.get("kernel", 1)),
        stride=int(obj.get("stride", 1)),
        in_channels=int(obj["in_channels"]),
        out_channels=int(obj["out_channels"]),
        expansion_size=(None if obj.get("expansion_size") is None
                        else int(obj["expansion_size"])),
        use_se=bool(obj.get("use_se", False)),
        nonlinearity=str(obj.get("nonlinearity", "none")),
        groups=int(obj.get("groups", 1)),
        bias=bool(obj.get("bias", False)),
        feeds_fpn=bool(obj.get("feeds_fpn", False)),
        align_pool=bool(obj.get("align_pool", False)),
    )


def parse_arch(text: str) -> ArchSpec:
    """Parse a config document (JSON object tree) into an ``ArchSpec``.

    Structural problems raise :class:`ParseError`; semantic rules are the
    business of :func:`validate_arch` and are not checked here.
    """
    if not text or not text.strip():
        raise ParseError("no architecture defined")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not doc:
        raise ParseError("no architecture defined")
    if not isinstance(doc, dict):
        raise ParseError("top-level value must be an object")

    name = str(_require(doc, "name", "document"))
    input_size = int(_require(doc, "input_size", "document"))
    backbone_doc = _require(doc, "backbone", "document")
    if not isinstance(backbone_doc, list):
        raise ParseError("'backbone' must be an array of layer objects")
    backbone = tuple(_layer_from_dict(o, i) for i, o in enumerate(backbone_doc))

    levels_doc = doc.get("fpn_levels", [])
    levels = []
    for i, o in enumerate(levels_doc):
        ctx = f"fpn_levels[{i}]"
        levels.append(
            PyramidLevel(
                stride=int(_require(o, "stride", ctx)),
                lateral_in_channels=int(_require(o, "lateral_in_channels", ctx)),
                channels=int(o.get("channels", 245)),
                scconv_groups=int(o.get("scconv_groups", 1)),
            )
        )

    rpn_doc = doc.get("rpn", {})
    rpn = RpnConfig(
        scconv_groups=int(rpn_doc.get("scconv_groups", 49)),
        anchors_per_location=int(rpn_doc.get("anchors_per_location", 3)),
        anchor_sizes=tuple(float(v) for v in rpn_doc.get("anchor_sizes", ())),
        aspect_ratios=tuple(float(v) for v in rpn_doc.get("aspect_ratios", (0.5, 1.0, 2.0))),
    )
    rcnn_doc = doc.get("rcnn", {})
    rcnn = RcnnConfig(
        roi_feature_dim=int(rcnn_doc.get("roi_feature_dim", 245)),
        hidden_dim=int(rcnn_doc.get("hidden_dim", 1024)),
        num_classes_plus_bg=int(rcnn_doc.get("num_classes_plus_bg", 81)),
        box_dim=int(rcnn_doc.get("box_dim", 4)),
        num_rois=int(rcnn_doc.get("num_rois", 200)),
    )
    return ArchSpec(
        name=name,
        input_size=input_size,
        backbone=backbone,
        fpn_levels=tuple(levels),
        rpn=rpn,
        rcnn=rcnn,
    )


def _layer_to_dict(layer: LayerSpec) -> dict:
    if layer.kind == AVGPOOL2:
        return {"kind": AVGPOOL2, "in_channels": layer.in_channels}
    out = {
        "kind": layer.kind,
        "kernel": layer.kernel,
        "stride": layer.stride,
        "in_channels": layer.in_channels,
        "out_channels": layer.out_channels,
    }
    if layer.kind == BNECK:
        out["expansion_size"] = layer.expansion_size
        out["use_se"] = layer.use_se
    out["nonlinearity"] = layer.nonlinearity
    if layer.groups != 1:
        out["groups"] = layer.groups
    if layer.bias:
        out["bias"] = layer.bias
    out["feeds_fpn"] = layer.feeds_fpn
    if layer.align_pool:
        out["align_pool"] = True
    return out


def serialize_arch(spec: ArchSpec) -> str:
    """Serialize to the config document format (stable key order)."""
    doc = {
        "name": spec.name,
        "input_size": spec.input_size,
        "backbone": [_layer_to_dict(layer) for layer in spec.backbone],
        "fpn_levels": [
            {
                "stride": lv.stride,
                "lateral_in_channels": lv.lateral_in_channels,
                "channels": lv.channels,
                "scconv_groups": lv.scconv_groups,
            }
            for lv in spec.fpn_levels
        ],
        "rpn": {
            "scconv_groups": spec.rpn.scconv_groups,
            "anchors_per_location": spec.rpn.anchors_per_location,
            "anchor_sizes": list(spec.rpn.anchor_sizes),
            "aspect_ratios": list(spec.rpn.aspect_ratios),
        },
        "rcnn": {
            "roi_feature_dim": spec.rcnn.roi_feature_dim,
            "hidden_dim": spec.rcnn.hidden_dim,
            "num_classes_plus_bg": spec.rcnn.num_classes_plus_bg,
            "box_dim": spec.rcnn.box_dim,
            "num_rois": spec.rcnn.num_rois,
        },
    }
    return json.dumps(doc, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Validation and shape propagation
# ---------------------------------------------------------------------------

def validate_arch(spec: ArchSpec) -> list[Violation]:
    """Check every structural invariant; violations are data, not exceptions."""
    out: list[Violation] = []

    def bad(idx, rule, msg):
        out.append(Violation(idx, rule, msg))

    if spec.input_size <= 0:
        bad(None, "input_size", f"must be positive, got {spec.input_size}")
    elif spec.input_size % 2 != 0:
        bad(None, "input_size", f"must be even, got {spec.input_size}")

    prev_out = None
    cumulative_stride = 1
    tap_info: list[tuple[int, int, int]] = []  # (layer idx, cumulative stride, channels)
    for i, layer in enumerate(spec.backbone):
        if layer.kind not in _LAYER_KINDS:
            bad(i, "kind", f"unknown kind {layer.kind!r}")
            continue
        if layer.kind != AVGPOOL2:
            if layer.kernel not in (1, 3, 5):
                bad(i, "kernel", f"kernel must be in {{1,3,5}}, got {layer.kernel}")
            if layer.stride not in (1, 2):
                bad(i, "stride", f"stride must be 1 or 2, got {layer.stride}")
        if layer.in_channels <= 0 or layer.out_channels <= 0:
            bad(i, "channels", "channel counts must be positive")
        if prev_out is not None and layer.in_channels != prev_out:
            bad(i, "chaining",
                f"in_channels {layer.in_channels} != previous out_channels {prev_out}")
        if layer.kind == BNECK:
            if layer.expansion_size is None or layer.expansion_size <= 0:
                bad(i, "expansion", "bneck requires a positive expansion_size")
        if layer.kind in (SCCONV, CONV2D) and layer.groups > 1:
            if layer.in_channels % layer.groups or layer.out_channels % layer.groups:
                bad(i, "groups",
                    f"groups {layer.groups} must divide in/out channels "
                    f"({layer.in_channels}, {layer.out_channels})")
        if layer.kind == SCCONV and layer.out_channels % layer.groups:
            bad(i, "groups",
                f"groups {layer.groups} must divide channels {layer.out_channels}")
        prev_out = layer.out_channels
        if layer.kind != AVGPOOL2:
            cumulative_stride *= layer.stride
        if layer.feeds_fpn:
            tap_info.append((i, cumulative_stride, layer.out_channels))

    if len(tap_info) != len(spec.fpn_levels):
        bad(None, "fpn_taps",
            f"{len(tap_info)} feeds_fpn layers but {len(spec.fpn_levels)} pyramid levels")
    else:
        for (idx, stride, channels), level in zip(tap_info, spec.fpn_levels):
            if stride != level.stride:
                bad(idx, "fpn_stride",
                    f"cumulative stride {stride} != pyramid level stride {level.stride}")
            if channels != level.lateral_in_channels:
                bad(idx, "fpn_channels",
                    f"tap channels {channels} != lateral_in_channels "
                    f"{level.lateral_in_channels}")

    prev_stride = 0
    for j, level in enumerate(spec.fpn_levels):
        if level.stride <= prev_stride:
            bad(None, "fpn_order", f"level strides must be strictly increasing "
                f"(level {j} has stride {level.stride})")
        prev_stride = level.stride
        if level.stride not in (4, 8, 16, 32, 64):
            bad(None, "fpn_stride_set",
                f"level stride must be in {{4,8,16,32,64}}, got {level.stride}")
        if level.channels <= 0 or level.lateral_in_channels <= 0:
            bad(None, "fpn_channels", f"level {j} channel counts must be positive")
        elif level.channels % level.scconv_groups:
            bad(None, "fpn_groups",
                f"level {j}: groups {level.scconv_groups} must divide channels "
                f"{level.channels}")

    if spec.rpn.scconv_groups <= 0:
        bad(None, "rpn_groups", "scconv_groups must be positive")
    elif spec.fpn_levels and any(lv.channels % spec.rpn.scconv_groups for lv in spec.fpn_levels):
        bad(None, "rpn_groups",
            f"rpn groups {spec.rpn.scconv_groups} must divide level channels")
    if len(spec.rpn.anchor_sizes) != len(spec.fpn_levels):
        bad(None, "anchor_sizes",
            f"{len(spec.rpn.anchor_sizes)} anchor sizes for "
            f"{len(spec.fpn_levels)} pyramid levels")
    if any(s <= 0 for s in spec.rpn.anchor_sizes):
        bad(None, "anchor_sizes", "anchor sizes must be positive")
    if spec.rpn.anchors_per_location <= 0:
        bad(None, "rpn_anchors", "anchors_per_location must be positive")

    rc = spec.rcnn
    for fname in ("roi_feature_dim", "hidden_dim", "num_classes_plus_bg", "box_dim"):
        if getattr(rc, fname) <= 0:
            bad(None, "rcnn", f"{fname} must be positive")
    if rc.num_rois < 0:
        bad(None, "rcnn", "num_rois must be non-negative")

    return out


def require_valid(spec: ArchSpec) -> None:
    violations = validate_arch(spec)
    if violations:
        lines = "; ".join(str(v) for v in violations)
        raise ValidationError(f"invalid architecture {spec.name!r}: {lines}")


def conv_out_size(n: int, kernel: int, stride: int, pad: int | None = None) -> int:
    if pad is None:
        pad = (kernel - 1) // 2
    return (n + 2 * pad - kernel) // stride + 1


def layer_out_size(layer: LayerSpec, n: int) -> int:
    """Spatial extent after applying one backbone layer to an n-by-n map."""
    if layer.kind == AVGPOOL2:
        if n < 2:
            raise ValueError(f"avgpool2 needs spatial size >= 2, got {n}")
        return n - 1
    if layer.align_pool:
        if n < 2:
            raise ValueError(f"align pool needs spatial size >= 2, got {n}")
        n = n - 1
    if n < layer.kernel:
        raise ValueError(f"spatial size {n} smaller than kernel {layer.kernel}")
    return conv_out_size(n, layer.kernel, layer.stride)


def shape_trace(spec: ArchSpec, input_size: int | None = None) -> list[tuple[int | None, tuple[int, int, int]]]:
    """Propagate (channels, height, width) through the backbone.

    The first entry carries index ``None`` and the network input shape; each
    following entry is ``(layer index, output shape)``.
    """
    n = spec.input_size if input_size is None else input_size
    channels = spec.input_channels
    trace: list[tuple[int | None, tuple[int, int, int]]] = [(None, (channels, n, n))]
    for i, layer in enumerate(spec.backbone):
        n = layer_out_size(layer, n)
        if n <= 0:
            raise ValueError(f"backbone[{i}] produces non-positive size {n}")
        channels = layer.out_channels
        trace.append((i, (channels, n, n)))
    return trace


def with_backbone(spec: ArchSpec, backbone: tuple[LayerSpec, ...]) -> ArchSpec:
    return replace(spec, backbone=backbone)
