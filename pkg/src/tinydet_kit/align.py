"""Symbolic feature-misalignment arithmetic.

A stride-2 convolution with symmetric (k-1)/2 padding on an even-sized map
uses its leading padding pixel but not its trailing one.  The window lattice
is therefore shifted half a cell toward the origin, which is s/2 input pixels
when the incoming map has stride s.  On an odd-sized map both padding pixels
are used and no shift occurs.  Inserting a 2x2 averaging window before the
strided stage turns an even extent into an odd one, so the pool + strided
conv pair contributes no offset; the pool itself moves nothing here because
its half-cell window shift is exactly cancelled by the now-odd strided
convolution (validated empirically by the impulse-centroid probe in
:mod:`tinydet_kit.kernels`).

Offsets are tracked as a single scalar per spec (square inputs, symmetric
kernels; rows and columns behave identically), with positive values meaning
the response center lags the nominal position toward the image origin.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .archspec import (
    AVGPOOL2,
    ArchSpec,
    LayerSpec,
    require_valid,
)

__all__ = [
    "CoordMap",
    "AlignmentStep",
    "AlignmentTrace",
    "propagate_coord",
    "misalignment_trace",
    "insert_alignment_pools",
    "count_alignment_pools",
]


@dataclass(frozen=True)
class CoordMap:
    """Coordinate bookkeeping for one feature map.

    stride: input pixels per feature cell; offset: accumulated misalignment
    in input pixels; size: current spatial extent.
    """

    stride: int
    offset: float
    size: int


@dataclass(frozen=True)
class AlignmentStep:
    label: str
    contribution: float
    accumulated: float


@dataclass(frozen=True)
class AlignmentTrace:
    steps: tuple[AlignmentStep, ...]
    total: float
    ratio: float
    input_size: int

    @property
    def contributions(self) -> list[float]:
        return [s.contribution for s in self.steps]


def _strided_step(m: CoordMap, kernel: int) -> CoordMap:
    if m.size < kernel:
        raise ValueError(f"spatial size {m.size} smaller than kernel {kernel}")
    if m.size % 2 == 0:
        return CoordMap(m.stride * 2, m.offset + m.stride / 2, m.size // 2)
    return CoordMap(m.stride * 2, m.offset, (m.size + 1) // 2)


def propagate_coord(m: CoordMap, layer: LayerSpec) -> CoordMap:
    """Push a coordinate map through one backbone layer (symmetric padding)."""
    if layer.kind == AVGPOOL2:
        if m.size < 2:
            raise ValueError(f"avgpool2 needs spatial size >= 2, got {m.size}")
        return CoordMap(m.stride, m.offset, m.size - 1)
    size = m.size
    if layer.align_pool:
        if size < 2:
            raise ValueError(f"align pool needs spatial size >= 2, got {size}")
        size = size - 1
    m = CoordMap(m.stride, m.offset, size)
    if layer.stride == 1:
        if m.size < layer.kernel:
            raise ValueError(f"spatial size {m.size} smaller than kernel {layer.kernel}")
        return m
    return _strided_step(m, layer.kernel)


def misalignment_trace(spec: ArchSpec) -> AlignmentTrace:
    """Fold the coordinate map through the backbone; one step per downsampling.

    If the coarsest pyramid level sits below the backbone's final stride, the
    extra stride-2 downsamplings needed to reach it are traced as well (the
    built-in specs reach their top level inside the backbone).
    """
    require_valid(spec)
    m = CoordMap(1, 0.0, spec.input_size)
    steps: list[AlignmentStep] = []
    for i, layer in enumerate(spec.backbone):
        before = m.offset
        m = propagate_coord(m, layer)
        if layer.kind != AVGPOOL2 and layer.stride == 2:
            label = f"{i:02d} {layer.kind} {layer.kernel}x{layer.kernel} s2"
            if layer.align_pool:
                label += " pooled"
            steps.append(AlignmentStep(label, m.offset - before, m.offset))
    top_stride = max((lv.stride for lv in spec.fpn_levels), default=m.stride)
    while m.stride < top_stride:
        before = m.offset
        m = _strided_step(m, 3)
        steps.append(AlignmentStep(
            f"extra downsample to stride {m.stride}", m.offset - before, m.offset))
    total = m.offset
    return AlignmentTrace(
        steps=tuple(steps),
        total=total,
        ratio=total / spec.input_size,
        input_size=spec.input_size,
    )


def insert_alignment_pools(spec: ArchSpec) -> ArchSpec:
    """Mark every stride-2 conv/bneck with a pre-strided averaging window.

    Idempotent: layers already pooled (or directly preceded by an explicit
    ``avgpool2`` row) are left alone.  The transform never changes FLOPs:
    the window is free under the fused convention and the strided stage's
    output extent is unchanged on even inputs.
    """
    new_layers = []
    prev_kind = None
    for layer in spec.backbone:
        if (
            layer.kind != AVGPOOL2
            and layer.stride == 2
            and not layer.align_pool
            and prev_kind != AVGPOOL2
        ):
            layer = replace(layer, align_pool=True)
        new_layers.append(layer)
        prev_kind = layer.kind
    return replace(spec, backbone=tuple(new_layers))


def count_alignment_pools(spec: ArchSpec) -> int:
    return sum(1 for layer in spec.backbone if layer.align_pool)
