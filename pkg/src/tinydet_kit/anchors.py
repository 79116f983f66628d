"""Anchor tiling, IoU assignment, miss-ratio statistics and coverage sweeps.

Anchors sit on a half-stride lattice (centers at ``(i + 0.5) * stride``) and
are never clipped to the image; ground-truth boxes are clipped.  A ground
truth counts as assigned when some anchor exceeds the positive threshold or
its best anchor reaches the fallback threshold; with the thresholds ordered
the miss criterion reduces to best IoU below the fallback threshold.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archspec import ArchSpec

__all__ = [
    "Box",
    "AnchorLevel",
    "AnchorGrid",
    "AssignmentConfig",
    "Assignment",
    "GTMRReport",
    "CoverageResult",
    "tile_anchors",
    "thundernet_surrogate_grid",
    "iou",
    "iou_matrix",
    "assign",
    "gtmr",
    "coverage_map",
    "load_coco_boxes",
    "SCALE_BUCKETS",
]

# COCO object-scale buckets on box area.
SMALL_MAX_AREA = 32.0 ** 2
LARGE_MIN_AREA = 96.0 ** 2
SCALE_BUCKETS = ("small", "medium", "large")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form; must have positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) vs (M, 4) corner-form boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass(frozen=True)
class AnchorLevel:
    stride: int
    sizes: tuple[float, ...]
    ratios: tuple[float, ...]
    num_cells: int

    @property
    def num_anchors(self) -> int:
        return self.num_cells ** 2 * len(self.sizes) * len(self.ratios)

    def centers(self) -> np.ndarray:
        return (np.arange(self.num_cells, dtype=np.float64) + 0.5) * self.stride

    def boxes(self) -> np.ndarray:
        """All anchors of this level, ordered (row, col, size, ratio)."""
        cs = self.centers()
        cy, cx = np.meshgrid(cs, cs, indexing="ij")
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (cells², 2)
        wh = np.array(
            [(s * math.sqrt(r), s / math.sqrt(r))
             for s in self.sizes for r in self.ratios],
            dtype=np.float64,
        )
        half = wh / 2.0
        x1 = centers[:, None, 0] - half[None, :, 0]
        y1 = centers[:, None, 1] - half[None, :, 1]
        x2 = centers[:, None, 0] + half[None, :, 0]
        y2 = centers[:, None, 1] + half[None, :, 1]
        return np.stack([x1, y1, x2, y2], axis=2).reshape(-1, 4)


@dataclass(frozen=True)
class AnchorGrid:
    input_size: int
    levels: tuple[AnchorLevel, ...]
    name: str = ""

    @property
    def num_anchors(self) -> int:
        return sum(lv.num_anchors for lv in self.levels)

    @property
    def min_spacing(self) -> int:
        return min(lv.stride for lv in self.levels)

    def all_boxes(self) -> np.ndarray:
        if not self.levels:
            return np.zeros((0, 4))
        return np.concatenate([lv.boxes() for lv in self.levels], axis=0)


def tile_anchors(spec: ArchSpec) -> AnchorGrid:
    """Tile the spec's anchors over its pyramid levels (unclipped)."""
    if not spec.fpn_levels:
        raise ValueError("spec has no pyramid levels to anchor")
    if len(spec.rpn.anchor_sizes) != len(spec.fpn_levels):
        raise ValueError("one anchor size per pyramid level is required")
    levels = []
    for level, size in zip(spec.fpn_levels, spec.rpn.anchor_sizes):
        if spec.input_size % level.stride:
            raise ValueError(
                f"input size {spec.input_size} not divisible by stride {level.stride}")
        levels.append(AnchorLevel(
            stride=level.stride,
            sizes=(size,),
            ratios=tuple(spec.rpn.aspect_ratios),
            num_cells=spec.input_size // level.stride,
        ))
    return AnchorGrid(spec.input_size, tuple(levels), name=spec.name)


def thundernet_surrogate_grid(input_size: int = 320,
                              sizes=(12.8, 25.6, 51.2, 102.4, 204.8),
                              ratios=(0.5, 1.0, 2.0)) -> AnchorGrid:
    """Single stride-16 level carrying all five sizes.

    A stand-in for single-feature-map detectors in spacing comparisons; the
    exact reference configuration is not public, so this is labeled as a
    surrogate.
    """
    if input_size % 16:
        raise ValueError(f"input size {input_size} not divisible by 16")
    level = AnchorLevel(stride=16, sizes=tuple(sizes), ratios=tuple(ratios),
                        num_cells=input_size // 16)
    return AnchorGrid(input_size, (level,), name="thundernet-surrogate")


@dataclass(frozen=True)
class AssignmentConfig:
    pos_iou: float = 0.7
    min_pos_iou: float = 0.3

    def __post_init__(self):
        if not (0.0 < self.pos_iou <= 1.0):
            raise ValueError(f"pos_iou must be in (0, 1], got {self.pos_iou}")
        if not (0.0 <= self.min_pos_iou < 1.0):
            raise ValueError(f"min_pos_iou must be in [0, 1), got {self.min_pos_iou}")
        if self.min_pos_iou > self.pos_iou:
            raise ValueError("min_pos_iou must not exceed pos_iou")


@dataclass(frozen=True, eq=False)
class Assignment:
    gts: tuple[Box, ...]
    best_iou: np.ndarray       # (n,) best IoU per ground truth
    best_anchor: np.ndarray    # (n, 4) the argmax anchor box
    assigned: np.ndarray       # (n,) bool
    config: AssignmentConfig


_CHUNK = 256


def assign(grid: AnchorGrid, gts, config: AssignmentConfig | None = None) -> Assignment:
    """Match each ground truth against every anchor of the grid."""
    config = config or AssignmentConfig()
    anchors = grid.all_boxes()
    if anchors.shape[0] == 0:
        raise ValueError("cannot assign against an empty anchor grid")
    gts = tuple(gts)
    n = len(gts)
    best_iou = np.zeros(n)
    best_anchor = np.zeros((n, 4))
    if n:
        gt_arr = np.stack([g.as_array() for g in gts])
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            ious = iou_matrix(gt_arr[lo:hi], anchors)
            idx = ious.argmax(axis=1)
            best_iou[lo:hi] = ious[np.arange(hi - lo), idx]
            best_anchor[lo:hi] = anchors[idx]
    assigned = (best_iou > config.pos_iou) | (best_iou >= config.min_pos_iou)
    return Assignment(gts, best_iou, best_anchor, assigned, config)


@dataclass(frozen=True)
class GTMRReport:
    """Miss-assignment statistics: overall plus COCO scale buckets."""

    overall: float
    ratios: dict          # bucket -> ratio or None when the bucket is empty
    missed: dict          # bucket -> missed count
    counts: dict          # bucket -> total count
    total: int

    @property
    def by_scale(self) -> dict:
        return dict(self.ratios)


def _bucket(area: float) -> str:
    if area < SMALL_MAX_AREA:
        return "small"
    if area > LARGE_MIN_AREA:
        return "large"
    return "medium"


def gtmr(assignment: Assignment) -> GTMRReport:
    """Fraction of ground truths assigned to no anchor, overall and by scale."""
    n = len(assignment.gts)
    if n == 0:
        raise ValueError("GTMR undefined: no ground-truth objects")
    counts = {b: 0 for b in SCALE_BUCKETS}
    missed = {b: 0 for b in SCALE_BUCKETS}
    total_missed = 0
    for gt, ok in zip(assignment.gts, assignment.assigned):
        b = _bucket(gt.area)
        counts[b] += 1
        if not ok:
            missed[b] += 1
            total_missed += 1
    ratios = {
        b: (missed[b] / counts[b]) if counts[b] else None
        for b in SCALE_BUCKETS
    }
    return GTMRReport(
        overall=total_missed / n,
        ratios=ratios,
        missed=missed,
        counts=counts,
        total=n,
    )


@dataclass(frozen=True, eq=False)
class CoverageResult:
    covered_fraction: float
    threshold: float
    resolution: int
    spacing: int
    cell_center: tuple[float, float]
    best_iou: np.ndarray     # (resolution, resolution)
    overlooked: np.ndarray   # bool, True where best IoU < threshold


def coverage_map(grid: AnchorGrid, object_size, threshold: float,
                 resolution: int) -> CoverageResult:
    """Sweep an object's center across one anchor-spacing cell.

    The cell is one ``spacing``-sized square centered on an interior anchor
    center of the finest level; sample points sit at cell-centered offsets
    ``((t + 0.5) / resolution - 0.5) * spacing``.  At each point the best
    IoU against every anchor in the grid decides coverage.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    w, h = float(object_size[0]), float(object_size[1])
    if w <= 0 or h <= 0:
        raise ValueError("object size must be positive")
    finest = min(grid.levels, key=lambda lv: lv.stride)
    spacing = finest.stride
    mid = finest.num_cells // 2
    cx = cy = (mid + 0.5) * spacing
    offs = ((np.arange(resolution) + 0.5) / resolution - 0.5) * spacing
    px, py = np.meshgrid(cx + offs, cy + offs, indexing="xy")
    boxes = np.stack(
        [px.ravel() - w / 2, py.ravel() - h / 2,
         px.ravel() + w / 2, py.ravel() + h / 2], axis=1)
    anchors = grid.all_boxes()
    best = np.zeros(boxes.shape[0])
    for lo in range(0, boxes.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, boxes.shape[0])
        best[lo:hi] = iou_matrix(boxes[lo:hi], anchors).max(axis=1)
    best = best.reshape(resolution, resolution)
    overlooked = best < threshold
    return CoverageResult(
        covered_fraction=float(1.0 - overlooked.mean()),
        threshold=threshold,
        resolution=resolution,
        spacing=spacing,
        cell_center=(cx, cy),
        best_iou=best,
        overlooked=overlooked,
    )


# ---------------------------------------------------------------------------
# COCO annotation ingestion
# ---------------------------------------------------------------------------

def load_coco_boxes(path, input_size: int | None = None):
    """Read ground-truth boxes from a COCO instances annotation document.

    Crowd annotations and degenerate boxes are skipped; boxes are clipped to
    their image.  With ``input_size`` given, each image is mapped onto an
    ``input_size`` square by scaling its longer side down to fit and
    centering the shorter side with padding, and the boxes follow.

    Returns ``[(image_id, [Box, ...]), ...]`` sorted by image id; images
    without usable annotations are omitted.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(
            f"{path}: malformed annotation document at line {exc.lineno}, "
            f"column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "annotations" not in doc:
        raise ValueError(f"{path}: not a COCO instances document "
                         "(missing 'annotations')")

    dims = {}
    for img in doc.get("images", []):
        try:
            dims[img["id"]] = (float(img["width"]), float(img["height"]))
        except KeyError as exc:
            raise ValueError(f"{path}: image entry missing {exc}") from exc

    raw = defaultdict(list)
    for k, ann in enumerate(doc["annotations"]):
        if ann.get("iscrowd", 0):
            continue
        try:
            image_id = ann["image_id"]
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: annotations[{k}] malformed: {exc}") from exc
        if w <= 0 or h <= 0:
            continue
        raw[image_id].append((x, y, x + w, y + h))

    out = []
    for image_id in sorted(raw):
        img_wh = dims.get(image_id)
        if img_wh is None and input_size is not None:
            raise ValueError(
                f"{path}: image {image_id} has annotations but no dimensions; "
                "cannot rescale")
        boxes = []
        for x1, y1, x2, y2 in raw[image_id]:
            if img_wh is not None:
                x1, x2 = max(x1, 0.0), min(x2, img_wh[0])
                y1, y2 = max(y1, 0.0), min(y2, img_wh[1])
                if x2 <= x1 or y2 <= y1:
                    continue
            if input_size is not None:
                scale = input_size / max(img_wh)
                pad_x = (input_size - img_wh[0] * scale) / 2.0
                pad_y = (input_size - img_wh[1] * scale) / 2.0
                x1, x2 = x1 * scale + pad_x, x2 * scale + pad_x
                y1, y2 = y1 * scale + pad_y, y2 * scale + pad_y
            boxes.append(Box(x1, y1, x2, y2))
        if boxes:
            out.append((image_id, boxes))
    return out
