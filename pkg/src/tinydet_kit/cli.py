"""Command-line surface: every analysis as a reproducible report.

Grammar: ``tinydet-kit <subcommand> [args] [--format table|csv|json] [--out PATH]``.
Reports go to stdout unless ``--out`` is given; ``TINYDET_KIT_FORMAT`` sets
the default format.  Exit codes: 0 success, 1 validation failure, 2 usage
error.  All randomized subcommands take an explicit ``--seed`` (default 0),
so identical invocations produce byte-identical output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .align import count_alignment_pools, insert_alignment_pools, misalignment_trace
from .anchors import (
    AssignmentConfig,
    SCALE_BUCKETS,
    assign,
    coverage_map,
    gtmr,
    load_coco_boxes,
    thundernet_surrogate_grid,
    tile_anchors,
)
from .archspec import (
    AVGPOOL2,
    BNECK,
    BUILTIN_NAMES,
    CONV2D,
    ParseError,
    ValidationError,
    builtin_arch,
    parse_arch,
    validate_arch,
)
from .flops import COMPONENTS, model_flops

FORMATS = ("table", "csv", "json")
_ACTIVATIONS = {"relu": kernels.relu, "hswish": kernels.hswish,
                "none": lambda a: a}
SURROGATE_NAME = "thundernet-surrogate"


class UsageError(Exception):
    """Bad invocation (unknown arch, malformed argument)."""


def _default_format() -> str:
    env = os.environ.get("TINYDET_KIT_FORMAT", "").lower()
    return env if env in FORMATS else "table"


def _load_spec(name: str):
    if name.lower() in BUILTIN_NAMES:
        return builtin_arch(name)
    path = Path(name)
    if not path.exists():
        raise UsageError(
            f"unknown architecture {name!r}: not a builtin "
            f"({', '.join(BUILTIN_NAMES)}) and no such config file")
    spec = parse_arch(path.read_text(encoding="utf-8"))
    violations = validate_arch(spec)
    if violations:
        raise ValidationError(
            "invalid architecture config:\n  "
            + "\n  ".join(str(v) for v in violations))
    return spec


def _grid_for(name: str):
    if name.lower() == SURROGATE_NAME:
        return thundernet_surrogate_grid()
    return tile_anchors(_load_spec(name))


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _fmt_px(v: float) -> str:
    text = f"{v:.3f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


# ---------------------------------------------------------------------------
# flops
# ---------------------------------------------------------------------------

def _cmd_flops(args) -> str:
    spec = _load_spec(args.arch)
    report = model_flops(spec)
    if args.format == "json":
        doc = {
            "arch": spec.name,
            "layers": [
                {"component": r.component, "label": r.label,
                 "flops": r.count.exact, "mflops": str(r.count.mflops_2dp)}
                for r in report.rows
            ],
            "components": {
                c: {
                    "flops": report.component_exact(c).exact,
                    "table_mflops": str(report.component_table_mflops(c)),
                    "rounded_mflops": report.component_rounded_mflops(c),
                    "percent": report.allocation[c],
                }
                for c in COMPONENTS
            },
            "total": {
                "flops": report.total.exact,
                "rounded_mflops": report.total_rounded_mflops,
            },
            "allocation_percent_sum": sum(report.allocation.values()),
        }
        return _json_text(doc)
    if args.format == "csv":
        rows = [("component", "label", "flops", "mflops")]
        rows += [(r.component, r.label, r.count.exact, str(r.count.mflops_2dp))
                 for r in report.rows]
        for c in COMPONENTS:
            rows.append((c, "in total", report.component_exact(c).exact,
                         str(report.component_table_mflops(c))))
        rows.append(("total", "", report.total.exact,
                     str(report.total_rounded_mflops)))
        return _csv_text(rows)

    width = max(len(r.label) for r in report.rows) + 2
    lines = [f"{'component':<10} {'layer':<{width}} {'MFLOPs':>9}"]
    for component in COMPONENTS:
        for r in report.rows:
            if r.component == component:
                lines.append(
                    f"{component:<10} {r.label:<{width}} {str(r.count.mflops_2dp):>9}")
        lines.append(
            f"{component:<10} {'in total':<{width}} "
            f"{str(report.component_table_mflops(component)):>9}")
    alloc = report.allocation
    alloc_text = " / ".join(f"{c} {alloc[c]}%" for c in COMPONENTS)
    percent_sum = sum(alloc.values())
    note = "" if percent_sum == 100 else \
        f" (percentages sum to {percent_sum} due to rounding)"
    lines.append(
        f"total {report.total_rounded_mflops} MFLOPs; allocation {alloc_text}{note}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------

def _cmd_align(args) -> str:
    spec = _load_spec(args.arch)
    if args.insert_pools:
        spec = insert_alignment_pools(spec)
    trace = misalignment_trace(spec)
    if args.format == "json":
        doc = {
            "arch": spec.name,
            "pools_inserted": count_alignment_pools(spec),
            "steps": [
                {"label": s.label, "contribution_px": s.contribution,
                 "accumulated_px": s.accumulated}
                for s in trace.steps
            ],
            "total_px": trace.total,
            "ratio": trace.ratio,
        }
        return _json_text(doc)
    if args.format == "csv":
        rows = [("label", "contribution_px", "accumulated_px")]
        rows += [(s.label, repr(s.contribution), repr(s.accumulated))
                 for s in trace.steps]
        rows.append(("total", repr(trace.total), ""))
        rows.append(("ratio", repr(trace.ratio), ""))
        return _csv_text(rows)

    width = max([len(s.label) for s in trace.steps] + [10]) + 2
    lines = [f"{'layer':<{width}} {'contribution(px)':>17} {'accumulated(px)':>16}"]
    for s in trace.steps:
        lines.append(f"{s.label:<{width}} {_fmt_px(s.contribution):>17} "
                     f"{_fmt_px(s.accumulated):>16}")
    lines.append(f"total {_fmt_px(trace.total)} px, ratio {trace.ratio:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# anchors gtmr / anchors coverage
# ---------------------------------------------------------------------------

def _cmd_gtmr(args) -> str:
    grid = _grid_for(args.arch)
    config = AssignmentConfig(pos_iou=args.pos_iou, min_pos_iou=args.min_pos_iou)
    per_image = load_coco_boxes(args.boxes, input_size=grid.input_size)
    boxes = [b for _, image_boxes in per_image for b in image_boxes]
    if not boxes:
        raise ValidationError(f"GTMR undefined: no usable objects in {args.boxes}")
    report = gtmr(assign(grid, boxes, config))

    if args.format == "json":
        doc = {
            "grid": grid.name,
            "input_size": grid.input_size,
            "anchors": grid.num_anchors,
            "images": len(per_image),
            "pos_iou": config.pos_iou,
            "min_pos_iou": config.min_pos_iou,
            "rescale": "longer side fit, centered padding",
            "overall": report.overall,
            "buckets": {
                b: {"count": report.counts[b], "missed": report.missed[b],
                    "gtmr": report.ratios[b]}
                for b in SCALE_BUCKETS
            },
        }
        return _json_text(doc)
    if args.format == "csv":
        rows = [("bucket", "count", "missed", "gtmr")]
        rows.append(("overall", report.total,
                     sum(report.missed.values()), repr(report.overall)))
        for b in SCALE_BUCKETS:
            ratio = report.ratios[b]
            rows.append((b, report.counts[b], report.missed[b],
                         "" if ratio is None else repr(ratio)))
        return _csv_text(rows)

    strides = "/".join(str(lv.stride) for lv in grid.levels)
    lines = [
        f"grid {grid.name}: {grid.num_anchors} anchors over "
        f"{len(grid.levels)} level(s) (stride {strides})",
        f"images {len(per_image)}, objects {report.total}, "
        f"thresholds pos {config.pos_iou:g} / min {config.min_pos_iou:g}",
        f"{'bucket':<9} {'count':>6} {'missed':>7} {'gtmr':>7}",
        f"{'overall':<9} {report.total:>6} {sum(report.missed.values()):>7} "
        f"{report.overall:>7.3f}",
    ]
    for b in SCALE_BUCKETS:
        ratio = report.ratios[b]
        text = "n/a" if ratio is None else f"{ratio:.3f}"
        lines.append(f"{b:<9} {report.counts[b]:>6} {report.missed[b]:>7} {text:>7}")
    return "\n".join(lines) + "\n"


def _cmd_coverage(args) -> str:
    grid = _grid_for(args.arch)
    result = coverage_map(grid, args.object, args.threshold, args.resolution)
    if args.mask_out:
        _write_pgm(args.mask_out, result.overlooked)

    if args.format == "json":
        doc = {
            "grid": grid.name,
            "object": list(args.object),
            "threshold": result.threshold,
            "resolution": result.resolution,
            "spacing": result.spacing,
            "covered_fraction": result.covered_fraction,
            "overlooked_fraction": 1.0 - result.covered_fraction,
        }
        return _json_text(doc)
    if args.format == "csv":
        rows = [("field", "value"),
                ("grid", grid.name),
                ("object_w", repr(args.object[0])),
                ("object_h", repr(args.object[1])),
                ("threshold", repr(result.threshold)),
                ("resolution", result.resolution),
                ("spacing", result.spacing),
                ("covered_fraction", repr(result.covered_fraction))]
        return _csv_text(rows)

    lines = [
        f"grid {grid.name}: spacing {result.spacing} px, "
        f"object {args.object[0]:g}x{args.object[1]:g}, "
        f"threshold {result.threshold:g}, resolution {result.resolution}",
        f"covered fraction {result.covered_fraction!r}",
    ]
    return "\n".join(lines) + "\n"


def _write_pgm(path: str, overlooked: np.ndarray) -> None:
    h, w = overlooked.shape
    lines = ["P2", "# overlooked-region mask (1 = overlooked, 0 = covered)",
             f"{w} {h}", "1"]
    for row in overlooked.astype(int):
        lines.append(" ".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _random_conv(rng, cout, cin, k, stride, groups=1, pad=None):
    weight = rng.uniform(-0.5, 0.5, size=(cout, cin // groups, k, k))
    return kernels.ConvWeights(weight=weight, stride=stride, pad=pad, groups=groups)


def _random_bneck(rng, layer) -> kernels.BneckWeights:
    cin, ex, cout = layer.in_channels, layer.expansion_size, layer.out_channels
    expand = None if ex == cin else _random_conv(rng, ex, cin, 1, 1)
    depthwise = kernels.ConvWeights(
        weight=rng.uniform(-0.5, 0.5, size=(ex, 1, layer.kernel, layer.kernel)),
        stride=layer.stride, groups=ex)
    se = None
    if layer.use_se:
        mid = max(ex // 4, 1)
        se = kernels.SEWeights(
            fc1_weight=rng.uniform(-0.5, 0.5, size=(mid, ex)),
            fc1_bias=rng.uniform(-0.5, 0.5, size=mid),
            fc2_weight=rng.uniform(-0.5, 0.5, size=(ex, mid)),
            fc2_bias=rng.uniform(-0.5, 0.5, size=ex),
        )
    project = _random_conv(rng, cout, ex, 1, 1)
    return kernels.BneckWeights(
        depthwise=depthwise, project=project, expand=expand, se=se,
        nonlinearity=layer.nonlinearity,
        pool_before_depthwise=layer.align_pool,
    )


def _cmd_forward(args) -> str:
    spec = _load_spec(args.arch)
    if args.input:
        blob = Path(args.input).read_bytes()
        x = kernels.tensor_from_blob(blob)
        expected = (spec.input_channels, spec.input_size, spec.input_size)
        if x.shape[1:] != expected:
            raise ValidationError(
                f"input tensor shape {x.shape[1:]} does not match the "
                f"architecture input {expected}")
    else:
        rng = np.random.default_rng(args.seed)
        x = kernels.Tensor(rng.uniform(
            -1.0, 1.0,
            size=(1, spec.input_channels, spec.input_size, spec.input_size)))
    rng = np.random.default_rng(args.seed + 1)

    stages = [("input", x.shape)]
    for i, layer in enumerate(spec.backbone):
        label = f"{i:02d} {layer.kind}"
        if layer.kind == AVGPOOL2:
            x = kernels.avgpool2(x)
        elif layer.kind == CONV2D:
            if layer.align_pool:
                x = kernels.avgpool2(x)
                label += " pooled"
            w = _random_conv(rng, layer.out_channels, layer.in_channels,
                             layer.kernel, layer.stride, layer.groups)
            act = _ACTIVATIONS[layer.nonlinearity]
            x = kernels.Tensor(act(kernels.conv2d(x, w).data))
        elif layer.kind == BNECK:
            if layer.align_pool:
                label += " pooled"
            x = kernels.bneck_forward(x, _random_bneck(rng, layer))
        else:
            raise ValidationError(f"forward does not support kind {layer.kind!r}")
        stages.append((label, x.shape))

    stats = (float(x.data.sum()), float(x.data.min()), float(x.data.max()))
    if args.format == "json":
        doc = {
            "arch": spec.name,
            "backend": kernels.backend_name(),
            "seed": args.seed,
            "stages": [{"stage": s, "shape": list(shape)} for s, shape in stages],
            "output": {"sum": stats[0], "min": stats[1], "max": stats[2]},
        }
        return _json_text(doc)
    if args.format == "csv":
        rows = [("stage", "batch", "channels", "height", "width")]
        rows += [(s, *shape) for s, shape in stages]
        rows.append(("output_sum", repr(stats[0]), "", "", ""))
        return _csv_text(rows)

    width = max(len(s) for s, _ in stages) + 2
    lines = [f"backend {kernels.backend_name()}, seed {args.seed}"]
    lines += [f"{s:<{width}} {'x'.join(str(d) for d in shape)}"
              for s, shape in stages]
    lines.append(f"output sum {stats[0]!r} min {stats[1]!r} max {stats[2]!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fuse-check
# ---------------------------------------------------------------------------

FUSE_TOLERANCE = 1e-9


def _cmd_fuse_check(args) -> str:
    if args.size % 2 or args.size < args.kernel + 1:
        raise UsageError(
            f"--size must be even and at least kernel+1, got {args.size}")
    if args.kernel not in (1, 3, 5):
        raise UsageError(f"--kernel must be 1, 3 or 5, got {args.kernel}")
    rng = np.random.default_rng(args.seed)
    x = kernels.Tensor(rng.uniform(
        -1.0, 1.0, size=(1, args.channels, args.size, args.size)))
    w = kernels.ConvWeights(
        weight=rng.uniform(-1.0, 1.0,
                           size=(args.channels, args.channels,
                                 args.kernel, args.kernel)),
        bias=rng.uniform(-1.0, 1.0, size=args.channels),
        stride=2, pad=0)
    sequential = kernels.conv2d(kernels.avgpool2(x), w)
    fused = kernels.conv2d(x, kernels.fuse_pool_into_conv(w))
    diff = float(np.abs(sequential.data - fused.data).max())
    passed = diff <= FUSE_TOLERANCE

    if args.format == "json":
        doc = {
            "kernel": args.kernel, "size": args.size, "seed": args.seed,
            "channels": args.channels, "backend": kernels.backend_name(),
            "max_abs_diff": diff, "tolerance": FUSE_TOLERANCE,
            "passed": passed,
        }
        text = _json_text(doc)
    elif args.format == "csv":
        text = _csv_text([
            ("field", "value"),
            ("kernel", args.kernel), ("size", args.size), ("seed", args.seed),
            ("channels", args.channels), ("max_abs_diff", repr(diff)),
            ("tolerance", repr(FUSE_TOLERANCE)),
            ("passed", str(passed).lower()),
        ])
    else:
        text = (
            f"kernel {args.kernel}x{args.kernel} stride 2 pad 0, "
            f"channels {args.channels}, input {args.size}x{args.size}, "
            f"seed {args.seed}\n"
            f"sequential vs fused max abs diff {diff!r}\n"
            f"{'PASS' if passed else 'FAIL'} (tolerance {FUSE_TOLERANCE:g})\n"
        )
    if not passed:
        raise ValidationError(
            f"fusion equivalence failed: max abs diff {diff!r}\n{text}")
    return text


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _parse_object(text: str):
    w, _, h = text.partition("x")
    return (float(w), float(h))


def _add_common(sub):
    sub.add_argument("--format", choices=FORMATS, default=_default_format())
    sub.add_argument("--out", default=None, help="write the report to a file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinydet-kit",
        description="Cost, alignment and anchor-coverage analysis for "
                    "lightweight detector architectures.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("flops", help="per-layer and per-component FLOPs report")
    p.add_argument("arch", help="builtin name or config file path")
    _add_common(p)
    p.set_defaults(handler=_cmd_flops)

    p = subs.add_parser("align", help="misalignment trace through the backbone")
    p.add_argument("arch")
    p.add_argument("--insert-pools", action="store_true",
                   help="insert alignment pools before every strided stage")
    _add_common(p)
    p.set_defaults(handler=_cmd_align)

    anchors = subs.add_parser("anchors", help="anchor assignment analyses")
    asub = anchors.add_subparsers(dest="anchors_command", required=True)

    p = asub.add_parser("gtmr", help="ground-truth miss-assignment ratio")
    p.add_argument("arch", help=f"builtin, config path, or {SURROGATE_NAME!r}")
    p.add_argument("--boxes", required=True,
                   help="COCO instances annotation file")
    p.add_argument("--pos-iou", type=float, default=0.7)
    p.add_argument("--min-pos-iou", type=float, default=0.3)
    _add_common(p)
    p.set_defaults(handler=_cmd_gtmr)

    p = asub.add_parser("coverage", help="overlooked-region sweep for one object")
    p.add_argument("arch", help=f"builtin, config path, or {SURROGATE_NAME!r}")
    p.add_argument("--object", type=_parse_object, required=True,
                   metavar="WxH", help="object extent, e.g. 12.8x12.8")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--mask-out", default=None,
                   help="write the overlooked mask as PGM (P2)")
    _add_common(p)
    p.set_defaults(handler=_cmd_coverage)

    p = subs.add_parser("forward",
                        help="toy random-weight reference forward with shape log")
    p.add_argument("arch")
    p.add_argument("--input", default=None,
                   help="input tensor blob (4 int32 LE dims + float64 data)")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(handler=_cmd_forward)

    p = subs.add_parser("fuse-check",
                        help="pool-into-conv fusion equivalence report")
    p.add_argument("--kernel", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=2)
    _add_common(p)
    p.set_defaults(handler=_cmd_fuse_check)

    return parser


def run(argv=None) -> int:
    """Parse argv, dispatch, and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 2)
    try:
        text = args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
