"""Reference numeric implementations of the detector's building blocks.

Everything here is a double-precision correctness oracle, not a fast
runtime: the direct-loop convolution is the normative semantics, tensors are
immutable, batch norm is folded to identity, and no gradients exist.  The
convolution inner loop runs on a compiled core when available (see
``_backend``); the pure-Python fallback is bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _backend
from ._backend import BACKEND_NAME

__all__ = [
    "BACKEND_NAME",
    "backend_name",
    "Tensor",
    "ConvWeights",
    "SEWeights",
    "BneckWeights",
    "tensor",
    "conv2d",
    "avgpool2",
    "fuse_pool_into_conv",
    "scconv_forward",
    "se_forward",
    "bneck_forward",
    "hard_sigmoid",
    "hswish",
    "relu",
    "impulse_response_centroid",
    "tensor_to_blob",
    "tensor_from_blob",
]


def backend_name() -> str:
    """Which convolution backend this process selected at import."""
    return BACKEND_NAME


@dataclass(frozen=True, eq=False)
class Tensor:
    """Dense rank-4 real array, (batch, channels, height, width), float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be rank 4, got rank {arr.ndim}")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all dimensions must be >= 1, got {arr.shape}")
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def tensor(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class ConvWeights:
    """Convolution parameters: weight (out, in/groups, k, k), optional bias.

    ``pad`` defaults to (k-1)/2 (same padding for odd kernels).
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int | None = None
    groups: int = 1

    def __post_init__(self):
        w = np.ascontiguousarray(self.weight, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weight must be (out, in/groups, k, k), got {w.shape}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=np.float64)
            if b.shape != (w.shape[0],):
                raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
            object.__setattr__(self, "bias", b)
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.groups < 1 or w.shape[0] % self.groups:
            raise ValueError(
                f"groups {self.groups} must divide out_channels {w.shape[0]}")
        if self.pad is None:
            object.__setattr__(self, "pad", (self.kernel - 1) // 2)
        elif self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups


def conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Zero-padded strided convolution (cross-correlation orientation)."""
    if x.channels != w.in_channels:
        raise ValueError(
            f"input has {x.channels} channels, weights expect {w.in_channels}")
    h, wd = x.shape[2], x.shape[3]
    if min(h, wd) + 2 * w.pad < w.kernel:
        raise ValueError(
            f"spatial extent {h}x{wd} too small for kernel {w.kernel} pad {w.pad}")
    out = _backend.conv2d_raw(x.data, w.weight, w.bias, w.stride, w.pad, w.groups)
    return Tensor(out)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 mean with stride 1 and no padding; N -> N-1 per spatial dim."""
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ValueError(f"avgpool2 needs height/width >= 2, got {x.shape}")
    return Tensor(_backend.avgpool2_raw(x.data))


def fuse_pool_into_conv(w: ConvWeights) -> ConvWeights:
    """Fold a preceding 2x2 averaging window into a stride-2 convolution.

    Returns a (k+1)x(k+1) kernel so that
    ``conv2d(x, fused) == conv2d(avgpool2(x), w)``.
    The equality is exact (up to roundoff) only for unpadded weights: zero
    padding does not commute with pooling at the border, so padded weights
    are rejected rather than silently fused with a mismatched boundary ring.
    """
    if w.stride != 2:
        raise ValueError(f"fusion requires stride 2, got stride {w.stride}")
    if w.pad != 0:
        raise ValueError(
            "fusion is exact only for unpadded convolutions "
            f"(pad=0); got pad={w.pad}")
    k = w.kernel
    fused = np.zeros((w.out_channels, w.weight.shape[1], k + 1, k + 1))
    quarter = w.weight * 0.25
    for a in (0, 1):
        for b in (0, 1):
            fused[:, :, a:a + k, b:b + k] += quarter
    return ConvWeights(weight=fused, bias=w.bias, stride=2, pad=0, groups=w.groups)


def scconv_forward(x: Tensor, dw: ConvWeights, pw: ConvWeights) -> Tensor:
    """Sparsely-connected convolution: depthwise 3x3, then grouped pointwise."""
    if dw.groups != dw.out_channels or dw.weight.shape[1] != 1:
        raise ValueError("dw must be depthwise (groups == channels)")
    if pw.kernel != 1:
        raise ValueError(f"pw must be 1x1, got {pw.kernel}x{pw.kernel}")
    if dw.out_channels % pw.groups or pw.out_channels % pw.groups:
        raise ValueError(
            f"pointwise groups {pw.groups} must divide channels "
            f"({dw.out_channels} -> {pw.out_channels})")
    return conv2d(conv2d(x, dw), pw)


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0)


def hard_sigmoid(t: np.ndarray) -> np.ndarray:
    return np.clip((t + 3.0) / 6.0, 0.0, 1.0)


def hswish(t: np.ndarray) -> np.ndarray:
    return t * hard_sigmoid(t)


_NONLINEARITIES = {"relu": relu, "hswish": hswish, "none": lambda t: t}


@dataclass(frozen=True, eq=False)
class SEWeights:
    """Squeeze-excitation FC weights: fc1 (mid, C) squeezes, fc2 (C, mid) excites."""

    fc1_weight: np.ndarray
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray
    fc2_bias: np.ndarray

    def __post_init__(self):
        for name in ("fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias"):
            object.__setattr__(
                self, name,
                np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        mid, c = self.fc1_weight.shape
        if self.fc1_bias.shape != (mid,):
            raise ValueError("fc1 bias shape mismatch")
        if self.fc2_weight.shape != (c, mid):
            raise ValueError(
                f"fc2 weight shape {self.fc2_weight.shape} != ({c}, {mid})")
        if self.fc2_bias.shape != (c,):
            raise ValueError("fc2 bias shape mismatch")


def se_forward(x: Tensor, se: SEWeights) -> Tensor:
    """Channel gating: hard-sigmoid(fc2(relu(fc1(global average pool))))."""
    if se.fc1_weight.shape[1] != x.channels:
        raise ValueError(
            f"se expects {se.fc1_weight.shape[1]} channels, input has {x.channels}")
    pooled = x.data.mean(axis=(2, 3))                       # (B, C)
    hidden = relu(pooled @ se.fc1_weight.T + se.fc1_bias)   # (B, mid)
    gate = hard_sigmoid(hidden @ se.fc2_weight.T + se.fc2_bias)  # (B, C)
    return Tensor(x.data * gate[:, :, None, None])


@dataclass(frozen=True, eq=False)
class BneckWeights:
    """Inverted-residual bottleneck parameters.

    ``expand`` is None when the expansion width equals the input width, in
    which case the expansion convolution is omitted entirely.
    """

    depthwise: ConvWeights
    project: ConvWeights
    expand: ConvWeights | None = None
    se: SEWeights | None = None
    nonlinearity: str = "relu"
    # 2x2 averaging window between expansion and the strided depthwise stage
    # (the alignment fix for stride-2 blocks); never affects the residual rule.
    pool_before_depthwise: bool = False

    @property
    def in_channels(self) -> int:
        return self.expand.in_channels if self.expand is not None \
            else self.depthwise.in_channels

    @property
    def out_channels(self) -> int:
        return self.project.out_channels

    @property
    def stride(self) -> int:
        return self.depthwise.stride


def bneck_forward(x: Tensor, params: BneckWeights) -> Tensor:
    """Expansion -> depthwise -> optional SE -> linear projection.

    The residual skip applies iff stride is 1 and channel counts match.
    Batch norm is folded to identity.
    """
    act = _NONLINEARITIES[params.nonlinearity]
    out = x
    if params.expand is not None:
        if params.expand.kernel != 1:
            raise ValueError("expansion must be 1x1")
        out = Tensor(act(conv2d(out, params.expand).data))
    if params.pool_before_depthwise:
        out = avgpool2(out)
    dw = params.depthwise
    if dw.groups != dw.out_channels or dw.weight.shape[1] != 1:
        raise ValueError("depthwise stage must have groups == channels")
    out = Tensor(act(conv2d(out, dw).data))
    if params.se is not None:
        out = se_forward(out, params.se)
    if params.project.kernel != 1:
        raise ValueError("projection must be 1x1")
    out = conv2d(out, params.project)
    if params.stride == 1 and params.in_channels == params.out_channels:
        out = Tensor(out.data + x.data)
    return out


# ---------------------------------------------------------------------------
# Impulse-response centroid probe
# ---------------------------------------------------------------------------

AVGPOOL2_STAGE = "avgpool2"


def _adjoint_conv(grad: np.ndarray, w: ConvWeights, in_shape) -> np.ndarray:
    cin, h, wd = in_shape
    co, cig, k, _ = w.weight.shape
    out = np.zeros((cin, h, wd))
    _, ho, wo = grad.shape
    ocpg = co // w.groups
    for oc in range(co):
        g = oc // ocpg
        for oh in range(ho):
            for ow in range(wo):
                gv = grad[oc, oh, ow]
                if gv == 0.0:
                    continue
                for ic in range(cig):
                    ci = g * cig + ic
                    for i in range(k):
                        ih = oh * w.stride + i - w.pad
                        if 0 <= ih < h:
                            for j in range(k):
                                iw = ow * w.stride + j - w.pad
                                if 0 <= iw < wd:
                                    out[ci, ih, iw] += gv * w.weight[oc, ic, i, j]
    return out


def _adjoint_pool(grad: np.ndarray, in_shape) -> np.ndarray:
    c, h, w = in_shape
    out = np.zeros((c, h, w))
    for a in (0, 1):
        for b in (0, 1):
            out[:, a:a + h - 1, b:b + w - 1] += 0.25 * grad
    return out


def impulse_response_centroid(stack, input_size: int, out_cell=None,
                              input_channels: int = 1):
    """Offset of an output cell's response-mass centroid from its nominal center.

    ``stack`` is a sequence of ``ConvWeights`` (nonnegative, bias-free) and
    the literal string ``"avgpool2"``.  The response mass of the chosen
    output cell (summed over output channels) is pulled back onto the input
    plane through the linear adjoint; its centroid is compared with the
    nominal center ``(cell + 0.5) * stride``.  Positive offsets mean the
    response lags the nominal position toward the image origin.  The chosen
    cell's receptive field should lie inside the input, otherwise border
    truncation biases the centroid.
    """
    stack = list(stack)
    shapes = [(input_channels, input_size, input_size)]
    stride = 1
    for stage in stack:
        c, n, _ = shapes[-1]
        if stage == AVGPOOL2_STAGE:
            if n < 2:
                raise ValueError("avgpool2 needs spatial size >= 2")
            shapes.append((c, n - 1, n - 1))
        else:
            if stage.bias is not None:
                raise ValueError("centroid probe requires bias-free weights")
            if (stage.weight < 0).any():
                raise ValueError("centroid probe requires nonnegative weights")
            if stage.in_channels != c:
                raise ValueError(
                    f"stage expects {stage.in_channels} channels, got {c}")
            no = (n + 2 * stage.pad - stage.kernel) // stage.stride + 1
            if no < 1:
                raise ValueError("stack shrinks the map to nothing")
            shapes.append((stage.out_channels, no, no))
            stride *= stage.stride
    cf, nf, _ = shapes[-1]
    if out_cell is None:
        out_cell = (nf // 2, nf // 2)
    r, c = out_cell
    if not (0 <= r < nf and 0 <= c < nf):
        raise ValueError(f"output cell {out_cell} outside {nf}x{nf} map")

    grad = np.zeros(shapes[-1])
    grad[:, r, c] = 1.0
    for stage, in_shape in zip(reversed(stack), reversed(shapes[:-1])):
        if stage == AVGPOOL2_STAGE:
            grad = _adjoint_pool(grad, in_shape)
        else:
            grad = _adjoint_conv(grad, stage, in_shape)

    mass = grad.sum(axis=0)
    total = mass.sum()
    if total <= 0.0:
        raise ValueError("zero total response; cannot form a centroid")
    coords = np.arange(input_size) + 0.5
    centroid_row = float((mass.sum(axis=1) * coords).sum() / total)
    centroid_col = float((mass.sum(axis=0) * coords).sum() / total)
    nominal_row = (r + 0.5) * stride
    nominal_col = (c + 0.5) * stride
    return (nominal_row - centroid_row, nominal_col - centroid_col)


# ---------------------------------------------------------------------------
# Flat binary tensor blobs (CLI interchange format)
# ---------------------------------------------------------------------------

def tensor_to_blob(t: Tensor) -> bytes:
    """4 little-endian int32 dims followed by row-major little-endian float64."""
    header = struct.pack("<4i", *t.shape)
    return header + t.data.astype("<f8").tobytes(order="C")


def tensor_from_blob(blob: bytes) -> Tensor:
    if len(blob) < 16:
        raise ValueError("blob too short for a 4-dim header")
    dims = struct.unpack("<4i", blob[:16])
    if any(d < 1 for d in dims):
        raise ValueError(f"non-positive dimension in header: {dims}")
    count = dims[0] * dims[1] * dims[2] * dims[3]
    expected = 16 + 8 * count
    if len(blob) != expected:
        raise ValueError(
            f"blob payload is {len(blob) - 16} bytes, expected {8 * count}")
    data = np.frombuffer(blob, dtype="<f8", offset=16, count=count)
    return Tensor(data.reshape(dims).astype(np.float64))
