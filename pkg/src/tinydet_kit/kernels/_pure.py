"""Pure-Python direct-loop convolution and pooling.

This is the normative semantics for the package: the compiled core mirrors
these loops statement for statement (same accumulation order, no FMA
contraction) so both backends produce bit-identical IEEE-754 results.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "pure-python"


def conv2d_raw(x, weight, bias, stride, pad, groups):
    """Zero-padded strided cross-correlation.

    x: (B, C, H, W) float64; weight: (CO, C/groups, K, K); bias: (CO,) or None.
    """
    nb, nc, h, w = x.shape
    co, cig, k, _ = weight.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.empty((nb, co, ho, wo), dtype=np.float64)
    xl = x.tolist()
    wl = weight.tolist()
    bl = bias.tolist() if bias is not None else None
    ocpg = co // groups
    for bi in range(nb):
        xb = xl[bi]
        for g in range(groups):
            for ocg in range(ocpg):
                oc = g * ocpg + ocg
                woc = wl[oc]
                base = bl[oc] if bl is not None else 0.0
                for oh in range(ho):
                    for ow in range(wo):
                        acc = base
                        for ic in range(cig):
                            xc = xb[g * cig + ic]
                            wic = woc[ic]
                            for i in range(k):
                                ih = oh * stride + i - pad
                                if 0 <= ih < h:
                                    xr = xc[ih]
                                    wr = wic[i]
                                    for j in range(k):
                                        iw = ow * stride + j - pad
                                        if 0 <= iw < w:
                                            acc += xr[iw] * wr[j]
                        out[bi, oc, oh, ow] = acc
    return out


def avgpool2_raw(x):
    """2x2 mean, stride 1, no padding: (B, C, H, W) -> (B, C, H-1, W-1)."""
    nb, nc, h, w = x.shape
    out = np.empty((nb, nc, h - 1, w - 1), dtype=np.float64)
    xl = x.tolist()
    for bi in range(nb):
        for c in range(nc):
            xc = xl[bi][c]
            for i in range(h - 1):
                r0 = xc[i]
                r1 = xc[i + 1]
                for j in range(w - 1):
                    out[bi, c, i, j] = ((r0[j] + r0[j + 1]) + (r1[j] + r1[j + 1])) * 0.25
    return out
