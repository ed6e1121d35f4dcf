"""Strided 3D convolution on channels-last volumes."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .autodiff import Tensor, _op, as_tensor


def conv3d(x, weight, bias=None, stride: int = 2) -> Tensor:
    """3x3x3 convolution with zero padding 1.

    ``x`` is (B, D, H, W, Cin), ``weight`` is (3, 3, 3, Cin, Cout).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.shape[:3] != (3, 3, 3) or weight.shape[3] != x.shape[4]:
        raise DimensionError(f"conv3d shape mismatch {x.shape} * {weight.shape}")
    batch, d, h, w, cin = x.shape
    cout = weight.shape[4]
    od, oh, ow = ((n - 1) // stride + 1 for n in (d, h, w))
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    cols = []
    offsets = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]
    for a, b, c in offsets:
        cols.append(xp[:, a:a + stride * od:stride, b:b + stride * oh:stride, c:c + stride * ow:stride, :])
    col = np.concatenate(cols, axis=-1).reshape(-1, 27 * cin)
    wmat = weight.data.reshape(27 * cin, cout)
    out = (col @ wmat).reshape(batch, od, oh, ow, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (col.T @ g2).reshape(weight.shape)
        gcol = (g2 @ wmat.T).reshape(batch, od, oh, ow, 27, cin)
        gxp = np.zeros_like(xp)
        for i, (a, b, c) in enumerate(offsets):
            gxp[:, a:a + stride * od:stride, b:b + stride * oh:stride, c:c + stride * ow:stride, :] += gcol[..., i, :]
        gx = gxp[:, 1:-1, 1:-1, 1:-1, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _op(out, parents, vjp)
