"""Dense 1x1 and 3x3 convolutions (replicate padding), autodiff-aware."""

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatchError
from .fields import _pad, fold_pad_grad
from .opcount import charge


def conv1x1(x, weight, bias=None):
    """Channel mixing: ``(C, H, W)`` with ``weight (O, C)`` -> ``(O, H, W)``."""
    xv = np.asarray(ad.value(x), dtype=np.float64)
    wv = np.asarray(ad.value(weight), dtype=np.float64)
    C, H, W = xv.shape
    if wv.ndim != 2 or wv.shape[1] != C:
        raise ShapeMismatchError(f"weight {wv.shape} does not mix {C} channels")
    out = np.tensordot(wv, xv, axes=(1, 0))
    charge(wv.shape[0] * C * H * W)

    def vjp(g):
        gx = np.tensordot(wv, g, axes=(0, 0))
        gw = np.tensordot(g, xv, axes=([1, 2], [1, 2]))
        return gx, gw

    y = ad.lift(out, (x, weight), vjp)
    if bias is not None:
        y = y + ad.reshape(bias, (-1, 1, 1))
    return y


def conv3x3(x, weight, bias=None):
    """``(C, H, W)`` with ``weight (O, C, 3, 3)`` -> ``(O, H, W)``."""
    xv = np.asarray(ad.value(x), dtype=np.float64)
    wv = np.asarray(ad.value(weight), dtype=np.float64)
    C, H, W = xv.shape
    if wv.ndim != 4 or wv.shape[1:] != (C, 3, 3):
        raise ShapeMismatchError(f"weight {wv.shape} incompatible with {C} input channels")
    O = wv.shape[0]
    xp = _pad(xv)
    out = np.zeros((O, H, W))
    for a in range(3):
        for b in range(3):
            out += np.tensordot(wv[:, :, a, b], xp[:, a:a + H, b:b + W], axes=(1, 0))
    charge(9 * O * C * H * W)

    def vjp(g):
        gw = np.empty_like(wv)
        gxp = np.zeros_like(xp)
        for a in range(3):
            for b in range(3):
                win = xp[:, a:a + H, b:b + W]
                gw[:, :, a, b] = np.tensordot(g, win, axes=([1, 2], [1, 2]))
                gxp[:, a:a + H, b:b + W] += np.tensordot(wv[:, :, a, b], g, axes=(0, 0))
        return fold_pad_grad(gxp), gw

    y = ad.lift(out, (x, weight), vjp)
    if bias is not None:
        y = y + ad.reshape(bias, (-1, 1, 1))
    return y
