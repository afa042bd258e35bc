"""Offset-aligned decoding: warp low-level features along a bounded,
geometry-derived offset field and gate high-level features by the boundary map.

Grids are ``(2, H, W)`` arrays of normalized (y, x) coordinates in [-1, 1],
corner-aligned: -1 and +1 land on the centres of the first and last pixels.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ShapeMismatchError
from .layers import conv3x3
from .opcount import charge

ALPHA_MAX = 0.2


@dataclass
class PsiConv:
    """Shallow 3x3 conv from the two flow channels to one channel."""

    weight: object  # (1, 2, 3, 3)
    bias: object    # (1,)

    @classmethod
    def init(cls, rng):
        bound = 1.0 / np.sqrt(18.0)
        return cls(rng.uniform(-bound, bound, size=(1, 2, 3, 3)), np.zeros(1))

    @classmethod
    def zeros(cls):
        return cls(np.zeros((1, 2, 3, 3)), np.zeros(1))

    def arrays(self):
        return (self.weight, self.bias)


def compute_alpha(flow, psi):
    """alpha = 0.2 * logistic(psi(flow)), one value per pixel in [0, 0.2]."""
    return ad.mul(ALPHA_MAX, ad.sigmoid(ad.getitem(conv3x3(flow, psi.weight, psi.bias), 0)))


def _check_planes(flow, *scalars):
    fs = np.shape(ad.value(flow))
    for s in scalars:
        ss = np.shape(ad.value(s))
        if fs != (2,) + ss:
            raise ShapeMismatchError(f"vector field {fs} does not match scalar field {ss}")


def offset_field(flow, d_final, alpha):
    """Per-pixel offset flow * d_final * alpha on both channels."""
    _check_planes(flow, d_final, alpha)
    scale = ad.reshape(ad.mul(d_final, alpha), (1,) + np.shape(ad.value(d_final)))
    return ad.mul(flow, scale)


def base_grid(height, width):
    if height < 2 or width < 2:
        raise ShapeMismatchError("sampling grids need at least 2x2 pixels")
    ys = -1.0 + 2.0 * np.arange(height) / (height - 1)
    xs = -1.0 + 2.0 * np.arange(width) / (width - 1)
    return np.stack(np.meshgrid(ys, xs, indexing="ij"))


def align_grid(base, delta):
    if np.shape(ad.value(base)) != np.shape(ad.value(delta)):
        raise ShapeMismatchError("grid and offset shapes differ")
    return ad.clip(ad.add(base, delta), -1.0, 1.0)


def grid_sample(source, grid):
    """Bilinear sampling of ``source (C, Hs, Ws)`` at ``grid (2, H, W)``."""
    sv = np.asarray(ad.value(source), dtype=np.float64)
    gv = np.asarray(ad.value(grid), dtype=np.float64)
    if sv.ndim != 3 or sv.shape[1] < 2 or sv.shape[2] < 2:
        raise ShapeMismatchError(f"source must be (C, H>=2, W>=2), got {sv.shape}")
    if gv.ndim != 3 or gv.shape[0] != 2:
        raise ShapeMismatchError(f"grid must be (2, H, W), got {gv.shape}")
    out = kernels.grid_sample_forward(sv, gv)
    charge(8 * out.size)

    def vjp(g):
        return kernels.grid_sample_backward(g, sv, gv)

    return ad.lift(out, (source, grid), vjp)


def bilinear_weights(grid, source_shape):
    """The four interpolation weights per grid point, shape (4, H, W)."""
    Hs, Ws = source_shape
    gv = np.asarray(grid, dtype=np.float64)
    _, wy = kernels._np_cell(gv[0], Hs)
    _, wx = kernels._np_cell(gv[1], Ws)
    return np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])


def spatial_gate(f_up, d_final):
    """f_up + f_up * d_final (every in-image pixel counts as valid)."""
    fs = np.shape(ad.value(f_up))
    ds = np.shape(ad.value(d_final))
    if len(fs) != 3 or fs[1:] != ds:
        raise ShapeMismatchError(f"gate {ds} does not match features {fs}")
    return ad.add(f_up, ad.mul(f_up, ad.reshape(d_final, (1,) + ds)))


def upsample_nearest(x, shape):
    """Nearest-neighbour resize of ``(C, h, w)`` to ``(C, *shape)``."""
    h, w = np.shape(ad.value(x))[1:]
    H, W = shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return ad.getitem(x, (slice(None), rows[:, None], cols[None, :]))


def goad_forward(f_low, f_up, flow, d_final, psi):
    """concat(gated f_up, f_low warped along the offset field), channels first."""
    ls = np.shape(ad.value(f_low))
    us = np.shape(ad.value(f_up))
    if ls[1:] != us[1:]:
        raise ShapeMismatchError(f"f_low {ls} and f_up {us} must share spatial dims")
    alpha = compute_alpha(flow, psi)
    delta = offset_field(flow, d_final, alpha)
    grid = align_grid(base_grid(*ls[1:]), delta)
    warped = grid_sample(f_low, grid)
    gated = spatial_gate(f_up, d_final)
    return ad.concat([gated, warped], axis=0)
