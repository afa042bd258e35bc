"""Grid primitives the geometric priors are built from.

Conventions: scalar fields are ``(H, W)`` float arrays, vector fields are
``(2, H, W)`` with the y-component first, feature maps are ``(C, H, W)`` and
label masks are ``(H, W)`` non-negative integer arrays. All 3x3 stencils use
replicate padding and correlation orientation (no kernel flip).
"""

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import kernels
from .errors import EmptyInputError, FieldSizeError, ShapeMismatchError
from .opcount import charge

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def as_label_mask(mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeMismatchError(f"label mask must be 2-D, got shape {m.shape}")
    if m.size and not np.issubdtype(m.dtype, np.integer):
        if not np.all(np.equal(np.mod(m, 1), 0)):
            raise ValueError("label mask must hold integers")
    m = m.astype(np.int64)
    if m.size and m.min() < 0:
        raise ValueError("label mask values must be non-negative")
    return m


def _pad(x):
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(x, pad, mode="edge")


def _padded_field(field):
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D field, got shape {f.shape}")
    H, W = f.shape
    if H < 3 or W < 3:
        raise FieldSizeError(f"field {H}x{W} is smaller than the 3x3 stencil")
    return _pad(f)


# ---------------------------------------------------------------------------
# distance transform
# ---------------------------------------------------------------------------

def squared_distance_transform(mask, foreground_label=1):
    """Exact squared Euclidean distance (int64) to the nearest non-foreground pixel.

    Only in-image pixels count as background. If the image has no background
    at all, an implicit background frame around the image is used instead.
    """
    m = as_label_mask(mask)
    if m.size == 0:
        raise EmptyInputError("distance transform of an empty mask")
    fg = m == foreground_label
    if not fg.any():
        return np.zeros(m.shape, dtype=np.int64)
    if fg.all():
        framed = np.pad(fg, 1, mode="constant", constant_values=False)
        return kernels.squared_edt(framed)[1:-1, 1:-1]
    return kernels.squared_edt(fg)


def distance_transform(mask, foreground_label=1):
    return np.sqrt(squared_distance_transform(mask, foreground_label).astype(np.float64))


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------

def sobel_gradient(field):
    """(d/dy, d/dx) via 3x3 Sobel scaled by 1/8, so a ramp reports its slope.

    Evaluated as smoothed central differences, which vanish exactly on
    constant fields (a nine-tap weighted sum would leave round-off).
    """
    p = _padded_field(field)
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = (dx[:-2] + 2.0 * dx[1:-1] + dx[2:]) * 0.125
    gy = (dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]) * 0.125
    return np.stack([gy, gx])


def laplacian(field):
    """4-neighbour Laplacian, summed as neighbour-minus-centre differences."""
    p = _padded_field(field)
    c = p[1:-1, 1:-1]
    return (p[:-2, 1:-1] - c) + (p[2:, 1:-1] - c) + (p[1:-1, :-2] - c) + (p[1:-1, 2:] - c)


def morphological_gradient(mask):
    """1 where the 3x3 neighbourhood holds another label, else 0."""
    m = as_label_mask(mask)
    if m.size == 0:
        return np.zeros(m.shape)
    p = _pad(m)  # edge padding only ever compares a pixel with itself
    H, W = m.shape
    diff = np.zeros((H, W), dtype=bool)
    for a in range(3):
        for b in range(3):
            diff |= p[a:a + H, b:b + W] != m
    return diff.astype(np.float64)


def box_average3x3(field):
    f = np.asarray(field, dtype=np.float64)
    H, W = f.shape
    p = _pad(f)
    out = np.zeros((H, W))
    for a in range(3):
        for b in range(3):
            out += p[a:a + H, b:b + W]
    return out / 9.0


def depthwise_conv3x3(features, kernels_):
    """Per-channel 3x3 correlation with replicate padding.

    ``features`` is ``(C, H, W)``, ``kernels_`` is ``(C, 3, 3)``; either may be
    an autodiff Var.
    """
    x = ad.value(features)
    k = ad.value(kernels_)
    if np.ndim(x) != 3:
        raise ShapeMismatchError(f"features must be (C, H, W), got {np.shape(x)}")
    C, H, W = np.shape(x)
    if np.shape(k) != (C, 3, 3):
        raise ShapeMismatchError(f"need {C} kernels of shape 3x3, got {np.shape(k)}")
    xp = _pad(np.asarray(x, dtype=np.float64))
    out = np.zeros((C, H, W))
    for a in range(3):
        for b in range(3):
            out += k[:, a, b, None, None] * xp[:, a:a + H, b:b + W]
    charge(9 * C * H * W)

    def vjp(g):
        gk = np.empty((C, 3, 3))
        gxp = np.zeros_like(xp)
        for a in range(3):
            for b in range(3):
                gk[:, a, b] = (g * xp[:, a:a + H, b:b + W]).sum(axis=(1, 2))
                gxp[:, a:a + H, b:b + W] += k[:, a, b, None, None] * g
        return fold_pad_grad(gxp), gk

    return ad.lift(out, (features, kernels_), vjp)


def fold_pad_grad(gp):
    """Adjoint of one-pixel replicate padding on the last two axes."""
    g = gp[..., 1:-1, 1:-1].copy()
    g[..., 0, :] += gp[..., 0, 1:-1]
    g[..., -1, :] += gp[..., -1, 1:-1]
    g[..., :, 0] += gp[..., 1:-1, 0]
    g[..., :, -1] += gp[..., 1:-1, -1]
    g[..., 0, 0] += gp[..., 0, 0]
    g[..., 0, -1] += gp[..., 0, -1]
    g[..., -1, 0] += gp[..., -1, 0]
    g[..., -1, -1] += gp[..., -1, -1]
    return g


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

def connected_components(mask):
    """Give every 4-connected same-label region its own id (1, 2, ... in row-major
    order of first appearance); label 0 stays 0."""
    m = as_label_mask(mask)
    out = np.zeros(m.shape, dtype=np.int64)
    if m.size == 0:
        return out
    offset = 0
    for lab in np.unique(m):
        if lab == 0:
            continue
        comp, n = ndimage.label(m == lab)  # default structure is 4-connected in 2-D
        out[comp > 0] = comp[comp > 0] + offset
        offset += n
    if offset == 0:
        return out
    # renumber by first occurrence
    flat = out.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(offset + 1, dtype=np.int64)
    remap[ids[keep][order]] = np.arange(1, keep.sum() + 1)
    return remap[out]
