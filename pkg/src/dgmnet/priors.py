"""Analytic geometric priors computed from label masks.

The four fields: a per-instance normalized distance potential (vmap), its
max-normalized Sobel gradient (flow, pointing up the potential towards
instance centres), the max-normalized signed Laplacian of the potential
(curv) and a morphological boundary map (d_coarse). ``refine_dmap`` closes
the feedback loop with a learned residual.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .errors import ShapeMismatchError
from .fields import (
    as_label_mask,
    box_average3x3,
    connected_components,
    laplacian,
    morphological_gradient,
    sobel_gradient,
    squared_distance_transform,
)

EPS = 1e-8


@dataclass
class GeometricPriors:
    vmap: np.ndarray      # (H, W) in [0, 1]
    flow: np.ndarray      # (2, H, W), |v| <= 1
    curv: np.ndarray      # (H, W) in [-1, 1]
    d_coarse: np.ndarray  # (H, W) in [0, 1]

    @property
    def shape(self):
        return self.vmap.shape

    def fields(self):
        return {"vmap": self.vmap, "flow": self.flow, "curv": self.curv, "dcoarse": self.d_coarse}


def compute_vmap(instances):
    """Per-instance distance to the nearest pixel outside the instance, divided by
    the instance maximum. Background stays 0."""
    m = as_label_mask(instances)
    out = np.zeros(m.shape)
    if m.size == 0 or not m.any():
        return out
    H, W = m.shape
    slices = ndimage.find_objects(m)
    for k, sl in enumerate(slices):
        if sl is None:
            continue
        label = k + 1
        # the nearest outside pixel always lies within the box grown by one
        y0, y1 = max(sl[0].start - 1, 0), min(sl[0].stop + 1, H)
        x0, x1 = max(sl[1].start - 1, 0), min(sl[1].stop + 1, W)
        crop = m[y0:y1, x0:x1]
        sq = squared_distance_transform(crop, label)
        inside = crop == label
        d = np.sqrt(sq.astype(np.float64))
        peak = d[inside].max()
        region = out[y0:y1, x0:x1]
        region[inside] = d[inside] / peak if peak > 0 else 1.0
    return out


def compute_flow(vmap):
    g = sobel_gradient(vmap)
    peak = np.sqrt(g[0] ** 2 + g[1] ** 2).max()
    return g / max(peak, EPS)


def compute_curv(vmap):
    lap = laplacian(vmap)
    return lap / max(np.abs(lap).max(), EPS)


def compute_dcoarse(mask, soften=False):
    d = morphological_gradient(mask)
    if soften and d.size:
        d = box_average3x3(d)
    return d


def refine_dmap(d_coarse, delta_d):
    """D_final = logistic(d_coarse + delta_d); either argument may be a Var."""
    if np.shape(ad.value(d_coarse)) != np.shape(ad.value(delta_d)):
        raise ShapeMismatchError(
            f"d_coarse {np.shape(ad.value(d_coarse))} vs delta_d {np.shape(ad.value(delta_d))}")
    return ad.sigmoid(ad.add(d_coarse, delta_d))


def make_priors(mask, soften=False):
    m = as_label_mask(mask)
    vmap = compute_vmap(connected_components(m))
    if min(m.shape) < 3:
        # stencils need 3x3; tiny masks get flat derived fields
        flow = np.zeros((2,) + m.shape)
        curv = np.zeros(m.shape)
    else:
        flow = compute_flow(vmap)
        curv = compute_curv(vmap)
    return GeometricPriors(vmap=vmap, flow=flow, curv=curv,
                           d_coarse=compute_dcoarse(m, soften=soften))


def zero_priors(shape):
    H, W = shape
    return GeometricPriors(np.zeros((H, W)), np.zeros((2, H, W)), np.zeros((H, W)), np.zeros((H, W)))
