"""Composite segmentation + geometry objective.

    total = seg + gamma_geo(t) * (vg + d) + 0.4 * aux
    seg   = ce_ohem + 0.8 * lovasz + 0.1 * boundary
    vg    = mse(V) + mse(flow) + mse(curv) + 0.5 * tv(flow)

Probabilities are ``(K, H, W)``; labels are ``(H, W)`` integers. Every loss
accepts autodiff Vars for its real-valued inputs.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatchError, UndefinedLossError
from .fields import as_label_mask

SEG_LOVASZ_WEIGHT = 0.8
SEG_BOUNDARY_WEIGHT = 0.1
AUX_WEIGHT = 0.4
TV_WEIGHT = 0.5
POS_WEIGHT = 20.0
OHEM_THRESHOLD = 0.7
OHEM_MIN_KEPT = 1.0 / 16.0
D_EPS = 1e-7
# floor inside -log(p) so a hard zero does not produce inf
CE_FLOOR = 1e-12


def _valid_pixels(probs, labels, ignore_label):
    pv = ad.value(probs)
    lab = as_label_mask(labels)
    if np.ndim(pv) != 3 or np.shape(pv)[1:] != lab.shape:
        raise ShapeMismatchError(f"probabilities {np.shape(pv)} vs labels {lab.shape}")
    flat = lab.ravel()
    valid = np.ones(flat.size, dtype=bool) if ignore_label is None else flat != ignore_label
    pix = np.flatnonzero(valid)
    if pix.size == 0:
        raise UndefinedLossError("every pixel is ignored")
    K = np.shape(pv)[0]
    if flat[pix].max() >= K:
        raise ValueError(f"label {flat[pix].max()} out of range for {K} classes")
    return flat, pix


def _true_class_prob(probs, flat, pix):
    hw = flat.size
    return ad.take(probs, flat[pix] * hw + pix)


def _neg_log(p):
    return ad.neg(ad.log(ad.clip(p, CE_FLOOR, np.inf)))


def pixel_ce(probs, labels, ignore_label=None):
    """-ln p_true for each non-ignored pixel, in row-major order."""
    flat, pix = _valid_pixels(probs, labels, ignore_label)
    return _neg_log(_true_class_prob(probs, flat, pix))


def ce_ohem(probs, labels, threshold=OHEM_THRESHOLD, min_kept_fraction=OHEM_MIN_KEPT,
            ignore_label=None):
    """Mean CE over pixels whose true-class probability is below ``threshold``;
    at least ceil(min_kept_fraction * N) of the hardest pixels are kept."""
    flat, pix = _valid_pixels(probs, labels, ignore_label)
    p_true = _true_class_prob(probs, flat, pix)
    pt = ad.value(p_true)
    n_min = math.ceil(min_kept_fraction * pt.size)
    hard = np.flatnonzero(pt < threshold)
    if hard.size < n_min:
        # stable sort: ties resolved in row-major pixel order
        hard = np.sort(np.argsort(pt, kind="stable")[:n_min])
    return ad.mean(_neg_log(ad.take(p_true, hard)))


def lovasz_grad(gt_sorted):
    """Gradient of the Lovasz extension of the Jaccard loss at sorted errors."""
    gt = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt.sum()
    intersection = gts - np.cumsum(gt)
    union = gts + np.cumsum(1.0 - gt)
    jaccard = 1.0 - intersection / union
    if gt.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, ignore_label=None):
    """Lovasz-softmax averaged over the classes present in ``labels``."""
    flat, pix = _valid_pixels(probs, labels, ignore_label)
    K = np.shape(ad.value(probs))[0]
    hw = flat.size
    lab = flat[pix]
    per_class = []
    for c in range(K):
        fg = (lab == c).astype(np.float64)
        if not fg.any():
            continue
        p_c = ad.take(probs, c * hw + pix)
        errors = ad.add(ad.mul(fg, ad.sub(1.0, p_c)), ad.mul(1.0 - fg, p_c))
        order = np.argsort(-ad.value(errors), kind="stable")
        per_class.append(ad.dot(ad.take(errors, order), lovasz_grad(fg[order])))
    return ad.mul(_sum_list(per_class), 1.0 / len(per_class))


def _sum_list(items):
    total = items[0]
    for it in items[1:]:
        total = ad.add(total, it)
    return total


def boundary_ce(probs, labels, d_gt, ignore_label=None):
    """CE weighted by 1 + d_gt, normalized by the weight sum."""
    flat, pix = _valid_pixels(probs, labels, ignore_label)
    dv = np.asarray(d_gt, dtype=np.float64)
    if dv.shape != np.shape(ad.value(probs))[1:]:
        raise ShapeMismatchError("d_gt does not match the label grid")
    w = 1.0 + dv.ravel()[pix]
    ce = _neg_log(_true_class_prob(probs, flat, pix))
    return ad.mul(ad.dot(ce, w), 1.0 / w.sum())


def aux_loss(probs_aux, labels, ignore_label=None):
    return ad.mean(pixel_ce(probs_aux, labels, ignore_label))


def tv_loss(flow):
    """Mean absolute forward difference over both channels and both axes."""
    fs = np.shape(ad.value(flow))
    H, W = fs[-2], fs[-1]
    n = fs[0] * ((H - 1) * W + H * (W - 1))
    if n == 0:
        return ad.mul(ad.sum_(flow), 0.0)
    parts = []
    if H > 1:
        dv = ad.sub(ad.getitem(flow, (slice(None), slice(1, None))), ad.getitem(flow, (slice(None), slice(None, -1))))
        parts.append(ad.sum_(ad.abs_(dv)))
    if W > 1:
        dh = ad.sub(ad.getitem(flow, (Ellipsis, slice(1, None))), ad.getitem(flow, (Ellipsis, slice(None, -1))))
        parts.append(ad.sum_(ad.abs_(dh)))
    return ad.mul(_sum_list(parts), 1.0 / n)


def _mse(a, b):
    if np.shape(ad.value(a)) != np.shape(ad.value(b)):
        raise ShapeMismatchError(f"{np.shape(ad.value(a))} vs {np.shape(ad.value(b))}")
    diff = ad.sub(a, b)
    return ad.mean(ad.mul(diff, diff))


def geometric_terms(pred, target):
    """Returns (vg, tv) where vg already includes 0.5 * tv(pred flow)."""
    tv = tv_loss(pred.flow)
    vg = ad.add(ad.add(ad.add(_mse(pred.vmap, target.vmap), _mse(pred.flow, target.flow)),
                       _mse(pred.curv, target.curv)), ad.mul(TV_WEIGHT, tv))
    return vg, tv


def geometric_mse(pred, target):
    return geometric_terms(pred, target)[0]


def d_loss(d_pred, d_gt, pos_weight=POS_WEIGHT, eps=D_EPS):
    """Positive-weighted binary cross entropy; predictions clamped to [eps, 1 - eps]."""
    y = np.asarray(d_gt, dtype=np.float64)
    if np.shape(ad.value(d_pred)) != y.shape:
        raise ShapeMismatchError("d_pred and d_gt differ in shape")
    p = ad.clip(d_pred, eps, 1.0 - eps)
    pos = ad.mul(pos_weight * y, ad.log(p))
    neg = ad.mul(1.0 - y, ad.log(ad.sub(1.0, p)))
    return ad.neg(ad.mean(ad.add(pos, neg)))


def gamma_geo(t):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"training progress t must lie in [0, 1], got {t}")
    return 2.0 * (1.0 - t) + 0.2


def combine(ce, lovasz, boundary, vg, d, aux, gamma):
    seg = ad.add(ad.add(ce, ad.mul(SEG_LOVASZ_WEIGHT, lovasz)), ad.mul(SEG_BOUNDARY_WEIGHT, boundary))
    total = ad.add(ad.add(seg, ad.mul(gamma, ad.add(vg, d))), ad.mul(AUX_WEIGHT, aux))
    return seg, total


@dataclass
class LossReport:
    total: float
    seg: float
    ce_ohem: float
    lovasz: float
    boundary: float
    vg: float
    tv: float
    d: float
    aux: float
    gamma_geo: float

    def as_dict(self):
        return asdict(self)

    def check(self, tol=1e-12):
        seg = self.ce_ohem + SEG_LOVASZ_WEIGHT * self.lovasz + SEG_BOUNDARY_WEIGHT * self.boundary
        total = self.seg + self.gamma_geo * (self.vg + self.d) + AUX_WEIGHT * self.aux
        return abs(seg - self.seg) <= tol and abs(total - self.total) <= tol


def composite_loss(probs, labels, probs_aux, pred, target, d_pred, d_gt, t,
                   threshold=OHEM_THRESHOLD, min_kept_fraction=OHEM_MIN_KEPT,
                   pos_weight=POS_WEIGHT, ignore_label=None):
    """Differentiable total plus a :class:`LossReport` of its components."""
    g = gamma_geo(t)
    ce = ce_ohem(probs, labels, threshold, min_kept_fraction, ignore_label)
    lov = lovasz_softmax(probs, labels, ignore_label)
    bnd = boundary_ce(probs, labels, d_gt, ignore_label)
    vg, tv = geometric_terms(pred, target)
    dl = d_loss(d_pred, d_gt, pos_weight)
    aux = aux_loss(probs_aux, labels, ignore_label)
    seg, total = combine(ce, lov, bnd, vg, dl, aux, g)
    f = lambda v: float(ad.value(v))  # noqa: E731
    report = LossReport(total=f(total), seg=f(seg), ce_ohem=f(ce), lovasz=f(lov), boundary=f(bnd),
                        vg=f(vg), tv=f(tv), d=f(dl), aux=f(aux), gamma_geo=g)
    return total, report


def total_loss(*args, **kwargs):
    return composite_loss(*args, **kwargs)[1]
