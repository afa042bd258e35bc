"""mIoU evaluation and scan-cost instrumentation."""

import gc
import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError, UndefinedMetricError
from .fields import as_label_mask
from .opcount import count_madds


def confusion_matrix(pred, gt, classes, ignore_label=None):
    """K x K counts, rows = ground truth, columns = prediction."""
    p = as_label_mask(pred)
    g = as_label_mask(gt)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"pred {p.shape} vs gt {g.shape}")
    keep = np.ones(g.shape, dtype=bool) if ignore_label is None else g != ignore_label
    p = p[keep]
    g = g[keep]
    if g.size and (g.max() >= classes or p.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    return np.bincount(g * classes + p, minlength=classes * classes).reshape(classes, classes)


def iou_from_confusion(cm):
    """Per-class IoU; NaN for classes absent from both gt and prediction."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    iou = np.full(cm.shape[0], np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return iou


def miou(pred, gt, classes, ignore_label=None):
    """Returns (mIoU, per-class IoU). Absent classes are NaN and skipped in the mean."""
    iou = iou_from_confusion(confusion_matrix(pred, gt, classes, ignore_label))
    if np.all(np.isnan(iou)):
        raise UndefinedMetricError("no class appears in either prediction or ground truth")
    return float(np.nanmean(iou)), iou


@dataclass
class CostReport:
    height: int
    width: int
    pixels: int
    madds: int
    seconds: float


def measure_scan_cost(config, sizes, seed=0, repeats=5, priors_fn=None):
    """Run the cascade on random features at each size.

    Multiply-adds come from the instrumented kernels (exact). Wall time follows
    the timeit convention: the fastest of ``repeats`` runs with the garbage
    collector paused, after the counted run has served as warm-up.
    """
    from .gmamba import cascade_forward
    from .priors import make_priors

    if not sizes:
        raise ValueError("need at least one size")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    reports = []
    for k, (H, W) in enumerate(sizes):
        rng = np.random.default_rng([seed, k])
        feats = rng.standard_normal((config.channels, H, W))
        if priors_fn is None:
            mask = np.ones((H, W), dtype=np.int64)
            mask[:, W // 2:] = 2
            priors = make_priors(mask)
        else:
            priors = priors_fn(H, W)
        with count_madds() as counter:
            cascade_forward(feats, config, priors)
        times = []
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(repeats):
                t0 = time.perf_counter()
                cascade_forward(feats, config, priors)
                times.append(time.perf_counter() - t0)
        finally:
            if gc_was_enabled:
                gc.enable()
        reports.append(CostReport(H, W, H * W, counter.total, min(times)))
    return reports
