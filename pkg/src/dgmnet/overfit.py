"""Toy training loop: fit a tiny cascade + offset decoder to one synthetic scene."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .gmamba import CascadeConfig, cascade_forward
from .goad import PsiConv, goad_forward
from .layers import conv1x1
from .losses import OHEM_MIN_KEPT, OHEM_THRESHOLD, POS_WEIGHT, composite_loss
from .priors import GeometricPriors, compute_dcoarse, make_priors, refine_dmap

CLASSES = 3


def synthetic_scene(size=32):
    """Background 0, a square block 1, and a 2-pixel-wide vertical strip 2."""
    if size < 16:
        raise ConfigError("the overfit scene needs size >= 16")
    labels = np.zeros((size, size), dtype=np.int64)
    q = size // 4
    labels[q:size - q - 2, q - 2:2 * q + 2] = 1
    col = size - q
    labels[2:size - 2, col:col + 2] = 2
    return labels


def scene_features(labels, channels, rng, amplitude=0.5, noise=0.1):
    """Class embedding per pixel plus Gaussian noise.

    The scan readout is cubic in its input, so three stacked blocks blow up
    unit-scale features; amplitudes around 0.5 keep the context O(1).
    """
    embed = rng.uniform(-amplitude, amplitude, size=(CLASSES, channels))
    feats = embed[labels].transpose(2, 0, 1)
    return feats + noise * rng.standard_normal(feats.shape)


@dataclass
class Heads:
    cls_w: np.ndarray    # (K, 2C)
    cls_b: np.ndarray    # (K,)
    aux_w: np.ndarray    # (K, C)
    aux_b: np.ndarray    # (K,)
    prior_w: np.ndarray  # (4, C): V, flow y, flow x, curv
    prior_b: np.ndarray  # (4,)

    @classmethod
    def init(cls, channels, rng):
        C = channels

        def u(*shape, fan):
            return rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(fan)

        return cls(u(CLASSES, 2 * C, fan=2 * C), np.zeros(CLASSES), u(CLASSES, C, fan=C),
                   np.zeros(CLASSES), u(4, C, fan=C), np.zeros(4))

    def arrays(self):
        return [self.cls_w, self.cls_b, self.aux_w, self.aux_b, self.prior_w, self.prior_b]


def _forward(arrays, n_cascade, template, feats, priors, labels, d_gt, t, hyper):
    config = template.with_arrays(arrays[:n_cascade])
    psi = PsiConv(*arrays[n_cascade:n_cascade + 2])
    heads = Heads(*arrays[n_cascade + 2:])
    context, delta_d = cascade_forward(feats, config, priors)
    d_pred = refine_dmap(priors.d_coarse, delta_d)
    fused = goad_forward(feats, context, priors.flow, d_pred, psi)
    probs = ad.softmax(conv1x1(fused, heads.cls_w, heads.cls_b), axis=0)
    probs_aux = ad.softmax(conv1x1(feats, heads.aux_w, heads.aux_b), axis=0)
    geo = conv1x1(context, heads.prior_w, heads.prior_b)
    pred = GeometricPriors(ad.getitem(geo, 0), ad.getitem(geo, slice(1, 3)),
                           ad.getitem(geo, 3), priors.d_coarse)
    return composite_loss(probs, labels, probs_aux, pred, priors, d_pred, d_gt, t,
                          threshold=hyper["ohem_threshold"],
                          min_kept_fraction=hyper["ohem_min_kept"],
                          pos_weight=hyper["pos_weight"])


def run_overfit(steps=200, seed=0, channels=8, state_size=4, size=32, lr=0.01,
                ohem_threshold=OHEM_THRESHOLD, ohem_min_kept=OHEM_MIN_KEPT,
                pos_weight=POS_WEIGHT, callback=None):
    """Plain gradient descent on the composite loss with t = step / steps.

    Returns one ``(step, LossReport)`` per step for steps 0..steps inclusive;
    the report at ``step`` is taken before that step's update.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    rng = np.random.default_rng([seed, 7])
    labels = synthetic_scene(size)
    feats = scene_features(labels, channels, rng)
    priors = make_priors(labels)
    d_gt = compute_dcoarse(labels)
    template = CascadeConfig.init(channels, state_size, seed)
    psi = PsiConv.init(rng)
    heads = Heads.init(channels, rng)
    arrays = [np.array(a, dtype=np.float64) for a in template.trainable()]
    n_cascade = len(arrays)
    arrays += [np.array(a, dtype=np.float64) for a in psi.arrays() + tuple(heads.arrays())]
    hyper = {"ohem_threshold": ohem_threshold, "ohem_min_kept": ohem_min_kept,
             "pos_weight": pos_weight}

    history = []
    for step in range(steps + 1):
        t = step / steps
        tape = ad.Tape()
        leaves = [tape.var(a) for a in arrays]
        try:
            total, report = _forward(leaves, n_cascade, template, feats, priors, labels, d_gt,
                                     t, hyper)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        if not all(math.isfinite(v) for v in report.as_dict().values()):
            raise NumericError(f"step {step}: non-finite loss")
        history.append((step, report))
        if callback is not None:
            callback(step, report)
        if step == steps:
            break
        grads = ad.backward(tape, total)
        for k, leaf in enumerate(leaves):
            g = grads[leaf]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"step {step}: non-finite gradient")
            arrays[k] = arrays[k] - lr * g
    return history
