"""Finite-difference certification of every differentiable operation.

Each check draws a small random instance, rejecting draws that sit within a
margin of a kink (relu zeros, |x| zeros, clip bounds, the OHEM cutoff, sort
ties, sampling-lattice crossings), then compares the tape gradient of a
random linear functional of the output with central differences.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gmamba import (DIRECTIONS, RefinerHead, ScanParams, geometric_prompt, gmamba_block,
                     modulate, scan_lines)
from .goad import (PsiConv, align_grid, base_grid, compute_alpha, goad_forward, grid_sample,
                   offset_field)
from .losses import (OHEM_MIN_KEPT, OHEM_THRESHOLD, aux_loss, boundary_ce, ce_ohem,
                     composite_loss, d_loss, geometric_mse, lovasz_softmax, tv_loss)
from .priors import GeometricPriors, refine_dmap

STEP = 1e-5
TOLERANCE = 1e-4
INSTANCES = 20
# distance kept from any kink, in units of the perturbed quantity
MARGIN = 1e-3
MAX_DRAWS = 200
SCOPES = ("scan", "goad", "losses")


@dataclass
class Problem:
    """A scalar function of ``args`` (a list of float arrays)."""

    fn: object
    args: list


def _functional(out_shape, rng):
    """Random weights turning a tensor output into a scalar."""
    return rng.standard_normal(out_shape)


def _project(out, weights):
    return ad.sum_(ad.mul(out, weights))


def check_problem(problem, h=STEP, corrupt=False):
    """Returns (max relative error, index of the worst argument)."""
    tape = ad.Tape()
    leaves = [tape.var(a) for a in problem.args]
    out = problem.fn(*leaves)
    grads = ad.backward(tape, out)
    worst, worst_arg = 0.0, 0
    for k, (leaf, arg) in enumerate(zip(leaves, problem.args)):
        g_ad = grads[leaf]
        if corrupt:
            g_ad = g_ad * 1.01 + 1e-3

        def f(x, k=k):
            vals = list(problem.args)
            vals[k] = x
            return ad.value(problem.fn(*vals))

        g_fd = ad.finite_difference(f, arg, h)
        err = float(ad.relative_error(g_ad, g_fd).max()) if g_fd.size else 0.0
        if err > worst:
            worst, worst_arg = err, k
    return worst, worst_arg


# ---------------------------------------------------------------------------
# scan scope
# ---------------------------------------------------------------------------

def _scan_params(rng, C, S):
    p = ScanParams.init(C, S, rng)
    p.d_skip = rng.uniform(0.5, 1.5, size=C)
    p.b_delta = rng.uniform(-1.0, 1.0, size=C)
    return list(p.arrays())


def sample_scan(rng):
    C, S, N = 2, 3, 6
    x = rng.uniform(-1.0, 1.0, size=(2, C, N))
    w = _functional((2, C, N), rng)
    return Problem(lambda x, *p: _project(scan_lines(x, ScanParams(*p)), w),
                   [x] + _scan_params(rng, C, S))


def _prompt_flow(rng, shape):
    """Flow whose components stay clear of zero so relu(<flow, u>) has no kink."""
    mag = rng.uniform(0.1, 1.0, size=(2,) + shape)
    return mag * rng.choice([-1.0, 1.0], size=(2,) + shape)


def sample_modulation(rng):
    C, H, W = 2, 3, 4
    x = rng.standard_normal((C, H, W))
    d = rng.uniform(0.0, 1.0, size=(H, W))
    flow = _prompt_flow(rng, (H, W))
    direction = DIRECTIONS[rng.integers(len(DIRECTIONS))]
    w = _functional((C, H, W), rng)
    return Problem(lambda x, d, flow: _project(modulate(x, geometric_prompt(d, flow, direction)), w),
                   [x, d, flow])


def sample_gmamba_block(rng):
    C, S, H, W = 2, 2, 3, 4
    x = rng.uniform(-1.0, 1.0, size=(C, H, W))
    kern = rng.uniform(-0.4, 0.4, size=(C, 3, 3))
    d = rng.uniform(0.0, 1.0, size=(H, W))
    flow = _prompt_flow(rng, (H, W))
    zeros = np.zeros((H, W))
    w = _functional((C, H, W), rng)

    def fn(x, kern, d, flow, *p):
        priors = GeometricPriors(zeros, flow, zeros, d)
        return _project(gmamba_block(x, ScanParams(*p), kern, priors), w)

    return Problem(fn, [x, kern, d, flow] + _scan_params(rng, C, S))


def sample_refiner(rng):
    C, H, W = 3, 3, 4
    x = rng.standard_normal((C, H, W))
    mix_w = rng.uniform(-1.0, 1.0, size=(C, C))
    mix_b = rng.uniform(-0.5, 0.5, size=C)
    hidden = np.tensordot(mix_w, x, axes=(1, 0)) + mix_b[:, None, None]
    if np.abs(hidden).min() < MARGIN:
        return None
    out_w = rng.uniform(-0.5, 0.5, size=(1, C, 3, 3))
    out_b = rng.uniform(-0.5, 0.5, size=1)
    d = rng.uniform(0.0, 1.0, size=(H, W))
    w = _functional((H, W), rng)

    def fn(x, mix_w, mix_b, out_w, out_b, d):
        delta = RefinerHead(mix_w, mix_b, out_w, out_b)(x)
        return _project(refine_dmap(d, delta), w)

    return Problem(fn, [x, mix_w, mix_b, out_w, out_b, d])


# ---------------------------------------------------------------------------
# goad scope
# ---------------------------------------------------------------------------

def _interior_grid(rng, H, W, Hs, Ws):
    """Grid points whose pixel coordinates sit strictly between lattice lines."""
    def axis(n):
        cell = rng.integers(0, n - 1, size=(H, W))
        frac = rng.uniform(0.05, 0.95, size=(H, W))
        return -1.0 + 2.0 * (cell + frac) / (n - 1)
    return np.stack([axis(Hs), axis(Ws)])


def sample_grid_sample(rng):
    C, Hs, Ws, H, W = 2, 4, 5, 3, 3
    src = rng.standard_normal((C, Hs, Ws))
    grid = _interior_grid(rng, H, W, Hs, Ws)
    w = _functional((C, H, W), rng)
    return Problem(lambda src, grid: _project(grid_sample(src, grid), w), [src, grid])


def sample_alpha_offset(rng):
    H, W = 4, 4
    flow = rng.uniform(-1.0, 1.0, size=(2, H, W))
    d = rng.uniform(0.0, 1.0, size=(H, W))
    psi = PsiConv.init(rng)
    psi_w, psi_b = psi.weight, rng.uniform(-1.0, 1.0, size=1)
    w = _functional((2, H, W), rng)

    def fn(flow, d, psi_w, psi_b):
        alpha = compute_alpha(flow, PsiConv(psi_w, psi_b))
        return _project(offset_field(flow, d, alpha), w)

    return Problem(fn, [flow, d, psi_w, psi_b])


def _clip_safe(raw):
    """Every coordinate is either clearly inside [-1, 1] or clearly outside."""
    return np.all(np.abs(np.abs(raw) - 1.0) > MARGIN)


def _lattice_safe(coords, n):
    pos = (np.clip(coords, -1.0, 1.0) + 1.0) * 0.5 * (n - 1)
    inside = np.abs(coords) < 1.0
    dist = np.abs(pos - np.round(pos))
    return np.all(dist[inside] > MARGIN)


def sample_align_grid(rng):
    H, W = 3, 4
    base = base_grid(H, W)
    delta = rng.uniform(-0.3, 0.3, size=(2, H, W))
    if not _clip_safe(base + delta):
        return None
    w = _functional((2, H, W), rng)
    return Problem(lambda delta: _project(align_grid(base, delta), w), [delta])


def sample_goad(rng):
    C, H, W = 2, 5, 5
    f_low = rng.standard_normal((C, H, W))
    f_up = rng.standard_normal((C, H, W))
    flow = _prompt_flow(rng, (H, W))
    d = rng.uniform(0.3, 1.0, size=(H, W))
    psi = PsiConv.init(rng)
    psi_w, psi_b = psi.weight, rng.uniform(0.0, 1.0, size=1)
    alpha = ad.value(compute_alpha(flow, PsiConv(psi_w, psi_b)))
    raw = base_grid(H, W) + flow * (d * alpha)[None]
    if not _clip_safe(raw) or not (_lattice_safe(raw[0], H) and _lattice_safe(raw[1], W)):
        return None
    w = _functional((2 * C, H, W), rng)

    def fn(f_low, f_up, flow, d, psi_w, psi_b):
        return _project(goad_forward(f_low, f_up, flow, d, PsiConv(psi_w, psi_b)), w)

    return Problem(fn, [f_low, f_up, flow, d, psi_w, psi_b])


# ---------------------------------------------------------------------------
# losses scope
# ---------------------------------------------------------------------------

K, LH, LW = 3, 4, 4


def _labels(rng):
    lab = rng.integers(0, K, size=(LH, LW))
    lab.flat[:K] = rng.permutation(K)  # every class present
    return lab


def _probs(logits):
    return ad.softmax(logits, axis=0)


def _ohem_safe(logits, labels, min_kept=OHEM_MIN_KEPT):
    p = np.exp(logits - logits.max(axis=0))
    p /= p.sum(axis=0)
    pt = np.take_along_axis(p, labels[None], axis=0).ravel()
    if np.abs(pt - OHEM_THRESHOLD).min() < MARGIN:
        return False
    n_min = math.ceil(min_kept * pt.size)
    if np.count_nonzero(pt < OHEM_THRESHOLD) < n_min:
        s = np.sort(pt)
        if s[n_min] - s[n_min - 1] < MARGIN:
            return False
    return True


def _lovasz_safe(logits, labels):
    p = np.exp(logits - logits.max(axis=0))
    p /= p.sum(axis=0)
    for c in range(K):
        fg = (labels == c).ravel()
        err = np.where(fg, 1.0 - p[c].ravel(), p[c].ravel())
        if np.diff(np.sort(err)).min() < MARGIN:
            return False
    return True


def sample_ce_ohem(rng):
    logits = rng.normal(0.0, 1.5, size=(K, LH, LW))
    labels = _labels(rng)
    if not _ohem_safe(logits, labels):
        return None
    return Problem(lambda z: ce_ohem(_probs(z), labels), [logits])


def sample_ce_ohem_min_kept(rng):
    """Confident logits, so the minimum-kept rule picks the hardest pixels."""
    labels = _labels(rng)
    logits = rng.normal(0.0, 1.0, size=(K, LH, LW))
    logits += 4.0 * (np.arange(K)[:, None, None] == labels[None])
    frac = 0.25
    if not _ohem_safe(logits, labels, frac):
        return None
    return Problem(lambda z: ce_ohem(_probs(z), labels, min_kept_fraction=frac), [logits])


def sample_lovasz(rng):
    logits = rng.normal(0.0, 1.5, size=(K, LH, LW))
    labels = _labels(rng)
    if not _lovasz_safe(logits, labels):
        return None
    return Problem(lambda z: lovasz_softmax(_probs(z), labels), [logits])


def sample_boundary_ce(rng):
    logits = rng.normal(0.0, 1.5, size=(K, LH, LW))
    labels = _labels(rng)
    d_gt = rng.uniform(0.0, 1.0, size=(LH, LW))
    return Problem(lambda z: boundary_ce(_probs(z), labels, d_gt), [logits])


def sample_aux(rng):
    logits = rng.normal(0.0, 1.5, size=(K, LH, LW))
    labels = _labels(rng)
    return Problem(lambda z: aux_loss(_probs(z), labels), [logits])


def _tv_safe(flow, margin=MARGIN):
    return (np.abs(np.diff(flow, axis=1)).min() > margin
            and np.abs(np.diff(flow, axis=2)).min() > margin)


def sample_tv(rng):
    # tv is piecewise linear, so its gradient does not depend on amplitude;
    # a small amplitude keeps central-difference round-off (relative to |tv|)
    # far below the error floor at coordinates whose exact gradient is 0
    flow = 0.01 * rng.uniform(-1.0, 1.0, size=(2, LH, LW))
    if not _tv_safe(flow, margin=10 * STEP):
        return None
    return Problem(tv_loss, [flow])


def _target_priors(rng):
    return GeometricPriors(rng.uniform(0.0, 1.0, size=(LH, LW)),
                           rng.uniform(-1.0, 1.0, size=(2, LH, LW)),
                           rng.uniform(-1.0, 1.0, size=(LH, LW)),
                           rng.uniform(0.0, 1.0, size=(LH, LW)))


def sample_geometric_mse(rng):
    vmap = rng.uniform(0.0, 1.0, size=(LH, LW))
    flow = rng.uniform(-1.0, 1.0, size=(2, LH, LW))
    curv = rng.uniform(-1.0, 1.0, size=(LH, LW))
    if not _tv_safe(flow):
        return None
    target = _target_priors(rng)

    def fn(vmap, flow, curv):
        return geometric_mse(GeometricPriors(vmap, flow, curv, target.d_coarse), target)

    return Problem(fn, [vmap, flow, curv])


def sample_d_loss(rng):
    z = rng.normal(0.0, 2.0, size=(LH, LW))
    d_gt = (rng.uniform(size=(LH, LW)) < 0.3).astype(np.float64)
    return Problem(lambda z: d_loss(ad.sigmoid(z), d_gt), [z])


def sample_composite(rng):
    logits = rng.normal(0.0, 1.5, size=(K, LH, LW))
    aux_logits = rng.normal(0.0, 1.5, size=(K, LH, LW))
    labels = _labels(rng)
    vmap = rng.uniform(0.0, 1.0, size=(LH, LW))
    flow = rng.uniform(-1.0, 1.0, size=(2, LH, LW))
    curv = rng.uniform(-1.0, 1.0, size=(LH, LW))
    z = rng.normal(0.0, 2.0, size=(LH, LW))
    if not (_ohem_safe(logits, labels) and _lovasz_safe(logits, labels) and _tv_safe(flow)):
        return None
    target = _target_priors(rng)
    d_gt = target.d_coarse
    t = float(rng.uniform())

    def fn(logits, aux_logits, vmap, flow, curv, z):
        pred = GeometricPriors(vmap, flow, curv, d_gt)
        total, _ = composite_loss(_probs(logits), labels, _probs(aux_logits), pred, target,
                                  ad.sigmoid(z), d_gt, t)
        return total

    return Problem(fn, [logits, aux_logits, vmap, flow, curv, z])


CHECKS = {
    "scan": {
        "scan_lines": sample_scan,
        "modulation": sample_modulation,
        "gmamba_block": sample_gmamba_block,
        "refiner_dmap": sample_refiner,
    },
    "goad": {
        "grid_sample": sample_grid_sample,
        "alpha_offset": sample_alpha_offset,
        "align_grid": sample_align_grid,
        "goad_forward": sample_goad,
    },
    "losses": {
        "ce_ohem": sample_ce_ohem,
        "ce_ohem_min_kept": sample_ce_ohem_min_kept,
        "lovasz_softmax": sample_lovasz,
        "boundary_ce": sample_boundary_ce,
        "aux_loss": sample_aux,
        "tv_loss": sample_tv,
        "geometric_mse": sample_geometric_mse,
        "d_loss": sample_d_loss,
        "composite_total": sample_composite,
    },
}


def draw(sampler, rng):
    for _ in range(MAX_DRAWS):
        problem = sampler(rng)
        if problem is not None:
            return problem
    raise RuntimeError(f"{sampler.__name__}: no kink-free instance in {MAX_DRAWS} draws")


def run_gradcheck(scope="all", instances=INSTANCES, seed=0, h=STEP, corrupt=False):
    """One :class:`~dgmnet.autodiff.GradCheckReport` per operation in ``scope``.

    ``corrupt`` perturbs every tape gradient before comparison; it exists so
    the failure path can be exercised.
    """
    if scope == "all":
        scopes = SCOPES
    elif scope in SCOPES:
        scopes = (scope,)
    else:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES + ('all',)}")
    reports = []
    for sc in scopes:
        for k, (name, sampler) in enumerate(CHECKS[sc].items()):
            rng = np.random.default_rng([seed, SCOPES.index(sc), k])
            worst, worst_arg = 0.0, 0
            for _ in range(instances):
                err, arg = check_problem(draw(sampler, rng), h, corrupt)
                if err > worst:
                    worst, worst_arg = err, arg
            reports.append(ad.GradCheckReport(f"{sc}.{name}", worst, worst_arg, h))
    return reports
