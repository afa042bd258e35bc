"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorized
numpy version. The module-level names (``squared_edt``, ``scan_forward``, ...)
point at the numba versions unless ``DGM_DISABLE_NUMBA`` is set. Both
versions follow the same arithmetic order where practical; they agree to
rounding, not bitwise.

Scan layout: ``x`` is ``(lines, channels, length)``; each (line, channel)
pair is an independent lane. Lanes never share accumulators, so results do
not depend on the thread schedule.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit, prange

# squared-distance sentinel for "no background reachable"
EDT_INF = np.int64(1) << np.int64(60)

# |pixel coordinate - nearest integer| below this snaps onto the lattice, so a
# normalized base grid reproduces its source exactly
LATTICE_SNAP = 1e-9


# ---------------------------------------------------------------------------
# exact squared Euclidean distance transform (two separable passes)
# ---------------------------------------------------------------------------

@njit
def _envelope_1d(f, out, v, z):
    # lower envelope of parabolas (q - v)^2 + f[v] over finite sites
    n = f.shape[0]
    k = -1
    for q in range(n):
        fq = f[q]
        if fq >= EDT_INF:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        s = ((fq + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((fq + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = EDT_INF
        return
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@njit(parallel=True)
def _squared_edt_numba(foreground):
    H, W = foreground.shape
    cols = np.empty((H, W), dtype=np.int64)
    for j in prange(W):
        f = np.empty(H, dtype=np.int64)
        for i in range(H):
            f[i] = EDT_INF if foreground[i, j] else 0
        col = np.empty(H, dtype=np.int64)
        _envelope_1d(f, col, np.empty(H, dtype=np.int64), np.empty(H + 1))
        for i in range(H):
            cols[i, j] = col[i]
    out = np.empty((H, W), dtype=np.int64)
    for i in prange(H):
        row = np.empty(W, dtype=np.int64)
        _envelope_1d(cols[i].copy(), row, np.empty(W, dtype=np.int64), np.empty(W + 1))
        for j in range(W):
            out[i, j] = row[j]
    return out


def _squared_edt_numpy(foreground):
    fg = np.asarray(foreground, dtype=bool)
    H, W = fg.shape
    big = np.int64(1) << np.int64(30)
    idx = np.arange(H, dtype=np.int64)[:, None]
    last = np.maximum.accumulate(np.where(~fg, idx, -big), axis=0)
    nxt = np.minimum.accumulate(np.where(~fg, idx, 2 * big)[::-1], axis=0)[::-1]
    d = np.minimum(idx - last, nxt - idx)
    g = np.where(d >= big, EDT_INF, d * d)

    out = np.empty((H, W), dtype=np.int64)
    k = np.arange(W, dtype=np.int64)
    sq = (k[:, None] - k[None, :]) ** 2  # (j, k)
    chunk = max(1, (1 << 22) // max(1, W * W))
    for r0 in range(0, H, chunk):
        gr = g[r0:r0 + chunk]  # (rows, k)
        cand = gr[:, None, :] + sq[None, :, :]
        out[r0:r0 + chunk] = cand.min(axis=2)
    out[out >= EDT_INF] = EDT_INF
    return out


# ---------------------------------------------------------------------------
# diagonal selective scan
# ---------------------------------------------------------------------------

@njit
def _softplus(z):
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


@njit
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(parallel=True)
def _scan_forward_numba(x, a_log, w_delta, b_delta, w_b, w_c, d_skip, states):
    L, C, N = x.shape
    S = a_log.shape[1]
    keep = states.shape[0] > 0
    y = np.empty((L, C, N))
    for lane in prange(L * C):
        l = lane // C
        c = lane % C
        h = np.zeros(S)
        A = np.empty(S)
        for n in range(S):
            A[n] = -math.exp(a_log[c, n])
        for t in range(N):
            xt = x[l, c, t]
            dt = _softplus(w_delta[c] * xt + b_delta[c])
            acc = 0.0
            for n in range(S):
                abar = math.exp(dt * A[n])
                h[n] = abar * h[n] + dt * w_b[c, n] * xt * xt
                acc += (w_c[c, n] * xt) * h[n]
                if keep:
                    states[l, c, t, n] = h[n]
            y[l, c, t] = acc + d_skip[c] * xt
    return y


@njit(parallel=True)
def _scan_backward_lanes(gy, x, states, a_log, w_delta, b_delta, w_b, w_c, d_skip):
    L, C, N = x.shape
    S = a_log.shape[1]
    gx = np.empty((L, C, N))
    gA = np.zeros((L, C, S))
    gwb = np.zeros((L, C, S))
    gwc = np.zeros((L, C, S))
    gwd = np.zeros((L, C))
    gbd = np.zeros((L, C))
    gd = np.zeros((L, C))
    for lane in prange(L * C):
        l = lane // C
        c = lane % C
        A = np.empty(S)
        for n in range(S):
            A[n] = -math.exp(a_log[c, n])
        gh = np.zeros(S)
        for t in range(N - 1, -1, -1):
            xt = x[l, c, t]
            z = w_delta[c] * xt + b_delta[c]
            dt = _softplus(z)
            g = gy[l, c, t]
            gxt = g * d_skip[c]
            gd[l, c] += g * xt
            for n in range(S):
                ht = states[l, c, t, n]
                gwc[l, c, n] += g * ht * xt
                gxt += g * w_c[c, n] * ht
                gh[n] += g * w_c[c, n] * xt
            gdt = 0.0
            for n in range(S):
                abar = math.exp(dt * A[n])
                hprev = states[l, c, t - 1, n] if t > 0 else 0.0
                gabar = gh[n] * hprev * abar
                gdt += gabar * A[n] + gh[n] * w_b[c, n] * xt * xt
                gA[l, c, n] += gabar * dt
                gwb[l, c, n] += gh[n] * dt * xt * xt
                gxt += gh[n] * dt * w_b[c, n] * 2.0 * xt
                gh[n] = gh[n] * abar
            gz = gdt * _sigmoid(z)
            gwd[l, c] += gz * xt
            gbd[l, c] += gz
            gxt += gz * w_delta[c]
            gx[l, c, t] = gxt
    return gx, gA, gwb, gwc, gwd, gbd, gd


def _np_softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _np_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _scan_forward_numpy(x, a_log, w_delta, b_delta, w_b, w_c, d_skip, states):
    L, C, N = x.shape
    S = a_log.shape[1]
    keep = states.shape[0] > 0
    A = -np.exp(a_log)  # (C, S)
    delta = _np_softplus(w_delta[None, :, None] * x + b_delta[None, :, None])
    y = np.empty((L, C, N))
    h = np.zeros((L, C, S))
    for t in range(N):
        xt = x[:, :, t, None]
        dt = delta[:, :, t, None]
        h = np.exp(dt * A) * h + dt * w_b * xt * xt
        if keep:
            states[:, :, t] = h
        y[:, :, t] = ((w_c * xt) * h).sum(axis=-1) + d_skip * x[:, :, t]
    return y


def _scan_backward_lanes_numpy(gy, x, states, a_log, w_delta, b_delta, w_b, w_c, d_skip):
    L, C, N = x.shape
    S = a_log.shape[1]
    A = -np.exp(a_log)
    z = w_delta[None, :, None] * x + b_delta[None, :, None]
    delta = _np_softplus(z)
    sig = _np_sigmoid(z)
    gx = np.empty((L, C, N))
    gA = np.zeros((L, C, S))
    gwb = np.zeros((L, C, S))
    gwc = np.zeros((L, C, S))
    gwd = np.zeros((L, C))
    gbd = np.zeros((L, C))
    gd = np.zeros((L, C))
    gh = np.zeros((L, C, S))
    zero = np.zeros((L, C, S))
    for t in range(N - 1, -1, -1):
        xt = x[:, :, t]
        xs = xt[..., None]
        dt = delta[:, :, t, None]
        g = gy[:, :, t]
        gs = g[..., None]
        ht = states[:, :, t]
        gxt = g * d_skip
        gd += g * xt
        gwc += gs * ht * xs
        gxt = gxt + (gs * w_c * ht).sum(axis=-1)
        gh = gh + gs * w_c * xs
        abar = np.exp(dt * A)
        hprev = states[:, :, t - 1] if t > 0 else zero
        gabar = gh * hprev * abar
        gdt = (gabar * A + gh * w_b * xs * xs).sum(axis=-1)
        gA += gabar * dt
        gwb += gh * dt * xs * xs
        gxt = gxt + (gh * dt * w_b * 2.0 * xs).sum(axis=-1)
        gh = gh * abar
        gz = gdt * sig[:, :, t]
        gwd += gz * xt
        gbd += gz
        gx[:, :, t] = gxt + gz * w_delta
    return gx, gA, gwb, gwc, gwd, gbd, gd


def _as_scan_args(x, a_log, w_delta, b_delta, w_b, w_c, d_skip):
    f = np.ascontiguousarray
    return (f(x, dtype=np.float64), f(a_log, dtype=np.float64), f(w_delta, dtype=np.float64),
            f(b_delta, dtype=np.float64), f(w_b, dtype=np.float64), f(w_c, dtype=np.float64),
            f(d_skip, dtype=np.float64))


def _make_scan(fwd, bwd_lanes):
    def forward(x, a_log, w_delta, b_delta, w_b, w_c, d_skip, keep_states=False):
        """Run every lane; returns ``(y, states)`` (``states`` is None unless kept)."""
        args = _as_scan_args(x, a_log, w_delta, b_delta, w_b, w_c, d_skip)
        L, C, N = args[0].shape
        S = args[1].shape[1]
        states = np.zeros((L, C, N, S) if keep_states else (0, 0, 0, 0))
        y = fwd(*args, states)
        return y, (states if keep_states else None)

    def backward(gy, x, states, a_log, w_delta, b_delta, w_b, w_c, d_skip):
        """Vector-Jacobian product; returns grads for (x, a_log, w_delta, b_delta, w_b, w_c, d_skip)."""
        args = _as_scan_args(x, a_log, w_delta, b_delta, w_b, w_c, d_skip)
        gx, gA, gwb, gwc, gwd, gbd, gd = bwd_lanes(
            np.ascontiguousarray(gy, dtype=np.float64), args[0], states, *args[1:])
        A = -np.exp(args[1])
        # per-lane partials reduced in fixed lane order
        ga_log = gA.sum(axis=0) * A
        return (gx, ga_log, gwd.sum(axis=0), gbd.sum(axis=0), gwb.sum(axis=0),
                gwc.sum(axis=0), gd.sum(axis=0))

    return forward, backward


# ---------------------------------------------------------------------------
# bilinear sampling on a corner-aligned normalized grid
# ---------------------------------------------------------------------------

@njit
def _cell(coord, size):
    # normalized [-1, 1] -> pixel cell index and fractional weight
    p = (coord + 1.0) * 0.5 * (size - 1)
    if p < 0.0:
        p = 0.0
    elif p > size - 1:
        p = float(size - 1)
    r = float(math.floor(p + 0.5))
    if abs(p - r) <= LATTICE_SNAP:
        p = r
    i0 = int(math.floor(p))
    if i0 > size - 2:
        i0 = size - 2
    return i0, p - i0


@njit
def _grid_sample_forward_numba(src, grid):
    C, Hs, Ws = src.shape
    H, W = grid.shape[1], grid.shape[2]
    out = np.empty((C, H, W))
    for i in range(H):
        for j in range(W):
            y0, wy = _cell(grid[0, i, j], Hs)
            x0, wx = _cell(grid[1, i, j], Ws)
            for c in range(C):
                top = (1.0 - wx) * src[c, y0, x0] + wx * src[c, y0, x0 + 1]
                bot = (1.0 - wx) * src[c, y0 + 1, x0] + wx * src[c, y0 + 1, x0 + 1]
                out[c, i, j] = (1.0 - wy) * top + wy * bot
    return out


@njit
def _grid_sample_backward_numba(g, src, grid):
    C, Hs, Ws = src.shape
    H, W = grid.shape[1], grid.shape[2]
    gsrc = np.zeros((C, Hs, Ws))
    ggrid = np.zeros((2, H, W))
    sy = 0.5 * (Hs - 1)
    sx = 0.5 * (Ws - 1)
    for i in range(H):
        for j in range(W):
            y0, wy = _cell(grid[0, i, j], Hs)
            x0, wx = _cell(grid[1, i, j], Ws)
            dy = 0.0
            dx = 0.0
            for c in range(C):
                gc = g[c, i, j]
                s00 = src[c, y0, x0]
                s01 = src[c, y0, x0 + 1]
                s10 = src[c, y0 + 1, x0]
                s11 = src[c, y0 + 1, x0 + 1]
                gsrc[c, y0, x0] += gc * (1.0 - wy) * (1.0 - wx)
                gsrc[c, y0, x0 + 1] += gc * (1.0 - wy) * wx
                gsrc[c, y0 + 1, x0] += gc * wy * (1.0 - wx)
                gsrc[c, y0 + 1, x0 + 1] += gc * wy * wx
                dy += gc * ((1.0 - wx) * (s10 - s00) + wx * (s11 - s01))
                dx += gc * ((1.0 - wy) * (s01 - s00) + wy * (s11 - s10))
            ggrid[0, i, j] = dy * sy
            ggrid[1, i, j] = dx * sx
    return gsrc, ggrid


def _np_cell(coord, size):
    p = np.clip((coord + 1.0) * 0.5 * (size - 1), 0.0, size - 1)
    r = np.floor(p + 0.5)
    p = np.where(np.abs(p - r) <= LATTICE_SNAP, r, p)
    i0 = np.minimum(np.floor(p).astype(np.int64), size - 2)
    return i0, p - i0


def _grid_sample_forward_numpy(src, grid):
    C, Hs, Ws = src.shape
    y0, wy = _np_cell(grid[0], Hs)
    x0, wx = _np_cell(grid[1], Ws)
    top = (1.0 - wx) * src[:, y0, x0] + wx * src[:, y0, x0 + 1]
    bot = (1.0 - wx) * src[:, y0 + 1, x0] + wx * src[:, y0 + 1, x0 + 1]
    return (1.0 - wy) * top + wy * bot


def _grid_sample_backward_numpy(g, src, grid):
    C, Hs, Ws = src.shape
    y0, wy = _np_cell(grid[0], Hs)
    x0, wx = _np_cell(grid[1], Ws)
    s00 = src[:, y0, x0]
    s01 = src[:, y0, x0 + 1]
    s10 = src[:, y0 + 1, x0]
    s11 = src[:, y0 + 1, x0 + 1]
    gsrc = np.zeros((C, Hs, Ws))
    cidx = np.arange(C)[:, None, None]
    for yy, xx, w in ((y0, x0, (1.0 - wy) * (1.0 - wx)), (y0, x0 + 1, (1.0 - wy) * wx),
                      (y0 + 1, x0, wy * (1.0 - wx)), (y0 + 1, x0 + 1, wy * wx)):
        np.add.at(gsrc, (cidx, yy[None], xx[None]), g * w)
    dy = (g * ((1.0 - wx) * (s10 - s00) + wx * (s11 - s01))).sum(axis=0)
    dx = (g * ((1.0 - wy) * (s01 - s00) + wy * (s11 - s10))).sum(axis=0)
    ggrid = np.stack([dy * (0.5 * (Hs - 1)), dx * (0.5 * (Ws - 1))])
    return gsrc, ggrid


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _make_sampler(fwd, bwd):
    def forward(src, grid):
        return fwd(_f64(src), _f64(grid))

    def backward(g, src, grid):
        return bwd(_f64(g), _f64(src), _f64(grid))

    return forward, backward


def _make_edt(fn):
    def squared(foreground):
        return fn(np.ascontiguousarray(foreground, dtype=np.bool_))

    return squared


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _implementation(numba_side):
    if numba_side:
        scan_f, scan_b = _make_scan(_scan_forward_numba, _scan_backward_lanes)
        gs_f, gs_b = _make_sampler(_grid_sample_forward_numba, _grid_sample_backward_numba)
        edt = _make_edt(_squared_edt_numba)
    else:
        scan_f, scan_b = _make_scan(_scan_forward_numpy, _scan_backward_lanes_numpy)
        gs_f, gs_b = _make_sampler(_grid_sample_forward_numpy, _grid_sample_backward_numpy)
        edt = _make_edt(_squared_edt_numpy)
    return {
        "squared_edt": edt,
        "scan_forward": scan_f,
        "scan_backward": scan_b,
        "grid_sample_forward": gs_f,
        "grid_sample_backward": gs_b,
    }


NUMBA_IMPL = _implementation(True)
NUMPY_IMPL = _implementation(False)
ACTIVE = NUMBA_IMPL if USE_NUMBA else NUMPY_IMPL

squared_edt = ACTIVE["squared_edt"]
scan_forward = ACTIVE["scan_forward"]
scan_backward = ACTIVE["scan_backward"]
grid_sample_forward = ACTIVE["grid_sample_forward"]
grid_sample_backward = ACTIVE["grid_sample_backward"]
