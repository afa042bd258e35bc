"""Selective scanning over images, with optional geometric guidance.

A diagonal selective SSM is run along image rows and columns in four
directions. Per channel ``c`` and step ``t``::

    delta_t = softplus(w_delta[c] * x_t + b_delta[c])
    h_t     = exp(delta_t * A[c]) * h_{t-1} + delta_t * (w_b[c] * x_t) * x_t
    y_t     = <w_c[c] * x_t, h_t> + d_skip[c] * x_t

with ``A = -exp(a_log)`` (strictly negative, so the recurrence contracts).
Guided blocks reweight the scan input by a per-direction prompt
``T = 1 + d_coarse * relu(<flow, u_dir>)`` before scanning.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ConfigError, NumericError, ShapeMismatchError
from .fields import depthwise_conv3x3
from .layers import conv1x1, conv3x3
from .opcount import charge
from .priors import GeometricPriors


def scan_step_madds(state_size):
    return 2 + 7 * state_size


@dataclass
class ScanParams:
    """Per-channel selective-scan parameters. Fields may be autodiff Vars."""

    a_log: object    # (C, S)
    w_delta: object  # (C,)
    b_delta: object  # (C,)
    w_b: object      # (C, S)
    w_c: object      # (C, S)
    d_skip: object   # (C,)

    @property
    def channels(self):
        return np.shape(ad.value(self.a_log))[0]

    @property
    def state_size(self):
        return np.shape(ad.value(self.a_log))[1]

    def arrays(self):
        return (self.a_log, self.w_delta, self.b_delta, self.w_b, self.w_c, self.d_skip)

    def values(self):
        return tuple(np.asarray(ad.value(a), dtype=np.float64) for a in self.arrays())

    def validate(self):
        C, S = self.channels, self.state_size
        if S < 1:
            raise ConfigError("state_size must be >= 1")
        want = {"a_log": (C, S), "w_delta": (C,), "b_delta": (C,), "w_b": (C, S),
                "w_c": (C, S), "d_skip": (C,)}
        for name, shape in want.items():
            got = np.shape(ad.value(getattr(self, name)))
            if got != shape:
                raise ConfigError(f"{name} has shape {got}, expected {shape}")
        for name, v in zip(want, self.values()):
            if not np.all(np.isfinite(v)):
                raise ConfigError(f"{name} has non-finite entries")
        return self

    @classmethod
    def init(cls, channels, state_size, rng):
        """a_log ~ log U[0.5, 1.5], projections ~ U[-1, 1] (fan-in 1), delta bias at 0.5."""
        C, S = channels, state_size
        return cls(
            a_log=np.log(rng.uniform(0.5, 1.5, size=(C, S))),
            w_delta=rng.uniform(-1.0, 1.0, size=C),
            b_delta=np.full(C, math.log(math.expm1(0.5))),
            w_b=rng.uniform(-1.0, 1.0, size=(C, S)),
            w_c=rng.uniform(-1.0, 1.0, size=(C, S)),
            d_skip=np.ones(C),
        )

    def on_tape(self, tape):
        return ScanParams(*(tape.var(v) for v in self.values()))


class ScanDirection(enum.Enum):
    LEFT_RIGHT = (0, 1)
    RIGHT_LEFT = (0, -1)
    TOP_BOTTOM = (1, 0)
    BOTTOM_TOP = (-1, 0)

    @property
    def unit_vector(self):
        return self.value


# merge order is fixed so the 4-way mean is reproducible
DIRECTIONS = (ScanDirection.LEFT_RIGHT, ScanDirection.RIGHT_LEFT,
              ScanDirection.TOP_BOTTOM, ScanDirection.BOTTOM_TOP)


# ---------------------------------------------------------------------------
# scanning
# ---------------------------------------------------------------------------

def scan_lines(x, params):
    """Scan ``x`` of shape (lines, channels, length) lane by lane."""
    xv = np.asarray(ad.value(x), dtype=np.float64)
    pv = params.values()
    if not np.all(np.isfinite(xv)):
        raise NumericError("non-finite scan input")
    L, C, N = xv.shape
    if C != pv[0].shape[0]:
        raise ShapeMismatchError(f"{C} input channels but params for {pv[0].shape[0]}")
    record = ad.is_var(x) or any(ad.is_var(a) for a in params.arrays())
    y, states = kernels.scan_forward(xv, *pv, keep_states=record)
    charge(L * C * N * scan_step_madds(pv[0].shape[1]))
    if not record:
        return y

    def vjp(g):
        return kernels.scan_backward(g, xv, states, *pv)

    return ad.lift(y, (x,) + params.arrays(), vjp)


def selective_scan_1d(x, params, channel):
    """Scan one sequence with the parameters of ``channel``."""
    xv = ad.value(x)
    if np.ndim(xv) != 1:
        raise ShapeMismatchError("selective_scan_1d takes a 1-D sequence")
    sub = ScanParams(*(a[channel:channel + 1] for a in params.arrays()))
    y = scan_lines(ad.reshape(x, (1, 1, -1)), sub)
    return ad.reshape(y, (-1,))


def directional_scan(features, params, direction):
    """Serialize rows or columns in scan order, scan, and write back in place."""
    if direction in (ScanDirection.LEFT_RIGHT, ScanDirection.RIGHT_LEFT):
        lines = ad.transpose(features, (1, 0, 2))  # (H, C, W)
        back = (1, 0, 2)
    else:
        lines = ad.transpose(features, (2, 0, 1))  # (W, C, H)
        back = (1, 2, 0)
    reverse = direction in (ScanDirection.RIGHT_LEFT, ScanDirection.BOTTOM_TOP)
    if reverse:
        lines = ad.flip(lines, 2)
    out = scan_lines(lines, params)
    if reverse:
        out = ad.flip(out, 2)
    return ad.transpose(out, back)


# ---------------------------------------------------------------------------
# geometric guidance
# ---------------------------------------------------------------------------

def geometric_prompt(d_coarse, flow, direction):
    """T = 1 + d_coarse * relu(flow projected on the scan direction)."""
    d_shape = np.shape(ad.value(d_coarse))
    f_shape = np.shape(ad.value(flow))
    if f_shape != (2,) + d_shape:
        raise ShapeMismatchError(f"flow {f_shape} does not match d_coarse {d_shape}")
    uy, ux = direction.unit_vector
    phi_dir = ad.add(ad.mul(ad.getitem(flow, 0), float(uy)), ad.mul(ad.getitem(flow, 1), float(ux)))
    charge(3 * d_shape[0] * d_shape[1])
    return ad.add(1.0, ad.mul(d_coarse, ad.relu(phi_dir)))


def modulate(features, prompt):
    fs = np.shape(ad.value(features))
    ps = np.shape(ad.value(prompt))
    if len(fs) != 3 or fs[1:] != ps:
        raise ShapeMismatchError(f"prompt {ps} does not match features {fs}")
    charge(fs[0] * fs[1] * fs[2])
    return ad.mul(features, ad.reshape(prompt, (1,) + ps))


def gmamba_block(features, params, kernels_, priors=None):
    """Depthwise conv, four directional scans (prompted when priors are given),
    mean merge, residual add."""
    fv = ad.value(features)
    if not np.all(np.isfinite(fv)):
        raise NumericError("non-finite block input")
    C, H, W = np.shape(fv)
    x = depthwise_conv3x3(features, kernels_)
    outs = []
    for direction in DIRECTIONS:
        xin = x
        if priors is not None:
            xin = modulate(x, geometric_prompt(priors.d_coarse, priors.flow, direction))
        outs.append(directional_scan(xin, params, direction))
    merged = ad.mul(ad.add(ad.add(ad.add(outs[0], outs[1]), outs[2]), outs[3]), 0.25)
    charge(4 * C * H * W)
    return ad.add(features, merged)


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------

ISOTROPIC = "isotropic"
GUIDED = "guided"


@dataclass
class LayerSpec:
    kind: str
    params: ScanParams
    kernels: object  # (C, 3, 3)


@dataclass
class RefinerHead:
    """1x1 mixing -> relu -> 3x3 conv to one channel (linear output)."""

    mix_w: object  # (C, C)
    mix_b: object  # (C,)
    out_w: object  # (1, C, 3, 3)
    out_b: object  # (1,)

    def arrays(self):
        return (self.mix_w, self.mix_b, self.out_w, self.out_b)

    def __call__(self, x):
        hidden = ad.relu(conv1x1(x, self.mix_w, self.mix_b))
        return ad.getitem(conv3x3(hidden, self.out_w, self.out_b), 0)


@dataclass
class CascadeConfig:
    layers: list
    refiner: RefinerHead
    meta: dict = field(default_factory=dict)

    @property
    def channels(self):
        return self.layers[0].params.channels

    @property
    def state_size(self):
        return self.layers[0].params.state_size

    def validate(self):
        kinds = [layer.kind for layer in self.layers]
        if kinds != [ISOTROPIC, ISOTROPIC, GUIDED]:
            raise ConfigError(f"cascade must be [isotropic, isotropic, guided], got {kinds}")
        C = self.channels
        for layer in self.layers:
            layer.params.validate()
            if layer.params.channels != C:
                raise ConfigError("all layers must share the channel count")
            if np.shape(ad.value(layer.kernels)) != (C, 3, 3):
                raise ConfigError(f"layer kernels must be ({C}, 3, 3)")
        want = [(C, C), (C,), (1, C, 3, 3), (1,)]
        for arr, shape in zip(self.refiner.arrays(), want):
            if np.shape(ad.value(arr)) != shape:
                raise ConfigError(f"refiner weight shape {np.shape(ad.value(arr))}, expected {shape}")
        return self

    @classmethod
    def init(cls, channels=8, state_size=4, seed=0):
        rng = np.random.default_rng(seed)
        C = channels
        layers = []
        for kind in (ISOTROPIC, ISOTROPIC, GUIDED):
            params = ScanParams.init(C, state_size, rng)
            kern = rng.uniform(-1.0 / 3.0, 1.0 / 3.0, size=(C, 3, 3))
            layers.append(LayerSpec(kind, params, kern))
        refiner = RefinerHead(
            mix_w=rng.uniform(-1.0, 1.0, size=(C, C)) / math.sqrt(C),
            mix_b=np.zeros(C),
            out_w=rng.uniform(-1.0, 1.0, size=(1, C, 3, 3)) / math.sqrt(9 * C),
            out_b=np.zeros(1),
        )
        return cls(layers, refiner, {"seed": seed}).validate()

    def trainable(self):
        """Flat list of every parameter array, in a fixed order."""
        out = []
        for layer in self.layers:
            out.extend(layer.params.arrays())
            out.append(layer.kernels)
        out.extend(self.refiner.arrays())
        return out

    def with_arrays(self, arrays):
        """Rebuild with replacement arrays (same order as :meth:`trainable`)."""
        it = iter(arrays)
        layers = []
        for layer in self.layers:
            params = ScanParams(*(next(it) for _ in range(6)))
            layers.append(LayerSpec(layer.kind, params, next(it)))
        refiner = RefinerHead(*(next(it) for _ in range(4)))
        return CascadeConfig(layers, refiner, dict(self.meta))


def cascade_forward(features, config, priors=None):
    """Two isotropic blocks then one guided block; returns (context, delta_d).

    Without priors the guided layer scans isotropically too.
    """
    x = features
    for layer in config.layers:
        guide = priors if (layer.kind == GUIDED and priors is not None) else None
        if guide is not None and np.shape(ad.value(guide.d_coarse)) != np.shape(ad.value(x))[1:]:
            raise ShapeMismatchError("priors do not match the feature map")
        x = gmamba_block(x, layer.params, layer.kernels, guide)
    return x, config.refiner(x)


# ---------------------------------------------------------------------------
# semantic leakage
# ---------------------------------------------------------------------------

@dataclass
class LeakageScene:
    features: np.ndarray   # (C, H, W)
    priors: GeometricPriors
    region_a: np.ndarray   # (H, W) bool, the source of leakage
    region_b: np.ndarray   # (H, W) bool, where leakage is measured


def two_region_scene(channels=8, size=32, seed=0, scale=1.0):
    """Left half region A, right half region B, distinct constant features each."""
    from .priors import make_priors

    rng = np.random.default_rng([seed, 1])
    labels = np.ones((size, size), dtype=np.int64)
    labels[:, size // 2:] = 2
    fa = rng.uniform(-1.0, 1.0, size=channels)
    fb = rng.uniform(-1.0, 1.0, size=channels)
    feats = np.where(labels[None] == 1, fa[:, None, None], fb[:, None, None]) * scale
    return LeakageScene(feats, make_priors(labels), labels == 1, labels == 2)


def leakage_ratio(config, scene):
    """Mean |y - y0| over region B, where y0 zeroes region A's input.

    Returns (guided, isotropic) leakage under the same parameters.
    """
    if not scene.region_a.any() or not scene.region_b.any():
        raise ValueError("leakage scene needs non-empty regions A and B")
    if scene.features.shape[1:] != scene.region_a.shape:
        raise ShapeMismatchError("scene regions do not match the features")
    muted = np.where(scene.region_a[None], 0.0, scene.features)

    def leak(priors):
        y, _ = cascade_forward(scene.features, config, priors)
        y0, _ = cascade_forward(muted, config, priors)
        return float(np.abs(y - y0)[:, scene.region_b].mean())

    return leak(scene.priors), leak(None)
