"""Multiply-add accounting.

Kernels call :func:`charge` with the number of fused multiply-accumulates
they perform; the count is a closed-form function of the shapes involved,
so it is exact and deterministic. Counting is active only inside
:func:`count_madds`.

Count model (per pixel, per channel unless stated):

* depthwise 3x3 conv: 9
* selective scan step: 2 + 7 * state_size
  (timescale affine 1, skip 1; per state: exp argument 1, input
  projection 2, state update 2, readout projection 1, readout accumulate 1)
* geometric prompt: 3 per pixel per direction (projection 2, scale 1)
* modulation: 1 per direction
* 4-way merge plus residual: 4
* 1x1 channel mixing: in_channels * out_channels per pixel
* dense 3x3 conv: 9 * in_channels * out_channels per pixel
* bilinear sample: 8 per output value
"""

import contextlib
import contextvars

_counter = contextvars.ContextVar("dgm_madd_counter", default=None)


class MaddCounter:
    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


def charge(n):
    c = _counter.get()
    if c is not None:
        c.add(n)


@contextlib.contextmanager
def count_madds():
    counter = MaddCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)
