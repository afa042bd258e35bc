import math

import numpy as np
import pytest

import oracles
from dgmnet import gmamba as gm
from dgmnet.errors import ConfigError, NumericError, ShapeMismatchError
from dgmnet.opcount import count_madds
from dgmnet.priors import GeometricPriors, make_priors, zero_priors

LR, RL, TB, BT = gm.DIRECTIONS


def params(C=1, S=1, seed=0, **overrides):
    p = gm.ScanParams.init(C, S, np.random.default_rng(seed))
    for k, v in overrides.items():
        setattr(p, k, np.broadcast_to(np.asarray(v, dtype=float), np.shape(getattr(p, k))).copy())
    return p


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("S", [1, 2, 3])
def test_scan_matches_hand_unrolled(n, S):
    rng = np.random.default_rng(100 * n + S)
    p = params(C=2, S=S, seed=n + 10 * S)
    p.d_skip = rng.uniform(-1, 1, size=2)
    for c in range(2):
        x = rng.uniform(-2, 2, size=n)
        got = gm.selective_scan_1d(x, p, c)
        want = oracles.scan_unrolled(x, p.a_log[c], p.w_delta[c], p.b_delta[c], p.w_b[c],
                                     p.w_c[c], p.d_skip[c])
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def ln2_params():
    return params(a_log=0.0, w_delta=0.0, b_delta=0.0, w_b=1.0, w_c=1.0, d_skip=0.0)


def test_scan_single_step_example():
    y = gm.selective_scan_1d(np.array([1.0]), ln2_params(), 0)
    assert y[0] == pytest.approx(math.log(2), abs=1e-15)


def test_scan_state_persists_but_readout_gated():
    y = gm.selective_scan_1d(np.array([1.0, 0.0]), ln2_params(), 0)
    assert y[1] == 0.0
    # the state itself is carried: feed a probe in the third step
    y3 = gm.selective_scan_1d(np.array([1.0, 0.0, 1.0]), ln2_params(), 0)
    fresh = gm.selective_scan_1d(np.array([1.0]), ln2_params(), 0)
    assert y3[2] > fresh[0]


def test_scan_zero_input():
    assert np.all(gm.selective_scan_1d(np.zeros(7), params(S=3), 0) == 0.0)


def test_scan_rejects_non_finite():
    with pytest.raises(NumericError):
        gm.selective_scan_1d(np.array([0.0, np.nan]), params(), 0)


def test_scan_long_sequence_stays_bounded():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=10 ** 6)
    y = gm.selective_scan_1d(x, params(S=4, seed=3), 0)
    assert np.all(np.isfinite(y))
    assert np.abs(y).max() < 1e3


def test_directional_scan_row_identity(rng):
    x = rng.standard_normal((1, 1, 9))
    p = params(S=2)
    np.testing.assert_array_equal(gm.directional_scan(x, p, LR)[0, 0],
                                  gm.selective_scan_1d(x[0, 0], p, 0))


@pytest.mark.parametrize("forward, backward, axis", [(LR, RL, 2), (TB, BT, 1)])
def test_direction_mirror_symmetry(rng, forward, backward, axis):
    x = rng.standard_normal((3, 5, 6))
    p = params(C=3, S=2)
    a = gm.directional_scan(np.flip(x, axis), p, forward)
    b = np.flip(gm.directional_scan(x, p, backward), axis)
    assert a.tobytes() == np.ascontiguousarray(b).tobytes()


def test_directional_zero_features():
    for d in gm.DIRECTIONS:
        assert np.all(gm.directional_scan(np.zeros((2, 3, 4)), params(C=2), d) == 0.0)


def test_unit_vectors():
    assert [d.unit_vector for d in gm.DIRECTIONS] == [(0, 1), (0, -1), (1, 0), (-1, 0)]


@pytest.mark.parametrize("d, phi, expected", [(0.5, 0.8, 1.4), (0.7, -0.3, 1.0), (0.0, 0.9, 1.0),
                                              (1.0, 1.0, 2.0)])
def test_geometric_prompt_examples(d, phi, expected):
    flow = np.zeros((2, 2, 2))
    flow[1] = phi  # x component, so the left-to-right projection is phi
    T = gm.geometric_prompt(np.full((2, 2), d), flow, LR)
    np.testing.assert_allclose(T, expected, rtol=1e-15)


def test_geometric_prompt_projects_on_direction():
    flow = np.stack([np.full((2, 2), 0.4), np.full((2, 2), -0.6)])
    d = np.ones((2, 2))
    assert gm.geometric_prompt(d, flow, RL)[0, 0] == pytest.approx(1.6)
    assert gm.geometric_prompt(d, flow, TB)[0, 0] == pytest.approx(1.4)
    assert gm.geometric_prompt(d, flow, BT)[0, 0] == 1.0
    with pytest.raises(ShapeMismatchError):
        gm.geometric_prompt(np.ones((2, 3)), flow, LR)


def test_modulate_examples(rng):
    x = rng.standard_normal((2, 3, 3))
    assert gm.modulate(x, np.ones((3, 3))).tobytes() == x.tobytes()
    assert np.all(gm.modulate(np.full((1, 2, 2), 0.5), np.full((2, 2), 2.0)) == 1.0)
    with pytest.raises(ShapeMismatchError):
        gm.modulate(x, np.ones((3, 4)))


def test_block_guided_with_zero_dcoarse_is_isotropic(rng):
    x = rng.standard_normal((3, 6, 7))
    p = params(C=3, S=2)
    kern = rng.uniform(-0.3, 0.3, size=(3, 3, 3))
    pri = zero_priors((6, 7))
    pri.flow = rng.uniform(-1, 1, size=(2, 6, 7))
    a = gm.gmamba_block(x, p, kern, None)
    b = gm.gmamba_block(x, p, kern, pri)
    assert a.tobytes() == b.tobytes()


def test_block_zero_input():
    out = gm.gmamba_block(np.zeros((2, 4, 4)), params(C=2), np.zeros((2, 3, 3)))
    assert np.all(out == 0.0)


def reachable(boosted):
    """Pixels downstream, in any scan's order, of a pixel where that scan's prompt > 1."""
    H, W = boosted[LR].shape
    out = np.zeros((H, W), dtype=bool)
    for i, j in zip(*np.nonzero(boosted[LR])):
        out[i, j:] = True
    for i, j in zip(*np.nonzero(boosted[RL])):
        out[i, :j + 1] = True
    for i, j in zip(*np.nonzero(boosted[TB])):
        out[i:, j] = True
    for i, j in zip(*np.nonzero(boosted[BT])):
        out[:i + 1, j] = True
    return out


def test_block_guidance_only_reaches_downstream_pixels(rng):
    H = W = 4
    pri = zero_priors((H, W))
    pri.d_coarse[1, 2] = 1.0
    pri.flow[:, 1, 2] = (0.0, 1.0)  # boosts only the left-to-right scan at (1, 2)
    pri.d_coarse[3, 0] = 1.0
    pri.flow[:, 3, 0] = (-1.0, 0.0)  # boosts only the bottom-to-top scan at (3, 0)
    boosted = {d: gm.geometric_prompt(pri.d_coarse, pri.flow, d) > 1 for d in gm.DIRECTIONS}
    x = rng.uniform(0.5, 1.0, size=(1, H, W))
    ident = np.zeros((1, 3, 3))
    ident[0, 1, 1] = 1.0
    p = params(S=2)
    diff = gm.gmamba_block(x, p, ident, pri) != gm.gmamba_block(x, p, ident, None)
    allowed = reachable(boosted)
    assert diff[0].any()
    assert not np.any(diff[0] & ~allowed)
    np.testing.assert_array_equal(diff[0], allowed)


def test_cascade_config_validation():
    cfg = gm.CascadeConfig.init(4, 2, seed=0)
    assert [layer.kind for layer in cfg.layers] == [gm.ISOTROPIC, gm.ISOTROPIC, gm.GUIDED]
    cfg.layers[0].kind = gm.GUIDED
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = gm.CascadeConfig.init(4, 2, seed=0)
    cfg.layers[1].params.a_log = np.zeros((3, 2))
    with pytest.raises(ConfigError):
        cfg.validate()


def test_cascade_zero_case():
    cfg = gm.CascadeConfig.init(3, 2, seed=1)
    cfg.refiner = gm.RefinerHead(*(np.zeros_like(a) for a in cfg.refiner.arrays()))
    ctx, delta = gm.cascade_forward(np.zeros((3, 5, 5)), cfg, zero_priors((5, 5)))
    assert np.all(ctx == 0.0) and np.all(delta == 0.0)


def test_cascade_zero_dcoarse_matches_isotropic(rng):
    cfg = gm.CascadeConfig.init(4, 3, seed=2)
    x = rng.standard_normal((4, 8, 8)) * 0.5
    pri = make_priors(np.eye(8, dtype=int))
    pri.d_coarse = np.zeros((8, 8))
    a = gm.cascade_forward(x, cfg, pri)
    b = gm.cascade_forward(x, cfg, None)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_cascade_madds_double_with_height(rng):
    cfg = gm.CascadeConfig.init(4, 3, seed=3)
    counts = []
    for H in (8, 16, 32):
        with count_madds() as c:
            gm.cascade_forward(rng.standard_normal((4, H, 8)), cfg, None)
        counts.append(c.total)
    assert counts[1] == 2 * counts[0] and counts[2] == 2 * counts[1]


def test_cascade_deterministic(rng):
    cfg = gm.CascadeConfig.init(4, 3, seed=4)
    x = rng.standard_normal((4, 9, 7)) * 0.5
    pri = make_priors(np.arange(63).reshape(9, 7) // 20)
    a = gm.cascade_forward(x, cfg, pri)
    b = gm.cascade_forward(x.copy(), gm.CascadeConfig.init(4, 3, seed=4), pri)
    assert a[0].tobytes() == b[0].tobytes()


def test_leakage_zero_source():
    cfg = gm.CascadeConfig.init(8, 4, seed=0)
    scene = gm.two_region_scene(seed=0)
    scene.features[:, scene.region_a] = 0.0
    assert gm.leakage_ratio(cfg, scene) == (0.0, 0.0)


def test_leakage_without_state_transport():
    cfg = gm.CascadeConfig.init(2, 2, seed=0)
    for layer in cfg.layers:
        layer.params.w_b = np.zeros((2, 2))
        layer.kernels = np.zeros((2, 3, 3))
        layer.kernels[:, 1, 1] = 1.0
    labels = np.ones((1, 8), dtype=int)
    labels[:, 4:] = 2
    feats = np.where(labels[None] == 1, 0.7, -0.4) * np.ones((2, 1, 1))
    scene = gm.LeakageScene(feats, zero_priors((1, 8)), labels == 1, labels == 2)
    assert gm.leakage_ratio(cfg, scene) == (0.0, 0.0)


def test_leakage_rejects_empty_region():
    scene = gm.two_region_scene(channels=2, size=8)
    scene.region_b[:] = False
    with pytest.raises(ValueError):
        gm.leakage_ratio(gm.CascadeConfig.init(2, 2), scene)


# values from the first computation on the canonical scene (channels 8,
# state 4, 32x32, seed 0); guided exceeds isotropic here
LEAKAGE_FIXTURE = (0.08973627274571697, 0.06578654702709653)


def test_leakage_regression_fixture():
    guided, iso = gm.leakage_ratio(gm.CascadeConfig.init(8, 4, seed=0), gm.two_region_scene(seed=0))
    np.testing.assert_allclose((guided, iso), LEAKAGE_FIXTURE, rtol=1e-9)
