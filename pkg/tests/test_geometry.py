from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hypm import geometry as g
from hypm.autodiff import Tensor
from hypm.geometry import BallConfig, GeometryError

UNIT = BallConfig(gamma=1.0)

# independent closed forms (mpmath, 30 digits), frozen
D_03_04 = 0.22825865198098018276  # 2 atanh(0.1 / 0.88)
D_0_05 = 1.0986122886681096914  # 2 atanh(0.5)
TANH_1 = 0.76159415595576488812


def mobius_1d(a: float, b: float) -> float:
    return (a + b) / (1 + a * b)


def rand_ball(rng, n, dim, frac, radius=1.0):
    v = rng.normal(size=(n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = frac * radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return v * r


# ----------------------------------------------------------------------
# config


def test_radius_derived_exactly():
    cfg = BallConfig(gamma=2e-5)
    assert cfg.radius == 2e-5 ** -0.5
    assert cfg.eps == pytest.approx(1e-5 * cfg.radius)
    assert cfg.exp_map_variant == "paper" and cfg.lambda_scale == 2.0


@pytest.mark.parametrize(
    "kw", [dict(gamma=0.0), dict(gamma=-1.0), dict(gamma=1.0, eps=1.0), dict(gamma=1.0, lambda_scale=0.0),
           dict(gamma=1.0, exp_map_variant="other"), dict(gamma=float("nan"))]
)
def test_invalid_config(kw):
    with pytest.raises(GeometryError):
        BallConfig(**kw)


# ----------------------------------------------------------------------
# mobius addition


def test_mobius_examples():
    v = np.array([0.1, -0.3, 0.2])
    assert np.array_equal(g.mobius_add(np.zeros(3), v, UNIT), v)
    assert np.abs(g.mobius_add(v, -v, UNIT)).max() == 0.0
    assert g.mobius_add(np.array([0.3]), np.array([0.4]), UNIT)[0] == pytest.approx(0.625, abs=1e-15)


def test_mobius_matches_1d_closed_form_on_grid():
    grid = np.linspace(-0.949, 0.949, 77)
    a, b = np.meshgrid(grid, grid)
    got = g.mobius_add(a.reshape(-1, 1), b.reshape(-1, 1), UNIT)[:, 0]
    want = np.array([mobius_1d(x, y) for x, y in zip(a.ravel(), b.ravel())])
    assert np.abs(got - want).max() <= 1e-12


def test_mobius_errors():
    with pytest.raises(GeometryError):
        g.mobius_add(np.zeros(2), np.zeros(3), UNIT)
    with pytest.raises(GeometryError):
        g.mobius_add(np.array([np.nan]), np.array([0.1]), UNIT)


def test_mobius_projects_near_boundary():
    out = g.mobius_add(np.array([0.999999]), np.array([0.999999]), UNIT)
    assert abs(out[0]) < 1.0
    over = g.mobius_add(np.array([0.9999999999]), np.array([0.9999999999]), UNIT)
    assert abs(over[0]) <= 1 - UNIT.eps + 1e-15


def test_mobius_properties_random():
    rng = np.random.default_rng(0)
    for dim in (1, 2, 5, 8):
        b = rand_ball(rng, 2500, dim, 0.99)
        assert np.abs(g.mobius_add(np.zeros_like(b), b, UNIT) - b).max() <= 1e-12
        z = rand_ball(rng, 2500, dim, 0.9)
        assert np.linalg.norm(g.mobius_add(z, -z, UNIT), axis=1).max() <= 1e-10


def test_mobius_scaled_radius_consistent():
    # ball of radius r is the unit ball scaled by r
    cfg = BallConfig(gamma=0.04)  # r = 5
    rng = np.random.default_rng(1)
    a, b = rand_ball(rng, 50, 3, 0.9), rand_ball(rng, 50, 3, 0.9)
    assert np.allclose(g.mobius_add(5 * a, 5 * b, cfg), 5 * g.mobius_add(a, b, UNIT), atol=1e-12)


# ----------------------------------------------------------------------
# distance


def test_distance_examples():
    z = np.array([0.2, -0.1])
    assert g.hyperbolic_distance(z, z, UNIT) <= 1e-15
    assert g.hyperbolic_distance(np.zeros(1), np.array([0.5]), UNIT) == pytest.approx(D_0_05, abs=1e-14)
    assert g.hyperbolic_distance(np.array([0.3]), np.array([0.4]), UNIT) == pytest.approx(D_03_04, abs=1e-14)


def test_distance_from_origin_closed_form_scaled():
    cfg = BallConfig(gamma=0.25)  # r = 2
    d = g.hyperbolic_distance(np.zeros(2), np.array([0.6, 0.8]), cfg)
    assert d == pytest.approx(2 * 2 * math.atanh(1 / 2), abs=1e-13)


def test_distance_properties_random():
    rng = np.random.default_rng(2)
    n = 10_000
    a, b, c = (rand_ball(rng, n, 4, 0.95) for _ in range(3))
    dab, dba = g.hyperbolic_distance(a, b, UNIT), g.hyperbolic_distance(b, a, UNIT)
    assert np.abs(dab - dba).max() <= 1e-10
    dac, dbc = g.hyperbolic_distance(a, c, UNIT), g.hyperbolic_distance(b, c, UNIT)
    assert np.all(dac <= dab + dbc + 1e-9)
    assert np.all(dab >= 0)


def test_distance_rejects_boundary_point():
    with pytest.raises(GeometryError):
        g.hyperbolic_distance(np.array([1.0]), np.array([-1.0]), UNIT)


def test_distance_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(20):
        a0, b0 = rand_ball(rng, 2, 4, 0.8)
        ta, tb = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        g.hyperbolic_distance(ta, tb, UNIT).backward()
        for t, base, other, first in ((ta, a0, b0, True), (tb, b0, a0, False)):
            for i in range(4):
                e = np.zeros(4)
                e[i] = h
                f = (lambda x: g.hyperbolic_distance(x, other, UNIT)) if first else (lambda x: g.hyperbolic_distance(other, x, UNIT))
                num = (f(base + e) - f(base - e)) / (2 * h)
                ana = t.grad[i]
                assert abs(ana - num) / max(abs(ana), abs(num), 1e-6) <= 1e-4


# ----------------------------------------------------------------------
# exp map, projection, mean


def test_exp_map_examples():
    assert np.array_equal(g.exp_map(np.zeros(3), UNIT), np.zeros(3))
    out = g.exp_map(np.array([1.0, 0.0]), UNIT)
    assert out[0] == pytest.approx(TANH_1, abs=1e-15) and out[1] == 0.0


def test_exp_map_variants_differ_only_in_scale():
    cfg_p = BallConfig(gamma=4.0, exp_map_variant="paper")  # r = 0.5
    cfg_s = BallConfig(gamma=4.0, exp_map_variant="standard")
    v = np.array([0.1, 0.0])
    # paper: tanh((1/2) * 2 * 0.1 / 2) / 2, standard: tanh(2 * 2 * 0.1 / 2) / 2
    assert g.exp_map(v, cfg_p)[0] == pytest.approx(math.tanh(0.05) / 2, abs=1e-15)
    assert g.exp_map(v, cfg_s)[0] == pytest.approx(math.tanh(0.2) / 2, abs=1e-15)


def test_exp_map_paper_variant_saturates_at_default_gamma():
    cfg = BallConfig()
    z = g.exp_map(np.random.default_rng(0).normal(size=(10, 64)) * 0.01, cfg)
    assert np.allclose(np.linalg.norm(z, axis=1), cfg.radius - cfg.eps, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(-1e6, 1e6)), st.sampled_from(["paper", "standard"]),
       st.sampled_from([1.0, 2e-5, 9.0]))
def test_exp_map_strictly_inside(v, variant, gamma):
    cfg = BallConfig(gamma=gamma, exp_map_variant=variant)
    assert np.linalg.norm(g.exp_map(v, cfg)) < cfg.radius


def test_exp_map_rejects_non_finite():
    with pytest.raises(GeometryError):
        g.exp_map(np.array([np.inf, 0.0]), UNIT)


def test_project_examples():
    v = np.array([0.3, 0.4])
    assert np.array_equal(g.project_to_ball(v, UNIT), v)
    out = g.project_to_ball(np.array([2.0, 0.0]), UNIT)
    assert out[0] == pytest.approx(1 - 1e-5, abs=1e-15) and out[1] == 0.0
    assert np.array_equal(g.project_to_ball(np.zeros(2), UNIT), np.zeros(2))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-10, 10)))
def test_project_norm_bound(v):
    out = g.project_to_ball(v, UNIT)
    assert np.linalg.norm(out) <= 1 - UNIT.eps + 1e-12
    if np.linalg.norm(v) <= 1 - UNIT.eps:
        assert np.array_equal(out, v)


def test_hyperbolic_mean_examples():
    p = np.array([0.1, 0.2])
    assert np.array_equal(g.hyperbolic_mean([p], UNIT), p)
    assert np.array_equal(g.hyperbolic_mean([p, -p], UNIT), np.zeros(2))
    assert np.allclose(g.hyperbolic_mean([[0.2, 0.0], [0.4, 0.0]], UNIT), [0.3, 0.0], atol=1e-15)
    with pytest.raises(GeometryError):
        g.hyperbolic_mean(np.zeros((0, 2)), UNIT)


def test_geometry_is_pure():
    a = np.array([0.1, 0.2])
    b = np.array([-0.3, 0.05])
    a0, b0 = a.copy(), b.copy()
    first = g.hyperbolic_distance(a, b, UNIT)
    assert g.hyperbolic_distance(a, b, UNIT) == first
    assert np.array_equal(a, a0) and np.array_equal(b, b0)
