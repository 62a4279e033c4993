import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import TOL, fd_entries, pick, rel_err
from sdfrecon.renderer import (
    alphas_backward,
    alphas_from_sdf,
    composite,
    composite_backward,
    dump_weight_profile,
    logistic_cdf,
    render_backward,
    render_rays,
    weights_from_alphas,
)
from test_field import tiny_field


class TestLogistic:
    def test_zero(self):
        assert logistic_cdf(0.0, 5.0) == 0.5

    def test_extremes_no_overflow(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            assert logistic_cdf(1e6, 1.0) == 1.0
            assert logistic_cdf(-1e6, 1.0) == 0.0
            assert logistic_cdf(500.0, 1.0) == 1.0
            assert 0.0 <= logistic_cdf(-500.0, 1.0) < 1e-200

    def test_symmetry(self):
        x = np.random.default_rng(0).normal(scale=10, size=10_000)
        np.testing.assert_allclose(logistic_cdf(x, 3.0) + logistic_cdf(-x, 3.0), 1.0, atol=1e-15)


class TestAlphas:
    def test_no_crossing(self):
        assert alphas_from_sdf([0.3, 0.3], 50.0)[0] == 0.0

    def test_hard_surface(self):
        assert alphas_from_sdf([0.01, -0.01], 1e5)[0] == pytest.approx(1.0, abs=1e-12)

    def test_rising_sdf_clamped(self):
        a = alphas_from_sdf([-0.2, 0.1, 0.5], 10.0)
        np.testing.assert_array_equal(a, [0.0, 0.0])

    def test_sphere_argmax_brackets_crossing(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            # ray towards a unit sphere from distance 3, sampled over [1, 5]
            o = np.array([0, 0, -3.0]) + np.r_[rng.uniform(-0.5, 0.5, 2), 0]
            d = np.array([0, 0, 1.0])
            t = np.sort(rng.uniform(1.0, 5.0, 32))
            sdf = np.linalg.norm(o + t[:, None] * d, axis=1) - 1.0
            b = o @ d
            t_hit = -b - np.sqrt(b * b - (o @ o - 1))
            inv_s = rng.uniform(64, 1000)
            w = weights_from_alphas(alphas_from_sdf(sdf, inv_s))
            k = int(np.argmax(w))
            assert t[k] <= t_hit <= t[k + 1]

    @pytest.mark.parametrize("seed", range(20))
    def test_linear_crossing_unbiased(self, seed):
        rng = np.random.default_rng(seed)
        t = np.linspace(0, 1, int(rng.integers(3, 30)))
        k = int(rng.integers(0, len(t) - 1))
        t_star = rng.uniform(t[k], t[k + 1])
        sdf = -rng.uniform(0.1, 10) * (t - t_star)
        w = weights_from_alphas(alphas_from_sdf(sdf, rng.uniform(8, 500)))
        assert int(np.argmax(w)) == k


class TestComposite:
    def test_full_occlusion(self):
        rng = np.random.default_rng(0)
        c = rng.uniform(size=(4, 3))
        out = composite(np.array([1.0, 0.3, 0.9, 0.5]), c, np.arange(4.0))
        np.testing.assert_array_equal(out.weights, [1, 0, 0, 0])
        np.testing.assert_array_equal(out.color, c[0])

    def test_empty(self):
        out = composite(np.zeros(5), np.ones((5, 3)), np.arange(5.0))
        np.testing.assert_array_equal(out.color, 0)
        assert out.opacity == 0

    def test_closed_form_opacity(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(500, 12))
        out = composite(a, rng.uniform(size=(500, 12, 3)), np.cumsum(rng.uniform(size=(500, 12)), 1))
        np.testing.assert_allclose(out.opacity, 1 - np.prod(1 - a, axis=1), atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            composite(np.zeros(4), np.zeros((5, 3)), np.zeros(4))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=40), st.floats(0.1, 1e4))
def test_weight_invariants(sdf, inv_s):
    a = alphas_from_sdf(np.array(sdf), inv_s)
    w = weights_from_alphas(a)
    assert np.all((a >= 0) & (a <= 1))
    assert np.all(w >= 0) and w.sum() <= 1 + 1e-6


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_alpha_backward_fd(self, seed):
        rng = np.random.default_rng(seed)
        sdf = 0.5 - np.cumsum(rng.uniform(0.02, 0.15, (6, 9)), axis=1)
        sdf[:, 4] = sdf[:, 3] + 0.05  # a rising step exercises the clamp, away from its kink
        inv_s = np.array([rng.uniform(2, 20)])
        g = rng.normal(size=(6, 8))

        def loss():
            return float(np.sum(g * alphas_from_sdf(sdf, inv_s[0])))

        g_sdf, g_inv = alphas_backward(sdf, inv_s[0], g)
        assert rel_err(g_sdf, fd_entries(loss, sdf, np.arange(sdf.size))) <= TOL
        assert rel_err(g_inv, fd_entries(loss, inv_s, [0])) <= TOL

    @pytest.mark.parametrize("seed", range(5))
    def test_composite_backward_fd(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(4, 7))
        a[0, 2] = 1.0
        c, t = rng.uniform(size=(4, 7, 3)), np.cumsum(rng.uniform(size=(4, 7)), 1)
        gc, gd, go = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=4)

        def loss():
            o = composite(a, c, t)
            return float(np.sum(gc * o.color) + np.sum(gd * o.depth) + np.sum(go * o.opacity))

        ga, gcol = composite_backward(a, c, t, gc, gd, go)
        live = np.ones(a.shape, bool)
        live[0, 2] = False  # one-sided at alpha = 1
        num_a = fd_entries(loss, a, np.flatnonzero(live))
        assert rel_err(ga[live], num_a) <= TOL
        assert rel_err(gcol, fd_entries(loss, c, np.arange(c.size))) <= TOL

    @pytest.mark.parametrize("seed", range(4))
    def test_render_rays_fd(self, seed):
        f = tiny_field(seed, jitter=0.2)
        rng = np.random.default_rng(seed)
        R, m = 3, 6
        o = rng.normal(size=(R, 3)) * 0.2 + np.array([0, 0, -1.5])
        d = rng.normal(size=(R, 3)) * 0.1 + np.array([0, 0, 1.0])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t = np.sort(rng.uniform(0.5, 2.5, (R, m)), axis=1)
        idx = rng.integers(0, 3, R)
        inv_s = np.array([rng.uniform(2, 10)])
        gc, go = rng.normal(size=(R, 3)), rng.normal(size=R)
        n_pts = R * m + R * (m - 1)
        gg = rng.normal(size=(n_pts, 3))

        def fwd():
            out, grad, cache = render_rays(f, inv_s[0], o, d, t, idx)
            return float(np.sum(gc * out.color) + np.sum(go * out.opacity) + np.sum(gg * grad)), cache

        _, cache = fwd()
        grads, g_inv = render_backward(f, cache, gc, go, None, gg)
        assert rel_err(g_inv, fd_entries(lambda: fwd()[0], inv_s, [0])) <= TOL
        for name, p in f.params.items():
            e = pick(rng, p.size, 20)
            assert rel_err(grads[name].reshape(-1)[e], fd_entries(lambda: fwd()[0], p, e)) <= TOL, name


def test_weight_profile_csv(tmp_path):
    t = np.array([[0.0, 1.0, 2.0]])
    sdf = np.array([[0.5, 0.0, -0.5]])
    a = alphas_from_sdf(sdf, 10.0)
    dump_weight_profile(tmp_path / "w.csv", t, sdf, a, weights_from_alphas(a))
    rows = list(csv.DictReader(open(tmp_path / "w.csv")))
    assert len(rows) == 2 and float(rows[1]["sdf"]) == 0.0
