import math

import numpy as np
import pytest

from pointbox import losses
from pointbox.losses import BandStats, band_stats, cls_loss, ohem_select, reg_loss


def stats_row(mu_w, sd_w, mu_h, sd_h, count=5, row=0):
    return [BandStats(row, mu_w, sd_w, mu_h, sd_h, count)]


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f(x)
        x[idx] = old - eps
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def random_reg_case(rng, mode):
    anchor = np.array([[rng.uniform(0, 200), rng.uniform(0, 200), rng.uniform(4, 40), rng.uniform(4, 40)]])
    target = anchor.copy()
    target[0, :2] += rng.normal(0, 5, 2)
    target[0, 2:] *= np.exp(rng.normal(0, 0.3, 2))
    mu_w, mu_h = rng.uniform(5, 30, 2)
    sd_w, sd_h = rng.uniform(0, 3, 2)
    stats = stats_row(mu_w, sd_w, mu_h, sd_h)
    lo_w, hi_w, lo_h, hi_h = stats[0].bounds()
    while True:
        d = rng.normal(0, 0.8, (1, 4))
        d[0, 2:] = np.clip(d[0, 2:], -3.5, 3.5)
        w = anchor[0, 2] * math.exp(d[0, 2])
        h = anchor[0, 3] * math.exp(d[0, 3])
        # stay clear of the kinks at the band edges
        if min(abs(math.log(w / b)) for b in (lo_w, hi_w)) > 1e-3 and \
                min(abs(math.log(h / b)) for b in (lo_h, hi_h)) > 1e-3:
            return d, anchor, target, stats


class TestBandStats:
    def test_constant(self):
        boxes = np.array([[10, 4, 6, 6], [30, 5, 6, 6], [50, 12, 6, 6]], float)
        s = band_stats(boxes, 8, 4)[0]
        assert (s.mu_w, s.sigma_w, s.count) == (6, 0, 3)

    def test_population_sigma(self):
        boxes = np.array([[10, 4, 4, 4], [30, 5, 8, 8]], float)
        s = band_stats(boxes, 8, 4)[0]
        assert (s.mu_w, s.sigma_w) == (6, 2)

    def test_empty_band(self):
        stats = band_stats(np.zeros((0, 4)), 8, 4)
        assert not any(s.constrained for s in stats)
        out = reg_loss(np.array([[0, 0, 3, -3]], float), np.array([[4, 4, 8, 8]], float),
                       np.array([[4, 4, 8, 8]], float), [0], stats)
        assert out.lw_sum == out.lh_sum == 0
        assert np.all(out.grad[:, 2:] == 0)

    def test_band_membership(self):
        boxes = np.array([[0, 4, 2, 2], [0, 12, 2, 2], [0, 20, 2, 2], [0, 28, 2, 2]], float)
        counts = [s.count for s in band_stats(boxes, 8, 4)]
        assert counts == [2, 3, 3, 2]

    def test_locality(self, rng):
        boxes = np.column_stack([rng.uniform(0, 256, 60), rng.uniform(0, 256, 60),
                                 rng.uniform(4, 20, 60), rng.uniform(4, 20, 60)])
        before = band_stats(boxes, 8, 32)
        k = 17
        row = int(boxes[k, 1] // 8)
        boxes[k, 2:] *= 1.7
        after = band_stats(boxes, 8, 32)
        changed = {i for i in range(32) if before[i] != after[i]}
        assert changed <= {row - 1, row, row + 1}
        assert row in changed


class TestRegLoss:
    def test_interior_zero(self):
        anchor = np.array([[20, 20, 10, 10]], float)
        out = reg_loss(np.zeros((1, 4)), anchor, anchor, [0], stats_row(10, 1, 10, 1))
        assert out.reg_total == 0
        assert np.all(out.grad == 0)

    def test_double_width_sigma_zero(self):
        anchor = np.array([[20, 20, 6, 6]], float)
        d = np.array([[0, 0, math.log(2), 0]])
        out = reg_loss(d, anchor, anchor, [0], stats_row(6, 0, 6, 0))
        assert out.lw_sum == pytest.approx(math.log(2) ** 2, rel=1e-12)
        assert out.grad[0, 2] == pytest.approx(2 * math.log(2), rel=1e-12)
        assert out.lh_sum == 0

    def test_lower_bound_floor(self):
        s = BandStats(0, 2.0, 5.0, 2.0, 5.0, 4)
        assert s.bounds()[0] == losses.MIN_BOUND

    @pytest.mark.parametrize("mode", ["log", "pixel", "classic"])
    def test_finite_differences(self, rng, mode):
        worst = 0.0
        for _ in range(1000):
            d, a, t, stats = random_reg_case(rng, mode)
            out = reg_loss(d, a, t, [0], stats, mode)
            fd = central_diff(lambda x: reg_loss(x, a, t, [0], stats, mode).reg_total, d.copy())
            np.testing.assert_allclose(out.grad, fd, rtol=1e-4, atol=1e-9)
            denom = np.maximum(np.abs(fd), 1e-12)
            worst = max(worst, float(np.max(np.abs(out.grad - fd)[np.abs(fd) > 1e-6] / denom[np.abs(fd) > 1e-6], initial=0)))
        assert worst < 1e-4

    def test_additive(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 20))
            cases = [random_reg_case(rng, "log") for _ in range(n)]
            d = np.vstack([c[0] for c in cases])
            a = np.vstack([c[1] for c in cases])
            t = np.vstack([c[2] for c in cases])
            stats = [BandStats(i, *c[3][0][1:]) for i, c in enumerate(cases)]
            out = reg_loss(d, a, t, list(range(n)), stats)
            assert out.reg_total == out.lxy_sum + out.lw_sum + out.lh_sum
            assert min(out.lxy_sum, out.lw_sum, out.lh_sum) >= 0
            assert out.n_pos == n

    def test_dead_zone(self, rng):
        n = 10_000
        a = np.column_stack([rng.uniform(0, 100, n), rng.uniform(0, 100, n),
                             rng.uniform(4, 40, n), rng.uniform(4, 40, n)])
        mu = rng.uniform(6, 30, (n, 2))
        sd = rng.uniform(0.1, 4, (n, 2))
        stats = [BandStats(i, mu[i, 0], sd[i, 0], mu[i, 1], sd[i, 1], 3) for i in range(n)]
        lo = np.maximum(mu - 3 * sd, 1.0)
        hi = mu + 3 * sd
        wh = lo + rng.random((n, 2)) * (hi - lo)
        d = np.zeros((n, 4))
        d[:, 2:] = np.log(wh / a[:, 2:])
        out = reg_loss(d, a, a, np.arange(n), stats)
        assert out.lw_sum == 0 and out.lh_sum == 0
        assert np.all(out.grad[:, 2:] == 0)

    def test_one_sided_monotone(self):
        anchor = np.array([[20, 20, 10, 10]], float)
        stats = stats_row(10, 1, 10, 1)
        values = []
        for dw in np.linspace(-2, 2, 81):
            values.append(reg_loss(np.array([[0, 0, dw, 0]]), anchor, anchor, [0], stats).lw_sum)
        values = np.array(values)
        widths = 10 * np.exp(np.linspace(-2, 2, 81))
        above = widths > 13
        below = widths < 7
        assert np.all(np.diff(values[above]) >= 0)
        assert np.all(np.diff(values[below]) <= 0)

    def test_center_target_is_anchor_normalised(self):
        anchor = np.array([[20, 20, 10, 4]], float)
        target = np.array([[25, 22, 10, 4]], float)
        out = reg_loss(np.zeros((1, 4)), anchor, target, [0], stats_row(10, 1, 4, 1))
        assert out.lxy_sum == pytest.approx(0.5 ** 2 + 0.5 ** 2)


class TestClsLoss:
    def test_symmetric_point(self):
        loss, grad = cls_loss(np.array([0.0]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2))
        assert grad[0] == pytest.approx(-0.5)

    def test_saturated(self):
        loss, _ = cls_loss(np.array([20.0]), np.array([1.0]))
        assert loss < 1e-8

    def test_finite_differences(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 10))
            z = rng.normal(0, 3, n)
            y = (rng.random(n) < 0.5).astype(float)
            sel = rng.random(n) < 0.8
            sel[0] = True
            _, grad = cls_loss(z, y, sel)
            fd = central_diff(lambda x: cls_loss(x, y, sel)[0], z.copy())
            np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-10)

    def test_unselected_have_no_gradient(self):
        _, grad = cls_loss(np.array([1.0, 2.0]), np.array([0.0, 1.0]), np.array([True, False]))
        assert grad[1] == 0


class TestOhem:
    def test_three_to_one(self, rng):
        neg = rng.random(100)
        got = ohem_select(neg, 2)
        assert sorted(got) == sorted(np.argsort(-neg)[:6])

    def test_background_floor(self, rng):
        neg = rng.random(100)
        assert sorted(ohem_select(neg, 0)) == sorted(np.argsort(-neg)[:8])

    def test_ties_by_index(self):
        neg = np.array([1.0, 2.0, 2.0, 2.0, 0.5, 2.0])
        assert list(ohem_select(neg, 1)) == [1, 2, 3]

    def test_cap(self, rng):
        assert len(ohem_select(rng.random(1000), 200)) == 256

    def test_fewer_negatives_than_requested(self):
        assert len(ohem_select(np.array([0.3, 0.1]), 5)) == 2
