import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointbox import evalmetrics as em
from pointbox.geometry import Box, iou

from conftest import random_boxes


# -- independent oracles ----------------------------------------------------

def brute_nms(boxes, scores, thresh):
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in idx:
        if all(iou(Box(*boxes[i]), Box(*boxes[k])) <= thresh for k in keep):
            keep.append(i)
    return keep


def brute_nn(points):
    out = []
    for i, p in enumerate(points):
        out.append(min((math.dist(p, q) for j, q in enumerate(points) if j != i), default=math.inf))
    return out


def brute_greedy(boxes, scores, points, c, r):
    nn = brute_nn(points)
    used = set()
    matched = [-1] * len(boxes)
    for i in sorted(range(len(boxes)), key=lambda i: (-scores[i], i)):
        cx, cy, w, h = boxes[i]
        best = None
        for g, (px, py) in enumerate(points):
            d = math.hypot(px - cx, py - cy)
            if g in used or d >= c or not (w < r * nn[g] and h < r * nn[g]):
                continue
            if best is None or d < best[0]:
                best = (d, g)
        if best is not None:
            used.add(best[1])
            matched[i] = best[1]
    return matched


def rank_walk_ap(images, c, r):
    """Literal PR walk: every prefix of the pooled ranking, envelope by scanning."""
    flags, n_gt = [], 0
    pooled = []
    for k, (boxes, scores, pts) in enumerate(images):
        n_gt += len(pts)
        m = brute_greedy(boxes, scores, pts, c, r)
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        for rank, i in enumerate(order):
            pooled.append((-scores[i], k, rank, m[i] >= 0))
    pooled.sort()
    flags = [p[3] for p in pooled]
    prec, rec = [], []
    tp = 0
    for n, f in enumerate(flags, 1):
        tp += f
        prec.append(tp / n)
        rec.append(tp / n_gt)
    ap, last = 0.0, 0.0
    for i in range(len(flags)):
        if rec[i] > last:
            ap += (rec[i] - last) * max(prec[i:])
            last = rec[i]
    return ap


def brute_cell_counts(points, w, h, n):
    counts = np.zeros((n, n), int)
    for x, y in points:
        cx = next(i for i in range(n) if x <= (i + 1) * w / n or i == n - 1)
        cy = next(i for i in range(n) if y <= (i + 1) * h / n or i == n - 1)
        counts[cy, cx] += 1
    return counts


def random_instance(rng, n_gt, n_det, extent=60.0):
    pts = rng.uniform(0, extent, (n_gt, 2))
    boxes = random_boxes(rng, n_det, lo=1.0, hi=25.0, extent=extent)
    return boxes, rng.random(n_det), pts


# -- tests ------------------------------------------------------------------

class TestNMS:
    def test_identical(self):
        b = np.array([[10, 10, 5, 5], [10, 10, 5, 5]], float)
        assert list(em.nms(b, [0.8, 0.9])) == [1]

    def test_disjoint(self):
        b = np.array([[0, 0, 2, 2], [10, 10, 2, 2], [20, 20, 2, 2]], float)
        assert sorted(em.nms(b, [0.3, 0.2, 0.1])) == [0, 1, 2]

    def test_empty(self):
        assert len(em.nms(np.zeros((0, 4)), np.zeros(0))) == 0

    @pytest.mark.parametrize("seed", range(120))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        b = random_boxes(rng, 20, extent=50)
        s = rng.random(20)
        if seed % 3 == 0:
            s = np.round(s, 1)  # exercise ties
        assert list(em.nms(b, s, 0.3)) == brute_nms(b, s, 0.3)


class TestGoodDetection:
    def test_centered_half_size(self):
        pts = np.array([[0.0, 0.0], [10.0, 0.0]])
        nn = em.gt_nn_distances(pts)
        used = np.zeros(2, bool)
        prot = em.EvalProtocol(c=20, r=1.0)
        assert em.good_detection((0, 0, 5, 5), pts, nn, used, prot) == 0
        assert used[0]

    def test_too_far(self):
        pts = np.array([[0.0, 0.0], [100.0, 0.0]])
        prot = em.EvalProtocol(c=20, r=math.inf)
        used = np.zeros(2, bool)
        assert em.good_detection((21, 0, 1, 1), pts, em.gt_nn_distances(pts), used, prot) is None

    def test_conjunctive_vs_disjunctive(self):
        pts = np.array([[0.0, 0.0], [10.0, 0.0]])
        nn = em.gt_nn_distances(pts)
        prot = em.EvalProtocol(c=20, r=1.0)
        tall = (0, 0, 1, 200)
        assert em.good_detection(tall, pts, nn, np.zeros(2, bool), prot) is None
        assert em.good_detection(tall, pts, nn, np.zeros(2, bool), prot, conjunctive=False) == 0
        m = em.match_image(np.array([tall]), np.array([0.9]), pts, prot)
        assert m.matched_gt[0] == -1 and m.n_good_disjunctive == 1

    def test_single_gt_has_infinite_prior(self):
        assert np.isinf(em.gt_nn_distances(np.array([[1.0, 1.0]]))).all()

    def test_three_gts_four_dets_all_orders(self):
        # enumerate every score order; greedy matching must agree with the loop oracle
        pts = np.array([[0.0, 0.0], [8.0, 0.0], [4.0, 7.0]])
        boxes = np.array([[1, 0, 4, 4], [5, 1, 4, 4], [4, 5, 6, 6], [2, 2, 3, 3]], float)
        prot = em.EvalProtocol(c=6, r=1.0)
        for perm in itertools.permutations(range(4)):
            scores = np.empty(4)
            scores[list(perm)] = [0.9, 0.7, 0.5, 0.3]
            got = em.match_image(boxes, scores, pts, prot).matched_gt
            assert list(got) == brute_greedy(boxes, scores, pts, 6, 1.0)

    @pytest.mark.parametrize("seed", range(150))
    def test_greedy_matches_oracle(self, seed):
        rng = np.random.default_rng(1000 + seed)
        boxes, scores, pts = random_instance(rng, rng.integers(1, 12), rng.integers(0, 15))
        prot = em.EvalProtocol(c=12, r=1.5)
        got = em.match_image(boxes, scores, pts, prot).matched_gt
        assert list(got) == brute_greedy(boxes, scores, pts, 12, 1.5)
        hits = got[got >= 0]
        assert len(hits) == len(set(hits.tolist()))  # each gt credited once


class TestAP:
    def test_perfect(self):
        pts = np.array([[0, 0], [30, 0], [0, 30]], float)
        boxes = np.array([[0, 0, 5, 5], [30, 0, 5, 5], [0, 30, 5, 5], [90, 90, 5, 5]], float)
        assert em.average_precision([(boxes, [0.9, 0.8, 0.7, 0.1])], [pts], em.EvalProtocol()).ap == 1.0

    def test_no_detections(self):
        pts = np.array([[0, 0], [30, 0]], float)
        assert em.average_precision([(np.zeros((0, 4)), np.zeros(0))], [pts], em.EvalProtocol()).ap == 0.0

    def test_by_hand(self):
        # ranking TP, FP, TP over 2 gts: envelope 1.0 to recall .5, 2/3 to recall 1
        pts = np.array([[0, 0], [50, 0]], float)
        boxes = np.array([[0, 0, 5, 5], [200, 200, 5, 5], [50, 0, 5, 5]], float)
        ap = em.average_precision([(boxes, [0.9, 0.8, 0.7])], [pts], em.EvalProtocol()).ap
        assert ap == pytest.approx(0.5 + 0.5 * 2 / 3)

    @pytest.mark.parametrize("seed", range(120))
    def test_rank_walk_oracle(self, seed):
        rng = np.random.default_rng(2000 + seed)
        images = [random_instance(rng, 10, 15) for _ in range(rng.integers(1, 4))]
        prot = em.EvalProtocol(c=10, r=1.0)
        got = em.average_precision([(b, s) for b, s, _ in images], [p for _, _, p in images], prot)
        assert got.ap == pytest.approx(rank_walk_ap(images, 10, 1.0), abs=1e-12)
        assert 0.0 <= got.ap <= 1.0

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_score_transform(self, seed):
        rng = np.random.default_rng(seed)
        images = [random_instance(rng, 6, 10) for _ in range(2)]
        prot = em.EvalProtocol(c=10, r=1.0)
        pts = [p for _, _, p in images]
        a = em.average_precision([(b, s) for b, s, _ in images], pts, prot).ap
        b = em.average_precision([(b, 3.0 * s + 7.0) for b, s, _ in images], pts, prot).ap
        assert a == b

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_localization_only_dominates_when_unambiguous(self, seed):
        # gts spaced beyond 2c apart so each detection has at most one candidate
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 8))
        pts = np.column_stack([np.arange(n) * 50.0, rng.uniform(0, 5, n)])
        m = int(rng.integers(0, 14))
        centers = pts[rng.integers(0, n, m)] + rng.uniform(-15, 15, (m, 2))
        boxes = np.column_stack([centers, rng.uniform(1, 80, (m, 2))])
        scores = rng.random(m)
        fin = em.average_precision([(boxes, scores)], [pts], em.EvalProtocol(c=12, r=1.0)).ap
        inf = em.average_precision([(boxes, scores)], [pts], em.EvalProtocol(c=12, r=math.inf)).ap
        assert inf >= fin

    def test_nearest_greedy_can_invert_localization_order(self):
        # the top detection is nearest to a gt it is too large for; at r=inf it takes
        # that gt and strands the third detection
        pts = np.array([[0, 0], [-5, 0], [0, 15]], float)
        boxes = np.array([[0, 3, 10, 10], [-5, 0, 2, 2], [3, -1, 2, 2]], float)
        scores = np.array([0.9, 0.8, 0.7])
        fin = em.average_precision([(boxes, scores)], [pts], em.EvalProtocol(c=13, r=1.0)).ap
        inf = em.average_precision([(boxes, scores)], [pts], em.EvalProtocol(c=13, r=math.inf)).ap
        assert (fin, inf) == (1.0, pytest.approx(2 / 3))

    def test_random_instances_localization_dominates(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            boxes, scores, pts = random_instance(rng, 8, 10)
            fin = em.average_precision([(boxes, scores)], [pts], em.EvalProtocol(c=10, r=1.0)).ap
            inf = em.average_precision([(boxes, scores)], [pts], em.EvalProtocol(c=10, r=math.inf)).ap
            assert inf >= fin

    def test_protocol_validation(self):
        with pytest.raises(ValueError):
            em.EvalProtocol(c=0)
        with pytest.raises(ValueError):
            em.EvalProtocol(r=0)
        em.EvalProtocol(r=math.inf)


class TestCounting:
    def test_perfect(self):
        assert em.mae_mse([3, 4], [3, 4]) == (0.0, 0.0)

    def test_by_hand(self):
        mae, mse = em.mae_mse([13, 6], [10, 10])
        assert mae == 3.5
        assert mse == pytest.approx(3.5355, abs=1e-4)

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.integers(0, 500), st.integers(0, 500)), min_size=1, max_size=30))
    def test_mse_dominates(self, pairs):
        est, gt = zip(*pairs)
        mae, mse = em.mae_mse(est, gt)
        assert mse >= mae - 1e-12 * max(1.0, mae)


class TestGAME:
    def test_boundary_goes_low(self):
        assert list(em.cell_index(np.array([0.0, 50.0, 50.001, 100.0]), 100, 2)) == [0, 0, 1, 1]

    def test_displaced_half(self):
        gt = [np.array([[10.0, 10.0], [20.0, 10.0]])]
        det = [np.array([[90.0, 10.0], [80.0, 10.0]])]
        assert em.game(det, gt, [(100, 100)], 0) == 0
        assert em.game(det, gt, [(100, 100)], 1) == 4

    @pytest.mark.parametrize("seed", range(100))
    def test_oracle_and_properties(self, seed):
        rng = np.random.default_rng(3000 + seed)
        dims = [(int(rng.integers(20, 300)), int(rng.integers(20, 300))) for _ in range(3)]

        def pts(w, h, n):
            p = rng.uniform(0, 1, (n, 2)) * [w, h]
            # put a few points exactly on cell lines
            p[: n // 4] = np.round(p[: n // 4] * 4 / [w, h]) * [w, h] / 4
            return p

        det = [pts(w, h, int(rng.integers(0, 40))) for w, h in dims]
        gt = [pts(w, h, int(rng.integers(0, 40))) for w, h in dims]
        for (w, h), g in zip(dims, gt):
            assert np.array_equal(em.cell_counts(g, w, h, 2), brute_cell_counts(g, w, h, 4))
        oracle = np.mean([np.abs(brute_cell_counts(d, w, h, 4) - brute_cell_counts(g, w, h, 4)).sum()
                          for d, g, (w, h) in zip(det, gt, dims)])
        assert em.game(det, gt, dims, 2) == oracle
        mae, _ = em.mae_mse([len(d) for d in det], [len(g) for g in gt])
        assert em.game(det, gt, dims, 0) == mae
        levels = [em.game(det, gt, dims, L) for L in range(5)]
        assert all(a <= b for a, b in zip(levels, levels[1:]))

    def test_negative_level(self):
        with pytest.raises(ValueError):
            em.game([], [], [], -1)
