import numpy as np
import pytest

from mammograph import ign
from mammograph.landmarks import LandmarkSet
from mammograph.numcore import Param, grad_check, sigmoid


def lm(points, view="cc"):
    return LandmarkSet(view, np.asarray(points, dtype=float))


class TestCrossAdjacency:
    def test_identical_sets_s1_identity(self):
        pts = [[0, 0], [10, 0], [20, 0]]
        cross = ign.build_cross_adjacency(lm(pts), lm(pts), 1)
        assert np.array_equal(cross.j, np.eye(3))

    def test_identical_sets_s_n_all_ones(self):
        pts = [[0, 0], [10, 0], [20, 0]]
        cross = ign.build_cross_adjacency(lm(pts), lm(pts), 3)
        assert np.array_equal(cross.j, np.ones((3, 3)))

    def test_matches_exhaustive_sort_oracle(self):
        rng = np.random.default_rng(31)
        a = rng.uniform(0, 50, size=(8, 2))
        b = a + rng.normal(0, 3, size=(8, 2))
        cross = ign.build_cross_adjacency(lm(a), lm(b), 3)
        expect = np.zeros((8, 8))
        for i in range(8):
            d = [(((a[i] - b[j]) ** 2).sum(), j) for j in range(8)]
            d.sort()
            for _, j in d[:3]:
                expect[i, j] = 1.0
        assert np.array_equal(cross.j, expect)

    def test_row_sums_equal_s(self):
        rng = np.random.default_rng(32)
        a = rng.uniform(0, 30, size=(6, 2))
        cross = ign.build_cross_adjacency(lm(a), lm(a[::-1].copy()), 2)
        assert np.array_equal(cross.j.sum(axis=1), np.full(6, 2.0))

    def test_s_out_of_range(self):
        pts = [[0, 0], [5, 5]]
        with pytest.raises(ValueError):
            ign.build_cross_adjacency(lm(pts), lm(pts), 3)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            ign.build_cross_adjacency(lm([[0, 0]]), lm([[0, 0], [1, 1]]), 1)


class TestAugment:
    def test_single_node(self):
        cross = ign.CrossViewAdjacency(np.array([[1.0]]), 1)
        out = ign.augment_inception(cross)
        assert np.array_equal(out.jhat, np.ones((2, 2)))

    def test_no_cross_links_gives_identity(self):
        cross = ign.CrossViewAdjacency(np.zeros((3, 3)), 1)
        out = ign.augment_inception(cross)
        assert np.array_equal(out.jhat, np.eye(6))

    def test_symmetry_and_degrees(self):
        rng = np.random.default_rng(33)
        a = rng.uniform(0, 40, size=(7, 2))
        b = a + rng.normal(0, 2, size=(7, 2))
        cross = ign.build_cross_adjacency(lm(a), lm(b), 4)
        out = ign.augment_inception(cross)
        assert np.array_equal(out.jhat, out.jhat.T)
        assert np.array_equal(np.diag(out.jhat), np.ones(14))
        # rows carrying the J block have degree exactly 1 + s
        assert np.array_equal(out.jhat[:7].sum(axis=1), np.full(7, 5.0))

    def test_no_self_loop_mode(self):
        cross = ign.CrossViewAdjacency(np.eye(2), 1)
        out = ign.augment_inception(cross, self_loops=False)
        assert np.array_equal(np.diag(out.jhat), np.zeros(4))


class TestInceptionConv:
    def test_identity_adjacency_zero_weight(self):
        conv = ign.InceptionConv([[Param("w", np.zeros((2, 2)))]], (1,))
        jh = ign.InceptionAdjacency(np.eye(4), 1, 2)
        z, _ = conv.forward(np.ones((4, 2)), [jh])
        assert np.array_equal(z, np.full((4, 2), 0.5))

    def test_single_branch_hand_computation(self):
        conv = ign.InceptionConv([[Param("w", np.eye(1))]], (1,))
        jh = ign.InceptionAdjacency(np.ones((2, 2)), 1, 1)
        a, b = 0.7, -0.4
        z, _ = conv.forward(np.array([[a], [b]]), [jh])
        expect = float(sigmoid(np.array([a + b]))[0])
        assert z[0, 0] == pytest.approx(expect, abs=1e-15)
        assert z[1, 0] == pytest.approx(expect, abs=1e-15)

    def test_zero_weight_branch_is_inert(self):
        rng = np.random.default_rng(34)
        w = 0.5 * rng.standard_normal((2, 2))
        jh1 = ign.InceptionAdjacency(np.eye(6), 1, 3)
        jh3 = ign.InceptionAdjacency(rng.integers(0, 2, (6, 6)).astype(float), 3, 3)
        x = rng.standard_normal((6, 2))
        one = ign.InceptionConv([[Param("w", w.copy())]], (1,))
        two = ign.InceptionConv(
            [[Param("w1", w.copy()), Param("w3", np.zeros((2, 2)))]], (1, 3))
        za, _ = one.forward(x, [jh1])
        zb, _ = two.forward(x, [jh1, jh3])
        assert np.array_equal(za, zb)

    def test_branch_additivity_of_preactivation(self):
        rng = np.random.default_rng(35)
        c = 3
        banks = [Param("w1", rng.standard_normal((c, c))),
                 Param("w3", rng.standard_normal((c, c)))]
        conv = ign.InceptionConv([banks], (1, 3))
        jh1 = ign.InceptionAdjacency(np.eye(8), 1, 4)
        jh3 = ign.InceptionAdjacency(rng.integers(0, 2, (8, 8)).astype(float), 3, 4)
        z = rng.standard_normal((8, c))
        total = conv.pre_activation(z, [jh1, jh3], banks)
        parts = (conv.pre_activation(z, [jh1], banks[:1])
                 + conv.pre_activation(z, [jh3], banks[1:]))
        assert np.max(np.abs(total - parts)) < 1e-12

    def test_misaligned_branches_rejected(self):
        conv = ign.InceptionConv([[Param("w", np.eye(2))]], (1,))
        jh3 = ign.InceptionAdjacency(np.eye(4), 3, 2)
        with pytest.raises(ValueError):
            conv.forward(np.zeros((4, 2)), [jh3])
        with pytest.raises(ValueError):
            ign.InceptionConv([[Param("w", np.eye(2))]], (3, 1))

    def test_output_open_interval(self):
        rng = np.random.default_rng(36)
        conv = ign.InceptionConv([[Param("w", rng.standard_normal((2, 2)) * 3)]], (1,))
        jh = ign.InceptionAdjacency(np.eye(4) + np.fliplr(np.eye(4)), 1, 2)
        z, _ = conv.forward(rng.standard_normal((4, 2)) * 4, [jh])
        assert (z > 0).all() and (z < 1).all()

    def test_gradients_two_layers_three_branches(self):
        rng = np.random.default_rng(37)
        c, n = 2, 4
        sizes = (1, 2, 3)
        layers = [[Param(f"w{l}{s}", 0.5 * rng.standard_normal((c, c))) for s in sizes]
                  for l in range(2)]
        conv = ign.InceptionConv(layers, sizes)
        a = rng.uniform(0, 20, size=(n, 2))
        b = a + rng.normal(0, 2, size=(n, 2))
        jhats = [ign.augment_inception(ign.build_cross_adjacency(lm(a), lm(b), s))
                 for s in sizes]
        x = Param("x", rng.standard_normal((2 * n, c)))
        wout = rng.standard_normal((2 * n, c))

        def loss():
            z, _ = conv.forward(x.value, jhats)
            return float((z * wout).sum())

        z, caches = conv.forward(x.value, jhats)
        x.grad[:] = conv.backward(wout, jhats, caches)
        params = [x] + [w for bank in layers for w in bank]
        reports = grad_check(loss, params)
        assert all(r.passed for r in reports), [(r.param_name, r.max_rel_error) for r in reports]
