import numpy as np
import pytest

from mammograph import fusion, bgn
from mammograph import nodemap as nm
from mammograph.landmarks import LandmarkSet
from mammograph.numcore import Param, grad_check


def random_rm(rng, n, h, w, k=1):
    pts = np.stack([rng.uniform(0, w, size=n), rng.uniform(0, h, size=n)], axis=1)
    return nm.ReverseMap(nm.build_assignment(LandmarkSet("cc", pts), h, w, k))


class TestAttention:
    def test_zero_weight_half(self):
        rng = np.random.default_rng(40)
        head = fusion.AttentionHead(Param("wi", np.zeros((4, 1))))
        fhat, _ = head.forward(rng.standard_normal((10, 4)))
        assert np.array_equal(fhat, np.full((10, 1), 0.5))

    def test_zero_features_half(self):
        rng = np.random.default_rng(41)
        head = fusion.AttentionHead(Param("wi", rng.standard_normal((4, 1))))
        fhat, _ = head.forward(np.zeros((7, 4)))
        assert np.array_equal(fhat, np.full((7, 1), 0.5))

    def test_per_pixel_dot_oracle(self):
        rng = np.random.default_rng(42)
        wi = Param("wi", rng.standard_normal((3, 1)))
        head = fusion.AttentionHead(wi)
        fi = rng.standard_normal((6, 3))
        fhat, _ = head.forward(fi)
        from mammograph.numcore import sigmoid
        for p in range(6):
            assert fhat[p, 0] == pytest.approx(
                float(sigmoid(np.array([fi[p] @ wi.value[:, 0]]))[0]), abs=1e-14)
        assert ((fhat > 0) & (fhat < 1)).all()

    def test_width_mismatch(self):
        head = fusion.AttentionHead(Param("wi", np.zeros((4, 1))))
        with pytest.raises(ValueError):
            head.forward(np.zeros((5, 3)))


class TestFusionModes:
    def test_full_passthrough(self):
        rng = np.random.default_rng(43)
        c = 3
        wf = Param("wf", np.concatenate([np.eye(c), np.zeros((c, c))], axis=1))
        layer = fusion.FusionLayer("full", wf)
        fe = rng.standard_normal((8, c))
        fb = rng.standard_normal((8, c))
        y, _ = layer.forward(fe, fb=fb, fhat=np.ones((8, 1)))
        assert np.allclose(y, fe, atol=1e-14)
        y0, _ = layer.forward(fe, fb=fb, fhat=np.zeros((8, 1)))
        assert np.allclose(y0, np.zeros_like(fe), atol=1e-14)

    def test_full_concat_oracle(self):
        rng = np.random.default_rng(44)
        c = 2
        wf = Param("wf", rng.standard_normal((c, 2 * c)))
        layer = fusion.FusionLayer("full", wf)
        fe = rng.standard_normal((5, c))
        fb = rng.standard_normal((5, c))
        fhat = rng.random((5, 1))
        y, _ = layer.forward(fe, fb=fb, fhat=fhat)
        for p in range(5):
            concat = np.concatenate([fhat[p, 0] * fe[p], fb[p]])
            assert np.allclose(y[p], wf.value @ concat, atol=1e-13)

    def test_bgn_only_selectors(self):
        rng = np.random.default_rng(45)
        c = 3
        fe = rng.standard_normal((6, c))
        fb = rng.standard_normal((6, c))
        left = fusion.FusionLayer(
            "bgn_only", Param("wf", np.concatenate([np.eye(c), np.zeros((c, c))], axis=1)))
        right = fusion.FusionLayer(
            "bgn_only", Param("wf", np.concatenate([np.zeros((c, c)), np.eye(c)], axis=1)))
        ya, _ = left.forward(fe, fb=fb)
        yb, _ = right.forward(fe, fb=fb)
        assert np.allclose(ya, fe, atol=1e-14)
        assert np.allclose(yb, fb, atol=1e-14)

    def test_ign_only(self):
        rng = np.random.default_rng(46)
        c = 3
        fe = rng.standard_normal((6, c))
        layer = fusion.FusionLayer("ign_only", Param("wf", np.eye(c)))
        y1, _ = layer.forward(fe, fhat=np.ones((6, 1)))
        assert np.allclose(y1, fe, atol=1e-14)
        y0, _ = layer.forward(fe, fhat=np.zeros((6, 1)))
        assert np.allclose(y0, 0.0, atol=1e-14)

    def test_shape_validation(self):
        c = 2
        with pytest.raises(ValueError):
            fusion.FusionLayer("full", Param("wf", np.zeros((c, c))))
        layer = fusion.FusionLayer("full", Param("wf", np.zeros((c, 2 * c))))
        with pytest.raises(ValueError):
            layer.forward(np.zeros((4, c)), fb=np.zeros((5, c)), fhat=np.zeros((4, 1)))
        with pytest.raises(ValueError):
            layer.forward(np.zeros((4, c)), fb=np.zeros((4, c)), fhat=np.zeros((4, 2)))

    def test_linearity_in_fb(self):
        rng = np.random.default_rng(47)
        c = 3
        layer = fusion.FusionLayer("full", Param("wf", rng.standard_normal((c, 2 * c))))
        fe = rng.standard_normal((7, c))
        fb = rng.standard_normal((7, c))
        fhat = rng.random((7, 1))
        y0, _ = layer.forward(fe, fb=np.zeros_like(fb), fhat=fhat)
        y1, _ = layer.forward(fe, fb=fb, fhat=fhat)
        for alpha in (0.25, 2.0, -1.5):
            ya, _ = layer.forward(fe, fb=alpha * fb, fhat=fhat)
            assert np.allclose(ya - y0, alpha * (y1 - y0), atol=1e-10)

    @pytest.mark.parametrize("mode", ["full", "bgn_only", "ign_only"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(48)
        c = 3
        shape = (c, 2 * c) if mode != "ign_only" else (c, c)
        wf = Param("wf", rng.standard_normal(shape))
        wi = Param("wi", rng.standard_normal((c, 1)))
        layer = fusion.FusionLayer(mode, wf)
        head = fusion.AttentionHead(wi)
        fe = Param("fe", rng.standard_normal((6, c)))
        fb = Param("fb", rng.standard_normal((6, c)))
        fi = Param("fi", rng.standard_normal((6, c)))
        wout = rng.standard_normal((6, c))

        def run():
            fhat, ac = head.forward(fi.value)
            kwargs = {}
            if mode != "ign_only":
                kwargs["fb"] = fb.value
            if mode != "bgn_only":
                kwargs["fhat"] = fhat
            y, fc = layer.forward(fe.value, **kwargs)
            return y, ac, fc

        def loss():
            y, *_ = run()
            return float((y * wout).sum())

        y, ac, fc = run()
        dfe, dfb, dfhat = layer.backward(wout, fc)
        fe.grad[:] = dfe
        params = [wf, fe]
        if mode != "bgn_only":
            fi.grad[:] = head.backward(dfhat, ac)
            params += [wi, fi]
        if mode != "ign_only":
            fb.grad[:] = dfb
            params.append(fb)
        reports = grad_check(loss, params)
        assert all(r.passed for r in reports), [(r.param_name, r.max_rel_error) for r in reports]


class TestPerLevel:
    def test_single_level_identical_to_direct(self):
        rng = np.random.default_rng(49)
        c = 2
        layer = fusion.FusionLayer("full", Param("wf", rng.standard_normal((c, 2 * c))))
        fe = rng.standard_normal((9, c))
        fb = rng.standard_normal((9, c))
        fhat = rng.random((9, 1))

        def enhance(lv):
            y, _ = layer.forward(lv["fe"], fb=lv["fb"], fhat=lv["fhat"])
            return y

        [y] = fusion.enhance_per_level([{"fe": fe, "fb": fb, "fhat": fhat}], enhance)
        direct, _ = layer.forward(fe, fb=fb, fhat=fhat)
        assert y.tobytes() == direct.tobytes()

    def test_two_identical_levels(self):
        rng = np.random.default_rng(50)
        c = 2
        layer = fusion.FusionLayer("ign_only", Param("wf", rng.standard_normal((c, c))))
        lv = {"fe": rng.standard_normal((4, c)), "fhat": rng.random((4, 1))}

        def enhance(level):
            y, _ = layer.forward(level["fe"], fhat=level["fhat"])
            return y

        ya, yb = fusion.enhance_per_level([lv, dict(lv)], enhance)
        assert np.array_equal(ya, yb)

    def test_inconsistent_channels_rejected(self):
        with pytest.raises(ValueError):
            fusion.enhance_per_level(
                [{"fe": np.zeros((4, 2))}, {"fe": np.zeros((4, 3))}], lambda lv: lv["fe"])


class TestVisualization:
    def test_zero_adjacency_flat(self):
        rng = np.random.default_rng(51)
        hb = bgn.augment_bipartite(np.zeros((3, 3)))
        rm = random_rm(rng, 3, 6, 6)
        img = fusion.visualize_correspondence(hb, rm, 0, np.arange(3, 6))
        assert np.array_equal(img, np.zeros((6, 6), dtype=np.uint8))

    def test_single_edge_highlights_partner_region(self):
        rng = np.random.default_rng(52)
        h = np.zeros((3, 3))
        h[0, 2] = 1.0  # CC node 0 <-> MLO node 2
        hb = bgn.augment_bipartite(h)
        rm = random_rm(rng, 3, 8, 8, k=1)  # map for the MLO view
        img = fusion.visualize_correspondence(hb, rm, 0, np.arange(3, 6))
        # oracle: exactly node 2's Voronoi cell is bright
        cell = (rm.assignment.indices[:, 0] == 2).reshape(8, 8)
        assert (img[cell] == 255).all()
        assert (img[~cell] == 0).all()

    def test_bad_node_index(self):
        rng = np.random.default_rng(53)
        hb = bgn.augment_bipartite(np.zeros((2, 2)))
        rm = random_rm(rng, 2, 4, 4)
        with pytest.raises(ValueError):
            fusion.visualize_correspondence(hb, rm, 9, np.arange(2, 4))

    def test_minmax_range(self):
        rng = np.random.default_rng(54)
        img = fusion.minmax_to_u8(rng.standard_normal((5, 5)))
        assert img.min() == 0 and img.max() == 255


class TestResponseMap:
    def test_single_channel(self):
        f = np.linspace(0, 1, 16).reshape(16, 1)
        img = fusion.response_map(f, 4, 4)
        assert img.ravel()[0] == 0 and img.ravel()[-1] == 255

    def test_constant(self):
        img = fusion.response_map(np.full((16, 3), 2.0), 4, 4)
        assert np.array_equal(img, np.zeros((4, 4), dtype=np.uint8))

    def test_per_pixel_max_oracle(self):
        rng = np.random.default_rng(55)
        f = rng.standard_normal((12, 5))
        img = fusion.response_map(f, 3, 4)
        raw = f.max(axis=1).reshape(3, 4)
        expect = fusion.minmax_to_u8(raw)
        assert np.array_equal(img, expect)


def test_overlay_shapes():
    gray = np.zeros((4, 4), dtype=np.uint8)
    att = np.full((4, 4), 255, dtype=np.uint8)
    rgb = fusion.overlay_attention(gray, att)
    assert rgb.shape == (4, 4, 3)
    assert (rgb[..., 0] == 128).all() and (rgb[..., 1] == 0).all()
