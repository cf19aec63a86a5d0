import numpy as np
import pytest

from fpcascade.engine import gradient_check
from fpcascade.errors import ConfigInvalid, ShapeMismatch
from fpcascade.networks import (
    NetConfig,
    build_gsm,
    build_gsm_encoder,
    build_lrm,
    encoder_param_names,
    forward_segment,
    make_gsm_input,
    make_lrm_input,
)


def _conv_params(cin, cout, k):
    return cout * cin * k * k + cout


def expected_params(cfg, in_ch, residual):
    widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
    total, cin = 0, in_ch
    for w in widths:
        total += _conv_params(cin, w, 3) + _conv_params(w, w, 3)
        if residual and cin != w:
            total += _conv_params(cin, w, 1)
        cin = w
    for level in range(cfg.depth - 2, -1, -1):
        w = widths[level]
        total += _conv_params(widths[level + 1] + w, w, 3) + _conv_params(w, w, 3)
    return total + _conv_params(widths[0], 1, 1)


class TestConfig:
    @pytest.mark.parametrize("base, depth", [(8, 1), (1, 3)])
    def test_invalid(self, base, depth):
        with pytest.raises(ConfigInvalid):
            NetConfig(base, depth)

    def test_widths_double(self):
        assert NetConfig(4, 3).widths() == [4, 8, 16]


class TestShapes:
    @pytest.mark.parametrize("cfg", [NetConfig(2, 2), NetConfig(4, 3)])
    def test_gsm_output(self, cfg):
        rng = np.random.default_rng(0)
        net = build_gsm(cfg)
        prob = forward_segment(net, rng.normal(size=(2, 3, 16, 16)))
        assert prob.shape == (2, 16, 16)
        assert ((prob > 0) & (prob < 1)).all()

    def test_lrm_single_image(self):
        net = build_lrm(NetConfig(2, 2))
        prob = forward_segment(net, np.zeros((5, 8, 8)))
        assert prob.shape == (8, 8)

    def test_indivisible_extent(self):
        with pytest.raises(ShapeMismatch):
            forward_segment(build_gsm(NetConfig(2, 3)), np.zeros((3, 6, 6)))

    def test_wrong_channels(self):
        with pytest.raises(ShapeMismatch):
            forward_segment(build_gsm(NetConfig(2, 2)), np.zeros((5, 8, 8)))


class TestParameterCount:
    def test_small_gsm_by_hand(self):
        # l0 residual 3->2 with shortcut, l1 residual 2->4 with shortcut,
        # decoder 6->2 double conv, 1x1 head
        assert build_gsm(NetConfig(2, 2)).param_count() == 489

    @pytest.mark.parametrize("base, depth", [(2, 2), (4, 2), (4, 3), (8, 3), (3, 4)])
    def test_formula(self, base, depth):
        cfg = NetConfig(base, depth)
        assert build_gsm(cfg).param_count() == expected_params(cfg, 3, True)
        assert build_lrm(cfg).param_count() == expected_params(cfg, 5, False)


class TestBehaviour:
    def test_zero_head_gives_half(self):
        net = build_gsm(NetConfig(2, 2), zero_head=True)
        prob = forward_segment(net, np.random.default_rng(1).normal(size=(3, 8, 8)))
        assert (prob == 0.5).all()

    def test_seed_determines_init(self):
        a, b = build_gsm(NetConfig(2, 2), seed=5), build_gsm(NetConfig(2, 2), seed=5)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_encoder_loads_into_gsm(self):
        cfg = NetConfig(4, 3)
        enc = build_gsm_encoder(cfg, seed=9)
        net = build_gsm(cfg, seed=1)
        assert encoder_param_names(net) == sorted(enc.params)
        assert net.load_state(enc.state()) == []
        for k in enc.params:
            np.testing.assert_array_equal(net.params[k].data, enc.params[k].data)

    def test_encoder_matches_gsm_init_for_same_seed(self):
        enc = build_gsm_encoder(NetConfig(4, 2), seed=3)
        net = build_gsm(NetConfig(4, 2), seed=3)
        for k in enc.params:
            np.testing.assert_array_equal(net.params[k].data, enc.params[k].data)

    def test_duplicated_pet_channels_are_interchangeable(self):
        rng = np.random.default_rng(2)
        net = build_gsm(NetConfig(2, 2))
        x = make_gsm_input(rng.random((8, 8)), rng.random((8, 8)))
        np.testing.assert_array_equal(x[0], x[1])
        swapped = x[[1, 0, 2]]
        np.testing.assert_array_equal(forward_segment(net, x), forward_segment(net, swapped))


class TestInputs:
    def test_gsm_stack(self):
        pet, ct = np.full((4, 4), 1.0), np.full((4, 4), 2.0)
        x = make_gsm_input(pet, ct)
        assert x.shape == (3, 4, 4)
        assert x[:, 0, 0].tolist() == [1.0, 1.0, 2.0]

    def test_lrm_binary_from_threshold(self):
        prob = np.array([[0.49, 0.5], [0.51, 0.0]])
        x = make_lrm_input(np.zeros((2, 2)), np.zeros((2, 2)), prob)
        assert x.shape == (5, 2, 2)
        assert x[4].tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            make_gsm_input(np.zeros((4, 4)), np.zeros((4, 5)))


class TestGradients:
    @pytest.mark.parametrize("builder, ch", [(build_gsm, 3), (build_lrm, 5)])
    def test_gradient_check(self, builder, ch):
        rng = np.random.default_rng(7)
        net = builder(NetConfig(4, 2), seed=7)
        inputs = {"image": rng.normal(size=(2, ch, 8, 8)),
                  "target": (rng.random((2, 1, 8, 8)) > 0.7).astype(float)}
        res = gradient_check(net, inputs, n_coords=30, rng=rng)
        assert res.checked >= 20
        assert res.max_rel_error < 1e-4
