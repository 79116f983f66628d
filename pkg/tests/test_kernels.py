import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinydet_kit.kernels import (
    BneckWeights,
    ConvWeights,
    SEWeights,
    Tensor,
    avgpool2,
    bneck_forward,
    conv2d,
    fuse_pool_into_conv,
    hard_sigmoid,
    hswish,
    impulse_response_centroid,
    relu,
    scconv_forward,
    se_forward,
    tensor,
    tensor_from_blob,
    tensor_to_blob,
)


def rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


class TestTensor:
    def test_validation(self):
        with pytest.raises(ValueError, match="rank 4"):
            tensor([[1.0, 2.0]])
        with pytest.raises(ValueError, match=">= 1"):
            Tensor(np.zeros((1, 0, 2, 2)))

    def test_immutable(self):
        t = tensor(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 5.0

    def test_source_array_not_aliased(self):
        src = np.ones((1, 1, 2, 2))
        t = Tensor(src)
        src[0, 0, 0, 0] = 9.0
        assert t.data[0, 0, 0, 0] == 1.0

    def test_blob_round_trip(self):
        rng = np.random.default_rng(0)
        t = tensor(rand(rng, 2, 3, 4, 5))
        again = tensor_from_blob(tensor_to_blob(t))
        assert again.shape == t.shape
        assert np.array_equal(again.data, t.data)

    def test_blob_errors(self):
        with pytest.raises(ValueError, match="too short"):
            tensor_from_blob(b"\x00" * 8)
        t = tensor(np.ones((1, 1, 2, 2)))
        blob = tensor_to_blob(t)
        with pytest.raises(ValueError, match="payload"):
            tensor_from_blob(blob[:-8])


class TestConvWeights:
    def test_default_pad(self):
        w = ConvWeights(weight=np.ones((1, 1, 5, 5)))
        assert w.pad == 2
        assert ConvWeights(weight=np.ones((1, 1, 1, 1))).pad == 0

    def test_group_divisibility(self):
        with pytest.raises(ValueError, match="groups"):
            ConvWeights(weight=np.ones((3, 1, 1, 1)), groups=2)

    def test_bias_shape(self):
        with pytest.raises(ValueError, match="bias"):
            ConvWeights(weight=np.ones((2, 1, 1, 1)), bias=np.ones(3))


class TestConv2d:
    def test_1x1_identity(self):
        rng = np.random.default_rng(1)
        x = tensor(rand(rng, 1, 1, 4, 4))
        w = ConvWeights(weight=np.ones((1, 1, 1, 1)))
        assert np.array_equal(conv2d(x, w).data, x.data)

    def test_ones_kernel_border_counts(self):
        x = tensor(np.ones((1, 1, 3, 3)))
        w = ConvWeights(weight=np.ones((1, 1, 3, 3)))
        out = conv2d(x, w).data[0, 0]
        expected = np.array([[4.0, 6.0, 4.0],
                             [6.0, 9.0, 6.0],
                             [4.0, 6.0, 4.0]])
        assert np.array_equal(out, expected)

    def test_strided_output_size(self):
        x = tensor(np.ones((1, 1, 4, 4)))
        w = ConvWeights(weight=np.ones((1, 1, 3, 3)), stride=2)
        assert conv2d(x, w).shape == (1, 1, 2, 2)

    def test_channel_mismatch(self):
        x = tensor(np.ones((1, 2, 4, 4)))
        w = ConvWeights(weight=np.ones((1, 1, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, w)

    def test_bias_is_added(self):
        x = tensor(np.zeros((1, 1, 3, 3)))
        w = ConvWeights(weight=np.ones((2, 1, 1, 1)), bias=np.array([1.5, -2.0]))
        out = conv2d(x, w).data
        assert np.array_equal(out[0, 0], np.full((3, 3), 1.5))
        assert np.array_equal(out[0, 1], np.full((3, 3), -2.0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 3, 5]),
           st.integers(1, 3), st.integers(1, 3), st.integers(5, 10))
    def test_linearity(self, seed, k, cin, cout, n):
        rng = np.random.default_rng(seed)
        x = rand(rng, 1, cin, n, n)
        y = rand(rng, 1, cin, n, n)
        a, b = rng.uniform(-2, 2, size=2)
        w = ConvWeights(weight=rand(rng, cout, cin, k, k))
        lhs = conv2d(tensor(a * x + b * y), w).data
        rhs = a * conv2d(tensor(x), w).data + b * conv2d(tensor(y), w).data
        scale = np.abs(rhs).max() or 1.0
        assert np.abs(lhs - rhs).max() / scale <= 1e-9

    def test_groups_equal_independent_convs(self):
        rng = np.random.default_rng(7)
        groups, cig, ocpg, n = 3, 2, 2, 6
        x = rand(rng, 2, groups * cig, n, n)
        w = rand(rng, groups * ocpg, cig, 3, 3)
        grouped = conv2d(tensor(x), ConvWeights(weight=w, groups=groups)).data
        pieces = []
        for g in range(groups):
            xs = x[:, g * cig:(g + 1) * cig]
            ws = w[g * ocpg:(g + 1) * ocpg]
            pieces.append(conv2d(tensor(xs), ConvWeights(weight=ws)).data)
        assert np.array_equal(grouped, np.concatenate(pieces, axis=1))


class TestAvgPool:
    def test_1x2(self):
        x = tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        # height 1 is too small for a 2x2 window
        with pytest.raises(ValueError):
            avgpool2(x)
        x = tensor(np.array([[1.0, 3.0], [1.0, 3.0]]).reshape(1, 1, 2, 2))
        assert avgpool2(x).data[0, 0, 0, 0] == 2.0

    def test_constant(self):
        x = tensor(np.full((1, 2, 5, 7), 3.25))
        out = avgpool2(x)
        assert out.shape == (1, 2, 4, 6)
        assert np.array_equal(out.data, np.full((1, 2, 4, 6), 3.25))

    def test_2x2_mean(self):
        x = tensor(np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(1, 1, 2, 2))
        assert avgpool2(x).data.reshape(()) == 3.0


class TestFusion:
    def test_k1_quarter_kernel(self):
        w = ConvWeights(weight=np.full((1, 1, 1, 1), 0.8), stride=2, pad=0)
        fused = fuse_pool_into_conv(w)
        assert fused.kernel == 2
        assert np.array_equal(fused.weight, np.full((1, 1, 2, 2), 0.2))

    def test_random_3x3_on_24(self):
        rng = np.random.default_rng(3)
        x = tensor(rand(rng, 1, 2, 24, 24))
        w = ConvWeights(weight=rand(rng, 3, 2, 3, 3), stride=2, pad=0)
        sequential = conv2d(avgpool2(x), w).data
        fused = conv2d(x, fuse_pool_into_conv(w)).data
        assert sequential.shape == fused.shape
        assert np.abs(sequential - fused).max() <= 1e-9

    def test_bias_preserved(self):
        bias = np.array([0.25, -1.0])
        w = ConvWeights(weight=np.ones((2, 1, 3, 3)), bias=bias, stride=2, pad=0)
        fused = fuse_pool_into_conv(w)
        assert np.array_equal(fused.bias, bias)

    @pytest.mark.parametrize("k", [1, 3, 5])
    @pytest.mark.parametrize("n", [8, 16, 30])
    def test_equivalence_spot(self, k, n):
        rng = np.random.default_rng(100 * k + n)
        x = tensor(rand(rng, 1, 1, n, n))
        w = ConvWeights(weight=rand(rng, 1, 1, k, k),
                        bias=rand(rng, 1), stride=2, pad=0)
        sequential = conv2d(avgpool2(x), w).data
        fused = conv2d(x, fuse_pool_into_conv(w)).data
        assert np.abs(sequential - fused).max() <= 1e-9

    def test_requires_stride_2(self):
        w = ConvWeights(weight=np.ones((1, 1, 3, 3)), stride=1, pad=0)
        with pytest.raises(ValueError, match="stride 2"):
            fuse_pool_into_conv(w)

    def test_requires_unpadded(self):
        # zero padding does not commute with pooling at the border, so a
        # same-padded conv cannot be fused exactly
        w = ConvWeights(weight=np.ones((1, 1, 3, 3)), stride=2)
        with pytest.raises(ValueError, match="unpadded"):
            fuse_pool_into_conv(w)

    def test_padded_pair_matches_on_interior_only(self):
        # documents why padded weights are rejected: the boundary ring differs
        rng = np.random.default_rng(5)
        x = tensor(rand(rng, 1, 1, 12, 12))
        w = rand(rng, 1, 1, 3, 3)
        sequential = conv2d(avgpool2(x), ConvWeights(weight=w, stride=2)).data
        fused_kernel = np.zeros((1, 1, 4, 4))
        for a in (0, 1):
            for b in (0, 1):
                fused_kernel[:, :, a:a + 3, b:b + 3] += w / 4.0
        fused = conv2d(x, ConvWeights(weight=fused_kernel, stride=2, pad=1)).data
        inner = np.s_[:, :, 1:-1, 1:-1]
        assert np.abs(sequential[inner] - fused[inner]).max() <= 1e-12
        assert np.abs(sequential - fused).max() > 1e-3


class TestSCConv:
    @staticmethod
    def _weights(rng, c, g, n=6):
        x = tensor(rand(rng, 1, c, n, n))
        dw = ConvWeights(weight=rand(rng, c, 1, 3, 3),
                         bias=rand(rng, c), groups=c)
        pw = ConvWeights(weight=rand(rng, c, c // g, 1, 1),
                         bias=rand(rng, c), groups=g)
        return x, dw, pw

    def test_g1_is_depthwise_separable(self):
        rng = np.random.default_rng(11)
        x, dw, pw = self._weights(rng, 6, 1)
        assert np.array_equal(scconv_forward(x, dw, pw).data,
                              conv2d(conv2d(x, dw), pw).data)

    def test_block_diagonal_oracle(self):
        # grouped pointwise == dense pointwise whose off-block weights are zero
        rng = np.random.default_rng(12)
        c, g = 4, 2
        x, dw, pw = self._weights(rng, c, g)
        dense = np.zeros((c, c, 1, 1))
        per = c // g
        for oc in range(c):
            grp = oc // (c // g)
            dense[oc, grp * per:(grp + 1) * per] = pw.weight[oc]
        dense_pw = ConvWeights(weight=dense, bias=pw.bias, groups=1)
        grouped = scconv_forward(x, dw, pw).data
        masked = conv2d(conv2d(x, dw), dense_pw).data
        scale = np.abs(masked).max() or 1.0
        assert np.abs(grouped - masked).max() / scale <= 1e-12

    @pytest.mark.parametrize("c", [2, 6, 12])
    def test_all_divisors_match_oracle(self, c):
        rng = np.random.default_rng(13 + c)
        for g in (d for d in range(1, c + 1) if c % d == 0):
            x, dw, pw = self._weights(rng, c, g)
            dense = np.zeros((c, c, 1, 1))
            per = c // g
            for oc in range(c):
                grp = oc // per
                dense[oc, grp * per:(grp + 1) * per] = pw.weight[oc]
            grouped = scconv_forward(x, dw, pw).data
            masked = conv2d(conv2d(x, dw),
                            ConvWeights(weight=dense, bias=pw.bias)).data
            scale = np.abs(masked).max() or 1.0
            assert np.abs(grouped - masked).max() / scale <= 1e-12

    def test_zero_weights_zero_output(self):
        x = tensor(np.random.default_rng(14).uniform(size=(1, 4, 5, 5)))
        dw = ConvWeights(weight=np.random.default_rng(15).uniform(
            size=(4, 1, 3, 3)), groups=4)
        pw = ConvWeights(weight=np.zeros((4, 2, 1, 1)), groups=2)
        assert np.array_equal(scconv_forward(x, dw, pw).data,
                              np.zeros((1, 4, 5, 5)))

    def test_divisibility_error(self):
        rng = np.random.default_rng(16)
        x = tensor(rand(rng, 1, 4, 5, 5))
        dw = ConvWeights(weight=rand(rng, 4, 1, 3, 3), groups=4)
        pw = ConvWeights(weight=rand(rng, 3, 1, 1, 1), groups=3)
        with pytest.raises(ValueError, match="divide"):
            scconv_forward(x, dw, pw)

    def test_dw_must_be_depthwise(self):
        rng = np.random.default_rng(17)
        x = tensor(rand(rng, 1, 4, 5, 5))
        dw = ConvWeights(weight=rand(rng, 4, 4, 3, 3))
        pw = ConvWeights(weight=rand(rng, 4, 4, 1, 1))
        with pytest.raises(ValueError, match="depthwise"):
            scconv_forward(x, dw, pw)


class TestActivations:
    def test_hard_sigmoid_anchors(self):
        t = np.array([-4.0, -3.0, 0.0, 3.0, 4.0])
        assert np.array_equal(hard_sigmoid(t), [0.0, 0.0, 0.5, 1.0, 1.0])

    def test_hswish(self):
        t = np.array([-3.0, 0.0, 3.0, 6.0])
        assert np.array_equal(hswish(t), [0.0, 0.0, 3.0, 6.0])

    def test_relu(self):
        assert np.array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])


class TestSE:
    def test_zero_weights_halve_input(self):
        c, mid = 6, 2
        se = SEWeights(np.zeros((mid, c)), np.zeros(mid),
                       np.zeros((c, mid)), np.zeros(c))
        x = tensor(np.random.default_rng(20).uniform(size=(2, c, 4, 4)))
        assert np.array_equal(se_forward(x, se).data, x.data / 2.0)

    def test_gate_saturates_at_one(self):
        c, mid = 3, 1
        se = SEWeights(np.zeros((mid, c)), np.zeros(mid),
                       np.zeros((c, mid)), np.full(c, 3.0))
        x = tensor(np.random.default_rng(21).uniform(size=(1, c, 4, 4)))
        assert np.array_equal(se_forward(x, se).data, x.data)

    def test_scalar_hand_computation(self):
        # single channel, constant 2.0 input, fc1 = [[0.5]], b1 = [0.1],
        # fc2 = [[-1.0]], b2 = [0.4]:
        #   gap = 2.0; hidden = relu(1.1) = 1.1; gate = hsig(-1.1 + 0.4)
        #   = (-0.7 + 3)/6 = 0.3833...; out = 2.0 * gate
        se = SEWeights(np.array([[0.5]]), np.array([0.1]),
                       np.array([[-1.0]]), np.array([0.4]))
        x = tensor(np.full((1, 1, 2, 2), 2.0))
        expected = 2.0 * ((0.5 * 2.0 + 0.1) * -1.0 + 0.4 + 3.0) / 6.0
        assert se_forward(x, se).data[0, 0, 0, 0] == pytest.approx(
            expected, rel=1e-15)

    def test_dimension_mismatch(self):
        se = SEWeights(np.zeros((2, 5)), np.zeros(2),
                       np.zeros((5, 2)), np.zeros(5))
        x = tensor(np.ones((1, 4, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            se_forward(x, se)


def _random_bneck(rng, cin, expansion, cout, kernel=3, stride=1, use_se=True,
                  nonlinearity="hswish"):
    expand = None
    if expansion != cin:
        expand = ConvWeights(weight=rand(rng, expansion, cin, 1, 1))
    dw = ConvWeights(weight=rand(rng, expansion, 1, kernel, kernel),
                     stride=stride, groups=expansion)
    se = None
    if use_se:
        mid = max(expansion // 4, 1)
        se = SEWeights(rand(rng, mid, expansion), rand(rng, mid),
                       rand(rng, expansion, mid), rand(rng, expansion))
    project = ConvWeights(weight=rand(rng, cout, expansion, 1, 1))
    return BneckWeights(depthwise=dw, project=project, expand=expand, se=se,
                        nonlinearity=nonlinearity)


class TestBneck:
    def test_pure_residual_with_zero_weights(self):
        c = 4
        params = BneckWeights(
            depthwise=ConvWeights(weight=np.zeros((c, 1, 3, 3)), groups=c),
            project=ConvWeights(weight=np.zeros((c, c, 1, 1))),
            expand=None, se=None, nonlinearity="relu")
        x = tensor(np.random.default_rng(30).uniform(size=(1, c, 6, 6)))
        assert np.array_equal(bneck_forward(x, params).data, x.data)

    def test_no_residual_when_strided(self):
        c = 4
        params = BneckWeights(
            depthwise=ConvWeights(weight=np.zeros((c, 1, 3, 3)), stride=2,
                                  groups=c),
            project=ConvWeights(weight=np.zeros((c, c, 1, 1))),
            expand=None, se=None, nonlinearity="relu")
        x = tensor(np.ones((1, c, 6, 6)))
        out = bneck_forward(x, params)
        assert out.shape == (1, c, 3, 3)
        assert np.array_equal(out.data, np.zeros((1, c, 3, 3)))

    def test_expansion_stage_bypassed(self):
        rng = np.random.default_rng(31)
        params = _random_bneck(rng, cin=4, expansion=4, cout=6)
        assert params.expand is None
        x = tensor(rand(rng, 1, 4, 6, 6))
        manual = conv2d(x, params.depthwise)
        manual = Tensor(hswish(manual.data))
        manual = se_forward(manual, params.se)
        manual = conv2d(manual, params.project)
        assert np.array_equal(bneck_forward(x, params).data, manual.data)

    def test_composition_oracle_bit_identical(self):
        rng = np.random.default_rng(32)
        params = _random_bneck(rng, cin=3, expansion=8, cout=3, kernel=3,
                               stride=1, use_se=True)
        x = tensor(rand(rng, 2, 3, 7, 7))
        out = bneck_forward(x, params)
        step = Tensor(hswish(conv2d(x, params.expand).data))
        step = Tensor(hswish(conv2d(step, params.depthwise).data))
        step = se_forward(step, params.se)
        step = conv2d(step, params.project)
        expected = step.data + x.data  # stride 1, cin == cout
        assert np.array_equal(out.data, expected)

    def test_pool_before_depthwise(self):
        rng = np.random.default_rng(33)
        params = _random_bneck(rng, cin=3, expansion=6, cout=5, stride=2,
                               use_se=False, nonlinearity="relu")
        pooled = BneckWeights(
            depthwise=params.depthwise, project=params.project,
            expand=params.expand, se=None, nonlinearity="relu",
            pool_before_depthwise=True)
        x = tensor(rand(rng, 1, 3, 8, 8))
        manual = Tensor(relu(conv2d(x, params.expand).data))
        manual = avgpool2(manual)
        manual = Tensor(relu(conv2d(manual, params.depthwise).data))
        manual = conv2d(manual, params.project)
        out = bneck_forward(x, pooled)
        assert out.shape == (1, 5, 4, 4)
        assert np.array_equal(out.data, manual.data)


def ones_conv(k, stride, cin=1, cout=1, pad=None):
    return ConvWeights(weight=np.ones((cout, cin, k, k)), stride=stride, pad=pad)


class TestImpulseCentroid:
    def test_symmetric_stride1_is_centered(self):
        w = ConvWeights(weight=np.array(
            [[[[1.0, 2.0, 1.0], [2.0, 5.0, 2.0], [1.0, 2.0, 1.0]]]]))
        dr, dc = impulse_response_centroid([w], 11, out_cell=(5, 5))
        assert abs(dr) <= 1e-12 and abs(dc) <= 1e-12

    def test_single_strided_conv_half_pixel(self):
        dr, dc = impulse_response_centroid([ones_conv(3, 2)], 16,
                                           out_cell=(4, 4))
        assert dr == pytest.approx(0.5, abs=1e-12)
        assert dc == pytest.approx(0.5, abs=1e-12)

    def test_pool_then_strided_conv_centered(self):
        stack = ["avgpool2", ones_conv(3, 2)]
        dr, dc = impulse_response_centroid(stack, 16, out_cell=(4, 4))
        assert abs(dr) <= 1e-9 and abs(dc) <= 1e-9

    def test_zero_response_raises(self):
        w = ConvWeights(weight=np.zeros((1, 1, 3, 3)), stride=2)
        with pytest.raises(ValueError, match="zero total response"):
            impulse_response_centroid([w], 12, out_cell=(3, 3))

    def test_negative_weights_rejected(self):
        w = ConvWeights(weight=-np.ones((1, 1, 3, 3)), stride=2)
        with pytest.raises(ValueError, match="nonnegative"):
            impulse_response_centroid([w], 12, out_cell=(3, 3))

    def test_bias_rejected(self):
        w = ConvWeights(weight=np.ones((1, 1, 3, 3)), bias=np.ones(1), stride=2)
        with pytest.raises(ValueError, match="bias-free"):
            impulse_response_centroid([w], 12, out_cell=(3, 3))


class TestBackends:
    def test_pure_matches_selected_backend(self):
        # whichever backend is active must agree bit-for-bit with the
        # normative pure-Python loops
        from tinydet_kit.kernels import _backend, _pure
        rng = np.random.default_rng(99)
        for seed in range(10):
            r = np.random.default_rng(seed)
            groups = int(r.integers(1, 4))
            cig, ocpg = int(r.integers(1, 3)), int(r.integers(1, 3))
            k = int(r.choice([1, 3, 5]))
            stride = int(r.choice([1, 2]))
            pad = int(r.integers(0, (k + 1) // 2 + 1))
            n = k + int(r.integers(2, 9))
            x = r.standard_normal((2, groups * cig, n, n))
            w = r.standard_normal((groups * ocpg, cig, k, k))
            bias = r.standard_normal(groups * ocpg) if seed % 2 else None
            assert np.array_equal(
                _backend.conv2d_raw(x, w, bias, stride, pad, groups),
                _pure.conv2d_raw(x, w, bias, stride, pad, groups))
            assert np.array_equal(_backend.avgpool2_raw(x),
                                  _pure.avgpool2_raw(x))
        del rng

    def test_compiled_core_if_present(self):
        core = pytest.importorskip("tinydet_kit.kernels._core")
        from tinydet_kit.kernels import _pure
        r = np.random.default_rng(123)
        x = r.standard_normal((1, 4, 9, 9))
        w = r.standard_normal((6, 2, 3, 3))
        bias = r.standard_normal(6)
        assert np.array_equal(core.conv2d_raw(x, w, bias, 2, 1, 2),
                              _pure.conv2d_raw(x, w, bias, 2, 1, 2))
