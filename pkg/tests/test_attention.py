"""Single-head attention, multi-head attention and the residual attention block."""

import math

import numpy as np
import pytest

import oracles
from mulcon.attention import MultiHeadParams, att, attention_maps, multi_att, multi_att_block
from mulcon.tensor import ShapeError, Tensor


def params_from(rng, C, D, h, scaled=True):
    return MultiHeadParams.init(C, D, h, rng, scaled=scaled, dtype=np.float64)


def as_lists(p):
    return ([w.data.tolist() for w in p.wq], [w.data.tolist() for w in p.wk],
            [w.data.tolist() for w in p.wv], p.wo.data.tolist(), p.wq_res.data.tolist())


def identity_params(C):
    eye = lambda: Tensor(np.eye(C))  # noqa: E731
    return MultiHeadParams([eye()], [eye()], [eye()], eye(), Tensor(np.zeros((C, C))), scaled=False)


class TestAtt:
    def test_single_value_row(self):
        rng = np.random.default_rng(0)
        V = rng.normal(size=(1, 5))
        out = att(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), V).data
        np.testing.assert_allclose(out, np.repeat(V, 3, axis=0), atol=1e-15)

    def test_zero_query_averages_values(self):
        rng = np.random.default_rng(1)
        K, V = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        out = att(np.zeros((2, 3)), K, V, scaled=False).data
        np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (2, 1)), atol=1e-14)

    @pytest.mark.parametrize("scaled", [False, True])
    def test_matches_scalar_oracle(self, scaled):
        rng = np.random.default_rng(2)
        Q, K, V = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
        ref, ref_w = oracles.att(Q.tolist(), K.tolist(), V.tolist(), scaled)
        out, w = att(Q, K, V, scaled=scaled, return_weights=True)
        np.testing.assert_allclose(out.data, ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(w.data, ref_w, atol=1e-12, rtol=0)

    def test_scaling_only_changes_logits(self):
        rng = np.random.default_rng(3)
        Q, K, V = rng.normal(size=(2, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        scaled = att(Q, K, V, scaled=True).data
        literal = att(Q / math.sqrt(4), K, V, scaled=False).data
        np.testing.assert_allclose(scaled, literal, atol=1e-14)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        _, w = att(rng.normal(size=(7, 3)) * 10, rng.normal(size=(9, 3)), rng.normal(size=(9, 2)),
                   return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            att(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 5)))
        with pytest.raises(ShapeError):
            att(np.ones((2, 3)), np.ones((4, 3)), np.ones((3, 5)))


class TestMultiAtt:
    def test_identity_single_head_reduces_to_att(self):
        rng = np.random.default_rng(5)
        Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        np.testing.assert_allclose(multi_att(Q, K, V, identity_params(4)).data,
                                   att(Q, K, V, scaled=False).data, atol=1e-10)

    @pytest.mark.parametrize("scaled", [False, True])
    def test_two_heads_match_oracle(self, scaled):
        rng = np.random.default_rng(6)
        p = params_from(rng, 3, 4, 2, scaled)
        Q, K, V = rng.normal(size=(2, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        wq, wk, wv, wo, _ = as_lists(p)
        ref = oracles.multi_att(Q.tolist(), K.tolist(), V.tolist(), wq, wk, wv, wo, scaled)
        np.testing.assert_allclose(multi_att(Q, K, V, p).data, ref, atol=1e-10, rtol=0)

    def test_joint_kv_permutation(self):
        rng = np.random.default_rng(7)
        p = params_from(rng, 4, 8, 4)
        Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
        perm = rng.permutation(7)
        a = multi_att(Q, K, V, p).data
        b = multi_att(Q, K[perm], V[perm], p).data
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_head_count_must_divide_width(self):
        with pytest.raises(ValueError):
            MultiHeadParams.init(4, 6, 4, np.random.default_rng(0))

    def test_inconsistent_shapes_rejected(self):
        p = params_from(np.random.default_rng(8), 4, 8, 2)
        p.wk[1] = Tensor(np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            multi_att(np.ones((2, 4)), np.ones((3, 4)), np.ones((3, 4)), p)

    def test_query_width_checked(self):
        p = params_from(np.random.default_rng(9), 4, 8, 2)
        with pytest.raises(ShapeError):
            multi_att(np.ones((2, 5)), np.ones((3, 4)), np.ones((3, 4)), p)


class TestBlock:
    def test_zero_values_leave_query_path(self):
        rng = np.random.default_rng(10)
        p = params_from(rng, 4, 6, 2)
        for w in p.wv:
            w.data[:] = 0.0
        Q = rng.normal(size=(3, 4))
        qp = np.concatenate([Q @ w.data for w in p.wq], axis=-1)
        expected = qp @ (np.eye(6) + p.wq_res.data)
        out = multi_att_block(Q, rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), p).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_zero_residual_projection(self):
        rng = np.random.default_rng(11)
        p = params_from(rng, 4, 6, 3)
        p.wq_res.data[:] = 0.0
        Q, K = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        qp = np.concatenate([Q @ w.data for w in p.wq], axis=-1) + multi_att(Q, K, K, p).data
        np.testing.assert_array_equal(multi_att_block(Q, K, K, p).data, qp)

    def test_matches_oracle(self):
        rng = np.random.default_rng(12)
        p = params_from(rng, 3, 4, 2)
        Q, K, V = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        ref = oracles.multi_att_block(Q.tolist(), K.tolist(), V.tolist(), *as_lists(p), scaled=True)
        np.testing.assert_allclose(multi_att_block(Q, K, V, p).data, ref, atol=1e-10, rtol=0)

    def test_joint_kv_permutation(self):
        rng = np.random.default_rng(13)
        p = params_from(rng, 4, 8, 2)
        Q, K = rng.normal(size=(3, 4)), rng.normal(size=(2, 6, 4))
        perm = rng.permutation(6)
        a = multi_att_block(Q, K, K, p).data
        b = multi_att_block(Q, K[:, perm], K[:, perm], p).data
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_batched_keys_match_per_image(self):
        rng = np.random.default_rng(14)
        p = params_from(rng, 4, 8, 2)
        Q, K = rng.normal(size=(3, 4)), rng.normal(size=(3, 5, 4))
        batched = multi_att_block(Q, K, K, p).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], multi_att_block(Q, K[i], K[i], p).data, atol=1e-13)

    def test_attention_maps(self):
        rng = np.random.default_rng(15)
        p = params_from(rng, 4, 8, 2)
        _, w = multi_att_block(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), p,
                               return_weights=True)
        per_head, mean = attention_maps(w)
        assert per_head.shape == (2, 3, 5)
        np.testing.assert_allclose(mean.sum(axis=-1), 1.0, atol=1e-12)
