import math

import numpy as np
import pytest

from dhicm.attention import (DhicmParams, MhaParams, baseline_combine, count_dhicm_params, dhicm_combine,
                             dhicm_forward, dhicm_importance, dhicm_param_count, dhicm_scores, multi_head_forward,
                             single_head_attention)
from dhicm.autodiff import Tensor
from dhicm.config import ConfigError, ModelConfig
from dhicm.gradcheck import check_gradients

from oracles import dhicm_combine_loop, dhicm_scores_loop, single_head_loop

rng = np.random.default_rng(11)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def mha(d, H, seed=0, grad=False):
    r = np.random.default_rng(seed)
    return MhaParams(*(T(r.normal(size=(d, d)) * 0.5, grad) for _ in range(3)), T(r.normal(size=(d, d)), grad), H)


def dhicm(d, H, d_m, seed=0, grad=False, p=0.0):
    r = np.random.default_rng(seed)
    d_k = d // H
    return DhicmParams(T(r.normal(size=(d_m, d_k)), grad), T(r.normal(size=(d_m, d)), grad),
                       T(r.normal(size=(d_m, d_k)), grad), T(r.normal(size=(d, d_m)), grad), p)


# -- single head -------------------------------------------------------------------

def test_single_source_token_returns_its_value():
    d = 4
    X, Y = rng.normal(size=(1, d)), rng.normal(size=(3, d))
    wq, wk, wv = (rng.normal(size=(d, 2)) for _ in range(3))
    out = single_head_attention(T(X), T(Y), wq, wk, wv).data
    np.testing.assert_allclose(out, np.repeat(X @ wv, 3, axis=0), atol=1e-14)


def test_identical_keys_get_equal_weight():
    d = 4
    X = np.repeat(rng.normal(size=(1, d)), 5, axis=0)
    wq, wk = rng.normal(size=(d, 2)), rng.normal(size=(d, 2))
    wv = rng.normal(size=(d, 2))
    out = single_head_attention(T(X), T(rng.normal(size=(2, d))), wq, wk, wv).data
    np.testing.assert_allclose(out, np.repeat(X[:1] @ wv, 2, axis=0), atol=1e-13)


def test_single_head_matches_loop_oracle():
    d, d_k = 6, 3
    X, Y = rng.normal(size=(3, d)), rng.normal(size=(2, d))
    w = [rng.normal(size=(d, d_k)) for _ in range(3)]
    mask = np.array([[True, True, False], [True, False, True]])
    got = single_head_attention(T(X), T(Y), *w, mask=mask).data
    np.testing.assert_allclose(got, single_head_loop(X, Y, *w, mask.tolist()), atol=1e-12)


def test_all_masked_query_row_gives_zero_output():
    d = 4
    w = [rng.normal(size=(d, 2)) for _ in range(3)]
    mask = np.array([[False, False], [True, True]])
    out = single_head_attention(T(rng.normal(size=(2, d))), T(rng.normal(size=(2, d))), *w, mask=mask).data
    assert np.all(out[0] == 0.0)


# -- multi head --------------------------------------------------------------------

def test_multi_head_with_one_head_equals_single_head():
    d = 4
    p = mha(d, 1)
    X, Y = T(rng.normal(size=(3, d))), T(rng.normal(size=(2, d)))
    O = multi_head_forward(X, Y, p).data
    ref = single_head_attention(X, Y, p.w_q.data, p.w_k.data, p.w_v.data).data
    np.testing.assert_allclose(O[:, 0, :], ref, atol=1e-14)


def test_heads_are_independent():
    d = 4
    X, Y = T(rng.normal(size=(3, d))), T(rng.normal(size=(2, d)))
    p2 = mha(d, 2, seed=4)
    for w in (p2.w_q, p2.w_k, p2.w_v):
        w.data[:, 2:] = 0.0
    O = multi_head_forward(X, Y, p2).data
    assert np.all(O[:, 1, :] == 0.0)
    ref = single_head_attention(X, Y, p2.w_q.data[:, :2], p2.w_k.data[:, :2], p2.w_v.data[:, :2]).data
    np.testing.assert_allclose(O[:, 0, :], ref, atol=1e-14)


def test_four_heads_match_per_head_oracle():
    d, H = 8, 4
    p = mha(d, H, seed=5)
    X, Y = rng.normal(size=(5, d)), rng.normal(size=(3, d))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    O = multi_head_forward(T(X), T(Y), p, mask[None][0]).data
    for h in range(H):
        np.testing.assert_allclose(O[:, h, :], single_head_loop(X, Y, *p.head(h), mask.tolist()), atol=1e-12)


def test_padded_query_rows_are_zero():
    d = 4
    p = mha(d, 2)
    O = multi_head_forward(T(rng.normal(size=(1, 3, d))), T(rng.normal(size=(1, 2, d))), p,
                           query_mask=np.array([[True, False]])).data
    assert np.all(O[0, 1] == 0.0) and np.any(O[0, 0] != 0.0)


# -- baseline combine --------------------------------------------------------------

def test_baseline_combine_identity_projection():
    O = rng.normal(size=(3, 1, 4))
    np.testing.assert_array_equal(baseline_combine(T(O), T(np.eye(4))).data, O[:, 0, :])


def test_baseline_combine_zero_input():
    assert np.all(baseline_combine(T(np.zeros((2, 2, 3))), T(rng.normal(size=(6, 6)))).data == 0.0)


def test_baseline_combine_is_concat_then_matmul():
    O, w_o = rng.normal(size=(3, 2, 3)), rng.normal(size=(6, 5))
    ref = np.concatenate([O[:, 0, :], O[:, 1, :]], axis=1) @ w_o
    np.testing.assert_allclose(baseline_combine(T(O), T(w_o)).data, ref, atol=1e-14)


def test_baseline_combine_rejects_bad_projection():
    with pytest.raises(ConfigError):
        baseline_combine(T(np.zeros((2, 2, 3))), T(np.zeros((5, 6))))


# -- DHICM -------------------------------------------------------------------------

def test_identical_heads_give_equal_scores():
    d, H = 6, 3
    O = np.repeat(rng.normal(size=(4, 1, 2)), H, axis=1)
    s = dhicm_scores(T(rng.normal(size=(4, d))), T(O), dhicm(d, H, 5)).data
    np.testing.assert_allclose(s - s[:, :1], 0.0, atol=1e-12)


def test_zero_W_gives_zero_scores():
    d, H = 4, 2
    p = dhicm(d, H, 4)
    p.W.data[:] = 0.0
    assert np.all(dhicm_scores(T(rng.normal(size=(3, d))), T(rng.normal(size=(3, H, 2))), p).data == 0.0)


def test_dhicm_scores_match_bilinear_loop():
    d, H, d_m = 4, 2, 3
    p = dhicm(d, H, d_m, seed=7)
    x, O = rng.normal(size=(2, d)), rng.normal(size=(2, H, 2))
    got = dhicm_scores(T(x), T(O), p, training=False).data
    np.testing.assert_allclose(got, dhicm_scores_loop(x, O, p.W.data, p.U.data), atol=1e-12)


def test_dhicm_dropout_only_in_training():
    d, H = 4, 2
    p = dhicm(d, H, 4, p=0.5)
    x, O = T(rng.normal(size=(3, d))), T(rng.normal(size=(3, H, 2)))
    a = dhicm_scores(x, O, p, training=False).data
    b = dhicm_scores(x, O, p, training=False).data
    c = dhicm_scores(x, O, p, training=True, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_importance_closed_forms():
    np.testing.assert_allclose(dhicm_importance(T([[0.0] * 4])).data, [[0.25] * 4], atol=1e-15)
    np.testing.assert_allclose(dhicm_importance(T([[math.log(3), 0.0]])).data, [[0.75, 0.25]], atol=1e-15)


def test_importance_argmax_and_shift_invariance():
    s = rng.normal(size=(200, 5))
    a = dhicm_importance(T(s)).data
    assert np.array_equal(a.argmax(1), s.argmax(1))
    np.testing.assert_allclose(dhicm_importance(T(s + 3.7)).data, a, atol=1e-9)
    assert np.all(a > 0)
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-6)


def test_one_hot_importance_selects_a_single_head():
    H = 3
    O = rng.normal(size=(2, H, 1))
    p = dhicm(3, H, 5)
    a = np.zeros((2, H))
    a[:, 1] = 1.0
    out = dhicm_combine(T(a), T(O), p).data
    ref = (O[:, 1, :] @ p.V.data.T) @ p.W_s.data.T
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_combine_independent_of_importance_when_heads_identical():
    p = dhicm(6, 3, 4)
    O = np.repeat(rng.normal(size=(2, 1, 2)), 3, axis=1)
    a1 = dhicm_importance(T(rng.normal(size=(2, 3)))).data
    a2 = dhicm_importance(T(rng.normal(size=(2, 3)))).data
    np.testing.assert_allclose(dhicm_combine(T(a1), T(O), p).data, dhicm_combine(T(a2), T(O), p).data, atol=1e-12)


def test_combine_matches_weighted_sum_loop():
    p = dhicm(6, 3, 4, seed=9)
    O = rng.normal(size=(2, 3, 2))
    a = dhicm_importance(T(rng.normal(size=(2, 3)))).data
    np.testing.assert_allclose(dhicm_combine(T(a), T(O), p).data,
                               dhicm_combine_loop(a, O, p.V.data, p.W_s.data), atol=1e-12)


def test_dm_mismatch_is_a_config_error():
    with pytest.raises(ConfigError):
        DhicmParams(T(np.zeros((4, 2))), T(np.zeros((3, 8))), T(np.zeros((4, 2))), T(np.zeros((8, 4))))


def test_forward_is_deterministic_in_eval():
    d, H = 8, 2
    x, mem = T(rng.normal(size=(2, 3, d))), T(rng.normal(size=(2, 4, d)))
    p, dp = mha(d, H), dhicm(d, H, 8)
    o1, r1 = dhicm_forward(x, mem, p, dp)
    o2, r2 = dhicm_forward(x, mem, p, dp)
    np.testing.assert_array_equal(o1.data, o2.data)
    np.testing.assert_array_equal(r1.a.data, r2.a.data)


def test_single_head_site_has_trivial_importance():
    d = 4
    x = T(rng.normal(size=(3, d)))
    p, dp = mha(d, 1), dhicm(d, 1, 5)
    out, rec = dhicm_forward(x, x, p, dp)
    assert np.all(rec.a.data == 1.0)
    O = multi_head_forward(x, x, p).data
    np.testing.assert_allclose(out.data, (O[:, 0, :] @ dp.V.data.T) @ dp.W_s.data.T, atol=1e-12)


def test_head_permutation_permutes_importance():
    d, H = 8, 4
    x = T(rng.normal(size=(3, d)))
    p, dp = mha(d, H, seed=2), dhicm(d, H, 6, seed=3)
    out, rec = dhicm_forward(x, x, p, dp)
    perm = [2, 0, 3, 1]
    cols = np.concatenate([np.arange(h * 2, h * 2 + 2) for h in perm])
    q = MhaParams(T(p.w_q.data[:, cols]), T(p.w_k.data[:, cols]), T(p.w_v.data[:, cols]), p.w_o, H)
    out2, rec2 = dhicm_forward(x, x, q, dp)
    np.testing.assert_allclose(rec2.a.data, rec.a.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(out2.data, out.data, atol=1e-12)


def test_dhicm_forward_gradients_match_finite_differences():
    d, H = 4, 2
    r = np.random.default_rng(3)
    x, mem = T(r.normal(size=(3, d))), T(r.normal(size=(4, d)))
    p, dp = mha(d, H, seed=6, grad=True), dhicm(d, H, 3, seed=8, grad=True)
    probe = T(r.normal(size=(3, d)))
    mask = np.array([[True, True, True, False]] * 3)

    def fn():
        out, rec = dhicm_forward(x, mem, p, dp, mask)
        return (out * probe).sum() + (rec.a * rec.a).sum()

    params = {"w_q": p.w_q, "w_k": p.w_k, "w_v": p.w_v, **dp.named()}
    for res in check_gradients(fn, params, h=1e-5, tol=1e-4):
        assert res.ok, f"{res.name}: {res.max_rel_err:.2e}"


# -- parameter accounting ----------------------------------------------------------

def test_param_count_closed_forms():
    assert dhicm_param_count(8, 2, 8, 1) == 192
    assert dhicm_param_count(512, 8, 512, 1) == 589_824
    assert dhicm_param_count(64, 4, 64, 0) == 0


def test_param_count_equals_enumeration():
    cfg = ModelConfig(d=12, heads=3, d_m=7)
    dp = dhicm(12, 3, 7)
    assert count_dhicm_params(cfg) == dp.num_params() * len(cfg.dhicm_placement)
    assert dp.num_params() == sum(t.data.size for t in dp.named().values())
