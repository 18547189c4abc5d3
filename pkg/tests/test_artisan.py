import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modasr import numcore as nc
from modasr.artisan import (
    ALWAYS_SELECTED,
    ArtisanLayer,
    Dense,
    EmptySelectionWarning,
    UnknownLanguageError,
    binarize,
    keep_count,
    single_mask_mode,
    topk_mask,
)
from modasr.numcore import Tensor, finite_diff_check


def layer(c_in=3, c_out=4, L=3, K=4, t=0.3, seed=0, variant="TopK"):
    return ArtisanLayer(c_in, c_out, L, K, t, np.random.default_rng(seed), variant)


def set_scores(lay, mats):
    for m, v in zip(lay.scores, mats):
        m.data = np.asarray(v, dtype=np.float64)


# selection --------------------------------------------------------------------


def test_selection_sign_rule():
    lay = layer(1, 2, L=1, K=4)
    set_scores(lay, [[[1, 0]], [[10, 0]], [[100, 0]], [[1000, 0]]])
    lay.mapping.data = np.array([[1.2, -0.4, 0.0, 3.1]])
    # index 2 is excluded: sigmoid(0) = 0.5 is not above 0.5
    assert np.array_equal(lay.select_scores(0).data, [[1001, 0]])


def test_empty_selection_warns_and_is_zero():
    lay = layer(1, 2, L=1, K=2)
    lay.mapping.data = np.array([[-1.0, -2.0]])
    with pytest.warns(EmptySelectionWarning):
        s = lay.select_scores(0)
    assert np.array_equal(s.data, np.zeros((1, 2)))


def test_full_sum():
    lay = layer(1, 2, L=1, K=2)
    set_scores(lay, [[[1, 0]], [[0, 2]]])
    lay.mapping.data = np.array([[5.0, 5.0]])
    assert np.array_equal(lay.select_scores(0).data, [[1, 2]])


def test_unregistered_language():
    with pytest.raises(UnknownLanguageError):
        layer(L=2).select_scores(2)


def test_selection_equals_sign_indicator_on_many_entries():
    rng = np.random.default_rng(1)
    lay = layer(2, 2, L=100, K=100)
    lay.mapping.data = rng.normal(size=(100, 100))
    lay.mapping.data[rng.random((100, 100)) < 0.05] = 0.0
    sel = np.stack([lay.selection(l) for l in range(100)])
    assert np.array_equal(sel, lay.mapping.data > 0)


# binarize ---------------------------------------------------------------------


def test_topk_example():
    b = binarize(Tensor(np.array([[0.9, 0.1], [0.5, 0.7]])), 0.5, "TopK").data
    assert np.array_equal(b, [[1, 0], [0, 1]])


def test_t_zero_keeps_everything():
    assert np.array_equal(binarize(Tensor(np.random.default_rng(0).normal(size=(3, 3))), 0.0, "TopK").data, np.ones((3, 3)))


def test_ties_break_to_lowest_flat_index():
    assert np.array_equal(topk_mask(np.full((2, 2), 0.3), keep_count(0.5, 4)), [[1, 1], [0, 0]])


def test_keep_count_errors_and_exact_decimals():
    assert keep_count(0.3, 10) == 7  # float (1 - 0.3) * 10 would round up to 8
    assert keep_count(0.7, 10) == 3
    assert keep_count(0.99, 10) == 1
    with pytest.raises(ValueError):
        keep_count(0.5, 0)
    with pytest.raises(ValueError):
        keep_count(1.0, 10)


def test_binarize_shape_mismatch():
    with pytest.raises(ValueError):
        layer(3, 4).binarize(Tensor(np.zeros((4, 3))))


def test_thres_and_learned_rules():
    s = Tensor(np.array([[-0.5, 0.0, 0.2]]))
    assert np.array_equal(binarize(s, 0.3, "Thres").data, [[0, 0, 1]])
    assert np.array_equal(binarize(s, 0.3, "Learned", Tensor(np.array(0.1))).data, [[1, 1, 0]])


def test_straight_through_gradients():
    s = Tensor(np.array([[0.9, 0.1], [0.5, 0.7]]), requires_grad=True)
    theta = Tensor(np.array(0.6), requires_grad=True)
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    nc.tsum(nc.mul(binarize(s, 0.5, "TopK"), g)).backward()
    assert np.array_equal(s.grad, g)
    s.zero_grad()
    nc.tsum(nc.mul(binarize(s, 0.5, "Learned", theta), g)).backward()
    assert theta.grad == -g.sum()


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 12),
    st.integers(1, 12),
    st.sampled_from([0.1, 0.3, 0.5, 0.7]),
    st.integers(0, 2**31 - 1),
    st.booleans(),
)
def test_popcount_is_exact(c_in, c_out, t, seed, ties):
    n = c_in * c_out
    if np.ceil((1 - t) * n) == 0:
        return
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 3, size=(c_in, c_out)).astype(float) if ties else rng.normal(size=(c_in, c_out))
    assert binarize(Tensor(s), t, "TopK").data.sum() == keep_count(t, n)


# masked weight and forward ---------------------------------------------------------


def test_masked_weight_example():
    lay = layer(2, 2, L=1, K=1, t=0.5)
    lay.weight.data = np.array([[2.0, -1.0], [0.5, 4.0]])
    lay.mapping.data = np.array([[1.0]])
    set_scores(lay, [[[0.9, 0.1], [0.5, 0.7]]])
    assert np.array_equal(lay.masked_weight(0).data, [[2, 0], [0, 4]])


def test_all_ones_mask_keeps_weight_bit_exact():
    lay = layer(3, 4, t=0.0)
    lay.mapping.data[:] = 1.0
    assert np.array_equal(lay.masked_weight(0).data, lay.weight.data)


def test_density_bounded_by_keep_count():
    lay = layer(8, 8, t=0.3)
    lay.mapping.data[:] = 1.0
    assert np.count_nonzero(lay.masked_weight(1).data) == keep_count(0.3, 64)


def test_forward_identity_rows_and_vanilla_reduction():
    lay = layer(3, 4, t=0.0, K=1)
    lay.mapping.data[:] = 1.0
    x = Tensor(np.eye(3))
    assert np.array_equal(lay(x, 0).data, lay.masked_weight(0).data)
    dense = Dense(3, 4, np.random.default_rng(5))
    dense.weight.data = lay.weight.data.copy()
    x = Tensor(np.random.default_rng(1).normal(size=(2, 5, 3)))
    assert np.array_equal(lay(x, 0).data, dense(x).data)
    twin = Tensor(np.stack([x.data[0], x.data[0]]))
    out = lay(twin, 1).data
    assert np.array_equal(out[0], out[1])


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        layer(3, 4)(Tensor(np.zeros((2, 5))), 0)


def test_layer_gradients_soft_gate():
    lay = layer(3, 2, L=2, K=3, t=0.3, seed=4)
    lay.mapping.data = np.array([[0.8, -0.6, 0.3], [0.2, 0.9, -0.4]])
    lay.gate_mode = "soft"
    probe = np.random.default_rng(3).normal(size=(3, 2))
    # with the soft gate the score assembly is smooth, so its gradient is exact
    params = {"T": lay.mapping, **{f"M{k}": m for k, m in enumerate(lay.scores)}}
    rep = finite_diff_check(lambda: nc.tsum(nc.mul(lay.select_scores(0), probe)), params)
    assert rep.passed, rep
    x = Tensor(np.random.default_rng(2).normal(size=(4, 3)))
    out_probe = np.random.default_rng(5).normal(size=(4, 2))
    rep = finite_diff_check(lambda: nc.tsum(nc.mul(lay(x, 0), out_probe)), {"W": lay.weight, "b": lay.bias})
    assert rep.passed, rep


def test_hard_gate_backward_uses_sigmoid_derivative():
    lay = layer(2, 2, L=1, K=2, t=0.0)
    lay.mapping.data = np.array([[0.5, -1.0]])
    s = lay.select_scores(0)
    g = np.ones((2, 2))
    nc.tsum(nc.mul(s, g)).backward()
    sig = 1 / (1 + np.exp(-lay.mapping.data[0]))
    expected = sig * (1 - sig) * np.array([m.data.sum() for m in lay.scores])
    assert np.allclose(lay.mapping.grad[0], expected)
    assert lay.scores[1].grad is None  # unselected scores receive nothing


# language insertion and single mask ------------------------------------------------------


def test_add_language_row():
    lay = layer(L=4)
    before = lay.mapping.data.copy()
    assert lay.add_language_row("zeros") == 4
    assert np.array_equal(lay.mapping.data[:4], before)
    assert not lay.selection(4).any()
    assert lay.add_language_row("gaussian", rng=np.random.default_rng(0)) == 5


def test_single_mask_mode():
    lay = single_mask_mode(layer(3, 4, L=3, K=4))
    assert lay.K == 1 and np.all(lay.mapping.data == ALWAYS_SELECTED)
    for l in range(3):
        assert np.array_equal(lay.select_scores(l).data, lay.scores[0].data)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    nc.tsum(lay(x, 1)).backward()
    assert lay.scores[0].grad is not None and lay.mapping.grad is None
    general = layer(3, 4, L=3, K=1)
    general.weight.data, general.scores[0].data = lay.weight.data, lay.scores[0].data
    general.mapping.data[:] = ALWAYS_SELECTED
    assert np.array_equal(general(x, 2).data, lay(x, 2).data)


def test_inference_cache_is_opt_in():
    lay = layer()
    lay.enable_inference_cache()
    x = Tensor(np.ones((1, 3)))
    with nc.no_grad():
        a = lay(x, 0).data
        lay.weight.data = lay.weight.data * 2
        stale = lay(x, 0).data
    assert np.array_equal(a, stale)
    lay.enable_inference_cache(False)
    with nc.no_grad():
        assert np.allclose(lay(x, 0).data - lay.bias.data, 2 * (a - lay.bias.data))


def test_warning_dedups_in_default_filter():
    lay = layer(L=1, K=1)
    lay.mapping.data[:] = -1.0
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("default")
        for _ in range(5):
            lay.select_scores(0)
    assert len(rec) == 1
