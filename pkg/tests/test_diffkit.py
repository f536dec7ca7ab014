"""Unit and finite-difference tests for the autodiff substrate."""

import math

import numpy as np
import pytest

from fgmil import diffkit as dk
from fgmil.errors import (
    DegenerateRowError,
    DeterminismError,
    FgmilError,
    NormalizationError,
    ShapeError,
    StaleGradientError,
)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    eye = dk.tensor(np.eye(2))
    m = dk.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = dk.matmul(eye, m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_selector_row():
    sel = dk.tensor([[1.0, 0.0]])
    col = dk.tensor([[5.0], [7.0]])
    out = dk.matmul(sel, col)
    np.testing.assert_array_equal(out.data, [[5.0]])


def test_matmul_against_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    out = dk.matmul(dk.tensor(a), dk.tensor(b))
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dk.matmul(dk.tensor(np.zeros((2, 3))), dk.tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# masked softmax
# ---------------------------------------------------------------------------


def test_masked_softmax_symmetry():
    out = dk.masked_softmax(dk.tensor([[0.0, 0.0]]), [[True, True]])
    np.testing.assert_array_equal(out.data, [[0.5, 0.5]])


def test_masked_softmax_single_valid_entry():
    out = dk.masked_softmax(dk.tensor([[5.0, -1.0]]), [[True, False]])
    np.testing.assert_array_equal(out.data, [[1.0, 0.0]])


def test_masked_softmax_matches_direct_formula():
    logits = np.array([[1.0, 2.0, 3.0]])
    e = np.exp(logits)
    expected = e / e.sum()
    out = dk.masked_softmax(dk.tensor(logits), np.ones((1, 3), dtype=bool))
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


def test_masked_softmax_rows_sum_to_one_and_masked_zero():
    rng = np.random.default_rng(11)
    for _ in range(50):
        rows, cols = rng.integers(1, 6), rng.integers(2, 7)
        logits = rng.normal(scale=10.0, size=(rows, cols))
        mask = rng.random((rows, cols)) < 0.6
        mask[np.arange(rows), rng.integers(0, cols, size=rows)] = True
        out = dk.masked_softmax(dk.tensor(logits), mask)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(out.data[~mask] == 0.0)


def test_masked_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        dk.masked_softmax(dk.tensor([[1.0, 2.0]]), [[False, False]])


# ---------------------------------------------------------------------------
# masked mean
# ---------------------------------------------------------------------------


def test_masked_mean_rows_all_valid():
    out = dk.masked_mean_rows(dk.tensor([[1.0, 1.0], [3.0, 3.0]]), [True, True])
    np.testing.assert_array_equal(out.data, [2.0, 2.0])


def test_masked_mean_rows_excludes_padding():
    out = dk.masked_mean_rows(dk.tensor([[1.0, 1.0], [9.0, 9.0]]), [True, False])
    np.testing.assert_array_equal(out.data, [1.0, 1.0])


def test_masked_mean_rows_against_sum_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    mask = np.array([True, True, False, True, False])
    expected = (x[0] + x[1] + x[3]) / 3.0
    out = dk.masked_mean_rows(dk.tensor(x), mask)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


def test_masked_mean_rows_degenerate():
    with pytest.raises(DegenerateRowError):
        dk.masked_mean_rows(dk.tensor(np.ones((2, 2))), [False, False])


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_attention_single_key_is_pass_through():
    q = dk.tensor([[0.3, -0.4]])
    k = dk.tensor([[0.3, -0.4]])
    v = dk.tensor([[7.0, 7.0]])
    out = dk.attention(q, k, v, [True])
    np.testing.assert_array_equal(out.data, [[7.0, 7.0]])


def test_attention_identical_keys_average_values():
    q = dk.tensor([[1.0, 2.0]])
    k = dk.tensor([[0.5, 0.5], [0.5, 0.5]])
    v = dk.tensor([[1.0, 3.0], [5.0, 7.0]])
    out = dk.attention(q, k, v, [True, True])
    np.testing.assert_allclose(out.data, [[3.0, 5.0]], rtol=0, atol=1e-15)


def test_attention_matches_composition_oracle():
    rng = np.random.default_rng(23)
    q, k, v = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    mask = np.array([True, False, True, True])
    scores = q @ k.T / math.sqrt(3)
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.where(mask, np.exp(scores), 0.0)
    w /= w.sum(axis=1, keepdims=True)
    expected = w @ v
    out = dk.attention(dk.tensor(q), dk.tensor(k), dk.tensor(v), mask)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-14)


def test_attention_joint_permutation_invariance():
    rng = np.random.default_rng(31)
    for trial in range(20):
        q = rng.normal(size=(3, 4))
        k = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 4))
        mask = rng.random(6) < 0.7
        mask[0] = True
        base = dk.attention(dk.tensor(q), dk.tensor(k), dk.tensor(v), mask)
        perm = rng.permutation(6)
        permuted = dk.attention(
            dk.tensor(q), dk.tensor(k[perm]), dk.tensor(v[perm]), mask[perm]
        )
        np.testing.assert_allclose(permuted.data, base.data, rtol=0, atol=1e-12)


def test_attention_all_keys_masked_raises():
    t = dk.tensor(np.ones((1, 2)))
    with pytest.raises(DegenerateRowError):
        dk.attention(t, t, t, [False])


# ---------------------------------------------------------------------------
# soft cross-entropy
# ---------------------------------------------------------------------------


def test_soft_cross_entropy_uniform_logits():
    logits = dk.tensor(np.zeros((2, 2)))
    out = dk.soft_cross_entropy(logits, np.eye(2))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_soft_cross_entropy_matching_distribution_gives_entropy():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 4))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    out = dk.soft_cross_entropy(dk.tensor(logits), p)
    entropy = -(p * np.log(p)).sum() / 3
    assert out.item() == pytest.approx(entropy, abs=1e-12)


def test_soft_cross_entropy_term_by_term_oracle():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(3, 3))
    y = rng.random((3, 3))
    y /= y.sum(axis=1, keepdims=True)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = 0.0
    for i in range(3):
        for j in range(3):
            expected -= y[i, j] * math.log(p[i, j])
    expected /= 3
    out = dk.soft_cross_entropy(dk.tensor(logits), y)
    assert out.item() == pytest.approx(expected, abs=1e-13)


def test_soft_cross_entropy_nonnegative_for_one_hot():
    rng = np.random.default_rng(13)
    for n in (2, 4, 8):
        logits = rng.normal(size=(n, n))
        out = dk.soft_cross_entropy(dk.tensor(logits), np.eye(n))
        assert out.item() >= 0.0


def test_soft_cross_entropy_invalid_targets():
    logits = dk.tensor(np.zeros((2, 2)))
    with pytest.raises(FgmilError):
        dk.soft_cross_entropy(logits, np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(FgmilError):
        dk.soft_cross_entropy(logits, np.array([[1.5, -0.5], [0.5, 0.5]]))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = dk.tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = dk.sum_all(w)
    dk.backward(loss)
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_quadratic_form_gives_w():
    w = dk.tensor([1.0, -2.0, 0.5], requires_grad=True)
    loss = dk.scale(dk.sum_all(dk.mul(w, w)), 0.5)
    dk.backward(loss)
    np.testing.assert_allclose(w.grad, w.data, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar():
    w = dk.tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ShapeError):
        dk.backward(dk.scale(w, 2.0))


def test_backward_fills_zero_for_nonparticipating_params():
    store = dk.ParamStore()
    used = store.add("used", [1.0, 2.0])
    store.add("unused", [3.0])
    loss = dk.sum_all(used)
    dk.backward(loss, store)
    np.testing.assert_array_equal(store["unused"].grad, [0.0])


def test_backward_accumulates_shared_inputs():
    w = dk.tensor([2.0], requires_grad=True)
    loss = dk.sum_all(dk.add(dk.mul(w, w), w))
    dk.backward(loss)
    np.testing.assert_allclose(w.grad, [2 * 2.0 + 1.0], rtol=0, atol=1e-15)


def _fd_check(build, store, tol=1e-4):
    report = dk.grad_check(build, store, epsilon=1e-5)
    assert report.passes(tol), (
        f"max rel err {report.max_rel_err:.3e} at {report.worst_param}"
    )


def test_every_op_matches_finite_differences():
    rng = np.random.default_rng(101)

    store = dk.ParamStore()
    a = store.add("a", rng.normal(size=(3, 4)))
    b = store.add("b", rng.normal(size=(4, 2)))
    weight = rng.normal(size=(3, 2))
    _fd_check(lambda s: dk.sum_all(dk.mul(dk.matmul(s["a"], s["b"]),
                                          dk.tensor(weight))), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(3, 5)))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    w = rng.normal(size=(3, 5))
    _fd_check(lambda s: dk.sum_all(dk.mul(dk.masked_softmax(s["x"], mask),
                                          dk.tensor(w))), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(4, 3)))
    row_mask = np.array([True, False, True, True])
    w1 = rng.normal(size=3)
    _fd_check(lambda s: dk.sum_all(dk.mul(dk.masked_mean_rows(s["x"], row_mask),
                                          dk.tensor(w1))), store)

    store = dk.ParamStore()
    store.add("q", rng.normal(size=(2, 4)))
    store.add("k", rng.normal(size=(5, 4)))
    store.add("v", rng.normal(size=(5, 4)))
    kmask = np.array([True, True, False, True, True])
    w2 = rng.normal(size=(2, 4))
    _fd_check(lambda s: dk.sum_all(dk.mul(
        dk.attention(s["q"], s["k"], s["v"], kmask), dk.tensor(w2))), store)

    store = dk.ParamStore()
    store.add("z", rng.normal(size=(3, 3)))
    y = rng.random((3, 3))
    y /= y.sum(axis=1, keepdims=True)
    _fd_check(lambda s: dk.soft_cross_entropy(s["z"], y), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(3, 4)) + 2.0)
    w3 = rng.normal(size=(3, 4))
    _fd_check(lambda s: dk.sum_all(dk.mul(dk.l2_normalize_rows(s["x"]),
                                          dk.tensor(w3))), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(2, 3)))
    w4 = rng.normal(size=(2, 3))
    _fd_check(lambda s: dk.sum_all(dk.mul(dk.tanh(s["x"]), dk.tensor(w4))), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(2, 2)))
    _fd_check(lambda s: dk.sum_all(dk.exp(s["x"])), store)

    # clamp_max: keep values away from the cap so FD sees a smooth function
    store = dk.ParamStore()
    store.add("x", rng.normal(size=(2, 3)) * 0.1)
    _fd_check(lambda s: dk.sum_all(dk.clamp_max(s["x"], 5.0)), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(2, 3)))
    store.add("s", [0.7])
    _fd_check(lambda s: dk.sum_all(dk.scale_by(s["x"], s["s"])), store)

    store = dk.ParamStore()
    store.add("p", rng.normal(size=(2, 3)))
    store.add("q", rng.normal(size=(1, 3)))
    w5 = rng.normal(size=(3, 3))
    _fd_check(lambda s: dk.sum_all(dk.mul(
        dk.concat_rows([s["p"], s["q"]]), dk.tensor(w5))), store)

    store = dk.ParamStore()
    store.add("u", rng.normal(size=4))
    store.add("v", rng.normal(size=3))
    w6 = rng.normal(size=7)
    _fd_check(lambda s: dk.sum_all(dk.mul(
        dk.concat_vec(s["u"], s["v"]), dk.tensor(w6))), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(3, 2)))
    w7 = rng.normal(size=(2, 3))
    _fd_check(lambda s: dk.sum_all(dk.mul(dk.transpose(s["x"]), dk.tensor(w7))), store)

    store = dk.ParamStore()
    store.add("x", rng.normal(size=(2, 6)))
    w8 = rng.normal(size=(4, 3))
    _fd_check(lambda s: dk.sum_all(dk.mul(
        dk.reshape(s["x"], (4, 3)), dk.tensor(w8))), store)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def test_adamw_zero_grad_is_noop():
    store = dk.ParamStore()
    p = store.add("w", [1.0, -2.0, 3.0])
    p.grad = np.zeros(3)
    before = p.data.copy()
    dk.adamw_step(store, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(store["w"].data, before)


def test_adamw_single_step_closed_form():
    store = dk.ParamStore()
    p = store.add("w", [1.0, 2.0])
    g = np.array([0.3, -0.7])
    p.grad = g.copy()
    lr, b1, b2, eps = 0.01, 0.9, 0.98, 1e-8
    dk.adamw_step(store, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = np.array([1.0, 2.0]) - lr * m_hat / (np.sqrt(v_hat) + eps)
    np.testing.assert_allclose(store["w"].data, expected, rtol=0, atol=1e-15)


def test_adamw_decay_only_scales_parameters():
    store = dk.ParamStore()
    p = store.add("w", [10.0, -4.0])
    p.grad = np.zeros(2)
    dk.adamw_step(store, lr=0.01, weight_decay=0.1)
    np.testing.assert_allclose(
        store["w"].data, np.array([10.0, -4.0]) * (1 - 0.001), rtol=0, atol=1e-15
    )


def test_adamw_missing_gradient_raises():
    store = dk.ParamStore()
    store.add("w", [1.0])
    with pytest.raises(StaleGradientError):
        dk.adamw_step(store, lr=0.1)


def test_adamw_bias_correction_uses_per_param_step_count():
    store = dk.ParamStore()
    p = store.add("w", [0.0])
    lr, b1, b2, eps = 0.1, 0.9, 0.98, 1e-8
    g = np.array([1.0])
    theta, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
    for step in range(1, 4):
        p.grad = g.copy()
        dk.adamw_step(store, lr=lr, beta1=b1, beta2=b2, eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        np.testing.assert_allclose(store["w"].data, theta, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------


def test_grad_check_linear_layer_tight():
    rng = np.random.default_rng(42)
    store = dk.ParamStore()
    store.add("w", rng.normal(size=(4, 3)))
    x = rng.normal(size=(2, 4))
    target = rng.normal(size=(2, 3))

    def build(s):
        diff = dk.sub(dk.matmul(dk.tensor(x), s["w"]), dk.tensor(target))
        return dk.scale(dk.sum_all(dk.mul(diff, diff)), 0.5)

    report = dk.grad_check(build, store, epsilon=1e-5)
    assert report.max_rel_err < 1e-7


def test_grad_check_constant_function():
    store = dk.ParamStore()
    store.add("w", [1.0, 2.0])

    def build(s):
        return dk.sum_all(dk.tensor([3.0]))

    report = dk.grad_check(build, store, epsilon=1e-5)
    assert report.max_rel_err == 0.0
    assert report.passes(1e-7)


def test_grad_check_detects_nondeterminism():
    store = dk.ParamStore()
    store.add("w", [1.0])
    state = {"n": 0.0}

    def build(s):
        state["n"] += 1.0
        return dk.scale(dk.sum_all(s["w"]), state["n"])

    with pytest.raises(DeterminismError):
        dk.grad_check(build, store, epsilon=1e-5)


def test_grad_check_caps_sampled_elements():
    idx = dk._fd_indices(1000, 64)
    assert len(idx) <= 64
    assert idx[0] == 0 and idx[-1] == 999


# ---------------------------------------------------------------------------
# ParamStore / Tensor invariants
# ---------------------------------------------------------------------------


def test_tensor_rejects_non_finite():
    with pytest.raises(FgmilError):
        dk.tensor([1.0, float("nan")])
    with pytest.raises(FgmilError):
        dk.tensor([float("inf")])


def test_tensor_shape_data_consistency():
    t = dk.tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3)
    assert t.size == 6


def test_param_store_duplicate_name_rejected():
    store = dk.ParamStore()
    store.add("w", [1.0])
    with pytest.raises(FgmilError):
        store.add("w", [2.0])


def test_param_store_iteration_sorted():
    store = dk.ParamStore()
    store.add("zeta", [1.0])
    store.add("alpha", [1.0])
    store.add("mid", [1.0])
    assert store.names() == ["alpha", "mid", "zeta"]


def test_l2_normalize_rows_zero_norm_raises():
    with pytest.raises(NormalizationError):
        dk.l2_normalize_rows(dk.tensor([[0.0, 0.0], [1.0, 0.0]]))
