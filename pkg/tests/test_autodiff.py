import numpy as np
import pytest

from iterdec import autodiff as ad


def numeric_grad(fn, tensor, h=1e-6):
    """Central finite differences of a scalar-valued rebuildable graph."""
    grad = np.zeros_like(tensor.data)
    with ad.no_grad():
        for i in range(tensor.data.size):
            orig = tensor.data.flat[i]
            tensor.data.flat[i] = orig + h
            up = fn().item()
            tensor.data.flat[i] = orig - h
            down = fn().item()
            tensor.data.flat[i] = orig
            grad.flat[i] = (up - down) / (2 * h)
    return grad


def check_grads(fn, tensors, tol=1e-6):
    loss = fn()
    loss.backward()
    for t in tensors:
        assert t.grad is not None, f"no gradient reached {t.op}"
        num = numeric_grad(fn, t)
        scale = max(np.abs(t.grad).max(), np.abs(num).max(), 1e-8)
        rel = np.abs(t.grad - num).max() / scale
        assert rel < tol, f"{t.op}: relative error {rel:.2e}"


def rand(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True, op="input")


def weighted_sum(x, weight):
    return ad.tensor_sum(ad.mul(x, ad.Tensor(weight)))


class TestElementwise:
    def test_add_broadcast(self):
        rng = np.random.default_rng(0)
        a, b = rand(rng, 2, 3), rand(rng, 3)
        w = rng.standard_normal((2, 3))
        check_grads(lambda: weighted_sum(ad.add(a, b), w), [a, b])

    def test_mul_broadcast(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 2, 4), rand(rng, 2, 1)
        w = rng.standard_normal((2, 4))
        check_grads(lambda: weighted_sum(ad.mul(a, b), w), [a, b])

    def test_scalar_operators(self):
        x = ad.Tensor(np.array([2.0, -3.0]), requires_grad=True)
        y = ad.tensor_sum((1.0 - x) * 2.0 + (x - 0.5))
        y.backward()
        assert np.allclose(x.grad, [-1.0, -1.0])

    def test_relu(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.standard_normal((3, 3)) + np.sign(rng.standard_normal((3, 3))) * 0.2,
                      requires_grad=True, op="input")
        w = rng.standard_normal((3, 3))
        check_grads(lambda: weighted_sum(ad.relu(x), w), [x])

    def test_sigmoid_log(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 4)
        w = rng.standard_normal(4)
        check_grads(lambda: weighted_sum(ad.log(ad.sigmoid(x)), w), [x])

    def test_same_tensor_twice(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        y = ad.tensor_sum(ad.mul(x, x))
        y.backward()
        assert np.allclose(x.grad, [6.0])


class TestShapes:
    def test_reshape_transpose_sum(self):
        rng = np.random.default_rng(4)
        x = rand(rng, 2, 3, 4)
        w = rng.standard_normal((4, 6))

        def fn():
            t = ad.transpose(x, (2, 0, 1))
            r = ad.reshape(t, (4, 6))
            return weighted_sum(r, w)

        check_grads(fn, [x])

    def test_sum_axis_keepdims(self):
        rng = np.random.default_rng(5)
        x = rand(rng, 2, 5)
        w = rng.standard_normal((2, 1))
        check_grads(lambda: weighted_sum(ad.tensor_sum(x, axis=1, keepdims=True), w), [x])

    def test_matmul_batched(self):
        rng = np.random.default_rng(6)
        a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
        w = rng.standard_normal((2, 3, 5))
        check_grads(lambda: weighted_sum(ad.matmul(a, b), w), [a, b])

    def test_matmul_both_batched(self):
        rng = np.random.default_rng(7)
        a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)
        w = rng.standard_normal((2, 3, 5))
        check_grads(lambda: weighted_sum(ad.matmul(a, b), w), [a, b])


class TestNormalizers:
    def test_softmax(self):
        rng = np.random.default_rng(8)
        x = rand(rng, 2, 5)
        w = rng.standard_normal((2, 5))
        check_grads(lambda: weighted_sum(ad.softmax(x), w), [x])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        s = ad.softmax(rand(rng, 3, 7))
        assert np.allclose(s.data.sum(axis=-1), 1.0)

    def test_masked_softmax(self):
        rng = np.random.default_rng(10)
        x = rand(rng, 2, 4)
        mask = np.array([[False, True, False, True], [False, False, True, False]])
        w = rng.standard_normal((2, 4))

        def fn():
            return weighted_sum(ad.softmax(ad.masked_fill(x, mask, -np.inf)), w)

        check_grads(fn, [x])
        probs = ad.softmax(ad.masked_fill(x, mask, -np.inf)).data
        assert np.all(probs[mask] == 0.0)

    def test_layer_norm(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 2, 3, 6)
        gamma = ad.Parameter("gamma", rng.standard_normal(6))
        beta = ad.Parameter("beta", rng.standard_normal(6))
        w = rng.standard_normal((2, 3, 6))
        check_grads(lambda: weighted_sum(ad.layer_norm(x, gamma, beta), w), [x, gamma, beta])


class TestLookups:
    def test_embedding_with_repeats(self):
        rng = np.random.default_rng(12)
        table = ad.Parameter("emb", rng.standard_normal((7, 4)))
        ids = np.array([[0, 2, 2], [6, 0, 1]])
        w = rng.standard_normal((2, 3, 4))
        check_grads(lambda: weighted_sum(ad.embedding(table, ids), w), [table])

    def test_embedding_out_of_range(self):
        table = ad.Parameter("emb", np.zeros((3, 2)))
        with pytest.raises(ad.AutodiffError, match="out of range"):
            ad.embedding(table, np.array([3]))

    def test_relative_scores(self):
        rng = np.random.default_rng(13)
        q = rand(rng, 2, 2, 3, 4)
        table = ad.Parameter("rel_k", rng.standard_normal((5, 4)))
        labels = rng.integers(0, 5, size=(3, 6))
        w = rng.standard_normal((2, 2, 3, 6))
        check_grads(lambda: weighted_sum(ad.relative_scores(q, table, labels), w), [q, table])

    def test_relative_values(self):
        rng = np.random.default_rng(14)
        attn = rand(rng, 2, 2, 3, 6)
        table = ad.Parameter("rel_v", rng.standard_normal((5, 4)))
        labels = rng.integers(0, 5, size=(3, 6))
        w = rng.standard_normal((2, 2, 3, 4))
        check_grads(lambda: weighted_sum(ad.relative_values(attn, table, labels), w),
                    [attn, table])

    def test_relative_scores_matches_direct_dot(self):
        rng = np.random.default_rng(15)
        q = rand(rng, 1, 1, 2, 3)
        table = ad.Parameter("rel_k", rng.standard_normal((3, 3)))
        labels = np.array([[0, 2], [1, 1]])
        out = ad.relative_scores(q, table, labels)
        for i in range(2):
            for k in range(2):
                expect = q.data[0, 0, i] @ table.data[labels[i, k]]
                assert np.isclose(out.data[0, 0, i, k], expect)


class TestLosses:
    def test_cross_entropy_matches_manual(self):
        logits = ad.Tensor(np.log(np.array([[0.7, 0.2, 0.1]])), requires_grad=True)
        loss = ad.cross_entropy(logits, np.array([0]), np.array([True]), smoothing=0.0)
        assert np.isclose(loss.item(), -np.log(0.7))

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(16)
        logits = rand(rng, 2, 4, 9)
        targets = rng.integers(0, 9, size=(2, 4))
        mask = np.array([[True, True, True, False], [True, False, True, True]])
        check_grads(lambda: ad.cross_entropy(logits, targets, mask, smoothing=0.1), [logits])

    def test_cross_entropy_masked_positions_ignored(self):
        rng = np.random.default_rng(17)
        base = rng.standard_normal((1, 2, 5))
        targets = np.array([[1, 3]])
        mask = np.array([[True, False]])
        changed = base.copy()
        changed[0, 1] += 10.0
        a = ad.cross_entropy(ad.Tensor(base), targets, mask, smoothing=0.1)
        b = ad.cross_entropy(ad.Tensor(changed), targets, mask, smoothing=0.1)
        assert np.isclose(a.item(), b.item())

    def test_cross_entropy_all_masked(self):
        with pytest.raises(ad.AutodiffError, match="masked"):
            ad.cross_entropy(ad.Tensor(np.zeros((1, 1, 3))), np.array([[0]]),
                             np.array([[False]]))

    def test_nll_from_probs_grad(self):
        rng = np.random.default_rng(18)
        x = rand(rng, 2, 3, 6)
        targets = rng.integers(0, 6, size=(2, 3))
        mask = np.array([[True, True, False], [True, True, True]])

        def fn():
            return ad.nll_from_probs(ad.softmax(x), targets, mask, smoothing=0.1)

        check_grads(fn, [x])

    def test_nll_from_probs_agrees_with_cross_entropy(self):
        rng = np.random.default_rng(19)
        raw = rng.standard_normal((2, 3, 6))
        targets = rng.integers(0, 6, size=(2, 3))
        mask = np.ones((2, 3), dtype=bool)
        via_probs = ad.nll_from_probs(ad.softmax(ad.Tensor(raw)), targets, mask, smoothing=0.1)
        via_logits = ad.cross_entropy(ad.Tensor(raw), targets, mask, smoothing=0.1)
        assert np.isclose(via_probs.item(), via_logits.item())


class TestDropout:
    def test_grad_through_fixed_mask(self):
        rng = np.random.default_rng(20)
        x = rand(rng, 4, 4)
        w = rng.standard_normal((4, 4))

        def fn():
            mask_rng = np.random.default_rng(99)
            return weighted_sum(ad.dropout(x, 0.5, mask_rng), w)

        check_grads(fn, [x])

    def test_zero_rate_is_identity(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        assert ad.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_expectation_preserved(self):
        rng = np.random.default_rng(21)
        x = ad.Tensor(np.ones((200, 200)))
        out = ad.dropout(x, 0.3, rng)
        assert abs(out.data.mean() - 1.0) < 0.01

    def test_bad_rate(self):
        with pytest.raises(ad.AutodiffError, match="rate"):
            ad.dropout(ad.Tensor(np.ones(2)), 1.0, np.random.default_rng(0))


class TestMechanics:
    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.mul(x, 2.0).backward()

    def test_double_backward_raises(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = ad.tensor_sum(x)
        y.backward()
        with pytest.raises(ad.AutodiffError, match="released"):
            y.backward()

    def test_parameters_keep_grads_across_graphs(self):
        p = ad.Parameter("p", np.array([1.0, 2.0]))
        ad.tensor_sum(p).backward()
        ad.tensor_sum(ad.mul(p, 3.0)).backward()
        assert np.allclose(p.grad, [4.0, 4.0])

    def test_no_grad_records_nothing(self):
        p = ad.Parameter("p", np.ones(3))
        with ad.no_grad():
            y = ad.tensor_sum(ad.mul(p, 2.0))
        assert not y.requires_grad
        with pytest.raises(ad.AutodiffError):
            y.backward()

    def test_diamond_graph(self):
        x = ad.Tensor(np.array([2.0]), requires_grad=True)
        left = ad.mul(x, 3.0)
        right = ad.mul(x, 4.0)
        ad.tensor_sum(ad.add(left, right)).backward()
        assert np.allclose(x.grad, [7.0])

    def test_debug_nan_forward(self):
        ad.set_debug_nan(True)
        try:
            with pytest.raises(ad.AutodiffError, match="log"):
                ad.log(ad.Tensor(np.array([-1.0]), requires_grad=True))
        finally:
            ad.set_debug_nan(False)

    def test_debug_allows_masking_infinities(self):
        ad.set_debug_nan(True)
        try:
            x = ad.Tensor(np.zeros((1, 3)), requires_grad=True)
            mask = np.array([[False, True, False]])
            out = ad.softmax(ad.masked_fill(x, mask, -np.inf))
            ad.tensor_sum(ad.mul(out, np.ones((1, 3)))).backward()
        finally:
            ad.set_debug_nan(False)
        assert np.allclose(out.data.sum(), 1.0)

    def test_dtype_preserved(self):
        a = ad.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = ad.mul(ad.add(a, 1.0), 0.5)
        assert out.dtype == np.float32
        ad.tensor_sum(out).backward()
        assert a.grad.dtype == np.float32
