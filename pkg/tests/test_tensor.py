import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedu import nn
from fedu import tensor as T
from fedu.errors import ContractError, DegenerateInputError, DimensionError
from fedu.tensor import Tensor

import oracles


def leaf(values):
    return Tensor(values, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_one_by_one(self):
        assert T.matmul(Tensor([[2]]), Tensor([[3]])).data.tolist() == [[6]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        w = rng.standard_normal((3, 2))
        ta, tb = leaf(a), leaf(b)
        T.sum(T.mul(T.matmul(ta, tb), Tensor(w))).backward()
        fd = oracles.central_difference(lambda arrs: float(((arrs[0] @ arrs[1]) * w).sum()), [a.copy(), b.copy()])
        assert oracles.relative_error([ta.grad, tb.grad], fd) < 1e-6


class TestElementwise:
    def test_relu(self):
        assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_relu_gradient_zero_at_zero(self):
        x = leaf([-1.0, 0.0, 2.0])
        T.sum(T.relu(x)).backward()
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_add_zero_is_identity(self):
        x = Tensor([1.5, -2.0])
        np.testing.assert_array_equal(T.add(x, 0).data, x.data)
        np.testing.assert_array_equal(T.add(x, Tensor(np.zeros(2))).data, x.data)

    def test_scale(self):
        assert T.scale(Tensor([1.0, 2.0]), 0.5).data.tolist() == [0.5, 1.0]

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
    def test_shape_mismatch(self, op):
        with pytest.raises(DimensionError):
            op(Tensor(np.ones(3)), Tensor(np.ones(2)))

    def test_sub_gradients(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0, 5.0])
        T.sum(T.sub(a, b)).backward()
        assert a.grad.tolist() == [1, 1] and b.grad.tolist() == [-1, -1]

    def test_bias_add_gradient_sums_rows(self):
        x, b = leaf(np.ones((3, 2))), leaf([0.0, 0.0])
        T.sum(T.bias_add(x, b)).backward()
        assert b.grad.tolist() == [3.0, 3.0]


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(T.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], rtol=0, atol=1e-15)

    def test_unit_vector_unchanged(self):
        np.testing.assert_array_equal(T.l2_normalize(Tensor([[0.0, 1.0, 0.0]])).data, [[0.0, 1.0, 0.0]])

    def test_row_norms_are_one(self):
        x = np.random.default_rng(1).standard_normal((50, 7)) * 10
        norms = np.linalg.norm(T.l2_normalize(Tensor(x)).data, axis=1)
        assert np.max(np.abs(norms - 1)) <= 1e-12

    def test_zero_row_reports_index(self):
        with pytest.raises(DegenerateInputError) as exc:
            T.l2_normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]))
        assert exc.value.row == 1

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-100, 100)))
    def test_idempotent(self, x):
        if np.any(np.linalg.norm(x, axis=1) <= 1e-6):
            return
        once = T.l2_normalize(Tensor(x)).data
        np.testing.assert_allclose(T.l2_normalize(Tensor(once)).data, once, rtol=0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x, w = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        tx = leaf(x)
        T.sum(T.mul(T.l2_normalize(tx), Tensor(w))).backward()

        def f(arrs):
            z = arrs[0] / np.linalg.norm(arrs[0], axis=1, keepdims=True)
            return float((z * w).sum())

        assert oracles.relative_error([tx.grad], oracles.central_difference(f, [x.copy()])) < 1e-7


class TestContrastiveLoss:
    def test_identical_directions(self):
        y = Tensor([[1.0, 2.0, -3.0]])
        assert T.contrastive_loss(y, Tensor([[2.0, 4.0, -6.0]])).item() == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert T.contrastive_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item() == 2.0

    def test_antiparallel(self):
        assert T.contrastive_loss(Tensor([[1.0, 1.0]]), Tensor([[-1.0, -1.0]])).item() == pytest.approx(4.0, abs=1e-15)

    def test_batch_mean(self):
        y = Tensor([[1.0, 0.0], [1.0, 0.0]])
        assert T.contrastive_loss(y, Tensor([[1.0, 0.0], [0.0, 1.0]])).item() == pytest.approx(1.0)

    def test_zero_row(self):
        with pytest.raises(DegenerateInputError):
            T.contrastive_loss(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))

    def test_target_receives_no_gradient(self):
        y, yt = leaf([[1.0, 2.0]]), leaf([[0.5, -1.0]])
        T.contrastive_loss(y, yt).backward()
        assert y.grad is not None
        assert yt.grad is None

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
        arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
    )
    def test_range(self, a, b):
        if np.any(np.linalg.norm(a, axis=1) <= 1e-6) or np.any(np.linalg.norm(b, axis=1) <= 1e-6):
            return
        loss = T.contrastive_loss(Tensor(a), Tensor(b)).item()
        assert -1e-12 <= loss <= 4 + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
        st.lists(st.floats(0.01, 100), min_size=3, max_size=3),
    )
    def test_zero_for_positive_multiples(self, a, factors):
        if np.any(np.linalg.norm(a, axis=1) <= 1e-3):
            return
        b = a * np.array(factors)[:, None]
        assert abs(T.contrastive_loss(Tensor(a), Tensor(b)).item()) < 1e-12


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = leaf([1.0, 2.0, 3.0])
        T.sum(x).backward()
        assert x.grad.tolist() == [1, 1, 1]

    def test_non_scalar_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            T.scale(x, 2.0).backward()

    def test_untracked_rejected(self):
        with pytest.raises(ContractError):
            T.sum(Tensor([1.0])).backward()

    def test_reuse_accumulates(self):
        x = leaf([1.0, 2.0])
        T.sum(T.add(x, x)).backward()
        assert x.grad.tolist() == [2.0, 2.0]

    def test_repeated_backward_accumulates(self):
        x = leaf([3.0])
        T.sum(x).backward()
        T.sum(x).backward()
        assert x.grad.tolist() == [2.0]

    def test_every_reachable_tensor_gets_grad(self):
        x = leaf(np.ones((2, 2)))
        h = T.relu(T.matmul(x, leaf(np.eye(2))))
        loss = T.sum(h)
        loss.backward()
        assert h.grad is not None and h.grad.shape == h.shape
        assert x.grad.shape == x.shape

    def test_detached_branch_gets_nothing(self):
        x = leaf([1.0, 2.0])
        loss = T.sum(T.mul(x, x.detach()))
        loss.backward()
        assert x.grad.tolist() == [1.0, 2.0]

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(3)
        z, y = rng.standard_normal((5, 3)), np.array([0, 2, 1, 1, 0])
        tz = leaf(z)
        T.cross_entropy(tz, y).backward()

        def f(arrs):
            s = arrs[0] - arrs[0].max(axis=1, keepdims=True)
            lp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
            return float(-lp[np.arange(5), y].mean())

        assert oracles.relative_error([tz.grad], oracles.central_difference(f, [z.copy()])) < 1e-7


def mlp_contrastive_case(seed):
    """Random MLP encoder + predictor with a contrastive loss; returns (autodiff, fd) grads."""
    rng = np.random.default_rng(seed)
    d_in, rep = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    enc_w = (d_in, *[int(w) for w in rng.integers(2, 7, size=rng.integers(0, 2))], rep)
    pred_w = (rep, int(rng.integers(2, 7)), rep)
    enc_spec, pred_spec = nn.MlpSpec(enc_w), nn.MlpSpec(pred_w)
    enc, pred = nn.init_mlp(enc_spec, rng), nn.init_mlp(pred_spec, rng)
    batch = int(rng.integers(1, 5))
    x = rng.standard_normal((batch, d_in))
    y_target = rng.standard_normal((batch, rep))

    loss = T.contrastive_loss(nn.forward(pred_spec, pred, nn.forward(enc_spec, enc, Tensor(x))), Tensor(y_target))
    loss.backward()
    auto = [t.grad for t in enc.tensors()] + [t.grad for t in pred.tensors()]

    n_enc = len(enc)

    def f(arrs):
        y = oracles.mlp_numpy(pred_w, arrs[n_enc:], oracles.mlp_numpy(enc_w, arrs[:n_enc], x))
        return oracles.cosine_loss_numpy(y, y_target)

    arrays_ = [t.data.copy() for t in enc.tensors()] + [t.data.copy() for t in pred.tensors()]
    return auto, oracles.central_difference(f, arrays_, h=1e-5)


@pytest.mark.parametrize("seed", range(20))
def test_mlp_contrastive_gradients(seed):
    auto, fd = mlp_contrastive_case(seed)
    assert oracles.relative_error(auto, fd) < 1e-4
