import numpy as np
import pytest

from invtrain import autodiff as ad
from invtrain.autodiff import Tape, Tensor
from invtrain.exceptions import NotScalarError, ShapeMismatchError, TapeConsumedError, ZeroVectorError


def test_l2n_examples():
    np.testing.assert_allclose(ad.l2n(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    np.testing.assert_array_equal(ad.l2n(Tensor([1.0, 0.0, 0.0])).data, [1.0, 0.0, 0.0])


def test_l2n_unit_norm(rng):
    v = rng.normal(size=5)
    v = 7.3 * v / np.linalg.norm(v)
    assert np.linalg.norm(ad.l2n(Tensor(v)).data) == pytest.approx(1.0, abs=1e-9)


def test_l2n_rows_and_zero_vector():
    rows = ad.l2n(Tensor([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(rows.data, [[0.6, 0.8], [0.0, 1.0]])
    with pytest.raises(ZeroVectorError):
        ad.l2n(Tensor([0.0, 0.0]))
    with pytest.raises(ZeroVectorError):
        ad.l2n(Tensor([1e-13, 0.0]))


def test_cosine_sim(rng):
    a = Tensor([1.0, 2.0, 3.0])
    assert ad.cosine_sim(a, a).item() == pytest.approx(1.0, abs=1e-12)
    assert ad.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).item() == 0.0

    x, y = rng.normal(size=6), rng.normal(size=6)
    expected = float(np.dot(x / np.linalg.norm(x), y / np.linalg.norm(y)))
    assert ad.cosine_sim(Tensor(x), Tensor(y)).item() == pytest.approx(expected, abs=1e-12)


def test_backward_sum_and_quadratic():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape():
        ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape():
        ad.backward(ad.scale(ad.dot(x, x), 0.5))
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_accumulates_into_shared_inputs():
    x = Tensor([2.0], requires_grad=True)
    with Tape():
        ad.backward(ad.sum(ad.add(ad.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        with pytest.raises(NotScalarError):
            ad.backward(ad.scale(x, 2.0))

    with Tape() as tape:
        loss = ad.sum(x)
        ad.backward(loss)
        with pytest.raises(TapeConsumedError):
            ad.backward(loss)
        with pytest.raises(TapeConsumedError):
            ad.sum(x)
        tape.reset()
        ad.backward(ad.sum(ad.scale(x, 3.0)))
    np.testing.assert_allclose(x.grad, [4.0, 4.0])


def test_default_tape_is_renewed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum(x))
    ad.backward(ad.sum(x))
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape, ad.no_grad():
        y = ad.sum(ad.mul(x, x))
    assert not y.requires_grad
    assert len(tape) == 0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeMismatchError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatchError):
        ad.cosine_sim(Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_logsumexp_is_stable():
    t = Tensor([1000.0, 1000.0])
    assert ad.logsumexp(t).item() == pytest.approx(1000.0 + np.log(2.0))
    np.testing.assert_allclose(ad.softmax(t).data, [0.5, 0.5])


def test_softmax_is_shift_invariant(rng):
    for _ in range(20):
        x = rng.normal(size=7)
        shifted = ad.softmax(Tensor(x + 1000.0)).data
        assert np.all(np.isfinite(shifted))
        assert np.max(np.abs(shifted - ad.softmax(Tensor(x)).data)) < 1e-9
        assert ad.logsumexp(Tensor(x + 1000.0)).item() == pytest.approx(ad.logsumexp(Tensor(x)).item() + 1000.0)


def test_conv2d_matches_naive_loop(rng):
    x = rng.normal(size=(2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data

    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    expected = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                expected[o, i, j] = np.sum(padded[:, i : i + 3, j : j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_pooling():
    x = Tensor(np.arange(16.0).reshape(1, 4, 4))
    np.testing.assert_allclose(ad.avg_pool2x(x).data, [[[2.5, 4.5], [10.5, 12.5]]])
    np.testing.assert_allclose(ad.global_avg_pool(Tensor(np.full((3, 2, 2), 4.0))).data, [4.0, 4.0, 4.0])
    with pytest.raises(ShapeMismatchError):
        ad.avg_pool2x(Tensor(np.ones((1, 3, 4))))


def test_grad_check_identity_sum(rng):
    assert ad.grad_check(ad.sum, rng.normal(size=7)) < 1e-10


@pytest.mark.parametrize(
    "f",
    [
        lambda x: ad.sum(ad.exp(ad.scale(x, 0.3))),
        lambda x: ad.sum(ad.log(ad.add(ad.mul(x, x), 1.0))),
        lambda x: ad.sum(ad.select(ad.log_softmax(ad.reshape(x, (2, 3)), axis=1), (np.arange(2), [0, 2]))),
        lambda x: ad.logsumexp(x),
        lambda x: ad.sum(ad.mul(ad.l2n(ad.reshape(x, (2, 3))), np.arange(6.0).reshape(2, 3))),
        lambda x: ad.cosine_sim(x, ad.as_tensor(np.linspace(-1, 1, 6))),
        lambda x: ad.sum(ad.matmul(ad.reshape(x, (2, 3)), ad.transpose(ad.reshape(x, (2, 3))))),
        lambda x: ad.sum(ad.concat([x, ad.take_rows(x, [0, 0, 5])])),
        lambda x: ad.sum(ad.mul(ad.broadcast_to(ad.reshape(x, (1, 6)), (3, 6)), np.arange(18.0).reshape(3, 6))),
    ],
)
def test_grad_check_composites(f, rng):
    assert ad.grad_check(f, rng.normal(size=6) + 0.1) < 1e-4


def test_grad_check_conv_and_pool(rng):
    weight = rng.normal(size=(2, 1, 3, 3))

    def f(x):
        hidden = ad.relu(ad.conv2d(ad.reshape(x, (1, 4, 4)), Tensor(weight)))
        return ad.sum(ad.mul(ad.avg_pool2x(hidden), np.arange(8.0).reshape(2, 2, 2)))

    assert ad.grad_check(f, rng.normal(size=16)) < 1e-4


def test_grad_check_conv_weights(rng):
    image = rng.normal(size=(2, 1, 4, 4))

    def f(w):
        return ad.sum(ad.mul(ad.conv2d(Tensor(image), ad.reshape(w, (2, 1, 3, 3))), image[:, :1].repeat(2, axis=1)))

    assert ad.grad_check(f, rng.normal(size=18)) < 1e-4


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.grad_check(ad.sum, [1.0], step=0.0)
