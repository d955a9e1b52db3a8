import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from levytd import autodiff as ad


def grad_of(fn, *arrays_):
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays_]
    with ad.Tape() as tape:
        out = fn(*leaves)
    return out, tape.gradient(out, leaves)


def central_fd(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def test_matmul_identity():
    v = np.array([[0.3], [-1.7]])
    assert np.array_equal(ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor(v)).data, v)


def test_tanh_zero():
    assert ad.tanh(ad.Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]


def test_sum_squares_value_and_gradient():
    out, (g,) = grad_of(ad.sum_squares, np.array([1.0, 2.0]))
    assert out.item() == 5.0
    assert g.data.tolist() == [2.0, 4.0]
    assert ad.sum_squares(ad.Tensor(np.array([3.0, 4.0]))).item() == 25.0


def test_tanh_chain_rule():
    x = ad.Tensor(np.array(1.0))
    _, (g,) = grad_of(lambda w: ad.tanh(w * x), np.array(0.5))
    assert g.item() == pytest.approx(1 - np.tanh(0.5) ** 2, abs=1e-12)
    assert g.item() == pytest.approx(0.786448, abs=1e-6)


def test_scale_concat_affine():
    a = ad.Tensor(np.ones((2, 1)))
    b = ad.Tensor(np.full((2, 2), 2.0))
    assert ad.concat([a, b], axis=1).shape == (2, 3)
    assert np.array_equal(ad.scale(b, 0.5).data, np.ones((2, 2)))
    W = ad.Tensor(np.array([[1.0, 2.0]]))
    out = ad.affine(W, ad.Tensor(np.array([[1.0, 1.0], [0.0, 1.0]])), ad.Tensor(np.array([0.5])))
    assert out.data.ravel().tolist() == [3.5, 2.5]


@pytest.mark.parametrize(
    "op, shapes",
    [
        (ad.matmul, [(2, 3), (4, 2)]),
        (ad.add, [(2, 3), (3, 3)]),
        (ad.concat, None),
        (lambda W, x, b: ad.affine(W, x, b), [(3, 2), (4, 3), (4,)]),
    ],
)
def test_shape_mismatch_names_both_shapes(op, shapes):
    if shapes is None:
        with pytest.raises(ad.DimensionError):
            ad.concat([ad.Tensor(np.ones((2, 1))), ad.Tensor(np.ones((3, 1)))], axis=1)
        return
    with pytest.raises(ad.DimensionError) as err:
        op(*(ad.Tensor(np.ones(s)) for s in shapes))
    assert "(" in str(err.value)


def test_non_scalar_root_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tanh(x)
    with pytest.raises(ValueError):
        tape.gradient(y, [x])


def test_backward_function_form():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_squares(ad.scale(x, 3.0))
    grads = ad.backward(tape, y)
    assert np.allclose(grads[x].data, 18.0 * x.data)


def test_unreachable_source_gets_zero():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    z = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum(x)
    gx, gz = tape.gradient(y, [x, z])
    assert gz.data.tolist() == [0.0, 0.0, 0.0]
    assert gx.data.tolist() == [1.0, 1.0]


def test_no_record_builds_no_graph():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape, ad.no_record():
        ad.tanh(x)
    assert len(tape) == 0


def _composite(W, x, b):
    h = ad.tanh(ad.affine(W, x, b))
    parts = ad.concat([h, ad.tanh(h) * h], axis=1)
    return ad.mean(parts * parts) + ad.sum(ad.abs(h[:, 0:1] - 0.1))


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(0)
    arrays_ = [rng.normal(size=(3, 2)), rng.normal(size=(5, 2)), rng.normal(size=3)]
    _, grads = grad_of(_composite, *arrays_)
    for i, g in enumerate(grads):

        def f(a, i=i):
            args = [ad.Tensor(v) for v in arrays_]
            args[i] = ad.Tensor(a)
            return _composite(*args).item()

        assert rel_err(g.data, central_fd(f, arrays_[i])) < 1e-5


def test_double_backward_matches_finite_differences():
    # d/dW of |d/dx sum tanh(x W^T)|^2, the shape needed for gradient losses
    rng = np.random.default_rng(1)
    W0, x0 = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))

    def inner_norm(Wa, requires=True):
        W = ad.Tensor(Wa, requires_grad=requires)
        x = ad.Tensor(x0, requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum(ad.tanh(ad.matmul(x, ad.transpose(W))))
            (gx,) = tape.gradient(y, [x], create_graph=True)
            loss = ad.sum_squares(gx)
        return W, tape, loss

    W, tape, loss = inner_norm(W0)
    (gW,) = tape.gradient(loss, [W])
    fd = central_fd(lambda a: inner_norm(a)[2].item(), W0)
    assert rel_err(gW.data, fd) < 1e-5


def test_backward_is_linear_in_root():
    rng = np.random.default_rng(2)
    a0 = rng.normal(size=(3, 3))
    a = ad.Tensor(a0, requires_grad=True)
    with ad.Tape() as tape:
        f = ad.sum(ad.tanh(a))
        g = ad.sum_squares(a)
        both = f + g
    (gf,) = tape.gradient(f, [a])
    (gg,) = tape.gradient(g, [a])
    (gb,) = tape.gradient(both, [a])
    assert np.allclose(gb.data, gf.data + gg.data, atol=1e-14)


def test_gradients_are_deterministic():
    rng = np.random.default_rng(3)
    arrays_ = [rng.normal(size=(3, 2)), rng.normal(size=(5, 2)), rng.normal(size=3)]
    _, g1 = grad_of(_composite, *arrays_)
    _, g2 = grad_of(_composite, *arrays_)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(g1, g2))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_tanh_gradient_property(a):
    _, (g,) = grad_of(lambda t: ad.sum(ad.tanh(t)), a)
    assert np.allclose(g.data, 1 - np.tanh(a) ** 2, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (2, 3), elements=st.floats(-2, 2)),
    arrays(np.float64, (3, 2), elements=st.floats(-2, 2)),
)
def test_matmul_gradient_property(a, b):
    _, (ga, gb) = grad_of(lambda x, y: ad.sum(ad.matmul(x, y)), a, b)
    ones = np.ones((2, 2))
    assert np.allclose(ga.data, ones @ b.T)
    assert np.allclose(gb.data, a.T @ ones)


def test_scatter_add_and_segment_sum():
    v = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with ad.Tape() as tape:
        s = ad.segment_sum(v, np.array([0, 2, 0]), 3)
        out = ad.sum_squares(s)
    assert s.data.tolist() == [4.0, 0.0, 2.0]
    (g,) = tape.gradient(out, [v])
    assert g.data.tolist() == [8.0, 4.0, 8.0]
