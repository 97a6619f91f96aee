import numpy as np
import pytest

import vtam.autodiff as ad
from vtam.optim import AdamWState, adamw_step


def rng_for(name):
    return np.random.default_rng(abs(hash(name)) % (2**31))


def check_case(build_fn, params, inputs, tol=1e-4):
    report = ad.grad_check(build_fn, params, inputs)
    assert report["passed"], f"max rel err {report['max_error']:.2e} > {tol}"
    return report


def _p(rng, *shape):
    return ad.parameter(rng.standard_normal(shape))


OP_CASES = {}


def op_case(name):
    def deco(fn):
        OP_CASES[name] = fn
        return fn
    return deco


@op_case("matmul")
def _(rng):
    params = {"a": _p(rng, 3, 4), "b": _p(rng, 4, 5)}
    return lambda i, p: {"loss": ad.mean_square(ad.matmul(p["a"], p["b"]))}, params


@op_case("matmul_batched")
def _(rng):
    params = {"a": _p(rng, 2, 3, 4), "b": _p(rng, 4, 5)}
    return lambda i, p: {"loss": ad.mean_square(ad.matmul(p["a"], p["b"]))}, params


@op_case("add_broadcast")
def _(rng):
    params = {"a": _p(rng, 2, 3, 4), "b": _p(rng, 4)}
    return lambda i, p: {"loss": ad.mean_square(ad.add(p["a"], p["b"]))}, params


@op_case("mul_broadcast")
def _(rng):
    params = {"a": _p(rng, 2, 5), "b": _p(rng, 1, 5)}
    return lambda i, p: {"loss": ad.mean_square(ad.mul(p["a"], p["b"]))}, params


@op_case("reshape")
def _(rng):
    params = {"a": _p(rng, 6, 4)}
    return lambda i, p: {"loss": ad.mean_square(ad.reshape(p["a"], (2, 12)))}, params


@op_case("softmax")
def _(rng):
    params = {"a": _p(rng, 3, 7)}
    return lambda i, p: {"loss": ad.mean_square(ad.softmax(p["a"]))}, params


@op_case("layer_norm")
def _(rng):
    params = {"a": _p(rng, 4, 9)}
    return lambda i, p: {"loss": ad.mean_square(ad.layer_norm(p["a"]))}, params


@op_case("gelu")
def _(rng):
    params = {"a": _p(rng, 5, 6)}
    return lambda i, p: {"loss": ad.mean_square(ad.gelu(p["a"]))}, params


@op_case("silu")
def _(rng):
    params = {"a": _p(rng, 5, 6)}
    return lambda i, p: {"loss": ad.mean_square(ad.silu(p["a"]))}, params


@op_case("attention")
def _(rng):
    params = {"q": _p(rng, 2, 5, 4), "k": _p(rng, 2, 5, 4), "v": _p(rng, 2, 5, 4)}
    return lambda i, p: {"loss": ad.mean_square(ad.attention(p["q"], p["k"], p["v"]))}, params


@op_case("concat")
def _(rng):
    params = {"a": _p(rng, 3, 2), "b": _p(rng, 3, 5)}
    return lambda i, p: {"loss": ad.mean_square(ad.concat([p["a"], p["b"]], axis=-1))}, params


@op_case("getitem")
def _(rng):
    params = {"a": _p(rng, 4, 6)}
    return lambda i, p: {"loss": ad.mean_square(p["a"][1:3, ::2])}, params


@op_case("sum_mean")
def _(rng):
    params = {"a": _p(rng, 3, 4, 2)}
    return lambda i, p: {"loss": ad.tmean(ad.mul(ad.tsum(p["a"], axis=1), p["a"][:, 0]))}, params


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    build_fn, params = OP_CASES[name](rng_for(name))
    check_case(build_fn, params, {})


def test_softmax_rows_sum_to_one():
    rng = rng_for("softmaxsum")
    for _ in range(10):
        shape = tuple(rng.integers(1, 6, size=int(rng.integers(1, 4))))
        x = ad.tensor(rng.standard_normal((*shape, int(rng.integers(1, 9)))) * 10)
        y = ad.softmax(x).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_uniform_on_equal_logits():
    y = ad.softmax(ad.tensor([0.0, 0.0, 0.0])).data
    np.testing.assert_allclose(y, [1 / 3] * 3, atol=1e-15)


def test_layer_norm_statistics():
    rng = rng_for("ln")
    x = ad.tensor(rng.standard_normal((6, 32)) * 3 + 1.5)
    y = ad.layer_norm(x).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() <= 1e-6


def test_matmul_identity():
    rng = rng_for("ident")
    a = rng.standard_normal((3, 3))
    out = ad.matmul(ad.tensor(np.eye(3)), ad.tensor(a)).data
    np.testing.assert_array_equal(out, a)


def test_attention_single_key_returns_value():
    rng = rng_for("attn1")
    q = ad.tensor(rng.standard_normal((4, 3)))
    k = ad.tensor(rng.standard_normal((1, 3)))
    v = ad.tensor(rng.standard_normal((1, 3)))
    out = ad.attention(q, k, v).data
    np.testing.assert_allclose(out, np.repeat(v.data, 4, axis=0), atol=1e-14)


def test_evaluate_deterministic():
    rng = rng_for("det")
    x = rng.standard_normal((4, 8))
    w = rng.standard_normal((8, 8))

    def run():
        t = ad.matmul(ad.tensor(x), ad.tensor(w))
        return ad.softmax(ad.layer_norm(ad.gelu(t))).data

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_shape_errors_name_the_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((4, 5))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((4, 5))))
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((3, 3)))], axis=-1)


def test_backward_requires_scalar_loss():
    x = ad.parameter(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(x, x))


def test_graph_scalar_quadratic_gradient():
    p = ad.parameter(np.array([2.0]))
    g = ad.Graph(lambda i, pp: {"loss": ad.mean_square(ad.sub(pp["p"], 0.5))}, {"p": p})
    g.evaluate({})
    grads = g.backward()
    np.testing.assert_allclose(grads["p"], 2 * (2.0 - 0.5), atol=1e-12)


def test_graph_unreachable_parameter_gets_zero_gradient():
    used = ad.parameter(np.ones((2,)))
    unused = ad.parameter(np.ones((3,)))
    g = ad.Graph(lambda i, p: {"loss": ad.mean_square(p["used"])},
                 {"used": used, "unused": unused})
    g.evaluate({})
    grads = g.backward()
    assert np.array_equal(grads["unused"], np.zeros(3))
    assert np.any(grads["used"] != 0)


def test_gradient_independent_of_untouched_param_is_exact_zero():
    p = ad.parameter(np.array([1.0, 2.0]))
    q = ad.parameter(np.array([3.0]))
    loss = ad.add(ad.mean_square(p), ad.scale(ad.mean_square(q), 0.0))
    ad.backward(loss)
    assert np.array_equal(q.grad, np.zeros(1))


class TestAdamW:
    def test_zero_gradient_no_decay_keeps_params(self):
        p = {"w": ad.parameter(np.array([1.0, -2.0]))}
        state = AdamWState.for_params(p)
        adamw_step(p, {"w": np.zeros(2)}, state, lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_zero_gradient_decay_shrinks_params(self):
        p = {"w": ad.parameter(np.array([1.0, -2.0]))}
        state = AdamWState.for_params(p)
        adamw_step(p, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5),
                                   atol=1e-15)

    def test_first_step_closed_form(self):
        p = {"w": ad.parameter(np.array([1.0]))}
        state = AdamWState.for_params(p)
        adamw_step(p, {"w": np.array([0.5])}, state, lr=1e-3, weight_decay=0.0, eps=1e-8)
        expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)
        np.testing.assert_allclose(p["w"].data, [expected], atol=1e-12)

    def test_global_norm_clipping_applied_before_moments(self):
        p = {"a": ad.parameter(np.zeros(1)), "b": ad.parameter(np.zeros(1))}
        state = AdamWState.for_params(p)
        adamw_step(p, {"a": np.array([3.0]), "b": np.array([4.0])}, state,
                   lr=1.0, weight_decay=0.0, clip_norm=1.0)
        # after clipping the joint norm is 1, so moments see (0.6, 0.8)
        np.testing.assert_allclose(state.first_moment["a"], [0.1 * 0.6], atol=1e-12)
        np.testing.assert_allclose(state.first_moment["b"], [0.1 * 0.8], atol=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        p = {"bad_param": ad.parameter(np.zeros(1))}
        state = AdamWState.for_params(p)
        with pytest.raises(FloatingPointError, match="bad_param"):
            adamw_step(p, {"bad_param": np.array([np.nan])}, state, lr=1e-3)

    def test_nonpositive_lr_rejected(self):
        p = {"w": ad.parameter(np.zeros(1))}
        state = AdamWState.for_params(p)
        with pytest.raises(ValueError):
            adamw_step(p, {"w": np.zeros(1)}, state, lr=0.0)
