import numpy as np
import pytest

from lsttm import autodiff as ad
from lsttm.optim import Adagrad, adagrad_step, hessian_vector, inner_update, meta_gradient, outer_update


def quad_grad_fn(params, data):
    """Loss (θ - 1)^2 regardless of the data."""
    t = params["t"]
    return float(((t - 1.0) ** 2).sum()), {"t": 2.0 * (t - 1.0)}


THETA = {"t": np.array([0.0])}


def test_inner_update_scalar_toy():
    assert inner_update(THETA, quad_grad_fn, None, 0.1)["t"][0] == pytest.approx(0.2, abs=1e-12)


def test_inner_update_zero_step_is_identity():
    assert inner_update(THETA, quad_grad_fn, None, 0.0)["t"][0] == 0.0


def test_outer_first_order_and_exact_scalar_toy():
    fo, _ = outer_update(THETA, quad_grad_fn, [(None, None)], 0.1, 0.1, "first-order")
    ex, _ = outer_update(THETA, quad_grad_fn, [(None, None)], 0.1, 0.1, "exact")
    assert abs(fo["t"][0] - 0.16) <= 1e-12
    assert abs(ex["t"][0] - 0.128) <= 1e-12


def test_outer_zero_rate_keeps_params():
    out, _ = outer_update(THETA, quad_grad_fn, [(None, None)], 0.1, 0.0)
    assert out["t"][0] == 0.0


def test_non_finite_loss_aborts():
    def bad(params, data):
        return float("nan"), {"t": np.zeros(1)}

    with pytest.raises(FloatingPointError):
        inner_update(THETA, bad, None, 0.1)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        meta_gradient(THETA, quad_grad_fn, None, None, 0.1, "second")


def test_adagrad_step_examples():
    p, acc = adagrad_step(np.array([1.0]), np.array([2.0]), np.array([0.0]), 0.01)
    assert p[0] - 1.0 == pytest.approx(-0.01, rel=1e-7)
    p0, acc0 = adagrad_step(np.array([1.0]), np.array([0.0]), np.array([3.0]), 0.01)
    assert p0[0] == 1.0 and acc0[0] == 3.0
    p2, _ = adagrad_step(p, np.array([2.0]), acc, 0.01)
    assert abs(p2[0] - p[0]) < abs(p[0] - 1.0)


def test_adagrad_accumulators_never_decrease():
    rng = np.random.default_rng(0)
    opt = Adagrad(0.1)
    params = {"w": rng.normal(size=(3, 2))}
    prev = np.zeros((3, 2))
    for _ in range(20):
        params = opt.step(params, {"w": rng.normal(size=(3, 2))})
        assert np.all(opt.acc["w"] >= prev)
        prev = opt.acc["w"].copy()


def test_adagrad_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adagrad_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1)


# a tiny logistic model with well under 50 parameters

RNG = np.random.default_rng(3)
X = RNG.normal(size=(40, 5))
Y = (RNG.random(40) < 0.5).astype(float)


def logistic_loss(P, rows):
    z = ad.add(ad.matmul(ad.const(X[rows]), ad.leaky_relu(P["W"])), P["b"])
    h = ad.matmul(ad.sigmoid(z), P["v"])
    y = ad.const((2 * Y[rows] - 1).reshape(-1, 1))
    return ad.mul(ad.mean(ad.log(ad.sigmoid(ad.mul(h, y)))), ad.const(-1.0))


def logistic_grad_fn(params, rows):
    P = {k: ad.leaf(v) for k, v in params.items()}
    loss = logistic_loss(P, rows)
    g = ad.backward(loss, list(P.values()))
    return float(loss.value), {k: g[P[k]] for k in params}


TOY = {"W": RNG.normal(size=(5, 3)), "b": RNG.normal(size=(1, 3)) * 0.1, "v": RNG.normal(size=(3, 1))}
SUPPORT, QUERY = np.arange(0, 20), np.arange(20, 40)


def _query_after_step(flat, alpha):
    params, off = {}, 0
    for k, v in TOY.items():
        params[k] = flat[off:off + v.size].reshape(v.shape)
        off += v.size
    adapted = inner_update(params, logistic_grad_fn, SUPPORT, alpha)
    return logistic_grad_fn(adapted, QUERY)[0]


def test_exact_meta_gradient_matches_finite_differences():
    assert sum(v.size for v in TOY.values()) <= 50
    alpha = 0.5
    _, g, _ = meta_gradient(TOY, logistic_grad_fn, SUPPORT, QUERY, alpha, "exact")
    analytic = np.concatenate([g[k].ravel() for k in TOY])
    flat = np.concatenate([v.ravel() for v in TOY.values()])
    h = 1e-5
    numeric = np.array([
        (_query_after_step(flat + h * e, alpha) - _query_after_step(flat - h * e, alpha)) / (2 * h)
        for e in np.eye(len(flat))
    ])
    rel = np.abs(analytic - numeric) / np.maximum(1e-3, np.abs(numeric))
    assert rel.max() <= 1e-3


def test_first_order_differs_from_exact_on_curved_loss():
    _, g_fo, _ = meta_gradient(TOY, logistic_grad_fn, SUPPORT, QUERY, 0.5, "first-order")
    _, g_ex, _ = meta_gradient(TOY, logistic_grad_fn, SUPPORT, QUERY, 0.5, "exact")
    assert not np.allclose(g_fo["W"], g_ex["W"])


def test_hessian_vector_matches_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])

    def gf(params, data):
        x = params["x"]
        return float(0.5 * x @ A @ x), {"x": A @ x}

    hv = hessian_vector({"x": np.array([0.3, -0.7])}, gf, None, {"x": np.array([1.0, 2.0])})
    np.testing.assert_allclose(hv["x"], A @ [1.0, 2.0], rtol=1e-8)


def test_support_equals_query_first_order_is_two_sgd_steps():
    rows = np.arange(10)
    a, b = 0.3, 0.2
    composite, _ = outer_update(TOY, logistic_grad_fn, [(rows, rows)], a, b, "first-order")
    step1 = inner_update(TOY, logistic_grad_fn, rows, a)
    _, g = logistic_grad_fn(step1, rows)
    manual = {k: TOY[k] - b * g[k] for k in TOY}
    for k in TOY:
        np.testing.assert_allclose(composite[k], manual[k], rtol=0, atol=1e-15)


def test_adagrad_inner_rule_scalar_toy():
    # g = -2 from a zero accumulator: step alpha * 2 / (2 + eps)
    out = inner_update(THETA, quad_grad_fn, None, 0.1, "adagrad")
    assert out["t"][0] == pytest.approx(0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)


def test_adagrad_inner_rule_moves_each_coordinate_by_alpha():
    out = inner_update(TOY, logistic_grad_fn, SUPPORT, 0.01, "adagrad")
    _, g = logistic_grad_fn(TOY, SUPPORT)
    for k in TOY:
        np.testing.assert_allclose(np.abs(out[k] - TOY[k]), 0.01 * np.abs(g[k]) / (np.abs(g[k]) + 1e-8), rtol=1e-9)
        assert np.all(np.sign(out[k] - TOY[k]) == -np.sign(g[k]))


def test_unknown_inner_rule_rejected():
    with pytest.raises(ValueError):
        inner_update(THETA, quad_grad_fn, None, 0.1, "adam")


def test_exact_meta_gradient_with_adagrad_inner_rule_matches_finite_differences():
    alpha = 0.05

    def query_loss(flat):
        params, off = {}, 0
        for k, v in TOY.items():
            params[k] = flat[off:off + v.size].reshape(v.shape)
            off += v.size
        return logistic_grad_fn(inner_update(params, logistic_grad_fn, SUPPORT, alpha, "adagrad"), QUERY)[0]

    _, g, _ = meta_gradient(TOY, logistic_grad_fn, SUPPORT, QUERY, alpha, "exact", "adagrad")
    analytic = np.concatenate([g[k].ravel() for k in TOY])
    flat = np.concatenate([v.ravel() for v in TOY.values()])
    h = 1e-6
    numeric = np.array([(query_loss(flat + h * e) - query_loss(flat - h * e)) / (2 * h) for e in np.eye(len(flat))])
    rel = np.abs(analytic - numeric) / np.maximum(1e-3, np.abs(numeric))
    assert rel.max() <= 1e-3
