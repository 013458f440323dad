"""Gradient steps shared by the meta-learning loop: SGD, Adagrad and the
first-order / exact meta-gradient.

Everything works on ``dict[str, ndarray]`` parameter maps and a
``grad_fn(params, data) -> (loss, grads)`` callback, so the same code drives
the full network and the scalar toys in the tests.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

Params = dict[str, np.ndarray]
GradFn = Callable[[Mapping[str, np.ndarray], object], tuple[float, Params]]


def adagrad_step(param: np.ndarray, grad: np.ndarray, acc: np.ndarray, lr: float, eps: float = 1e-8):
    """One Adagrad update; returns ``(new_param, new_acc)``."""
    if param.shape != grad.shape or acc.shape != grad.shape:
        raise ValueError(f"adagrad_step: shape mismatch {param.shape}, {grad.shape}, {acc.shape}")
    acc = acc + grad * grad
    return param - lr * grad / (np.sqrt(acc) + eps), acc


class Adagrad:
    def __init__(self, lr: float, eps: float = 1e-8, accumulators: Mapping[str, np.ndarray] | None = None):
        self.lr = lr
        self.eps = eps
        self.acc: Params = {k: v.copy() for k, v in (accumulators or {}).items()}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], scale: float = 1.0) -> Params:
        out = dict(params)
        for name, g in grads.items():
            acc = self.acc.get(name)
            if acc is None:
                acc = np.zeros_like(g)
            out[name], self.acc[name] = adagrad_step(params[name], scale * g, acc, self.lr, self.eps)
        return out


def sgd(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Params:
    out = dict(params)
    for name, g in grads.items():
        out[name] = params[name] - lr * g
    return out


def _check_finite(loss: float, grads: Mapping[str, np.ndarray], where: str) -> None:
    if not np.isfinite(loss):
        raise FloatingPointError(f"{where}: non-finite loss {loss}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"{where}: non-finite gradient in {bad[:5]}")


INNER_RULES = ("sgd", "adagrad")
INNER_EPS = 1e-8


def inner_step_size(g: np.ndarray, rule: str) -> np.ndarray:
    """Per-coordinate multiplier on ``alpha`` for one inner step.

    ``sgd`` moves by ``g``; ``adagrad`` is one Adagrad step from a zero
    accumulator, ``g / (|g| + eps)``, so every coordinate moves by about ``alpha``.
    """
    if rule == "sgd":
        return g
    if rule == "adagrad":
        return g / (np.abs(g) + INNER_EPS)
    raise ValueError(f"unknown inner rule {rule!r}; expected one of {INNER_RULES}")


def _inner_slope(g: np.ndarray, rule: str) -> np.ndarray:
    """Elementwise derivative of ``inner_step_size`` with respect to ``g``."""
    if rule == "sgd":
        return np.ones_like(g)
    return INNER_EPS / (np.abs(g) + INNER_EPS) ** 2


def _inner_apply(params, grads, alpha: float, rule: str) -> Params:
    out = dict(params)
    for name, g in grads.items():
        out[name] = params[name] - alpha * inner_step_size(g, rule)
    return out


def inner_update(params: Mapping[str, np.ndarray], grad_fn: GradFn, support, alpha: float, rule: str = "sgd") -> Params:
    """Exactly one gradient step on the support loss: ``theta - alpha * grad``
    for ``sgd`` or a fresh-accumulator Adagrad step for ``adagrad``."""
    if rule not in INNER_RULES:
        raise ValueError(f"unknown inner rule {rule!r}; expected one of {INNER_RULES}")
    loss, grads = grad_fn(params, support)
    _check_finite(loss, grads, "inner_update")
    return _inner_apply(params, grads, alpha, rule)


def hessian_vector(params: Mapping[str, np.ndarray], grad_fn: GradFn, data, vec: Mapping[str, np.ndarray]) -> Params:
    """Central difference of the gradient along ``vec``: (g(p + e v) - g(p - e v)) / 2e."""
    norm = np.sqrt(sum(float(np.sum(v * v)) for v in vec.values()))
    if norm == 0.0:
        return {k: np.zeros_like(v) for k, v in vec.items()}
    scale = np.sqrt(sum(float(np.sum(params[k] ** 2)) for k in vec))
    eps = 1e-5 * max(1.0, scale) / norm
    plus = dict(params)
    minus = dict(params)
    for k, v in vec.items():
        plus[k] = params[k] + eps * v
        minus[k] = params[k] - eps * v
    _, gp = grad_fn(plus, data)
    _, gm = grad_fn(minus, data)
    out = {k: (gp[k] - gm[k]) / (2.0 * eps) for k in vec}
    _check_finite(0.0, out, "hessian_vector")
    return out


def meta_gradient(
    params: Mapping[str, np.ndarray],
    grad_fn: GradFn,
    support,
    query,
    alpha: float,
    mode: str = "first-order",
    rule: str = "sgd",
) -> tuple[float, Params, Params]:
    """Adapt on ``support`` then differentiate the query loss.

    Returns ``(query_loss, meta_grad, adapted_params)``.  In exact mode the
    query gradient is pulled back through the inner step:
    ``g - alpha * H_support (s * g)`` with ``s`` the elementwise slope of the
    step rule (all ones for plain SGD).
    """
    if mode not in ("first-order", "exact"):
        raise ValueError(f"unknown meta-gradient mode {mode!r}")
    if rule not in INNER_RULES:
        raise ValueError(f"unknown inner rule {rule!r}; expected one of {INNER_RULES}")
    s_loss, s_grad = grad_fn(params, support)
    _check_finite(s_loss, s_grad, "inner_update")
    adapted = _inner_apply(params, s_grad, alpha, rule)
    q_loss, q_grad = grad_fn(adapted, query)
    _check_finite(q_loss, q_grad, "meta_gradient")
    if mode == "exact" and alpha != 0.0:
        vec = {k: _inner_slope(s_grad[k], rule) * g for k, g in q_grad.items()}
        hv = hessian_vector(params, grad_fn, support, vec)
        q_grad = {k: g - alpha * hv[k] for k, g in q_grad.items()}
    return q_loss, q_grad, adapted


def outer_update(
    params: Mapping[str, np.ndarray],
    grad_fn: GradFn,
    tasks: Sequence[tuple[object, object]],
    alpha: float,
    beta: float,
    mode: str = "first-order",
    optimizer: Adagrad | None = None,
    scale: float = 1.0,
    rule: str = "sgd",
) -> tuple[Params, float]:
    """One meta step over ``(support, query)`` tasks; returns ``(params, mean query loss)``.

    With ``optimizer=None`` the step is plain SGD with rate ``beta``; otherwise
    the optimizer's own rate applies.
    """
    total: Params | None = None
    losses = []
    for support, query in tasks:
        loss, g, _ = meta_gradient(params, grad_fn, support, query, alpha, mode, rule)
        losses.append(loss)
        total = g if total is None else {k: total[k] + g[k] for k in total}
    if total is None:
        return dict(params), float("nan")
    mean = {k: v / len(tasks) for k, v in total.items()}
    if optimizer is None:
        return sgd(params, {k: scale * v for k, v in mean.items()}, beta), float(np.mean(losses))
    return optimizer.step(params, mean, scale), float(np.mean(losses))
