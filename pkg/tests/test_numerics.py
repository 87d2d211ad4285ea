from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fidlab import numerics as nx
from fidlab.numerics import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- softmax ---------------------------------------------------------------


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.05, 20))
@example(np.array([0.0, 7.2e-160]), 1.0)  # distinct inputs whose probabilities tie
def test_softmax_normalized_and_ranking_preserved(x, t):
    p = nx.softmax(x, temperature=t)
    assert abs(p.sum() - 1.0) < 1e-6
    assert np.all(p >= 0)
    # monotone: a larger logit never gets a smaller probability
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)


def test_softmax_temperature_matches_closed_form():
    x = np.array([1.0, 2.0, 0.5])
    for t in (0.125, 0.5, 1.0, 4.0):
        expected = np.exp(x / t) / np.exp(x / t).sum()
        np.testing.assert_allclose(nx.softmax(x, t), expected, atol=1e-12)


def test_softmax_is_shift_invariant_for_large_logits():
    p = nx.softmax([1000.0, 1001.0])
    np.testing.assert_allclose(p, [1 / (1 + math.e), math.e / (1 + math.e)], atol=1e-12)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(t):
    with pytest.raises(ValueError):
        nx.softmax([1.0, 2.0], temperature=t)


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        nx.softmax([1.0, float("nan")])
    with pytest.raises(ValueError):
        nx.softmax(Tensor(np.array([np.nan, 0.0])))


def test_softmax_tensor_gradient():
    x = np.random.default_rng(0).normal(size=(3, 5))
    w = np.random.default_rng(1).normal(size=(3, 5))
    err = nx.grad_check(lambda a: (nx.softmax(a, temperature=0.7) * Tensor(w)).sum(), x)
    assert err < 1e-7


# --- cross entropy ---------------------------------------------------------


def _reference_ce(logits, targets, mask):
    logits = np.asarray(logits, dtype=np.float64)
    lse = np.log(np.exp(logits).sum(-1))
    nll = lse - np.take_along_axis(logits, targets[..., None], -1)[..., 0]
    return (nll * mask).sum() / mask.sum()


def test_cross_entropy_matches_reference(rng):
    logits = rng.normal(size=(2, 4, 7))
    targets = rng.integers(7, size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    got = nx.cross_entropy(Tensor(logits), targets, mask).item()
    assert got == pytest.approx(_reference_ce(logits, targets, mask), abs=1e-12)


def test_cross_entropy_gradient(rng):
    targets = rng.integers(6, size=(3, 4))
    mask = rng.random((3, 4)) > 0.3
    mask[0, 0] = True
    err = nx.grad_check(lambda a: nx.cross_entropy(a, targets, mask), rng.normal(size=(3, 4, 6)))
    assert err < 1e-7


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(ValueError):
        nx.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_ignores_masked_out_of_range_target():
    loss = nx.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 99]), np.array([True, False]))
    assert loss.item() == pytest.approx(math.log(3))


# --- autodiff --------------------------------------------------------------


@pytest.mark.parametrize(
    "fn,shapes",
    [
        (lambda a, b: (a * b + a / (b * b + 1.0)).sum(), [(3, 4), (3, 4)]),
        (lambda a, b: nx.relu(a @ b).sum(), [(2, 3), (3, 4)]),
        (lambda a: nx.tanh(a).mean(), [(5,)]),
        (lambda a: (nx.texp(a * 0.3) - nx.tlog(a * a + 1.0)).sum(), [(2, 3)]),
        (lambda a: (a ** 3).sum(), [(4,)]),
        (lambda a: a.transpose(1, 0).reshape(6)[1:4].sum(), [(2, 3)]),
        (lambda a, b: nx.concat([a, b], axis=1).sum(axis=0).mean(), [(2, 3), (2, 2)]),
        (lambda a, w: nx.rms_norm(a, w).sum(), [(3, 5), (5,)]),
        (lambda a: nx.log_softmax(a)[:, 1].sum(), [(3, 4)]),
        (lambda a, b: (a + b).sum(), [(3, 4), (4,)]),  # broadcasting
    ],
)
def test_gradients_match_finite_differences(fn, shapes, rng):
    points = [rng.normal(size=s) for s in shapes]
    assert nx.grad_check(fn, *points) < 1e-6


def test_embedding_gradient_accumulates_repeated_ids(rng):
    ids = np.array([[0, 2, 2], [1, 0, 2]])
    w = rng.normal(size=(2, 3, 4))
    err = nx.grad_check(lambda t: (nx.embedding(t, ids) * Tensor(w)).sum(), rng.normal(size=(3, 4)))
    assert err < 1e-7


def test_backward_frees_intermediate_grads():
    a = Tensor(np.ones(3), requires_grad=True)
    h = a * 2.0
    (h * h).sum().backward()
    np.testing.assert_allclose(a.grad, 8.0 * np.ones(3))
    assert h.grad is None


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        out = (a * a).sum()
    assert not out.requires_grad


def test_grad_check_reports_nonfinite_gradient():
    with pytest.raises(nx.GradCheckError) as info, np.errstate(divide="ignore"):
        nx.grad_check(lambda a: nx.tlog(a).sum(), np.array([1.0, 0.0]))
    assert info.value.index == (0, 1)


def test_grad_check_detects_wrong_gradient():
    def bad(a):
        return nx._result(a.data ** 2, (a,), lambda g: a._accumulate(g * a.data)).sum()

    assert nx.grad_check(bad, np.array([1.0, 2.0])) > 0.4


# --- schedule and optimizer -----------------------------------------------


@given(st.integers(0, 5000), st.integers(1, 500), st.floats(1e-6, 1e-1))
def test_lr_warmup_then_constant(step, warmup, base):
    lr = nx.lr_at(step, warmup, base)
    assert 0 <= lr <= base
    if step >= warmup:
        assert lr == base
    else:
        assert lr == pytest.approx(base * step / warmup)


def test_lr_warmup_zero_is_constant():
    assert nx.lr_at(0, 0, 0.1) == 0.1


def test_clip_grads_scales_to_max_norm():
    grads = {"a": np.array([3.0, 4.0])}
    clipped, norm = nx.clip_grads(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.linalg.norm(clipped["a"]) == pytest.approx(1.0, abs=1e-6)
    same, _ = nx.clip_grads({"a": np.array([0.3, 0.4])}, 1.0)
    np.testing.assert_array_equal(same["a"], [0.3, 0.4])


def _reference_adamw(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_optimizer_step_matches_reference_adamw(rng):
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) * 0.1 for _ in range(4)]
    params = {"w": p0.copy()}
    state = nx.OptimizerState(weight_decay=0.01, max_grad_norm=1e9)
    for g in grads:
        nx.optimizer_step(params, {"w": g}, state, lr=0.01)
    np.testing.assert_allclose(params["w"], _reference_adamw(p0, grads, 0.01, 0.01), atol=1e-12)
    assert state.step == 4


def test_optimizer_aborts_on_nan_naming_parameter():
    state = nx.OptimizerState()
    with pytest.raises(nx.NumericalAbort, match="'w'.*step 1"):
        nx.optimizer_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, state, 0.1)


def test_optimizer_minimizes_quadratic():
    params = {"x": np.array([5.0, -3.0])}
    state = nx.OptimizerState(weight_decay=0.0)
    for _ in range(500):
        nx.optimizer_step(params, {"x": 2 * params["x"]}, state, 0.05)
    assert np.abs(params["x"]).max() < 0.05
