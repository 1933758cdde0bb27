import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import SPECS, TRUTH, small_problem
from usray import optimize as op

@pytest.fixture(scope="module")
def reference():
    return small_problem().evaluate(TRUTH, with_grad=False).image.pixels


# -- clip parameterization -------------------------------------------------------


def test_param_spec_validation():
    with pytest.raises(ValueError):
        op.ParamSpec("a", "x", 1.0, 1.0)
    with pytest.raises(ValueError):
        op.ParamSpec("a", "x", 0.0, 1.0, group="other")
    with pytest.raises(ValueError):
        op.ParamSpec("a", "x", 0.0, 1.0, init=float("nan"))


def test_clip_examples():
    s = op.ParamSpec("R", "surface.cyl.radius", 2.0, 4.0)
    assert op.to_physical(0.25, s) == (2.5, 2.0)
    assert op.to_physical(0.0, s) == (2.0, 0.0)
    assert op.to_physical(1.0, s) == (4.0, 0.0)
    assert op.to_physical(-0.3, s) == (2.0, 0.0)
    assert op.to_physical(1.7, s) == (4.0, 0.0)
    assert op.to_normalized(3.0, s) == 0.5


@given(st.floats(1e-9, 1 - 1e-9), st.floats(-100, 100), st.floats(1e-3, 100))
def test_clip_interior_affine(theta, lo, span):
    s = op.ParamSpec("p", "t", lo, lo + span)
    value, factor = op.to_physical(theta, s)
    assert value == pytest.approx(lo + theta * span)
    assert factor == s.span
    assert op.to_normalized(value, s) == pytest.approx(theta, abs=1e-9)


@given(st.one_of(st.floats(-10, 0), st.floats(1, 10)))
def test_clip_saturation_zero_factor(theta):
    assert op.to_physical(theta, SPECS[2])[1] == 0.0


# -- loss --------------------------------------------------------------------------


def test_image_loss_example():
    img = np.array([[0.5, 1.0], [0.0, 0.2]])
    ref = np.array([[0.5, 0.5], [0.25, 0.0]])
    loss, grad = op.image_loss(img, ref, l1=1.0, l2=2.0)
    d = img - ref
    assert loss == pytest.approx((np.abs(d).sum() + 2 * (d * d).sum()) / 4)
    assert grad[0, 0] == 0.0  # sign(0) = 0
    assert grad[0, 1] == pytest.approx((1 + 4 * 0.5) / 4)


def test_image_loss_validation():
    with pytest.raises(ValueError):
        op.image_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        op.image_loss(np.zeros(2), np.zeros(2), l1=0.0, l2=0.0)
    with pytest.raises(ValueError):
        op.image_loss(np.zeros(2), np.zeros(2), l1=-1.0)


def test_image_loss_gradient_fd():
    rng = np.random.default_rng(0)
    img, ref, v = rng.uniform(0, 1, (3, 10, 7))
    _, grad = op.image_loss(img, ref, 0.7, 1.3)
    h = 1e-7
    fd = (op.image_loss(img + h * v, ref, 0.7, 1.3)[0] - op.image_loss(img - h * v, ref, 0.7, 1.3)[0]) / (2 * h)
    assert fd == pytest.approx(float(np.sum(grad * v)), rel=1e-6)


# -- Adam ------------------------------------------------------------------------


def test_clip_by_global_norm():
    g = np.array([3.0, 4.0])
    assert np.allclose(op.clip_by_global_norm(g, 1.0), [0.6, 0.8])
    assert np.array_equal(op.clip_by_global_norm(g, 10.0), g)


@settings(max_examples=50)
@given(st.lists(st.one_of(st.floats(-1e6, -1e-3), st.floats(1e-3, 1e6)), min_size=1, max_size=4))
def test_adam_first_step_is_signed_rate(grad):
    grad = np.array(grad)
    state = op.OptState.start(np.full(len(grad), 0.5))
    rates = np.full(len(grad), 0.05)
    new = op.adam_step(state, grad, rates)
    # m_hat / sqrt(v_hat) = sign(g) up to eps, on the norm-clipped gradient
    g = op.clip_by_global_norm(grad, 1.0)
    expect = -0.05 * g / (np.abs(g) + 1e-8)
    assert np.allclose(new.theta - 0.5, expect, rtol=1e-12, atol=1e-15)
    assert new.k == 1


def _scalar_adam(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8, clip=1.0, decay=1.0):
    # independent per-coordinate re-implementation
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for k in range(1, steps + 1):
        g = grad_fn(theta)
        norm = math.sqrt(sum(x * x for x in g))
        if norm > clip:
            g = [x * clip / norm for x in g]
        for j in range(len(theta)):
            m[j] = b1 * m[j] + (1 - b1) * g[j]
            v[j] = b2 * v[j] + (1 - b2) * g[j] ** 2
            mh = m[j] / (1 - b1**k)
            vh = v[j] / (1 - b2**k)
            theta[j] -= lr[j] * decay ** (k - 1) * mh / (math.sqrt(vh) + eps)
    return theta


@pytest.mark.parametrize("decay", [1.0, 0.97])
def test_adam_matches_scalar_reference(decay):
    target = np.array([0.2, -0.4, 0.9])
    scale = np.array([3.0, 0.5, 1.5])

    def grad_fn(t):
        return list(2 * scale * (np.asarray(t) - target))

    cfg = op.AdamConfig(lr_decay=decay)
    rates = np.array([0.05, 0.05, 0.01])
    state = op.OptState.start([0.5, 0.5, 0.5])
    for _ in range(10):
        state = op.adam_step(state, grad_fn(state.theta), rates, cfg)
    ref = _scalar_adam([0.5, 0.5, 0.5], grad_fn, 10, rates, decay=decay)
    assert np.allclose(state.theta, ref, rtol=0, atol=1e-12)


def test_adam_rejects_bad_input():
    state = op.OptState.start([0.5, 0.5])
    with pytest.raises(FloatingPointError):
        op.adam_step(state, [np.nan, 1.0], [0.1, 0.1])
    with pytest.raises(ValueError):
        op.adam_step(state, [1.0], [0.1])
    with pytest.raises(ValueError):
        op.AdamConfig(beta1=1.0)
    with pytest.raises(ValueError):
        op.AdamConfig(lr_decay=0.0)


def test_adam_rates_by_group():
    specs = (SPECS[0], op.ParamSpec("p", "array.pitch", 0.2, 0.4, group="acquisition"))
    assert list(op.AdamConfig().rates(specs)) == [0.05, 0.01]


# -- micro-batching ----------------------------------------------------------------


def test_plan_split_and_check():
    plan = op.MicrobatchPlan.split(3, 100, 4)
    assert [r for _, r in plan.batches] == [(0, 25), (25, 50), (50, 75), (75, 100)]
    plan.check(3, 100)
    by_angle = op.MicrobatchPlan.split(3, 100, 2, by="angles")
    assert [a for a, _ in by_angle.batches] == [(0, 1), (2,)]
    with pytest.raises(ValueError):
        op.MicrobatchPlan(((tuple(range(3)), (0, 50)),)).check(3, 100)
    with pytest.raises(ValueError):
        op.MicrobatchPlan((((0, 1, 2), (0, 60)), ((0, 1, 2), (50, 100)))).check(3, 100)
    with pytest.raises(ValueError):
        op.MicrobatchPlan.split(2, 100, 3, by="angles")
    with pytest.raises(ValueError):
        op.MicrobatchPlan.split(2, 100, 0)


@pytest.mark.parametrize("by,n", [("rays", 4), ("angles", 2)])
def test_partition_equivalence(reference, by, n):
    theta = TRUTH + 0.05
    full = small_problem(reference=reference).evaluate(theta)
    acq_paths = 16 * 96
    plan = op.MicrobatchPlan.split(2, acq_paths, n, by=by)
    split = small_problem(plan=plan, reference=reference).evaluate(theta)
    assert split.loss == pytest.approx(full.loss, rel=1e-12, abs=0)
    assert np.allclose(split.grad, full.grad, rtol=1e-12, atol=0)
    assert np.any(full.grad != 0)


def test_cached_and_retraced_gradients_agree(reference):
    theta = TRUTH - 0.04
    a = small_problem(reference=reference).evaluate(theta)
    b = small_problem(reference=reference, cache_records=False).evaluate(theta)
    assert a.loss == b.loss
    assert np.array_equal(a.grad, b.grad)


# -- problem and iterations ----------------------------------------------------------


def test_problem_validation(reference):
    with pytest.raises(ValueError):
        small_problem(specs=(op.ParamSpec("Q", "medium.bone.impedance", 1, 2),))
    with pytest.raises(ValueError):
        small_problem(specs=(SPECS[0], SPECS[0]))
    with pytest.raises(ValueError):
        small_problem(reference=np.zeros((3, 3)))


def test_self_reference_zero_loss_and_gradient(reference):
    ev = small_problem(reference=reference).evaluate(TRUTH)
    assert ev.loss == 0.0
    assert np.array_equal(ev.grad, np.zeros(3))


def test_evaluation_is_deterministic(reference):
    theta = TRUTH + np.array([0.1, -0.1, 0.05])
    a = small_problem(reference=reference, threads=1).evaluate(theta)
    b = small_problem(reference=reference, threads=4).evaluate(theta)
    assert a.loss == b.loss
    assert np.array_equal(a.grad, b.grad)
    assert np.array_equal(a.image.pixels, b.image.pixels)


def test_saturated_parameters_get_zero_gradient(reference):
    pb = small_problem(reference=reference)
    for edge in (0.0, 1.0, 1.3):
        theta = TRUTH.copy()
        theta[1] = edge
        ev = pb.evaluate(theta)
        assert ev.grad[1] == 0.0
        assert ev.grad_physical[1] != 0.0
        assert ev.grad[2] != 0.0


def test_frozen_objective_matches_evaluation(reference):
    pb = small_problem(reference=reference)
    theta = TRUTH + 0.03
    frozen = pb.frozen(theta)
    ev = pb.evaluate(theta)
    assert frozen.loss(theta) == pytest.approx(ev.loss, rel=1e-12)
    assert np.allclose(frozen.gradient(), ev.grad, rtol=1e-12)


def test_run_optimization_histories_and_stationary_truth(reference):
    pb = small_problem(reference=reference)
    res = op.run_optimization(pb, 3, theta0=TRUTH)
    st_ = res.state
    assert len(st_.loss_history) == len(st_.param_history) == len(st_.grad_history) == 3
    assert np.array_equal(st_.theta, TRUTH)
    assert st_.loss_history == [0.0, 0.0, 0.0]
    assert np.allclose(res.final_values, [s.truth for s in SPECS])
    with pytest.raises(ValueError):
        op.run_optimization(pb, 0)


def test_run_optimization_moves_downhill(reference):
    pb = small_problem(reference=reference)
    seen = []
    res = op.run_optimization(pb, 5, theta0=TRUTH + np.array([0.0, 0.0, 0.03]), callback=lambda k, ev, s: seen.append(k))
    assert seen == list(range(5))
    assert res.state.loss_history[-1] < res.state.loss_history[0]
