import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psinvert import core
from psinvert.core import Tape, grad_check, normalize
from psinvert.errors import DegenerateVector, ForeignVar, NonFinite

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_normalize_examples():
    np.testing.assert_allclose(normalize([0.0, 0.0, 2.0]), [0, 0, 1])
    np.testing.assert_allclose(normalize([3.0, 0.0, 4.0]), [0.6, 0, 0.8])


def test_normalize_degenerate_and_nonfinite():
    with pytest.raises(DegenerateVector):
        normalize([0.0, 0.0, 1e-13])
    with pytest.raises(NonFinite):
        normalize([np.nan, 0.0, 1.0])


@given(st.tuples(finite, finite, finite).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_normalize_idempotent(v):
    once = normalize(np.array(v))
    assert abs(np.linalg.norm(once) - 1) < 1e-12
    np.testing.assert_allclose(normalize(once), once, atol=1e-12)


def test_vec3_rejects_nonfinite():
    with pytest.raises(NonFinite):
        core.vec3(0, np.inf, 1)


def test_product_rule():
    t = Tape()
    x, y = t.leaf(2.0), t.leaf(3.0)
    g = t.backward(x * y)
    assert g[x] == 3.0 and g[y] == 2.0


def test_exp_at_zero():
    t = Tape()
    x = t.leaf(0.0)
    assert t.backward(core.exp(x))[x] == 1.0


def test_relu_subgradient_at_zero_is_zero():
    t = Tape()
    x = t.leaf(0.0)
    assert t.backward(core.relu(x))[x] == 0.0


def test_seed_gradient_is_one():
    t = Tape()
    x = t.leaf(1.5)
    y = x * 2.0
    assert t.backward(y)[y] == 1.0


def test_fan_out_accumulates():
    # f = x*x + 3x, df/dx = 2x + 3
    t = Tape()
    x = t.leaf(1.25)
    f = x * x + x * 3.0
    assert t.backward(f)[x] == pytest.approx(5.5)


def test_single_sweep_visits_each_node_once():
    t = Tape()
    x = t.leaf(0.7)
    h = core.exp(x)
    f = h * h + h
    t.backward(f)
    assert t.last_sweep_visits == len(t)


def test_foreign_output_rejected():
    a, b = Tape(), Tape()
    x = a.leaf(1.0)
    with pytest.raises(ForeignVar):
        b.backward(x * 2.0)
    y = b.leaf(1.0)
    with pytest.raises(ForeignVar):
        x + y


def test_unreached_leaf_gets_zero():
    t = Tape()
    x, y = t.leaf([1.0, 2.0]), t.leaf(3.0)
    g = t.backward((x * 2.0).sum())
    np.testing.assert_array_equal(g[y], 0.0)
    np.testing.assert_array_equal(g[x], [2.0, 2.0])


def test_float32_graph_stays_float32():
    t = Tape()
    x = t.leaf(np.ones((4, 3), np.float32))
    W = np.full((3, 2), 0.5, np.float32)
    y = core.relu(core.matmul(x, W) + 1.0) * 2.0
    loss = core.softplus(y).mean()
    assert loss.value.dtype == np.float32
    assert t.backward(loss)[x].dtype == np.float32


def test_grad_check_square():
    err = grad_check(lambda t, x: (x * x).sum(), np.array([3.0]), eps=1e-4)
    assert err < 1e-6


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda t, x: x.sum(), np.array([1.0]), eps=1e-2)


def test_grad_check_excludes_kink():
    assert grad_check(lambda t, x: core.relu(x).sum(), np.array([0.0])) is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_nonfinite():
    with pytest.raises(NonFinite):
        grad_check(lambda t, x: core.log(x).sum(), np.array([-1.0]))


PRIMITIVES = {
    "add": lambda t, x: (x[0:2] + x[2:4]).sum(),
    "sub": lambda t, x: (x[0:2] - x[2:4] * 2.0).sum(),
    "mul": lambda t, x: (x[0:2] * x[2:4]).sum(),
    "div": lambda t, x: (x[0:2] / (x[2:4] * x[2:4] + 1.0)).sum(),
    "exp": lambda t, x: core.exp(x).sum(),
    "log": lambda t, x: core.log(x * x + 0.5).sum(),
    "sqrt": lambda t, x: core.sqrt(x * x + 0.5).sum(),
    "relu": lambda t, x: (core.relu(x) * x).sum(),
    "abs": lambda t, x: core.abs_(x).sum(),
    "dot": lambda t, x: core.dot(x[0:3], x[1:4]),
    "normalize": lambda t, x: (normalize(x[0:3]) * np.array([0.3, -1.0, 2.0])).sum(),
    "affine": lambda t, x: core.matmul(x.reshape(2, 2), np.array([[1.0, 2.0], [-0.5, 0.25]])).sum() + x[0] * 3.0,
    "softplus": lambda t, x: core.softplus(x).sum(),
    "pow": lambda t, x: ((x * x + 1.0) ** 1.5).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=4, max_size=4).filter(lambda v: min(abs(a) for a in v) > 1e-3))
def test_primitive_matches_central_differences(name, x):
    err = grad_check(PRIMITIVES[name], np.array(x))
    assert err is None or err < 1e-4


def test_getitem_gradient_scatter():
    t = Tape()
    x = t.leaf(np.arange(4.0))
    y = x[np.array([0, 0, 3])].sum()
    np.testing.assert_array_equal(t.backward(y)[x], [2, 0, 0, 1])


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 180), st.integers(0, 10_000))
def test_rotate_random_bounded(max_deg, seed):
    rng = np.random.default_rng(seed)
    d = normalize(rng.normal(size=(8, 3)))
    r = core.rotate_random(d, max_deg, rng)
    np.testing.assert_allclose(np.linalg.norm(r, axis=1), 1, atol=1e-12)
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(d, r), axis=1), np.sum(d * r, axis=1)))
    assert np.all(ang <= max_deg + 1e-9)
