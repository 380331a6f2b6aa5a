import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigfield import gradtape as gt
from rigfield.gradtape import AdamW, DivergenceError, InvalidInput, ParamStore, Tape


def grad_of(f, x):
    tape = Tape()
    v = tape.leaf(np.asarray(x, dtype=float))
    out = f(v)
    return out.value, tape.backward(gt.sum(out))[v.id]


def central(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (np.sum(f(xp)) - np.sum(f(xm))) / (2 * h)
    return g


# record examples

def test_add_grads_are_one():
    tape = Tape()
    a, b = tape.leaf(2.0), tape.leaf(5.0)
    c = tape.record("add", a, b)
    g = tape.backward(c)
    assert g[a.id] == 1.0 and g[b.id] == 1.0


def test_square_grad():
    tape = Tape()
    a = tape.leaf(3.0)
    g = tape.backward(tape.record("mul", a, a))
    assert g[a.id] == 6.0


def test_exp_at_zero():
    tape = Tape()
    a = tape.leaf(0.0)
    e = tape.record("exp", a)
    assert e.value == 1.0
    assert tape.backward(e)[a.id] == 1.0


def test_record_by_id_and_unknown_id():
    tape = Tape()
    a = tape.leaf(2.0)
    b = tape.record("mul", a.id, a.id)
    assert b.value == 4.0
    with pytest.raises(InvalidInput):
        tape.record("add", a, 17)
    with pytest.raises(InvalidInput):
        tape.record("no_such_op", a)


def test_integer_constants_are_not_node_ids():
    tape = Tape()
    a = tape.leaf(3.0)
    tape.leaf(100.0)
    assert (2 * a).value == 6.0 and (a + 1).value == 4.0
    assert gt.mul(1000, a).value == 3000.0
    assert gt.stack([a, 1]).value.tolist() == [3.0, 1.0]


def test_gradient_buffer_matches_variables():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    b = gt.sum(a * a)
    grads = tape.backward(b)
    assert len(grads) == len(tape) == b.id + 1


def test_nonscalar_loss_rejected():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    with pytest.raises(InvalidInput):
        tape.backward(a * 2.0)


def test_plain_arrays_pass_through():
    x = np.array([0.5, -1.0])
    assert isinstance(gt.exp(x), np.ndarray)
    assert np.allclose(gt.softplus(x), np.log1p(np.exp(x)))


# per-op finite differences

UNARY = {
    "exp": gt.exp, "sin": gt.sin, "cos": gt.cos, "tanh": gt.tanh, "softplus": gt.softplus,
    "sigmoid": gt.sigmoid, "neg": gt.neg,
}
POSITIVE = {"log": gt.log, "sqrt": gt.sqrt, "power": lambda a: gt.power(a, 1.7)}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_fd(name):
    f = UNARY[name]
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 100)
    _, g = grad_of(f, x)
    assert np.allclose(g, central(f, x), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name", sorted(POSITIVE))
def test_positive_domain_ops_match_fd(name):
    f = POSITIVE[name]
    x = np.random.default_rng(1).uniform(0.2, 3, 100)
    _, g = grad_of(f, x)
    assert np.allclose(g, central(f, x), rtol=1e-6, atol=1e-8)


def test_abs_away_from_zero():
    x = np.random.default_rng(2).uniform(0.1, 2, 50) * np.sign(np.random.default_rng(3).normal(size=50))
    _, g = grad_of(gt.abs, x)
    assert np.array_equal(g, np.sign(x))


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "atan2", "maximum", "minimum"])
def test_binary_ops_match_fd(name):
    rng = np.random.default_rng(4)
    a = rng.uniform(0.5, 2, (10, 3))
    b = rng.uniform(0.5, 2, (3,))          # broadcast
    fn = getattr(gt, name)
    tape = Tape()
    va, vb = tape.leaf(a), tape.leaf(b)
    g = tape.backward(gt.sum(fn(va, vb)))
    assert np.allclose(g[va.id], central(lambda x: fn(x, b), a), rtol=1e-6, atol=1e-8)
    assert np.allclose(g[vb.id], central(lambda x: fn(a, x), b), rtol=1e-6, atol=1e-8)


def test_min_max_ties_go_to_first():
    tape = Tape()
    a, b = tape.leaf(1.0), tape.leaf(1.0)
    g = tape.backward(gt.maximum(a, b))
    assert (g[a.id], g[b.id]) == (1.0, 0.0)
    # constant zero first: a hinge at its boundary has zero gradient
    tape = Tape()
    x = tape.leaf(0.0)
    g = tape.backward(gt.maximum(0.0, x))
    assert g[x.id] == 0.0


def test_structural_ops_match_fd():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))

    def f(a):
        m = gt.matmul(a, B)
        t = gt.transpose(m)
        r = gt.reshape(t * w, (20,))
        c = gt.concat([r[:7], r[[1, 1, 3]] * 2.0], axis=0)
        s = gt.stack([c, c * c], axis=0)
        return gt.sum(gt.clamp(s, -1.5, 1.5)) + gt.sum(gt.where(gt.value(r) > 0, r, -r))

    tape = Tape()
    v = tape.leaf(A)
    g = tape.backward(f(v))[v.id]
    assert np.allclose(g, central(lambda x: f(x), A), rtol=1e-6, atol=1e-7)


def test_softmax_and_norm_match_fd():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(6, 4))
    c = rng.normal(size=(6, 4))
    f = lambda a: gt.sum(gt.softmax(a) * c) + gt.sum(gt.norm(a, eps=1e-9))
    _, g = grad_of(f, x)
    assert np.allclose(g, central(f, x), rtol=1e-6, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8))
def test_composition_matches_fd(xs):
    x = np.array(xs)
    f = lambda a: gt.sum(gt.tanh(a * 0.7) * gt.sin(a) + gt.softplus(a) ** 2 / (1.0 + a * a))
    _, g = grad_of(f, x)
    num = central(f, x, 1e-5)
    scale = max(np.linalg.norm(g), np.linalg.norm(num), 1e-12)
    assert np.linalg.norm(g - num) / scale < 1e-4


# ParamStore and backward

def test_store_names_unique_and_freeze():
    s = ParamStore()
    s.add("a.w", np.ones(3))
    with pytest.raises(InvalidInput):
        s.add("a.w", np.ones(3))
    s.add("a.b", np.zeros(2))
    s.freeze("a")
    assert s.is_frozen("a.w") and s.is_frozen("a.b")
    with pytest.raises(InvalidInput):
        s.freeze("missing")


def test_backward_zero_for_untouched_and_frozen():
    s = ParamStore()
    s.add("p", np.array([1.0, -2.0, 3.0]))
    s.add("x", np.array([4.0]))
    val, g = gt.value_and_grad(lambda P: 0.5 * gt.sum(P["p"] * P["p"]), s)
    assert np.array_equal(g["p"], s["p"])
    assert np.array_equal(g["x"], [0.0])
    with s.frozen("p"):
        _, g2 = gt.value_and_grad(lambda P: 0.5 * gt.sum(P["p"] * P["p"]), s)
    assert np.array_equal(g2["p"], np.zeros(3))
    assert not s.is_frozen("p")


def test_freeze_equals_projected_gradient_bitwise():
    rng = np.random.default_rng(7)
    s = ParamStore()
    s.add("a", rng.normal(size=5))
    s.add("b", rng.normal(size=4))
    f = lambda P: gt.sum(gt.tanh(P["a"]) ** 2) + gt.sum(P["b"] * P["a"][:4])
    s1, s2 = s.copy(), s.copy()
    o1, o2 = AdamW(lr=0.1), AdamW(lr=0.1)
    for _ in range(3):
        _, g = gt.value_and_grad(f, s1)
        g["b"] = np.zeros_like(g["b"])
        o1.step({"a": g["a"]}, s1)
        s2.freeze("b")
        _, g2 = gt.value_and_grad(f, s2)
        o2.step(g2, s2)
    assert np.array_equal(s1["a"], s2["a"]) and np.array_equal(s2["b"], s["b"])


def test_flat_round_trip():
    s = ParamStore()
    s.add("a", np.arange(6.0).reshape(2, 3))
    s.add("b", [7.0])
    v = s.flat()
    s2 = s.copy()
    s2.load_flat(v * 2)
    assert np.array_equal(s2["a"], s["a"] * 2)
    with pytest.raises(InvalidInput):
        s2.load_flat(np.zeros(3))


# AdamW

def test_adamw_zero_grad_no_decay_unchanged():
    s = ParamStore()
    s.add("p", np.array([1.0, 2.0]))
    AdamW(weight_decay=0.0).step({"p": np.zeros(2)}, s)
    assert np.array_equal(s["p"], [1.0, 2.0])


def test_adamw_first_step_by_hand():
    s = ParamStore()
    s.add("p", np.array([0.7]))
    g = 0.3
    opt = AdamW(lr=5e-4, weight_decay=0.0)
    opt.step({"p": np.array([g])}, s)
    # m_hat = g, v_hat = g^2
    assert s["p"][0] == pytest.approx(0.7 - 5e-4 * g / (abs(g) + 1e-8), abs=1e-15)


def test_adamw_decoupled_decay():
    s = ParamStore()
    s.add("p", np.array([2.0]))
    AdamW(lr=0.1, weight_decay=0.5).step({"p": np.zeros(1)}, s)
    assert s["p"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_frozen_untouched_and_nan_aborts():
    s = ParamStore()
    s.add("p", np.array([1.0]))
    s.freeze("p")
    opt = AdamW()
    opt.step({"p": np.array([5.0])}, s)
    assert s["p"][0] == 1.0
    with pytest.raises(DivergenceError):
        opt.step({"p": np.array([np.nan])}, s)


def test_adamw_defaults():
    o = AdamW()
    assert (o.lr, o.beta1, o.beta2, o.eps, o.weight_decay) == (5e-4, 0.9, 0.999, 1e-8, 1e-4)


def test_adamw_step_count_monotone():
    s = ParamStore()
    s.add("p", np.zeros(2))
    o = AdamW()
    counts = []
    for _ in range(3):
        gt.adamw_step(o, {"p": np.ones(2)}, s)
        counts.append(o.step_count)
    assert counts == [1, 2, 3]


# finite-difference checker

def test_fd_check_two_layer_network():
    rng = np.random.default_rng(8)
    s = ParamStore()
    s.add("W1", rng.normal(size=(3, 4)) * 0.5)
    s.add("b1", rng.normal(size=4) * 0.1)
    s.add("W2", rng.normal(size=(4, 2)) * 0.5)
    s.add("b2", rng.normal(size=2) * 0.1)
    assert s.size == 12 + 4 + 8 + 2
    X = rng.normal(size=(5, 3))
    Y = rng.normal(size=(5, 2))

    def f(P):
        h = gt.tanh(X @ P["W1"] + P["b1"])
        d = h @ P["W2"] + P["b2"] - Y
        return gt.mean(d * d)

    assert gt.finite_diff_check(f, s, h=1e-4) < 1e-4


def test_fd_check_constant_and_linear():
    s = ParamStore()
    s.add("p", np.array([1.0, 2.0, 3.0]))
    assert gt.finite_diff_check(lambda P: gt.sum(P["p"] * 0.0) + 4.0, s) == 0.0
    c = np.array([0.5, -2.0, 3.0])
    assert gt.finite_diff_check(lambda P: gt.sum(P["p"] * c), s) < 1e-10
