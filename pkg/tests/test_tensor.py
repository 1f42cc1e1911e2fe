import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fusepos.tensor as T
from fusepos.tensor import RngStream, Tensor, parameter


def _proj(rng, shape):
    return rng.normal(size=shape)


# ------------------------------------------------------------------ selu
def test_selu_constants_match_self_normalising_fixed_point():
    # solve the fixed-point conditions mean 0 / variance 1 for N(0,1) input independently
    from scipy import integrate, optimize, stats

    def moments(p):
        lam, alpha = p
        f = lambda z: lam * z if z > 0 else lam * alpha * (math.exp(z) - 1)  # noqa: E731
        m = integrate.quad(lambda z: f(z) * stats.norm.pdf(z), -np.inf, np.inf)[0]
        v = integrate.quad(lambda z: f(z) ** 2 * stats.norm.pdf(z), -np.inf, np.inf)[0]
        return [m, v - 1.0]

    lam, alpha = optimize.fsolve(moments, [1.0, 1.5], xtol=1e-12)
    assert T.SELU_LAMBDA == pytest.approx(lam, abs=1e-7)
    assert T.SELU_ALPHA == pytest.approx(alpha, abs=1e-7)
    assert T.SELU_LAMBDA > 1 and T.SELU_ALPHA > 0


def test_selu_examples():
    out = T.selu(Tensor(np.array([0.0, 1.0, -50.0]))).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(1.05070098, abs=1e-8)
    assert out[2] == pytest.approx(-T.SELU_LAMBDA * T.SELU_ALPHA, abs=1e-12)
    assert -T.SELU_LAMBDA * T.SELU_ALPHA == pytest.approx(-1.7581, abs=1e-4)


def test_selu_self_normalisation():
    x = RngStream(0).normal(size=1_000_000)
    y = T.selu(Tensor(x)).data
    assert abs(y.mean()) < 0.02
    assert abs(y.var() - 1.0) < 0.05


def test_selu_grad_away_from_zero():
    x = Tensor(np.array([-2.0, -0.7, 0.3, 1.5, 3.0]))
    assert T.grad_check(lambda t: T.sum(T.selu(t)), x) < 1e-6


# --------------------------------------------------------------- softmax
def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor(np.zeros(2)), axis=0).data, [0.5, 0.5], atol=1e-15)
    assert np.allclose(T.softmax(Tensor(np.log([1.0, 3.0])), axis=0).data, [0.25, 0.75], atol=1e-15)
    for c in (-1e3, 0.0, 7.5, 1e3):
        assert np.allclose(T.softmax(Tensor(np.full(4, c)), axis=0).data, 0.25, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12),
    st.floats(-100, 100, allow_nan=False),
)
def test_softmax_properties(logits, shift):
    x = np.array(logits)
    p = T.softmax(Tensor(x), axis=0).data
    assert np.all(p > 0) and np.all(p <= 1)
    assert abs(p.sum() - 1.0) < 1e-12
    # the max-shift makes a constant offset exactly invisible when it does not change the rounding of x - max
    xs = x + shift
    if np.array_equal(xs - xs.max(), x - x.max()):
        assert np.array_equal(T.softmax(Tensor(xs), axis=0).data, p)
    else:
        assert np.allclose(T.softmax(Tensor(xs), axis=0).data, p, atol=1e-12)


def test_softmax_shift_bitwise():
    x = np.array([0.25, -1.5, 3.0, 2.0])
    a = T.softmax(Tensor(x), axis=0).data
    b = T.softmax(Tensor(x + 8.0), axis=0).data
    assert np.array_equal(a, b)


# ------------------------------------------------------------------ lstm
def test_lstm_cell_zero_weights():
    H, D = 3, 4
    x = Tensor(RngStream(1).normal(size=(2, D)))
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    h, c = T.lstm_cell(x, z(2, H), z(2, H), z(D, 4 * H), z(H, 4 * H), z(4 * H))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_cell_saturated_gates_keep_cell():
    H, D = 3, 2
    rng = RngStream(2)
    c0 = rng.normal(size=(1, H))
    b = np.zeros(4 * H)
    b[:H] = -1e3  # input gate
    b[H : 2 * H] = 1e3  # forget gate
    h, c = T.lstm_cell(
        Tensor(rng.normal(size=(1, D))), Tensor(rng.normal(size=(1, H))), Tensor(c0),
        Tensor(rng.normal(size=(D, 4 * H))), Tensor(rng.normal(size=(H, 4 * H))), Tensor(b),
    )
    assert np.allclose(c.data, c0, atol=1e-12)


def test_lstm_cell_shape_mismatch():
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    with pytest.raises(ValueError):
        T.lstm_cell(z(1, 4), z(1, 3), z(1, 3), z(5, 12), z(3, 12), z(12))
    with pytest.raises(ValueError):
        T.lstm_cell(z(1, 4), z(1, 3), z(1, 2), z(4, 12), z(3, 12), z(12))


# ------------------------------------------------------- conv / pooling
def test_conv_identity_kernel():
    x = RngStream(3).normal(size=(2, 1, 5, 6))
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), None, stride=1, padding=0)
    assert np.array_equal(y.data, x)


def test_conv_matches_direct_loop():
    rng = RngStream(4)
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(2, 1), padding=(1, 0)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    Ho = (6 + 2 - 3) // 2 + 1
    Wo = 7 - 2 + 1
    ref = np.zeros((2, 4, Ho, Wo))
    for n in range(2):
        for o in range(4):
            for i in range(Ho):
                for j in range(Wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, j : j + 2] * w[o]) + b[o]
    assert np.allclose(y, ref, atol=1e-12)


def test_conv_nonpositive_output():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), None)


def test_maxpool_constant_routes_to_first():
    x = Tensor(np.full((1, 1, 2, 4), 3.5), requires_grad=True)
    y = T.maxpool2d(x, (2, 2))
    assert np.all(y.data == 3.5)
    T.backward(T.sum(y))
    expect = np.zeros((1, 1, 2, 4))
    expect[0, 0, 0, 0] = expect[0, 0, 0, 2] = 1.0
    assert np.array_equal(x.grad, expect)


def test_global_avg_pool():
    x = RngStream(5).normal(size=(2, 3, 4, 5))
    assert np.allclose(T.global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3)))


# -------------------------------------------------------------- backward
def test_backward_sum_and_square():
    p = parameter(np.array([1.0, -2.0, 3.0]))
    T.backward(T.sum(p))
    assert np.array_equal(p.grad, np.ones(3))
    p.grad = None
    T.backward(T.sum(p * p))
    assert np.array_equal(p.grad, 2 * p.data)


def test_backward_non_scalar():
    with pytest.raises(ValueError):
        T.backward(parameter(np.ones(3)) * 2.0)


def test_backward_repeatable():
    rng = RngStream(6)
    net = T.Dense(4, 3, rng, activation="selu")
    x = Tensor(rng.normal(size=(5, 4)))
    grads = []
    for _ in range(2):
        net.zero_grad()
        T.backward(T.sum(T.square(net(x))))
        grads.append({n: p.grad.copy() for n, p in net.named_parameters()})
    for n in grads[0]:
        assert np.array_equal(grads[0][n], grads[1][n])


def test_backward_shared_subexpression():
    p = parameter(np.array([0.5, 1.5]))
    q = p * p
    T.backward(T.sum(q + q * 3.0))
    assert np.allclose(p.grad, 8 * p.data)


# ------------------------------------------------------------- optimizer
def test_optimizer_examples():
    p = parameter(np.array([1.0]))
    p.grad = np.array([2.0])
    T.optimizer_step([("p", p)], T.OptimizerState(kind="sgd", lr=0.1))
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)

    for kind in ("sgd", "adam"):
        q = parameter(np.array([1.0, 2.0]))
        q.grad = np.array([0.3, -1.0])
        before = q.data.copy()
        T.optimizer_step([("q", q)], T.OptimizerState(kind=kind, lr=0.0))
        assert np.array_equal(q.data, before)


def test_optimizer_frozen_bit_identical():
    rng = RngStream(7)
    net = T.Dense(3, 2, rng)
    opt = T.Optimizer(net.named_parameters(), lr=0.1)
    net.W.requires_grad = False
    W0 = net.W.data.copy()
    net.W.grad = np.ones_like(W0)
    net.b.grad = np.ones_like(net.b.data)
    b0 = net.b.data.copy()
    opt.step()
    assert np.array_equal(net.W.data, W0)
    assert not np.array_equal(net.b.data, b0)
    assert "W" not in opt.state.m


def test_optimizer_nan_names_parameter():
    p = parameter(np.ones(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(T.NonFiniteGradient, match="bias_x"):
        T.Optimizer([("bias_x", p)]).step()


def test_adam_matches_reference():
    p = parameter(np.array([0.5, -1.0]))
    opt = T.Optimizer([("p", p)], lr=0.01)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for k in range(1, 4):
        g = np.array([0.1 * k, -0.2])
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    assert np.allclose(p.data, ref, atol=1e-15)


# ------------------------------------------------------------ grad check
def test_grad_check_sum():
    assert T.grad_check(T.sum, Tensor(RngStream(8).normal(size=(3, 4)))) < 1e-8


def test_grad_check_flags_maxpool_tie():
    x = Tensor(np.array([[[[1.0, 1.0], [0.0, -1.0]]]]))
    res = T.grad_check_detail(lambda t: T.sum(T.maxpool2d(t, (2, 2))), x)
    assert (0, 0) in res.flagged and (0, 1) in res.flagged
    assert res.max_rel_error < 1e-6


# --------------------------------------------------- per-op gradient sweep
def _cases(rng: RngStream):
    """(name, loss builder, tensors) for every differentiable op."""
    n = rng.normal
    cases = []

    def unary(name, fn, x):
        a = parameter(x)
        w = _proj(rng, fn(a).shape)
        cases.append((name, lambda: T.sum(fn(a) * w), [a]))

    def binary(name, fn, x, y):
        a, b = parameter(x), parameter(y)
        w = _proj(rng, fn(a, b).shape)
        cases.append((name, lambda: T.sum(fn(a, b) * w), [a, b]))

    binary("add", lambda a, b: a + b, n(size=(3, 4)), n(size=(4,)))
    binary("sub", lambda a, b: a - b, n(size=(3, 1)), n(size=(3, 4)))
    binary("mul", lambda a, b: a * b, n(size=(2, 3)), n(size=(2, 3)))
    binary("div", lambda a, b: a / b, n(size=(2, 3)), rng.uniform(0.5, 2.0, size=(3,)))
    binary("matmul", T.matmul, n(size=(2, 3, 4)), n(size=(4, 5)))
    unary("power", lambda a: a**3, n(size=(5,)))
    unary("square", T.square, n(size=(5,)))
    unary("exp", T.exp, n(size=(5,)))
    unary("log", T.log, rng.uniform(0.5, 3.0, size=(5,)))
    unary("sqrt", T.sqrt, rng.uniform(0.5, 3.0, size=(5,)))
    unary("abs", T.absolute, rng.uniform(0.2, 2.0, size=(6,)) * np.where(rng.random(6) < 0.5, -1.0, 1.0))
    unary("tanh", T.tanh, n(size=(6,)))
    unary("sin", T.sin, n(size=(6,)))
    unary("cos", T.cos, n(size=(6,)))
    unary("sigmoid", T.sigmoid, n(size=(6,)))
    unary("selu", T.selu, n(size=(8,)) + 0.05 * np.sign(n(size=(8,))))
    unary("softmax", lambda a: T.softmax(a, axis=1), n(size=(3, 5)))
    unary("norm", lambda a: T.norm(a, axis=1), n(size=(4, 2)))
    unary("mean", lambda a: T.mean(a, axis=0), n(size=(4, 3)))
    unary("reshape_transpose", lambda a: T.transpose(T.reshape(a, (3, 4)), (1, 0)), n(size=(2, 6)))
    unary("getitem", lambda a: a[1:, ::2], n(size=(3, 5)))
    unary("pad", lambda a: T.pad(a, ((1, 0), (0, 2))), n(size=(2, 3)))
    unary("gap", T.global_avg_pool, n(size=(2, 2, 3, 3)))
    binary("concat", lambda a, b: T.concat([a, b], axis=1), n(size=(2, 3)), n(size=(2, 2)))
    binary("stack", lambda a, b: T.stack([a, b], axis=0), n(size=(2, 3)), n(size=(2, 3)))

    x, w, b = parameter(n(size=(2, 2, 5, 6))), parameter(n(size=(3, 2, 3, 2))), parameter(n(size=3))
    pw = _proj(rng, (2, 3, 3, 3))
    cases.append(("conv2d", lambda: T.sum(T.conv2d(x, w, b, stride=(2, 2), padding=(1, 0)) * pw), [x, w, b]))
    xm = parameter(n(size=(2, 2, 4, 6)))
    pm = _proj(rng, (2, 2, 2, 3))
    cases.append(("maxpool2d", lambda: T.sum(T.maxpool2d(xm, (2, 2)) * pm), [xm]))

    H, D = 3, 4
    lx, lh, lc = parameter(n(size=(2, D))), parameter(n(size=(2, H))), parameter(n(size=(2, H)))
    lW, lU, lb = parameter(0.5 * n(size=(D, 4 * H))), parameter(0.5 * n(size=(H, 4 * H))), parameter(0.5 * n(size=4 * H))
    ph, pc = _proj(rng, (2, H)), _proj(rng, (2, H))

    def lstm_loss():
        h, c = T.lstm_cell(lx, lh, lc, lW, lU, lb)
        return T.sum(h * ph) + T.sum(c * pc)

    cases.append(("lstm_cell", lstm_loss, [lx, lh, lc, lW, lU, lb]))
    return cases


def test_every_op_gradcheck_20_seeds():
    worst = {}
    for seed in range(20):
        for name, f, tensors in _cases(RngStream(seed).child("gradcheck")):
            res = T.check_tensors(f, tensors)
            worst[name] = max(worst.get(name, 0.0), res.max_rel_error)
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    assert not bad, bad


def test_composed_mlp_gradcheck():
    rng = RngStream(9)
    l1, l2 = T.Dense(4, 6, rng, activation="selu"), T.Dense(6, 2, rng)
    x = Tensor(rng.normal(size=(5, 4)))
    y = rng.normal(size=(5, 2))
    params = [p for _, p in l1.named_parameters()] + [p for _, p in l2.named_parameters()]
    res = T.check_tensors(lambda: T.mean(T.square(l2(l1(x)) - y)), params)
    assert res.max_rel_error < 1e-4


# ----------------------------------------------------------- determinism
def test_rng_determinism():
    a, b = RngStream(42), RngStream(42)
    assert np.array_equal(a.normal(size=10), b.normal(size=10))
    assert np.array_equal(a.child("x").uniform(size=4), b.child("x").uniform(size=4))
    assert not np.array_equal(RngStream(42).child("x").normal(size=4), RngStream(42).child("y").normal(size=4))


def test_init_forward_grad_bit_identical():
    def run():
        rng = RngStream(11)
        lstm = T.LSTM(6, 4, rng.child("lstm"))
        x = Tensor(rng.child("x").normal(size=(3, 7, 6)))
        seq, summary = lstm(x)
        T.backward(T.sum(T.square(summary)))
        return summary.data.copy(), {n: (p.data.copy(), p.grad.copy()) for n, p in lstm.named_parameters()}

    s1, p1 = run()
    s2, p2 = run()
    assert np.array_equal(s1, s2)
    for n in p1:
        assert np.array_equal(p1[n][0], p2[n][0]) and np.array_equal(p1[n][1], p2[n][1])


def test_checkpoint_roundtrip(tmp_path):
    rng = RngStream(12)
    net = T.Dense(3, 2, rng)
    h1 = T.save_checkpoint(tmp_path / "a.ckpt", net.state_dict(), {"seed": 12})
    h2 = T.save_checkpoint(tmp_path / "b.ckpt", net.state_dict(), {"seed": 12})
    assert h1 == h2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    params, meta = T.load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"seed": 12}
    other = T.Dense(3, 2, RngStream(99))
    other.load_state_dict(params)
    for n, p in net.named_parameters():
        assert np.array_equal(dict(other.named_parameters())[n].data, p.data)


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "c.ckpt"
    T.save_checkpoint(path, {"w": np.arange(4.0)})
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        T.load_checkpoint(path)
