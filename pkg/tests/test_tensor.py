import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sepipe import tensor as T
from sepipe.errors import ConfigError, DimensionError, StateError


# ---------------------------------------------------------------- naive oracles

def conv_loops(x, k, stride=1, pad=0):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[b, ch, i * stride + u, j * stride + v] * k[f, ch, u, v]
                    out[b, f, i, j] = s
    return out


def dense_loops(x, w, b):
    n, d = x.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            out[i, j] = b[j] + sum(x[i, t] * w[t, j] for t in range(d))
    return out


def attention_loops(x, p, heads):
    n, t, h = x.shape
    d = h // heads
    out = np.zeros_like(x)
    for b in range(n):
        q = x[b] @ p["wq"] + p["bq"]
        k = x[b] @ p["wk"] + p["bk"]
        v = x[b] @ p["wv"] + p["bv"]
        ctx = np.zeros((t, h))
        for hd in range(heads):
            cols = slice(hd * d, (hd + 1) * d)
            for i in range(t):
                scores = [sum(q[i, cols] * k[j, cols]) / math.sqrt(d) for j in range(t)]
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                for j in range(t):
                    ctx[i, cols] += e[j] / z * v[j, cols]
        out[b] = ctx @ p["wo"] + p["bo"]
    return out


def attn_params(rng, h, scale=0.5):
    p = {}
    for name in "qkvo":
        p[f"w{name}"] = rng.normal(0, scale, (h, h))
        p[f"b{name}"] = rng.normal(0, scale, h)
    return p


# ---------------------------------------------------------------- conv2d

def test_conv_ones():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_identity_kernel(rng, k):
    x = rng.normal(size=(2, 1, 6, 7))
    ker = np.zeros((1, 1, k, k))
    ker[0, 0, k // 2, k // 2] = 1.0
    with T.float64():
        out = T.conv2d(T.Tensor(x), T.Tensor(ker), padding=k // 2)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loops(rng, stride, pad):
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    with T.float64():
        out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv_loops(x, k, stride, pad), atol=1e-6)


def test_conv_output_shape_formula(rng):
    x = T.Tensor(rng.normal(size=(2, 3, 9, 7)))
    out = T.conv2d(x, T.Tensor(rng.normal(size=(4, 3, 3, 2))), stride=2, padding=1)
    assert out.shape == (2, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        T.conv2d(T.Tensor(np.zeros((1, 2, 5, 5))), T.Tensor(np.zeros((1, 3, 3, 3))))
    assert "(1, 2, 5, 5)" in str(exc.value) and "(1, 3, 3, 3)" in str(exc.value)


def sq(t):
    return T.mul(t, t).sum()


def test_conv_gradients(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    assert T.grad_check(lambda t: sq(T.conv2d(t, T.Tensor(k), stride=2, padding=1)), x) < 1e-4
    assert T.grad_check(lambda t: sq(T.conv2d(T.Tensor(x), t, padding=1)), k) < 1e-4
    assert T.grad_check(lambda t: sq(T.conv2d(T.Tensor(x), T.Tensor(k), t)), b) < 1e-4


# ---------------------------------------------------------------- dense

def test_dense_identity(rng):
    x = rng.normal(size=(3, 4))
    with T.float64():
        out = T.dense(T.Tensor(x), T.Tensor(np.eye(4)), T.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_hand_value():
    out = T.dense(T.Tensor([[1.0, 2.0]]), T.Tensor([[1.0], [1.0]]), T.Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[4.0]])


def test_dense_matches_loops(rng):
    x, w, b = rng.normal(size=(4, 8)), rng.normal(size=(8, 3)), rng.normal(size=3)
    with T.float64():
        out = T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(b))
    np.testing.assert_allclose(out.data, dense_loops(x, w, b), atol=1e-6)


def test_dense_inner_mismatch():
    with pytest.raises(DimensionError):
        T.dense(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_dense_gradients(rng):
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    assert T.grad_check(lambda t: sq(T.dense(t, T.Tensor(w), T.Tensor(b))), x) < 1e-4
    assert T.grad_check(lambda t: sq(T.dense(T.Tensor(x), t, T.Tensor(b))), w) < 1e-4
    assert T.grad_check(lambda t: sq(T.dense(T.Tensor(x), T.Tensor(w), t)), b) < 1e-4


# ---------------------------------------------------------------- attention

def test_attention_single_token(rng):
    h = 4
    p = attn_params(rng, h)
    x = rng.normal(size=(2, 1, h))
    with T.float64():
        out, w = T.multi_head_attention(T.Tensor(x), {k: T.Tensor(v) for k, v in p.items()}, 2,
                                        return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones_like(w.data))
    expected = (x @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_attention_constant_tokens_uniform_weights():
    h = 4
    eye = {f"w{n}": T.Tensor(np.eye(h)) for n in "qkvo"}
    eye.update({f"b{n}": T.Tensor(np.zeros(h)) for n in "qkvo"})
    x = np.tile(np.array([0.3, -1.0, 2.0, 0.5]), (1, 3, 1))
    with T.float64():
        out, w = T.multi_head_attention(T.Tensor(x), eye, 2, return_weights=True)
    np.testing.assert_allclose(w.data, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_attention_matches_loops(rng):
    x = rng.normal(size=(1, 3, 4))
    p = attn_params(rng, 4)
    with T.float64():
        out, w = T.multi_head_attention(T.Tensor(x), {k: T.Tensor(v) for k, v in p.items()}, 2,
                                        return_weights=True)
    np.testing.assert_allclose(out.data, attention_loops(x, p, 2), atol=1e-5)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_bad_heads(rng):
    p = {k: T.Tensor(v) for k, v in attn_params(rng, 6).items()}
    with pytest.raises(ConfigError):
        T.multi_head_attention(T.Tensor(np.zeros((1, 2, 6))), p, 4)


def test_attention_gradients(rng):
    x = rng.normal(size=(1, 3, 4))
    p = attn_params(rng, 4)
    assert T.grad_check(lambda t: sq(T.multi_head_attention(t, {k: T.Tensor(v) for k, v in p.items()}, 2)),
                        x) < 1e-4
    for name in ("wq", "bq", "wk", "wv", "bv", "bo"):
        def f(t, name=name):
            q = {k: T.Tensor(v) for k, v in p.items()}
            q[name] = t
            return sq(T.multi_head_attention(T.Tensor(x), q, 2))
        assert T.grad_check(f, p[name]) < 1e-4, name


def test_attention_key_bias_has_no_effect(rng):
    # a key bias shifts every score in a row equally, and softmax ignores that
    x = rng.normal(size=(1, 3, 4))
    p = {k: T.Tensor(v) for k, v in attn_params(rng, 4).items()}
    with T.float64():
        p["bk"] = T.Tensor(p["bk"].data, requires_grad=True)
        sq(T.multi_head_attention(T.Tensor(x), p, 2)).backward()
    np.testing.assert_allclose(p["bk"].grad, 0.0, atol=1e-10)


# ---------------------------------------------------------------- layernorm

def test_layernorm_constant_row():
    out = T.layernorm(T.Tensor([[1.0, 1.0, 1.0]]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layernorm_already_normalized():
    with T.float64():
        out = T.layernorm(T.Tensor([[-1.0, 1.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layernorm_affine_formula(rng):
    x = rng.normal(size=(1, 7))
    with T.float64():
        out = T.layernorm(T.Tensor(x), T.Tensor(np.full(7, 2.0)), T.Tensor(np.full(7, 3.0)))
    norm = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    np.testing.assert_allclose(out.data, 2 * norm + 3, atol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
                  elements=st.floats(-100, 100)))
def test_layernorm_rows_standardized(x):
    spread = x.max(axis=1) - x.min(axis=1)
    x = x[spread > 1e-2]
    if x.size == 0:
        return
    with T.float64():
        out = T.layernorm(T.Tensor(x), T.Tensor(np.ones(x.shape[1])), T.Tensor(np.zeros(x.shape[1])),
                          eps=1e-12).data
    assert np.all(np.abs(out.mean(axis=1)) <= 1e-6)
    assert np.all(np.abs(out.var(axis=1) - 1) <= 1e-4)


def test_layernorm_shape_mismatch():
    with pytest.raises(DimensionError):
        T.layernorm(T.Tensor(np.zeros((2, 3))), T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))


def test_layernorm_gradients(rng):
    x, g, b = rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 5))
    assert T.grad_check(lambda t: T.mul(T.layernorm(t, T.Tensor(g), T.Tensor(b)), w).sum(), x) < 1e-4
    assert T.grad_check(lambda t: sq(T.layernorm(T.Tensor(x), t, T.Tensor(b))), g) < 1e-4
    assert T.grad_check(lambda t: sq(T.layernorm(T.Tensor(x), T.Tensor(g), t)), b) < 1e-4


# ---------------------------------------------------------------- activations

def test_relu_values():
    np.testing.assert_array_equal(T.activation(T.Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])


def test_sigmoid_zero():
    assert T.activation(T.Tensor([0.0]), "sigmoid").data[0] == 0.5


def test_gelu_formula():
    with T.float64():
        got = T.activation(T.Tensor([1.0]), "gelu").data[0]
    want = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert abs(got - want) < 1e-6


def test_unknown_activation():
    with pytest.raises(ConfigError):
        T.activation(T.Tensor([1.0]), "swish")


@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e4, 1e4)))
def test_sigmoid_open_interval(x):
    with T.float64():
        s = T.sigmoid(T.Tensor(x)).data
    assert np.all(np.isfinite(s)) and np.all(s >= 0) and np.all(s <= 1)
    small = np.abs(x) < 30
    assert np.all((s[small] > 0) & (s[small] < 1))


@pytest.mark.parametrize("kind", ["relu", "gelu", "sigmoid"])
def test_activation_gradients(rng, kind):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
    assert T.grad_check(lambda t: sq(T.activation(t, kind)), x) < 1e-4


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    with T.float64():
        s = T.softmax(T.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- losses

def test_ce_uniform():
    with T.float64():
        assert abs(T.softmax_cross_entropy(T.Tensor([[0.0, 0.0]]), [0]).item() - math.log(2)) < 1e-12


def test_ce_confident():
    with T.float64():
        assert T.softmax_cross_entropy(T.Tensor([[100.0, 0.0]]), [0]).item() < 1e-12


def test_ce_formula(rng):
    z = rng.normal(size=(3, 2))
    y = np.array([0, 1, 1])
    with T.float64():
        got = T.softmax_cross_entropy(T.Tensor(z), y).item()
    want = np.mean([-(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(3)])
    assert abs(got - want) < 1e-6


def test_ce_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.Tensor([[0.0, 1.0]]), [2])


def test_ce_gradient(rng):
    y = np.array([1, 0, 1])
    assert T.grad_check(lambda t: T.softmax_cross_entropy(t, y), rng.normal(size=(3, 2))) < 1e-4


def test_bce_half():
    with T.float64():
        assert abs(T.binary_cross_entropy(T.Tensor([[0.5]]), [1]).item() - math.log(2)) < 1e-12


def test_bce_clamped_near_perfect():
    with T.float64():
        loss = T.binary_cross_entropy(T.Tensor([[1.0]]), [1]).item()
    assert abs(loss - 1e-7) < 1e-12


def test_bce_formula_batch():
    p = np.array([[0.1], [0.7], [0.45], [0.99]])
    y = np.array([0, 1, 1, 0])
    with T.float64():
        got = T.binary_cross_entropy(T.Tensor(p), y).item()
    want = np.mean([-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p[:, 0], y)])
    assert abs(got - want) < 1e-9


@given(st.lists(st.floats(-15, 15), min_size=1, max_size=6), st.data())
def test_bce_with_logits_agrees(z, data):
    y = data.draw(st.lists(st.integers(0, 1), min_size=len(z), max_size=len(z)))
    z = np.array(z)[:, None]
    with T.float64():
        a = T.bce_with_logits(T.Tensor(z), y).item()
        b = T.binary_cross_entropy(T.sigmoid(T.Tensor(z)), y).item()
    # |z| <= 15 keeps sigmoid clear of the 1e-7 clamp
    assert abs(a - b) < 1e-6


def test_bce_gradients(rng):
    y = np.array([1, 0, 1, 0])
    assert T.grad_check(lambda t: T.bce_with_logits(t, y), rng.normal(size=(4, 1))) < 1e-4
    assert T.grad_check(lambda t: T.binary_cross_entropy(t, y), rng.uniform(0.2, 0.8, (4, 1))) < 1e-4


# ---------------------------------------------------------------- backward + graph

def test_backward_sum_gives_ones(rng):
    x = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_squares():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    sq(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(DimensionError):
        T.mul(x, 2.0).backward()


def test_double_backward_rejected():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = sq(x)
    loss.backward()
    with pytest.raises(StateError):
        loss.backward()


def test_shared_node_gradient_accumulates():
    x = T.Tensor([3.0], requires_grad=True)
    y = T.mul(x, x)
    T.add(y, y).sum().backward()
    np.testing.assert_array_equal(x.grad, [12.0])


def test_topological_order_inputs_first(rng):
    x = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    a = T.relu(x)
    b = T.mul(a, x)
    loss = T.add(b, a).sum()
    order = T.topological_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for node in order:
        for inp in node._inputs:
            assert pos[id(inp)] < pos[id(node)]
    assert order[-1] is loss


def test_forward_deterministic(rng):
    x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
    k = rng.normal(size=(3, 1, 3, 3)).astype(np.float32)
    a = T.conv2d(T.Tensor(x), T.Tensor(k), padding=1).data
    b = T.conv2d(T.Tensor(x), T.Tensor(k), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_default_dtype_is_float32():
    assert T.Tensor([1.0]).dtype == np.float32
    with T.float64():
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


@pytest.mark.parametrize("op", ["reshape", "transpose", "getitem", "broadcast", "concat", "mean", "matmul",
                                "exp_log", "sub"])
def test_shape_op_gradients(rng, op):
    x = rng.uniform(0.5, 1.5, size=(2, 3))
    w = rng.normal(size=(2, 3))
    fs = {
        "reshape": lambda t: T.mul(T.reshape(t, (3, 2)), w.reshape(3, 2)).sum(),
        "transpose": lambda t: T.mul(T.transpose(t), w.T).sum(),
        "getitem": lambda t: sq(t[:, [0, 2, 0]]),
        "broadcast": lambda t: sq(T.broadcast_to(T.reshape(t, (1, 2, 3)), (4, 2, 3))),
        "concat": lambda t: sq(T.concat([t, T.mul(t, 2.0)], axis=0)),
        "mean": lambda t: sq(T.mean(t, axis=1)),
        "matmul": lambda t: sq(T.matmul(t, T.Tensor(w.T))),
        "exp_log": lambda t: T.add(T.exp(t), T.log(t)).sum(),
        "sub": lambda t: sq(T.sub(t, T.Tensor(w))),
    }
    assert T.grad_check(fs[op], x) < 1e-4


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_linear_exact(rng):
    assert T.grad_check(lambda t: t.sum(), rng.normal(size=(3, 3))) < 1e-9


def test_grad_check_squares(rng):
    assert T.grad_check(sq, rng.normal(size=10)) < 1e-7


def test_grad_check_flags_wrong_gradient(rng):
    x = rng.normal(size=6)
    err = T.grad_check(sq, x, analytic=2 * (2 * x))
    assert abs(err - 1 / 3) < 1e-6


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-3, 3)))
def test_forward_finite_on_finite_inputs(x):
    with T.float64():
        t = T.Tensor(x)
        outs = [T.gelu(t), T.sigmoid(t), T.softmax(T.reshape(t, (1, -1))), T.relu(t), T.exp(t)]
    assert all(np.all(np.isfinite(o.data)) for o in outs)
