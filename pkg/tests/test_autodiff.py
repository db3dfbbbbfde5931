import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from opendet import autodiff as ad
from opendet.errors import DomainError, FormatError, ShapeError

from gradcheck import check, weighted
from oracles import naive_attention, naive_bilinear


def U(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


# ---------------------------------------------------------------- forward examples

def test_linear_examples():
    tape = ad.Tape()
    x = tape.constant([1.0, 2.0])
    assert ad.linear_forward(x, ad.LinearParams(np.eye(2), np.zeros(2))).data.tolist() == [1, 2]
    assert ad.linear_forward(x, ad.LinearParams(np.zeros((2, 1)), [5.0])).data.tolist() == [5]
    y = ad.linear_forward(tape.constant([1.0, 1.0]), ad.LinearParams(np.array([[1, 2], [3, 4.0]]), np.zeros(2)))
    assert y.data.tolist() == [4, 6]
    with pytest.raises(ShapeError):
        ad.linear_forward(tape.constant([1.0, 2.0, 3.0]), ad.LinearParams(np.eye(2), np.zeros(2)))


def test_softmax_examples():
    tape = ad.Tape()
    assert np.allclose(ad.softmax(tape.constant([0.0, 0, 0])).data, 1 / 3, atol=1e-15)
    big = ad.softmax(tape.constant([1000.0, 0.0])).data
    assert abs(big[0] - 1) < 1e-12 and big[1] < 1e-12
    got = ad.softmax(tape.constant(np.log([1.0, 2.0, 3.0]))).data
    assert np.allclose(got, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_simplex(xs):
    p = ad.softmax(ad.Tape().constant(xs)).data
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12


def test_bilinear_examples():
    tape = ad.Tape()
    grid = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    out = ad.bilinear_sample(tape.constant(grid), tape.constant([[1.0, 2.0]])).data
    assert np.array_equal(out[0], grid[:, 1, 2])
    cell = np.array([[[0.0, 0.0], [4.0, 4.0]]])
    assert ad.bilinear_sample(tape.constant(cell), tape.constant([[0.5, 0.5]])).data[0, 0] == 2.0
    far = ad.bilinear_sample(tape.constant(grid), tape.constant([[-5.0, 10.0], [np.nan, 1.0]])).data
    assert np.array_equal(far, np.zeros((2, 2)))


def test_bilinear_matches_loop(rng):
    grid = rng.normal(size=(3, 5, 6))
    coords = rng.uniform(-1.5, 6.5, size=(40, 2))
    got = ad.bilinear_sample(ad.Tape().constant(grid), ad.Tape().constant(coords)).data
    want = np.stack([naive_bilinear(grid, r, c) for r, c in coords])
    assert np.allclose(got, want, atol=1e-12)


def test_bilinear_batched_matches_single(rng):
    grid = rng.normal(size=(2, 3, 4, 5))
    coords = rng.uniform(-1, 5, size=(2, 7, 2))
    tape = ad.Tape()
    batched = ad.bilinear_sample(tape.constant(grid), tape.constant(coords)).data
    for v in range(2):
        single = ad.bilinear_sample(tape.constant(grid[v]), tape.constant(coords[v])).data
        assert np.array_equal(batched[v], single)


def test_attention_matches_loop(rng):
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    tape = ad.Tape()
    out, w = ad.attention(tape.constant(q), tape.constant(k), tape.constant(v))
    assert np.allclose(out.data, naive_attention(q, k, v), atol=1e-12)
    assert np.allclose(w.data.sum(-1), 1.0)


def test_single_key_attention_returns_value(rng):
    tape = ad.Tape()
    v = rng.normal(size=(1, 3))
    out, _ = ad.attention(tape.constant(rng.normal(size=(1, 4))), tape.constant(rng.normal(size=(1, 4))),
                          tape.constant(v))
    assert np.allclose(out.data, v, atol=1e-15)


def test_perspective_project_grid_convention():
    tape = ad.Tape()
    pts = tape.constant([[8.0, 12.0, 4.0], [0.0, 0.0, -1.0]])
    coords, valid = ad.perspective_project(pts, np.eye(4))
    assert coords.data[0].tolist() == [2.5, 1.5]  # (v - 0.5, u - 0.5)
    assert valid.tolist() == [True, False]
    assert coords.data[1, 0] == ad.OUTSIDE


# ---------------------------------------------------------------- backward examples

def test_backward_examples():
    tape = ad.Tape()
    x = tape.param("x", np.array(3.0))
    assert ad.backward(tape, x * 1.0)["x"] == 1.0

    tape = ad.Tape()
    x = tape.param("x", np.array([[1.0, 2.0]]))
    w = np.ones((2, 3))
    g = ad.backward(tape, (x @ w).sum())["x"]
    assert np.array_equal(g, w.sum(axis=1)[None])


def test_backward_rejects_nonscalar():
    tape = ad.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(DomainError):
        ad.backward(tape, x * 2.0)


def test_tape_is_topological():
    tape = ad.Tape()
    x = tape.param("x", np.ones(2))
    y = ad.relu(x * 2.0) + ad.exp(x)
    ad.sum_(y)
    for node in tape.nodes:
        assert all(p.id < node.id for p in node._parents if p.requires_grad)


def test_duplicate_param_rejected():
    tape = ad.Tape()
    tape.param("a", 1.0)
    with pytest.raises(DomainError):
        tape.param("a", 2.0)


# ---------------------------------------------------------------- gradient checks

ELEMENTWISE = [ad.relu, ad.sigmoid, ad.tanh, ad.exp, ad.sin, ad.cos, ad.abs_, ad.neg]


@pytest.mark.parametrize("op", ELEMENTWISE, ids=lambda f: f.__name__)
def test_elementwise_grads(op, rng):
    x = U(rng, 3, 4)
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of kinks
    check(lambda t: weighted(op(t)), x)


def test_log_grad(rng):
    check(lambda t: weighted(ad.log(t)), rng.uniform(0.1, 2, size=(5,)))


def test_arith_grads(rng):
    check(lambda a, b: weighted(a * b + a - b), U(rng, 3, 4), U(rng, 4))
    check(lambda a: weighted(a / 3.0 - 1.0), U(rng, 2, 2))


def test_reduction_and_shape_grads(rng):
    check(lambda a: weighted(ad.sum_(a, axis=1)) + weighted(a.mean(axis=0), 1), U(rng, 3, 4))
    check(lambda a: weighted(ad.transpose(ad.reshape(a, (4, 3)))), U(rng, 3, 4))
    check(lambda a: weighted(a[1:, ::2]) + weighted(a[np.array([0, 0, 2])], 2), U(rng, 3, 4))


def test_concat_stack_grads(rng):
    check(lambda a, b: weighted(ad.concat([a, b], axis=-1)) + weighted(ad.stack([a, b], axis=0), 1),
          U(rng, 2, 3), U(rng, 2, 3))


def test_matmul_grads(rng):
    check(lambda a, b: weighted(a @ b), U(rng, 3, 4), U(rng, 4, 2))
    check(lambda a, b: weighted(a @ b), U(rng, 2, 3, 4), U(rng, 4, 2))
    check(lambda a, b: weighted(a @ b), U(rng, 2, 3, 4), U(rng, 4))


def test_linear_and_mlp_grads(rng):
    check(lambda x, w, b: weighted(ad.linear_forward(x, ad.LinearParams(w, b))),
          U(rng, 3, 4), U(rng, 4, 2), U(rng, 2))
    w0, b0, w1, b1 = U(rng, 4, 5), U(rng, 5), U(rng, 5, 2), U(rng, 2)
    check(lambda x, a, b, c, d: weighted(ad.mlp_forward(x, [ad.LinearParams(a, b), ad.LinearParams(c, d)])),
          U(rng, 3, 4), w0, b0, w1, b1)


def test_softmax_grad(rng):
    check(lambda a: weighted(ad.softmax(a, axis=-1)), U(rng, 3, 5))
    check(lambda a: weighted(ad.softmax(a, axis=0)), U(rng, 3, 5))


def test_layer_norm_grad(rng):
    check(lambda x, g, b: weighted(ad.layer_norm(x, g, b)), U(rng, 3, 6), U(rng, 6), U(rng, 6))


def test_attention_grad(rng):
    bias = U(rng, 2, 4)
    check(lambda q, k, v: weighted(ad.attention(q, k, v)[0]), U(rng, 2, 3), U(rng, 4, 3), U(rng, 4, 5))
    check(lambda q, k, v: weighted(ad.attention(q, k, v, bias=bias)[0]),
          U(rng, 2, 3), U(rng, 4, 3), U(rng, 4, 5))


def test_bilinear_grad(rng):
    grid = U(rng, 2, 4, 5)
    # keep coordinates off integer lines, where the interpolant has kinks
    coords = np.floor(rng.uniform(-1, 5, size=(9, 2))) + rng.uniform(0.1, 0.9, size=(9, 2))
    check(lambda g, c: weighted(ad.bilinear_sample(g, c)), grid, coords)
    check(lambda g, c: weighted(ad.bilinear_sample(g, c)), U(rng, 2, 2, 3, 3),
          np.floor(rng.uniform(-1, 3, size=(2, 4, 2))) + rng.uniform(0.1, 0.9, size=(2, 4, 2)))


def test_perspective_project_grad(rng):
    pts = np.column_stack([rng.uniform(-3, 3, size=(6, 2)), rng.uniform(2, 9, size=6)])
    m = np.eye(4)
    m[:3, :3] = [[20, 0, 8], [0, 25, 6], [0, 0, 1]]
    m[:3, 3] = [0.3, -0.2, 0.1]
    check(lambda p: weighted(ad.perspective_project(p, m)[0]), pts)
    stack = np.stack([m, np.eye(4)])
    check(lambda p: weighted(ad.perspective_project(p, stack)[0]), pts.reshape(2, 3, 3))


# ---------------------------------------------------------------- optimizer and checkpoints

def test_adam_first_step_matches_hand():
    p = {"w": np.array([1.0, -2.0])}
    opt = ad.Adam(p, lr=0.1)
    opt.step({"w": np.array([0.5, -4.0])})
    # bias-corrected first step moves each coordinate by lr * sign(g)
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-7)


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a": rng.normal(size=(2, 3)), "b.c": np.array(1.5), "z": rng.normal(size=(4,))}
    path = tmp_path / "ck.bin"
    ad.save_checkpoint(path, params)
    back = ad.load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape and np.array_equal(back[k], params[k])
    blob = path.read_bytes()
    assert blob[:8] == b"OPENCKPT"
    with pytest.raises(FormatError) as err:
        ad.decode_checkpoint(blob[:-3])
    assert err.value.offset > 0
    with pytest.raises(FormatError):
        ad.decode_checkpoint(b"NOTACKPT" + blob[8:])


def test_forward_deterministic(rng):
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))

    def run():
        tape = ad.Tape()
        return ad.softmax(ad.tanh(tape.constant(x) @ w)).data

    assert np.array_equal(run(), run())
