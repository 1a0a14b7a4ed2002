import numpy as np
import pytest
import scipy.sparse as sp

from pgrec.numerics import AdamState, ConvergenceError, Tape, adam_step, backward, fiedler_vector, laplacian
from pgrec.numerics import autodiff as ad

from conftest import central_difference, random_weighted_graph


def test_identity_gradient():
    tape = Tape()
    p = tape.parameter("p", 2.5)
    assert backward(tape, p)["p"] == 1.0


def test_square_gradient():
    tape = Tape()
    p = tape.parameter("p", 3.0)
    assert backward(tape, p * p)["p"] == pytest.approx(6.0)


def test_non_scalar_loss_rejected():
    tape = Tape()
    p = tape.parameter("p", np.ones(3))
    with pytest.raises(ValueError):
        backward(tape, p * 2.0)


def test_unreachable_parameter_gets_zero():
    tape = Tape()
    a = tape.parameter("a", np.ones((2, 2)))
    tape.parameter("b", np.ones(4))
    grads = backward(tape, ad.sum_all(a))
    assert np.array_equal(grads["b"], np.zeros(4))
    assert np.array_equal(grads["a"], np.ones((2, 2)))


def test_backward_is_replayable(rng):
    tape = Tape()
    w = tape.parameter("w", rng.normal(size=(4, 3)))
    x = tape.constant(rng.normal(size=(5, 4)))
    loss = ad.sum_all(ad.square(ad.relu(x @ w)))
    g1 = backward(tape, loss)
    g2 = backward(tape, loss)
    assert np.array_equal(g1["w"], g2["w"])


def test_cleared_tape_releases_activations(rng):
    import gc
    import weakref

    gc.disable()
    try:
        tape = Tape()
        w = tape.parameter("w", rng.normal(size=(4, 3)))
        hidden = ad.relu(tape.constant(rng.normal(size=(5, 4))) @ w)
        loss = ad.sum_all(ad.square(hidden))
        grads = backward(tape, loss)
        ref = weakref.ref(hidden)
        tape.clear()
        del hidden, loss, w, tape
        assert ref() is None  # freed by refcounting alone, no cycle left
        assert grads["w"].shape == (4, 3)
    finally:
        gc.enable()


def _mlp_loss(params, x, y):
    tape = Tape()
    p = {k: tape.parameter(k, v) for k, v in params.items()}
    h = ad.relu(tape.constant(x) @ p["w1"] + p["b1"])
    out = h @ p["w2"] + p["b2"]
    loss = ad.sqrt(ad.mean_all(ad.square(out - y)))
    return tape, loss


def test_two_layer_perceptron_matches_finite_differences(rng):
    x = rng.normal(size=(16, 8))
    y = rng.normal(size=(16, 1))
    params = {
        "w1": rng.normal(size=(8, 6)),
        "b1": rng.normal(size=(6,)) * 0.1,
        "w2": rng.normal(size=(6, 1)),
        "b2": np.zeros(1),
    }
    tape, loss = _mlp_loss(params, x, y)
    grads = backward(tape, loss)
    for name, value in params.items():
        num = central_difference(lambda: float(_mlp_loss(params, x, y)[1].value), value)
        rel = np.abs(grads[name] - num) / np.maximum(np.abs(num), 1e-6)
        assert rel.max() < 1e-4, name


@pytest.mark.parametrize("op", ["spmm", "concat", "take_rows", "batch_norm", "batch_norm_frozen", "mul"])
def test_op_gradients_match_finite_differences(op, rng):
    a = rng.normal(size=(6, 4))
    b = rng.normal(size=(6, 4))
    s = sp.random(5, 6, density=0.5, random_state=3, format="csr")
    idx = np.array([0, 2, 2, 5, 1, 2])
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.normal(size=4)
    probe = rng.normal(size=(6, 8))

    def run():
        tape = Tape()
        A = tape.parameter("a", a)
        B = tape.parameter("b", b)
        G = tape.parameter("g", gamma)
        E = tape.parameter("e", beta)
        if op == "spmm":
            out = ad.spmm(s, A)
        elif op == "concat":
            out = ad.concat([A, B], axis=1)
        elif op == "take_rows":
            out = ad.take_rows(A, idx)
        elif op == "mul":
            out = A * B
        elif op == "batch_norm":
            out = ad.batch_norm(A, G, E)[0]
        else:
            out = ad.batch_norm(A, G, E, mean=np.full(4, 0.1), var=np.full(4, 2.0))[0]
        weights = tape.constant(probe[: out.shape[0], : out.shape[1]])
        return tape, ad.sum_all(ad.square(out) * weights)

    tape, loss = run()
    grads = backward(tape, loss)
    for name, arr in [("a", a), ("b", b), ("g", gamma), ("e", beta)]:
        num = central_difference(lambda: float(run()[1].value), arr)
        np.testing.assert_allclose(grads[name], num, rtol=1e-4, atol=1e-7, err_msg=name)


def test_dropout_rate_zero_is_identity(rng):
    tape = Tape()
    x = tape.parameter("x", rng.normal(size=(3, 3)))
    assert ad.dropout(x, 0.0, rng) is x


def test_adam_default_lr():
    assert AdamState().lr == 1e-4


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([[1.0, -2.0]])}
    new, state = adam_step(params, {"w": np.zeros((1, 2))}, AdamState(lr=0.1))
    assert np.array_equal(new["w"], params["w"])
    assert state.step == 1


def test_adam_one_step_hand_oracle():
    # m = 0.1, v = 0.001; bias-corrected m_hat = v_hat = 1
    lr, eps = 0.1, 1e-8
    expected = 1.0 - lr * 1.0 / (1.0 + eps)
    new, _ = adam_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, AdamState(lr=lr, eps=eps))
    assert new["p"] == pytest.approx(expected, abs=1e-15)
    assert 1.0 - new["p"] == pytest.approx(0.1, rel=1e-7)


def test_adam_is_deterministic_and_pure(rng):
    params = {"w": rng.normal(size=(3, 2))}
    grads = {"w": rng.normal(size=(3, 2))}
    state = AdamState(lr=0.01)
    p1, s1 = adam_step(params, grads, state)
    p2, s2 = adam_step(params, grads, state)
    assert np.array_equal(p1["w"], p2["w"]) and np.array_equal(s1.m["w"], s2.m["w"])
    assert state.step == 0 and state.m == {}


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())


def test_adam_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        AdamState(lr=0.0)


def test_fiedler_path_graph():
    lap = np.array([[1.0, -1, 0], [-1, 2, -1], [0, -1, 1]])
    lam, vec = fiedler_vector(sp.csr_matrix(lap))
    assert lam == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(np.abs(vec), np.array([1, 0, 1]) / np.sqrt(2), atol=1e-10)
    assert vec[0] * vec[2] < 0


def test_fiedler_disconnected_has_zero_lambda():
    w = np.zeros((6, 6))
    w[:3, :3] = 1.0
    w[3:, 3:] = 2.0
    np.fill_diagonal(w, 0.0)
    lam, vec = fiedler_vector(laplacian(w))
    assert abs(lam) < 1e-8
    assert abs(vec.sum()) < 1e-8


def test_fiedler_matches_dense_oracle(rng):
    w = random_weighted_graph(rng, 10, density=0.4, connected=True)
    lap = laplacian(w)
    lam, vec = fiedler_vector(lap)
    evals, evecs = np.linalg.eigh(lap.toarray())
    assert lam == pytest.approx(evals[1], abs=1e-6)
    ref = evecs[:, 1] * np.sign(evecs[:, 1] @ vec)
    np.testing.assert_allclose(vec, ref, atol=1e-6)
    assert np.linalg.norm(lap @ vec - lam * vec) <= 1e-6 * np.linalg.norm(vec)
    assert abs(vec.sum()) <= 1e-8


def test_fiedler_large_sparse_graph_with_restarts(rng):
    # ring of 600 nodes plus random chords: small spectral gap, many Lanczos steps
    n = 600
    rows = np.arange(n)
    w = sp.coo_matrix((np.ones(n), (rows, (rows + 1) % n)), shape=(n, n))
    chords = sp.random(n, n, density=0.002, random_state=7)
    w = (w + chords).tocsr()
    w = w + w.T
    w.setdiag(0)
    w.eliminate_zeros()
    lap = laplacian(w)
    lam, vec = fiedler_vector(lap, max_krylov=120)
    evals = np.linalg.eigvalsh(lap.toarray())
    assert lam == pytest.approx(evals[1], abs=1e-8)
    assert np.linalg.norm(lap @ vec - lam * vec) <= 1e-6


def test_fiedler_rejects_asymmetric():
    with pytest.raises(ValueError):
        fiedler_vector(np.array([[1.0, -1.0], [0.0, 0.0]]))


def test_fiedler_reports_nonconvergence():
    rng = np.random.default_rng(0)
    lap = laplacian(random_weighted_graph(rng, 40, connected=True))
    with pytest.raises(ConvergenceError) as err:
        fiedler_vector(lap, tol=1e-30, max_krylov=3, max_restarts=2)
    assert err.value.residual > 0
