import numpy as np
import pytest

from fedsim import engine
from fedsim.engine import (
    AdamState,
    Architecture,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2d,
    ModelParams,
    ReLU,
    ShapeError,
    TrainingDiverged,
)


def to_float64(params: ModelParams) -> ModelParams:
    out = params.copy()
    for l in out.layers:
        l.weight = l.weight.astype(np.float64)
        if l.bias is not None:
            l.bias = l.bias.astype(np.float64)
    return out


def numeric_grad(arch, params, batch, labels, dropout_seed, h=1e-3):
    """Central finite differences over the flat parameter vector."""
    base = params.flat()

    def loss_at(vec):
        p = ModelParams.from_flat(params, vec)
        loss, _ = engine.loss_and_grads(arch, p, batch, labels, dropout_seed)
        return loss

    grad = np.zeros_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_at(up) - loss_at(down)) / (2 * h)
    return grad


def check_gradients(arch, seed=0, n=4, h=1e-3, tol=1e-3):
    rng = np.random.default_rng(seed)
    params = to_float64(engine.init_model(arch, seed))
    batch = rng.standard_normal((n,) + arch.input_shape)
    labels = rng.integers(0, arch.n_classes, n)
    _, grads = engine.loss_and_grads(arch, params, batch, labels, dropout_seed=7)
    analytic = np.concatenate([g.ravel() for g in grads])
    numeric = numeric_grad(arch, params, batch, labels, dropout_seed=7, h=h)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    assert rel.max() < tol, f"max rel error {rel.max():.2e} for {arch}"


# ---------------------------------------------------------------------------
# init_model


def test_init_fmnist_conv1_shape():
    params = engine.init_model(engine.fmnist_cnn(), seed=0)
    assert params.layers[0].name == "conv2d_1"
    assert params.layers[0].weight.shape == (64, 1, 5, 5)
    assert params.layers[0].bias.shape == (64,)


def test_init_deterministic():
    arch = engine.fmnist_cnn()
    a = engine.init_model(arch, seed=3)
    b = engine.init_model(arch, seed=3)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight)
        assert np.array_equal(la.bias, lb.bias)


def test_init_uniform_bound_from_fan_in():
    arch = Architecture((4,), [Dense(4, 2)])
    params = engine.init_model(arch, seed=7)
    w = params.layers[0].weight
    assert np.all(w > -0.5) and np.all(w < 0.5)
    assert np.array_equal(params.layers[0].bias, np.zeros(2, np.float32))


def test_architecture_rejects_bad_composition():
    with pytest.raises(ShapeError):
        Architecture((1, 8, 8), [Conv2d(2, 4, 3)])  # channel mismatch
    with pytest.raises(ShapeError):
        Architecture((1, 8, 8), [Dense(64, 10)])  # missing flatten
    with pytest.raises(ShapeError):
        Architecture((1, 4, 4), [Conv2d(1, 4, 7)])  # kernel too large


# ---------------------------------------------------------------------------
# forward


def test_forward_zero_params_gives_uniform_softmax():
    arch = Architecture((3,), [Dense(3, 4)])
    params = engine.init_model(arch, 0)
    params.layers[0].weight[:] = 0
    x = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    logits = engine.forward(arch, params, x)
    assert np.array_equal(logits, np.zeros((5, 4), np.float32))
    probs = engine.predict_proba(arch, params, x)
    assert np.allclose(probs, 0.25)


def test_forward_identity_dense():
    arch = Architecture((2,), [Dense(2, 2)])
    params = engine.init_model(arch, 0)
    params.layers[0].weight[:] = np.eye(2, dtype=np.float32)
    x = np.array([[1.5, -2.0]], np.float32)
    assert np.allclose(engine.forward(arch, params, x), x)


def test_forward_matches_hand_computed_toy_net():
    # Dense(2,2) -> ReLU -> Dense(2,2), weights chosen so the arithmetic is
    # checkable by hand: h = W1 x + b1, r = max(h, 0), logits = W2 r + b2.
    arch = Architecture((2,), [Dense(2, 2), ReLU(), Dense(2, 2)])
    params = engine.init_model(arch, 0)
    params.layers[0].weight[:] = [[1, 2], [3, 4]]
    params.layers[0].bias[:] = [0.5, -0.5]
    params.layers[1].weight[:] = [[1, -1], [2, 0]]
    params.layers[1].bias[:] = [0, 1]
    x = np.array([[1.0, 0.5], [-1.0, 2.0]], np.float32)
    # sample 1: h = [2.5, 4.5] -> logits [2.5-4.5, 2*2.5+1] = [-2, 6]
    # sample 2: h = [3.5, 4.5] -> logits [3.5-4.5, 2*3.5+1] = [-1, 8]
    expected = np.array([[-2.0, 6.0], [-1.0, 8.0]], np.float32)
    assert np.allclose(engine.forward(arch, params, x), expected, atol=1e-6)


def test_forward_shape_mismatch():
    arch = Architecture((2,), [Dense(2, 2)])
    params = engine.init_model(arch, 0)
    with pytest.raises(ShapeError):
        engine.forward(arch, params, np.zeros((1, 3), np.float32))


def test_dropout_only_in_train_mode_and_deterministic():
    arch = Architecture((50,), [Dropout(0.5), Dense(50, 2)])
    params = engine.init_model(arch, 0)
    x = np.ones((2, 50), np.float32)
    eval_out = engine.forward(arch, params, x, train_mode=False)
    assert np.array_equal(eval_out, engine.forward(arch, params, x, train_mode=False))
    t1 = engine.forward(arch, params, x, train_mode=True, dropout_seed=5)
    t2 = engine.forward(arch, params, x, train_mode=True, dropout_seed=5)
    t3 = engine.forward(arch, params, x, train_mode=True, dropout_seed=6)
    assert np.array_equal(t1, t2)
    assert not np.array_equal(t1, t3)
    assert not np.array_equal(t1, eval_out)


# ---------------------------------------------------------------------------
# gradients: finite-difference oracle per layer type


def test_gradcheck_dense_relu():
    check_gradients(Architecture((6,), [Dense(6, 5), ReLU(), Dense(5, 3)]))


def test_gradcheck_conv():
    check_gradients(
        Architecture((2, 6, 6), [Conv2d(2, 3, 3), ReLU(), Flatten(), Dense(48, 3)])
    )


def test_gradcheck_conv_stride_pad():
    check_gradients(
        Architecture((1, 7, 7), [Conv2d(1, 2, 3, stride=2, pad=1), Flatten(), Dense(32, 2)])
    )


def test_gradcheck_maxpool():
    check_gradients(
        Architecture((1, 6, 6), [Conv2d(1, 2, 3), MaxPool2d(2, 2), Flatten(), Dense(8, 2)])
    )


def test_gradcheck_dropout_fixed_mask():
    check_gradients(
        Architecture((8,), [Dense(8, 6), Dropout(0.5), ReLU(), Dense(6, 2)])
    )


def test_gradcheck_stacked_convs():
    check_gradients(
        Architecture(
            (1, 8, 8),
            [Conv2d(1, 2, 3), ReLU(), Conv2d(2, 2, 3), ReLU(), Flatten(), Dense(32, 2)],
        )
    )


def test_gradcheck_numpy_conv_fallback(monkeypatch):
    # the im2col path must stay correct even when torch provides the kernels
    monkeypatch.setattr(engine, "_torch", None)
    check_gradients(
        Architecture(
            (2, 7, 7),
            [Conv2d(2, 3, 3, stride=2, pad=1), ReLU(), Conv2d(3, 2, 3), Flatten(), Dense(8, 2)],
        )
    )


def test_conv_paths_agree(monkeypatch):
    arch = Architecture((2, 8, 8), [Conv2d(2, 4, 3, pad=1), ReLU(), Flatten(), Dense(256, 3)])
    params = engine.init_model(arch, 5)
    x = np.random.default_rng(0).standard_normal((3, 2, 8, 8)).astype(np.float32)
    y = np.array([0, 1, 2])
    loss_t, grads_t = engine.loss_and_grads(arch, params, x, y, dropout_seed=1)
    monkeypatch.setattr(engine, "_torch", None)
    loss_n, grads_n = engine.loss_and_grads(arch, params, x, y, dropout_seed=1)
    assert loss_t == pytest.approx(loss_n, rel=1e-5)
    for gt, gn in zip(grads_t, grads_n):
        assert np.allclose(gt, gn, atol=1e-5)


# ---------------------------------------------------------------------------
# train_step / Adam


def test_adam_zero_gradient_leaves_params_unchanged():
    arch = Architecture((3,), [Dense(3, 2)])
    params = engine.init_model(arch, 1)
    adam = engine.init_adam(params)
    zero = [np.zeros_like(params.layers[0].weight), np.zeros_like(params.layers[0].bias)]
    new_params, new_adam = engine.adam_step(params, zero, adam)
    assert np.array_equal(new_params.layers[0].weight, params.layers[0].weight)
    assert np.array_equal(new_params.layers[0].bias, params.layers[0].bias)
    assert new_adam.step == 1


def test_train_step_reduces_loss_on_repeated_batch():
    rng = np.random.default_rng(0)
    arch = Architecture((4,), [Dense(4, 8), ReLU(), Dense(8, 2)])
    params = engine.init_model(arch, 0)
    adam = engine.init_adam(params)
    x = rng.standard_normal((16, 4)).astype(np.float32)
    y = rng.integers(0, 2, 16)
    first = None
    for i in range(50):
        params, adam, loss = engine.train_step(arch, params, adam, x, y, dropout_seed=i)
        if first is None:
            first = loss
    assert loss < first


def test_train_separable_2d_reaches_95_percent():
    # logistic-regression sanity: two linearly separable blobs
    rng = np.random.default_rng(42)
    n = 64
    x0 = rng.normal(-1.0, 0.3, (n, 2))
    x1 = rng.normal(+1.0, 0.3, (n, 2))
    x = np.concatenate([x0, x1]).astype(np.float32)
    y = np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)])
    arch = Architecture((2,), [Dense(2, 2)])
    params = engine.init_model(arch, 0)
    adam = engine.init_adam(params, lr=0.05)
    for i in range(200):
        params, adam, _ = engine.train_step(arch, params, adam, x, y, dropout_seed=i)
    acc = (engine.predict_proba(arch, params, x).argmax(1) == y).mean()
    assert acc >= 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_step_aborts_on_nonfinite_loss():
    arch = Architecture((2,), [Dense(2, 2)])
    params = engine.init_model(arch, 0)
    params.layers[0].weight[:] = np.inf
    adam = engine.init_adam(params)
    with pytest.raises(TrainingDiverged):
        engine.train_step(arch, params, adam, np.ones((1, 2), np.float32), np.array([0]))


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((32, 6)).astype(np.float32)
    y = rng.integers(0, 3, 32)
    arch = Architecture((6,), [Dense(6, 8), Dropout(0.3), ReLU(), Dense(8, 3)])

    def run():
        p, _ = engine.fit(
            arch, engine.init_model(arch, 9), x, y,
            epochs=3, batch_size=8, lr=1e-3, rng=np.random.default_rng(11),
        )
        return p

    a, b = run(), run()
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight)
        assert np.array_equal(la.bias, lb.bias)


# ---------------------------------------------------------------------------
# predict_proba


def test_predict_proba_closed_form():
    arch = Architecture((2,), [Dense(2, 2)])
    params = engine.init_model(arch, 0)
    params.layers[0].weight[:] = np.eye(2, dtype=np.float32)
    x = np.array([[np.log(2.0), 0.0]], np.float32)
    probs = engine.predict_proba(arch, params, x)
    assert np.allclose(probs, [[2 / 3, 1 / 3]], atol=1e-6)


def test_predict_proba_rows_sum_to_one_and_argmax_matches_logits():
    rng = np.random.default_rng(0)
    arch = Architecture((5,), [Dense(5, 7)])
    params = engine.init_model(arch, 2)
    x = rng.standard_normal((40, 5)).astype(np.float32)
    probs = engine.predict_proba(arch, params, x)
    logits = engine.forward(arch, params, x)
    assert np.all(probs >= 0) and np.all(probs <= 1)
    assert np.allclose(probs.sum(1), 1.0, atol=1e-6)
    assert np.array_equal(probs.argmax(1), logits.argmax(1))


def test_cross_entropy_nonnegative_and_label_validation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        logits = rng.standard_normal((8, 4)).astype(np.float32)
        labels = rng.integers(0, 4, 8)
        loss, _ = engine.cross_entropy(logits, labels)
        assert loss >= 0
    with pytest.raises(ShapeError):
        engine.cross_entropy(np.zeros((2, 3), np.float32), np.array([0, 3]))


# ---------------------------------------------------------------------------
# params plumbing


def test_flat_roundtrip_preserves_values():
    arch = engine.cifar10_cnn()
    params = engine.init_model(arch, 4)
    rebuilt = ModelParams.from_flat(params, params.flat())
    for la, lb in zip(params.layers, rebuilt.layers):
        assert np.array_equal(la.weight, lb.weight)
        assert np.array_equal(la.bias, lb.bias)
    assert params.n_params == params.flat().size


def test_flatten_layer_roundtrip_exact():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
    flat = x.reshape(3, -1)
    assert np.array_equal(flat.reshape(x.shape), x)


def test_reference_architectures_compose():
    assert engine.fmnist_cnn().penultimate_name == "fc_1"
    assert engine.cifar10_cnn().penultimate_name == "fc_1"
    assert engine.lenet_cifar100().penultimate_name == "fc_2"
    assert engine.fmnist_cnn().n_classes == 10
    assert engine.lenet_cifar100().n_classes == 100
    assert engine.mlp(8, [16], 4).penultimate_name == "fc_1"
