import numpy as np
import pytest

from app.core import diffcore
from app.core.diffcore import AdamState, DenseLayer, DenseNet, adam_step, backward, clip_grad_norm, forward

# Every dense shape the repo trains at default settings: hybrid head, classical actor, critic, classifier, denoiser.
ARCHITECTURES = [
    ([4, 8, 2], "tanh"),
    ([6, 32, 32, 2], "tanh"),
    ([6, 64, 64, 1], "tanh"),
    ([256, 64, 4], "tanh"),
    ([288, 256, 256, 256], "relu"),
]
GRADIENT_SEEDS = range(20)


def _scalar(net, x, upstream):
    y, tape = forward(net, x)
    return float(np.sum(upstream * y)), _relu_pattern(net, tape)


def _relu_pattern(net, tape):
    return [
        bytes(np.packbits(z > 0.0))
        for layer, z in zip(net.layers, tape.pre_activations)
        if layer.activation == "relu"
    ]


def test_identity_layer():
    net = DenseNet([DenseLayer(np.eye(2), np.zeros(2))])
    y, _ = forward(net, [1.0, 2.0])
    np.testing.assert_array_equal(y, [1.0, 2.0])


def test_constant_function():
    net = DenseNet([DenseLayer(np.zeros((1, 3)), np.array([0.5]))])
    y, _ = forward(net, [7.0, -1.0, 3.0])
    np.testing.assert_array_equal(y, [0.5])


def test_forward_matches_matrix_arithmetic(rng):
    net = DenseNet.create([6, 16, 2], rng)
    x = rng.normal(size=6)
    w0, b0 = net.layers[0].weight, net.layers[0].bias
    w1, b1 = net.layers[1].weight, net.layers[1].bias
    expected = w1 @ np.tanh(w0 @ x + b0) + b1
    y, _ = forward(net, x)
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_forward_rejects_wrong_width(rng):
    net = DenseNet.create([3, 2], rng)
    with pytest.raises(ValueError):
        forward(net, np.zeros(4))


def test_layers_must_chain():
    with pytest.raises(ValueError):
        DenseNet([DenseLayer(np.zeros((3, 2)), np.zeros(3)), DenseLayer(np.zeros((1, 4)), np.zeros(1))])


def test_linear_gradient_is_input(rng):
    net = DenseNet([DenseLayer(rng.normal(size=(2, 3)), np.zeros(2))])
    x = np.array([1.0, -2.0, 0.5])
    _, tape = forward(net, x)
    grads, _ = backward(net, tape, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(grads["0.weight"][0], x)
    np.testing.assert_array_equal(grads["0.weight"][1], np.zeros(3))


def test_zero_upstream_gives_zero_gradients(rng):
    net = DenseNet.create([5, 7, 3], rng)
    _, tape = forward(net, rng.normal(size=5))
    grads, d_in = backward(net, tape, np.zeros(3))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(d_in == 0)


@pytest.mark.parametrize("widths,activation", ARCHITECTURES)
def test_backward_matches_finite_differences(widths, activation):
    h = 1e-6
    for seed in GRADIENT_SEEDS:
        rng = np.random.default_rng(seed)
        net = DenseNet.create(widths, rng, hidden_activation=activation)
        for layer in net.layers:
            layer.bias = rng.uniform(0.1, 0.3, size=layer.bias.shape) * rng.choice([-1, 1], size=layer.bias.shape)
        x = rng.normal(size=widths[0])
        upstream = rng.normal(size=widths[-1])
        _, tape = forward(net, x)
        grads, d_in = backward(net, tape, upstream)
        pattern = _relu_pattern(net, tape)

        def central(perturb):
            f_plus, p_plus = perturb(h)
            f_minus, p_minus = perturb(-h)
            # a relu unit switching inside the stencil has no derivative to compare against
            if p_plus != pattern or p_minus != pattern:
                return None
            return (f_plus - f_minus) / (2 * h)

        for name, value in net.parameters().items():
            for flat in rng.choice(value.size, size=min(value.size, 5), replace=False):
                idx = np.unravel_index(flat, value.shape)
                original = value[idx]

                def perturb(step):
                    value[idx] = original + step
                    try:
                        return _scalar(net, x, upstream)
                    finally:
                        value[idx] = original

                numeric = central(perturb)
                if numeric is not None:
                    assert grads[name][idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8), (seed, name, idx)

        for i in rng.choice(widths[0], size=min(widths[0], 5), replace=False):
            e = np.zeros(widths[0])
            e[i] = 1.0
            numeric = central(lambda step: _scalar(net, x + step * e, upstream))
            if numeric is not None:
                assert d_in[i] == pytest.approx(numeric, rel=1e-5, abs=1e-8), (seed, i)


def test_batched_backward_sums_rows(rng):
    net = DenseNet.create([4, 6, 2], rng)
    xs = rng.normal(size=(3, 4))
    ups = rng.normal(size=(3, 2))
    _, tape = forward(net, xs)
    batched, d_in = backward(net, tape, ups)
    total = {k: np.zeros_like(v) for k, v in batched.items()}
    for x, u in zip(xs, ups):
        _, t = forward(net, x)
        g, d = backward(net, t, u)
        for k in total:
            total[k] += g[k]
    for k in total:
        np.testing.assert_allclose(batched[k], total[k], atol=1e-12)
    assert d_in.shape == (3, 4)


def test_stale_tape_is_rejected(rng):
    net = DenseNet.create([3, 2], rng)
    _, tape = forward(net, np.ones(3))
    net.set_parameters(net.parameters())
    with pytest.raises(ValueError):
        backward(net, tape, np.ones(2))
    other = DenseNet.create([3, 2], rng)
    _, tape = forward(other, np.ones(3))
    with pytest.raises(ValueError):
        backward(net, tape, np.ones(2))


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(params, lr=0.1)
    new, state = adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([0.0, 0.0, 0.0])}
    state = AdamState.for_params(params, lr=0.01)
    new, _ = adam_step(params, {"w": np.array([3.0, -0.2, 0.0])}, state)
    np.testing.assert_allclose(new["w"], [-0.01, 0.01, 0.0], atol=1e-8)


def test_adam_minimizes_quadratic():
    params = {"w": np.array([0.0])}
    state = AdamState.for_params(params, lr=0.1)
    for _ in range(100):
        params, state = adam_step(params, {"w": 2.0 * (params["w"] - 3.0)}, state)
    assert abs(params["w"][0] - 3.0) < 0.5


def test_adam_rejects_non_finite_gradient():
    params = {"head.0.weight": np.zeros(2)}
    state = AdamState.for_params(params, lr=0.1)
    with pytest.raises(FloatingPointError, match="head.0.weight"):
        adam_step(params, {"head.0.weight": np.array([np.inf, 0.0])}, state)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(grads["a"][0] ** 2 + grads["b"][0] ** 2) == pytest.approx(1.0)
    untouched = {"a": np.array([0.1])}
    clip_grad_norm(untouched, None)
    assert untouched["a"][0] == 0.1


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        net = DenseNet.create([3, 5, 1], rng)
        state = AdamState.for_params(net.parameters(), 1e-2)
        for _ in range(10):
            x = rng.normal(size=(4, 3))
            y, tape = forward(net, x)
            grads, _ = backward(net, tape, 2 * (y - 1.0) / 4)
            params, state = diffcore.adam_step(net.parameters(), grads, state)
            net.set_parameters(params)
        return net.parameters()

    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_cosine_lr_endpoints():
    assert diffcore.cosine_lr(1e-3, 1e-5, 0, 11) == pytest.approx(1e-3)
    assert diffcore.cosine_lr(1e-3, 1e-5, 5, 11) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert diffcore.cosine_lr(1e-3, 1e-5, 10, 11) == pytest.approx(1e-5)
    assert diffcore.cosine_lr(1e-3, 1e-5, 0, 1) == 1e-3
    rates = [diffcore.cosine_lr(1e-3, 1e-5, e, 11) for e in range(11)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
