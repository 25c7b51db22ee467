import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedlab.errors import ConfigError, ContractError
from fedlab.model import (
    Batch, ModelSpec, ParamVector, _pool_backward, _pool_forward, accuracy, grad, grad_check,
    grad_check_report, gradcheck_case, init_params, layer_slices, loss, resolution_floor,
)


# ---------------------------------------------------------------- naive oracles
# Written with explicit Python loops so they share no code with the vectorized model.


def naive_mlp_logits(spec, values, x):
    sizes = [x.shape[1], *spec.hidden_sizes, spec.num_classes]
    layers, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = [[values[pos + i * b + j] for j in range(b)] for i in range(a)]
        bias = [values[pos + a * b + j] for j in range(b)]
        layers.append((w, bias))
        pos += a * b + b
    out = []
    for row in x:
        h = list(row)
        for li, (w, bias) in enumerate(layers):
            z = [bias[j] + sum(h[i] * w[i][j] for i in range(len(h))) for j in range(len(bias))]
            h = z if li == len(layers) - 1 else [max(v, 0.0) for v in z]
        out.append(h)
    return out


def naive_xent(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += -(row[y] - m - math.log(sum(math.exp(v - m) for v in row)))
    return total / len(labels)


def naive_conv_same(x, w, b):
    c_in, h, wd = x.shape
    f, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((f, h, wd))
    for o in range(f):
        for i in range(h):
            for j in range(wd):
                s = b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - p, j + dj - p
                            if 0 <= ii < h and 0 <= jj < wd:
                                s += x[c, ii, jj] * w[o, c, di, dj]
                out[o, i, j] = s
    return out


def naive_pool(a):
    c, h, w = a.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(a[ch, 2 * i + di, 2 * j + dj] for di in (0, 1) for dj in (0, 1))
    return out


def naive_cnn_logits(spec, values, x):
    c_in, h, w = spec.input_shape
    pos = 0

    def take(shape):
        nonlocal pos
        n = math.prod(shape)
        out = values[pos:pos + n].reshape(shape)
        pos += n
        return out

    w1, b1 = take((32, c_in, 5, 5)), take((32,))
    w2, b2 = take((64, 32, 5, 5)), take((64,))
    flat = 64 * (h // 4) * (w // 4)
    w3, b3 = take((flat, 512)), take((512,))
    w4, b4 = take((512, spec.num_classes)), take((spec.num_classes,))
    rows = []
    for img in x:
        a = naive_pool(np.maximum(naive_conv_same(img, w1, b1), 0))
        a = naive_pool(np.maximum(naive_conv_same(a, w2, b2), 0))
        hdn = np.maximum(a.reshape(-1) @ w3 + b3, 0)
        rows.append(list(hdn @ w4 + b4))
    return rows


def central_diff(spec, params, batch, eps=1e-6):
    out = np.zeros(params.d)
    for i in range(params.d):
        up, dn = params.values.copy(), params.values.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (loss(spec, params.replace(up), batch) - loss(spec, params.replace(dn), batch)) / (2 * eps)
    return out


def random_batch(rng, n, shape, classes):
    return Batch(rng.standard_normal((n, *shape)), rng.integers(0, classes, n))


# ---------------------------------------------------------------- init and layout


def test_logistic_layout_and_size():
    spec = ModelSpec("logistic", (4,), 2)
    p = init_params(spec, 7)
    assert p.d == 10
    assert p.layout == (("fc1", 0, 10),)


def test_init_is_bit_identical_for_same_seed():
    spec = ModelSpec("mlp", (6,), 3, (5, 4))
    a, b = init_params(spec, 3), init_params(spec, 3)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, init_params(spec, 4).values)


def test_cnn_layout_counts_and_zero_biases():
    spec = ModelSpec("paper_cnn", (3, 32, 32), 10)
    p = init_params(spec, 5)
    expected = {
        "conv1": 32 * 3 * 25 + 32,
        "conv2": 64 * 32 * 25 + 64,
        "fc1": 64 * 8 * 8 * 512 + 512,
        "fc2": 512 * 10 + 10,
    }
    assert [n for n, _, _ in p.layout] == ["conv1", "conv2", "fc1", "fc2"]
    assert {n: k for n, _, k in p.layout} == expected
    for name, bias in (("conv1", 32), ("conv2", 64), ("fc1", 512), ("fc2", 10)):
        seg = p.segment(name)
        assert np.all(seg[-bias:] == 0)
        assert np.any(seg[:-bias] != 0)


def test_init_respects_fan_in_bound():
    spec = ModelSpec("mlp", (20,), 3, (7,))
    p = init_params(spec, 0)
    w1 = p.segment("fc1")[: 20 * 7]
    w2 = p.segment("fc2")[: 7 * 3]
    assert np.abs(w1).max() <= math.sqrt(6 / 20)
    assert np.abs(w2).max() <= math.sqrt(6 / 7)


@pytest.mark.parametrize("kind,shape,classes,hidden", [
    ("logistic", (4,), 1, ()),
    ("mlp", (4,), 3, ()),
    ("paper_cnn", (12,), 3, ()),
    ("paper_cnn", (3, 30, 30), 3, ()),
    ("logistic", (4,), 3, (5,)),
    ("resnet", (4,), 3, ()),
])
def test_invalid_specs_are_config_errors(kind, shape, classes, hidden):
    with pytest.raises(ConfigError):
        ModelSpec(kind, shape, classes, hidden)


def test_layer_slices_tile_the_vector():
    for spec in (ModelSpec("logistic", (4,), 3), ModelSpec("mlp", (4,), 3, (6, 5)),
                 ModelSpec("paper_cnn", (3, 32, 32), 10)):
        sl = layer_slices(spec)
        assert sl == init_params(spec, 0).layout
        pos = 0
        for _, start, length in sl:
            assert start == pos and length > 0
            pos += length
        assert pos == spec.num_params
    assert len(layer_slices(ModelSpec("logistic", (4,), 3))) == 1


def test_param_vector_rejects_bad_values_and_layouts():
    with pytest.raises(ContractError):
        ParamVector(np.array([1.0, np.nan]), (("a", 0, 2),))
    with pytest.raises(ContractError):
        ParamVector(np.zeros(3), (("a", 0, 2),))
    with pytest.raises(ContractError):
        ParamVector(np.zeros(3), (("a", 0, 1), ("b", 2, 1)))
    with pytest.raises(ContractError):
        ParamVector(np.zeros(2), (("a", 0, 1), ("a", 1, 1)))


# ---------------------------------------------------------------- loss


def test_uniform_logits_give_ln_c():
    spec = ModelSpec("logistic", (6,), 10)
    p = ParamVector(np.zeros(spec.num_params), spec.layout)
    batch = Batch(np.zeros((5, 6)), np.arange(5))
    assert loss(spec, p, batch) == pytest.approx(math.log(10), abs=1e-15)


def test_confident_correct_predictor_has_near_zero_loss():
    spec = ModelSpec("logistic", (3,), 3)
    w = 40.0 * np.eye(3)
    p = ParamVector(np.concatenate([w.ravel(), np.zeros(3)]), spec.layout)
    batch = Batch(np.eye(3), np.arange(3))
    assert loss(spec, p, batch) < 1e-6
    assert accuracy(spec, p, batch) == 1.0


@pytest.mark.parametrize("seed", range(3))
def test_loss_matches_naive_per_sample_oracle(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("mlp", (4,), 3, (5,))
    p = init_params(spec, seed)
    batch = random_batch(rng, 6, (4,), 3)
    oracle = naive_xent(naive_mlp_logits(spec, p.values, batch.features), batch.labels)
    assert loss(spec, p, batch) == pytest.approx(oracle, rel=1e-12)


def test_cnn_forward_matches_loop_convolution():
    rng = np.random.default_rng(0)
    spec = ModelSpec("paper_cnn", (2, 4, 4), 3)
    p = init_params(spec, 1)
    values = p.values + 0.05 * rng.standard_normal(p.d)
    p = p.replace(values)
    batch = random_batch(rng, 2, (2, 4, 4), 3)
    oracle_logits = naive_cnn_logits(spec, values, batch.features)
    np.testing.assert_allclose(spec.logits(values, batch.features), oracle_logits, rtol=1e-10, atol=1e-12)
    assert loss(spec, p, batch) == pytest.approx(naive_xent(oracle_logits, batch.labels), rel=1e-10)


def test_loss_contract_errors():
    spec = ModelSpec("logistic", (4,), 3)
    p = init_params(spec, 0)
    with pytest.raises(ContractError):
        loss(spec, p, Batch(np.zeros((2, 5)), [0, 1]))
    with pytest.raises(ContractError):
        loss(spec, p, Batch(np.zeros((2, 4)), [0, 3]))
    other = init_params(ModelSpec("logistic", (5,), 3), 0)
    with pytest.raises(ContractError):
        loss(spec, other, Batch(np.zeros((2, 4)), [0, 1]))
    with pytest.raises(ContractError):
        Batch(np.zeros((0, 4)), np.zeros(0, dtype=int))


@given(
    st.integers(0, 2**31 - 1),
    st.integers(1, 8),
    st.floats(0.1, 50.0),
)
def test_loss_is_nonnegative_and_finite(seed, n, scale):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("mlp", (3,), 4, (4,))
    p = ParamVector(scale * rng.standard_normal(spec.num_params), spec.layout)
    value = loss(spec, p, random_batch(rng, n, (3,), 4))
    assert value >= 0 and math.isfinite(value)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("spec", [
    ModelSpec("logistic", (4,), 3),
    ModelSpec("mlp", (3,), 3, (4, 3)),
])
def test_grad_matches_own_central_differences(spec):
    rng = np.random.default_rng(5)
    p = init_params(spec, 2).replace(init_params(spec, 2).values + 0.1 * rng.standard_normal(spec.num_params))
    batch = random_batch(rng, 5, spec.input_shape, spec.num_classes)
    g = grad(spec, p, batch).values
    np.testing.assert_allclose(g, central_diff(spec, p, batch), rtol=1e-6, atol=1e-8)


def test_cnn_grad_matches_central_differences_on_small_image():
    rng = np.random.default_rng(9)
    spec = ModelSpec("paper_cnn", (1, 4, 4), 2)
    p = init_params(spec, 4)
    p = p.replace(p.values + 0.05 * rng.standard_normal(p.d))
    batch = random_batch(rng, 2, (1, 4, 4), 2)
    report = grad_check_report(spec, p, batch, 1e-5, full_sweep_max=0, sample_size=300, seed=1)
    assert report.checked >= 200
    assert report.max_rel_error < 1e-4


def test_grad_of_duplicated_batch_is_identical():
    rng = np.random.default_rng(0)
    spec = ModelSpec("mlp", (4,), 3, (6,))
    p = init_params(spec, 0)
    b = random_batch(rng, 7, (4,), 3)
    g1 = grad(spec, p, b).values
    g2 = grad(spec, p, Batch.concat(b, b)).values
    np.testing.assert_allclose(g2, g1, rtol=1e-12, atol=1e-15)


def test_grad_of_union_is_mean_of_equal_batches():
    rng = np.random.default_rng(1)
    spec = ModelSpec("mlp", (4,), 3, (6,))
    p = init_params(spec, 1)
    b1, b2 = random_batch(rng, 8, (4,), 3), random_batch(rng, 8, (4,), 3)
    g = grad(spec, p, Batch.concat(b1, b2)).values
    half = 0.5 * (grad(spec, p, b1).values + grad(spec, p, b2).values)
    np.testing.assert_allclose(g, half, rtol=1e-12, atol=1e-15)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10_000))
def test_grad_union_weighted_by_batch_size(n1, n2, seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("logistic", (3,), 3)
    p = init_params(spec, seed)
    b1, b2 = random_batch(rng, n1, (3,), 3), random_batch(rng, n2, (3,), 3)
    g = grad(spec, p, Batch.concat(b1, b2)).values
    mix = (n1 * grad(spec, p, b1).values + n2 * grad(spec, p, b2).values) / (n1 + n2)
    np.testing.assert_allclose(g, mix, rtol=1e-12, atol=1e-15)


def test_grad_is_deterministic():
    spec, p, batch = gradcheck_case("mlp", 3)
    assert grad(spec, p, batch).values.tobytes() == grad(spec, p, batch).values.tobytes()


def test_maxpool_ties_route_to_first_maximum():
    a = np.zeros((1, 1, 2, 4))
    a[0, 0, :, 2:] = 3.0  # second window has four equal maxima
    out, idx = _pool_forward(a)
    assert out[0, 0].tolist() == [[0.0, 3.0]]
    d = _pool_backward(np.ones((1, 1, 1, 2)), idx, a.shape)
    assert d[0, 0].tolist() == [[1.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]]


# ---------------------------------------------------------------- accuracy


def test_accuracy_matches_enumeration():
    rng = np.random.default_rng(3)
    spec = ModelSpec("mlp", (4,), 5, (6,))
    p = init_params(spec, 3)
    batch = random_batch(rng, 30, (4,), 5)
    logits = naive_mlp_logits(spec, p.values, batch.features)
    hits = 0
    for row, y in zip(logits, batch.labels):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        hits += best == y
    assert accuracy(spec, p, batch) == hits / 30


def test_constant_output_on_balanced_batch_scores_one_tenth():
    spec = ModelSpec("logistic", (2,), 10)
    p = ParamVector(np.zeros(spec.num_params), spec.layout)
    batch = Batch(np.random.default_rng(0).standard_normal((50, 2)), np.arange(50) % 10)
    assert accuracy(spec, p, batch) == pytest.approx(0.1)


def test_accuracy_ties_go_to_lowest_class():
    spec = ModelSpec("logistic", (1,), 3)
    p = ParamVector(np.zeros(spec.num_params), spec.layout)
    assert accuracy(spec, p, Batch(np.zeros((2, 1)), [0, 0])) == 1.0
    assert accuracy(spec, p, Batch(np.zeros((2, 1)), [1, 2])) == 0.0


# ---------------------------------------------------------------- grad_check


def test_grad_check_logistic_full_sweep():
    spec, p, batch = gradcheck_case("logistic", 0)
    report = grad_check_report(spec, p, batch)
    assert report.checked == 10 and report.skipped_kinks == 0
    assert report.max_rel_error < 1e-6


def test_grad_check_detects_corrupted_gradient():
    spec, p, batch = gradcheck_case("mlp", 1)
    g = spec.loss_and_grad(p.values, batch)[1].copy()
    g[17] += 0.1
    assert grad_check(spec, p, batch, analytic=g) > 1e-2


def test_grad_check_samples_large_models_across_layers():
    spec, p, batch = gradcheck_case("mlp", 2)
    report = grad_check_report(spec, p, batch, full_sweep_max=100, sample_size=200, seed=3)
    assert report.checked + report.skipped_kinks == 200


def test_resolution_floor_tracks_rounding_noise():
    u = np.finfo(np.float64).eps
    assert resolution_floor(4.0, 1e-5) == pytest.approx(1e4 * u * 4.0 / 1e-5)
    assert resolution_floor(0.5, 1e-5) == pytest.approx(1e4 * u / 1e-5)
    assert resolution_floor(1.0, 1e-2) == 1e-7
    # a small but real error on a tiny coordinate is still caught
    spec, p, batch = gradcheck_case("mlp", 1)
    g = spec.loss_and_grad(p.values, batch)[1].copy()
    i = int(np.argmin(np.abs(g)))
    g[i] += 1e-8
    assert grad_check(spec, p, batch, analytic=g) > 1e-4


@pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
def test_grad_check_rejects_bad_epsilon(eps):
    spec, p, batch = gradcheck_case("logistic", 0)
    with pytest.raises(ContractError):
        grad_check(spec, p, batch, eps)
