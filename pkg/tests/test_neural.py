import time

import numpy as np
import pytest

from lift_index.neural import (
    AdamState,
    ModelFormatError,
    NetworkSpec,
    NonFiniteGradientError,
    adam_step,
    backward,
    forward,
    init_params,
    load_model,
    param_shapes,
    parameter_count,
    save_model,
)
from oracles import max_rel_error, numeric_grad, random_spec


def test_gradients_match_central_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    nets = 0
    worst = 0.0
    while nets < 24:
        spec = random_spec(rng)
        params = init_params(spec, rng)
        for k in params:  # nonzero biases exercise every path
            params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
        tokens = rng.integers(0, spec.vocab_size, size=(3, spec.input_length))
        tokens[0, -1] = 0  # padding present
        q, cache = forward(params, spec, tokens)
        # skip draws that put a relu unit within reach of the finite-difference step
        if any(np.min(np.abs(z)) < 1e-3 for z, (_, a) in zip(cache.pre_activations, spec.hidden) if a == "relu"):
            continue
        weights = rng.normal(size=q.shape)
        analytic = backward(params, spec, cache, weights)
        numeric = numeric_grad(params, spec, tokens, weights)
        worst = max(worst, max_rel_error(analytic, numeric))
        nets += 1
    assert worst < 1e-4
    assert time.perf_counter() - start < 30


def test_padding_row_gets_no_gradient():
    rng = np.random.default_rng(1)
    spec = NetworkSpec(vocab_size=6, input_length=5, k_max=2, embed_dim=3, hidden=((4, "tanh"),))
    params = init_params(spec, rng)
    q, cache = forward(params, spec, [[1, 2, 0, 0, 0], [3, 0, 0, 0, 0]])
    g = backward(params, spec, cache, np.ones_like(q))
    assert np.all(g["embedding"][0] == 0.0)


def test_hand_computed_forward():
    spec = NetworkSpec(vocab_size=3, input_length=3, k_max=1, embed_dim=2, hidden=((2, "relu"),))
    params = {
        "embedding": np.array([[9.0, 9.0], [1.0, 2.0], [3.0, -2.0]]),
        "dense0.w": np.array([[1.0, 0.0], [0.0, 1.0]]),
        "dense0.b": np.array([0.0, 0.5]),
        "heads.w": np.arange(6, dtype=float).reshape(2, 3),
        "heads.b": np.array([0.0, 1.0, 0.0]),
    }
    # mean of rows 1 and 2 (pad ignored) = [2, 0]; dense -> [2, 0.5]; relu keeps it
    q, _ = forward(params, spec, [1, 2, 0])
    h = np.array([2.0, 0.5])
    expected = h @ params["heads.w"] + params["heads.b"]
    np.testing.assert_allclose(q[0, 0], expected)
    assert q.shape == (1, 1, 3)


def test_parameter_count_matches_shapes():
    spec = NetworkSpec(vocab_size=20, input_length=32, k_max=3)
    expected = 20 * 32 + (32 * 128 + 128) + (128 * 21 + 21)
    assert parameter_count(spec) == expected
    assert [n for n, _ in param_shapes(spec)] == [
        "embedding", "dense0.w", "dense0.b", "heads.w", "heads.b",
    ]


def test_forward_rejects_bad_tokens():
    spec = NetworkSpec(vocab_size=4, input_length=3, k_max=1)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(params, spec, [1, 2, 4])
    with pytest.raises(ValueError):
        forward(params, spec, [1, 2])


def test_adam_first_step_example():
    params = {"w": np.array([1.0, -1.0])}
    grads = {"w": np.array([0.5, -2.0])}
    state = AdamState.for_params(params, lr=0.1)
    new, state = adam_step(params, grads, state)
    # bias correction makes the first step lr * sign(g) (up to eps)
    np.testing.assert_allclose(new["w"], [0.9, -0.9], atol=1e-7)
    assert state.t == 1
    new2, _ = adam_step(new, grads, state)
    np.testing.assert_allclose(new2["w"], [0.8, -0.8], atol=1e-7)


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2), "b": np.zeros(1)}
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adam_step(params, {"w": np.zeros(2), "b": np.array([np.nan])},
                  AdamState.for_params(params))


@pytest.fixture
def saved(tmp_path):
    spec = NetworkSpec(vocab_size=5, input_length=4, k_max=2, embed_dim=3, hidden=((6, "relu"),))
    params = init_params(spec, np.random.default_rng(3))
    path = tmp_path / "m.bin"
    save_model(path, params, spec, ["PAD", "UNK", "EOS", "a", "b"], {"note": "x"})
    return path, params, spec


def test_model_round_trip(saved):
    path, params, spec = saved
    loaded, spec2, vocab, meta = load_model(path, expected_spec=spec)
    assert spec2 == spec and vocab[-1] == "b" and meta == {"note": "x"}
    for k in params:
        assert np.array_equal(loaded[k], params[k])


def test_model_errors(saved, tmp_path):
    path, params, spec = saved
    blob = path.read_bytes()
    cases = {
        "magic": b"XXXXXXXX" + blob[8:],
        "version": blob[:8] + b"\x09\x00" + blob[10:],
        "checksum": blob[:-40] + bytes([blob[-40] ^ 1]) + blob[-39:],
        "truncated": blob[: len(blob) // 2],
    }
    for name, data in cases.items():
        p = tmp_path / f"{name}.bin"
        p.write_bytes(data)
        with pytest.raises(ModelFormatError):
            load_model(p)
    other = NetworkSpec(vocab_size=5, input_length=4, k_max=2, embed_dim=3, hidden=((7, "relu"),))
    with pytest.raises(ModelFormatError, match="spec mismatch"):
        load_model(path, expected_spec=other)


def test_save_is_byte_deterministic(saved, tmp_path):
    path, params, spec = saved
    again = tmp_path / "again.bin"
    save_model(again, params, spec, ["PAD", "UNK", "EOS", "a", "b"], {"note": "x"})
    assert again.read_bytes() == path.read_bytes()
