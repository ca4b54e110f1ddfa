import numpy as np
import pytest

from ssta.errors import CheckpointError, NonFiniteError, ShapeMismatchError, TapeError
from ssta.tensor_core import (
    ParameterSet,
    Tape,
    backward,
    decode_tensor,
    encode_tensor,
    load_tensors,
    save_tensors,
)

STEP = 1e-5


def numeric_gradient(fn, arrays, name):
    """Central differences of fn(arrays) w.r.t. arrays[name]."""
    base = arrays[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = {k: v.copy() for k, v in arrays.items()}
        minus = {k: v.copy() for k, v in arrays.items()}
        plus[name][idx] += STEP
        minus[name][idx] -= STEP
        grad[idx] = (fn(plus) - fn(minus)) / (2 * STEP)
    return grad


def check_gradients(build, arrays, seed):
    """Compare analytic and numeric gradients of <build(...), R> for a random R."""
    weight_rng = np.random.default_rng(seed + 10_000)
    weights = {}

    def scalar(tape, values):
        out = build(tape, values)
        if out.data.ndim == 0:
            return out
        if "R" not in weights:
            weights["R"] = weight_rng.normal(size=out.shape)
        return tape.dot(out, tape.constant(weights["R"]))

    def evaluate(inputs):
        tape = Tape(record=False)
        values = {k: tape.constant(v) for k, v in inputs.items()}
        return scalar(tape, values).item()

    evaluate(arrays)
    tape = Tape()
    values = {k: tape.watch(k, v.copy()) for k, v in arrays.items()}
    grads = tape.backward(scalar(tape, values))
    for name in arrays:
        expected = numeric_gradient(evaluate, arrays, name)
        np.testing.assert_allclose(grads[name].data, expected, rtol=1e-4, atol=1e-7, err_msg=name)


def _conv_case(rng):
    c_in, c_out, h, w = rng.integers(1, 3), rng.integers(1, 3), rng.integers(3, 6), rng.integers(3, 6)
    k = int(rng.choice([1, 3]))
    arrays = {"x": rng.normal(size=(c_in, h, w)), "kernel": rng.normal(size=(c_out, c_in, k, k)),
              "bias": rng.normal(size=(c_out,))}
    return arrays, lambda t, v: t.conv2d(v["x"], v["kernel"], v["bias"])


def _tanh_case(rng):
    return {"x": rng.normal(size=(2, 3, 3))}, lambda t, v: t.tanh(v["x"])


def _sigmoid_case(rng):
    return {"x": 2 * rng.normal(size=(2, 3, 3))}, lambda t, v: t.sigmoid(v["x"])


def _add_case(rng):
    return ({"a": rng.normal(size=(2, 4)), "b": rng.normal(size=(2, 4))},
            lambda t, v: t.add(v["a"], v["b"]))


def _scale_case(rng):
    factor = float(rng.normal())
    return {"x": rng.normal(size=(3, 2, 2))}, lambda t, v: t.scale(v["x"], factor)


def _concat_case(rng):
    return ({"a": rng.normal(size=(1, 3, 3)), "b": rng.normal(size=(2, 3, 3))},
            lambda t, v: t.concat([v["a"], v["b"]]))


def _pool_case(rng):
    return {"x": rng.normal(size=(3, 4, 5))}, lambda t, v: t.global_average_pool(v["x"])


def _dense_case(rng):
    m, n = rng.integers(1, 5), rng.integers(1, 5)
    return ({"x": rng.normal(size=(n,)), "w": rng.normal(size=(m, n)), "b": rng.normal(size=(m,))},
            lambda t, v: t.dense(v["x"], v["w"], v["b"]))


def _mse_case(rng):
    return ({"pred": rng.normal(size=(2, 3, 3)), "target": rng.normal(size=(2, 3, 3))},
            lambda t, v: t.mse_loss(v["pred"], v["target"]))


def _broadcast_case(rng):
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    return {"v": rng.normal(size=(3,))}, lambda t, v: t.broadcast_spatial(v["v"], h, w)


def _reshape_case(rng):
    return {"x": rng.normal(size=(2, 3, 2))}, lambda t, v: t.reshape(v["x"], (3, 4))


def _sse_case(rng):
    return ({"pred": rng.normal(size=(2, 3, 3)), "target": rng.normal(size=(2, 3, 3))},
            lambda t, v: t.sse_loss(v["pred"], v["target"]))


def _dot_case(rng):
    return ({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))},
            lambda t, v: t.dot(v["a"], v["b"]))


def _sum_all_case(rng):
    return {"x": rng.normal(size=(2, 2, 3))}, lambda t, v: t.sum_all(v["x"])


def _composite_case(rng):
    arrays = {"x": rng.normal(size=(1, 4, 4)), "kernel": rng.normal(size=(2, 1, 3, 3)) * 0.5,
              "bias": rng.normal(size=(2,)), "w": rng.normal(size=(3, 2)), "b": rng.normal(size=(3,)),
              "target": rng.normal(size=(2, 4, 4))}

    def build(t, v):
        h = t.tanh(t.conv2d(v["x"], v["kernel"], v["bias"]))
        y = t.dense(t.global_average_pool(h), v["w"], v["b"])
        z = t.sigmoid(t.scale(h, 0.7))
        return t.add(t.mse_loss(z, v["target"]), t.sum_all(y))

    return arrays, build


CASES = {
    "conv2d": _conv_case,
    "tanh": _tanh_case,
    "sigmoid": _sigmoid_case,
    "add": _add_case,
    "scale": _scale_case,
    "concat": _concat_case,
    "global_average_pool": _pool_case,
    "dense": _dense_case,
    "mse_loss": _mse_case,
    "sse_loss": _sse_case,
    "broadcast_spatial": _broadcast_case,
    "reshape": _reshape_case,
    "dot": _dot_case,
    "sum_all": _sum_all_case,
    "composite": _composite_case,
}


# Seeds past the first 20 only run with --runslow.
FD_SEEDS = [s if s < 20 else pytest.param(s, marks=pytest.mark.slow) for s in range(100)]


@pytest.mark.parametrize("seed", FD_SEEDS)
@pytest.mark.parametrize("case", sorted(CASES))
def test_gradient_matches_finite_differences(case, seed):
    rng = np.random.default_rng(seed)
    arrays, build = CASES[case](rng)
    check_gradients(build, arrays, seed)


def naive_conv2d(x, kernel, bias):
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    p = (k - 1) // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            ii, jj = i + a - p, j + b - p
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += kernel[o, c, a, b] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def test_conv2d_matches_nested_loops():
    rng = np.random.default_rng(7)
    x, kernel, bias = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))
    tape = Tape(record=False)
    out = tape.conv2d(tape.constant(x), tape.constant(kernel), tape.constant(bias))
    np.testing.assert_allclose(out.data, naive_conv2d(x, kernel, bias), rtol=0, atol=1e-12)


def test_conv2d_identity_and_impulse():
    tape = Tape(record=False)
    x = np.random.default_rng(0).normal(size=(1, 4, 4))
    same = tape.conv2d(tape.constant(x), tape.constant(np.ones((1, 1, 1, 1))), tape.constant(np.zeros(1)))
    assert np.array_equal(same.data, x)

    hot = np.zeros((1, 5, 5))
    hot[0, 2, 2] = 1.0
    out = tape.conv2d(tape.constant(hot), tape.constant(np.ones((1, 1, 3, 3))), tape.constant(np.zeros(1)))
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out.data[0], expected)


def test_conv2d_shape_mismatch_names_both_shapes():
    tape = Tape()
    with pytest.raises(ShapeMismatchError, match=r"\[2, 4, 4\].*\[1, 3, 3, 3\]"):
        tape.conv2d(tape.constant(np.zeros((2, 4, 4))), tape.constant(np.zeros((1, 3, 3, 3))),
                    tape.constant(np.zeros(1)))


def test_backward_trivial_cases():
    theta = np.arange(6.0).reshape(2, 3)
    tape = Tape()
    t = tape.watch("theta", theta)
    assert np.array_equal(backward(tape.sum_all(t), tape)["theta"].data, np.ones((2, 3)))

    tape = Tape()
    t = tape.watch("theta", theta)
    assert np.array_equal(tape.backward(tape.sum_all(tape.scale(t, 0.0)))["theta"].data, np.zeros((2, 3)))


def test_fan_out_adjoints_add_up():
    tape = Tape()
    x = tape.watch("x", np.array([1.0, -2.0, 3.0]))
    unused = tape.watch("unused", np.ones(2))
    loss = tape.add(tape.sum_all(tape.scale(x, 2.0)), tape.sum_all(tape.scale(x, 3.0)))
    grads = tape.backward(loss)
    assert np.array_equal(grads["x"].data, np.full(3, 5.0))
    assert np.array_equal(grads["unused"].data, np.zeros(2))
    assert unused.shape == (2,)


def test_backward_rejections():
    tape = Tape()
    x = tape.watch("x", np.ones(3))
    with pytest.raises(TapeError):
        tape.backward(tape.scale(x, 2.0))
    loss = tape.sum_all(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)

    forward_only = Tape(record=False)
    y = forward_only.sum_all(forward_only.constant(np.ones(2)))
    with pytest.raises(TapeError):
        forward_only.backward(y)

    with pytest.raises(TapeError):
        tape.watch("x", np.ones(1))


def test_no_broadcasting():
    tape = Tape()
    with pytest.raises(ShapeMismatchError):
        tape.add(tape.constant(np.ones((2, 3))), tape.constant(np.ones(3)))


def test_non_finite_forward_is_rejected():
    tape = Tape()
    with pytest.raises(NonFiniteError):
        tape.scale(tape.constant(np.array([1.0, np.inf])), 1.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    arrays, build = _composite_case(rng)
    results = []
    for _ in range(2):
        tape = Tape(record=False)
        results.append(build(tape, {k: tape.constant(v) for k, v in arrays.items()}).data.tobytes())
    assert results[0] == results[1]


def test_parameter_set_layout():
    params = ParameterSet.from_arrays({"w": np.ones((2, 2)), "b": np.arange(3.0)})
    assert params.size == 7
    assert params.names == ["w", "b"]
    assert np.array_equal(params["b"], [0.0, 1.0, 2.0])
    flat = params.flatten({"b": np.full(3, 2.0)})
    assert np.array_equal(flat, [0, 0, 0, 0, 2, 2, 2])
    stepped = params.with_flat(params.flat + 1.0)
    assert stepped.version == 1
    assert params.version == 0
    swapped = params.with_slices({"w": np.zeros((2, 2))})
    assert swapped.version == 0 and swapped["w"].sum() == 0.0
    with pytest.raises(ShapeMismatchError):
        params.with_slices({"w": np.zeros(4)})
    with pytest.raises(ValueError):
        params.flat[0] = 5.0


def test_tensor_record_layout():
    buf = encode_tensor(np.array([[1.0, 2.0]]), "w", meta={"kind": "message"})
    head_len = int.from_bytes(buf[:4], "little")
    assert b'"dtype": "f64"' in buf[4:4 + head_len]
    assert len(buf) == 4 + head_len + 16
    record, end = decode_tensor(buf)
    assert end == len(buf)
    assert record.name == "w" and record.meta == {"kind": "message"}
    assert np.array_equal(record.data, [[1.0, 2.0]])
    assert encode_tensor(np.zeros(2, dtype=np.float32), "x")[4:].count(b'"f32"') == 1


def test_truncated_tensor_file(tmp_path):
    path = tmp_path / "t.bin"
    save_tensors(str(path), {"a": np.arange(4.0)})
    assert np.array_equal(load_tensors(str(path))["a"], np.arange(4.0))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_tensors(str(path))
    with pytest.raises(CheckpointError):
        load_tensors(str(tmp_path / "missing.bin"))
