import numpy as np
import pytest

from ssta.errors import ConfigError, ProtocolViolation
from ssta.node_model import (
    ENCODER_SLICES,
    Message,
    MessageSet,
    ModelConfig,
    NodeModel,
    NodeRuntime,
    init_params,
    pretrain_message_ae,
    zero_params,
)
from ssta.tensor_core import Tape, Tensor


def leaves_of(params, tape=None):
    if tape is not None:
        return params.watch(tape)
    return {name: Tensor(params[name]) for name in params}


def test_zero_parameters_predict_mid_gray(tiny_model_config, rng):
    model = NodeModel(1, (2,), tiny_model_config)
    tape = Tape(record=False)
    out = model.step(tape, Tensor(rng.random((1, 6, 6))), Tensor(np.zeros((2, 6, 6))),
                     {2: Tensor(rng.normal(size=3))}, leaves_of(zero_params(tiny_model_config)))
    assert np.all(out.prediction.data == 0.5)
    assert np.all(out.hidden.data == 0.0)
    assert np.all(out.message.data == 0.0)


def test_no_neighbors_means_no_message_gradient(tiny_model_config, rng):
    model = NodeModel(1, (), tiny_model_config)
    params = init_params(tiny_model_config, rng)
    tape = Tape()
    leaves = leaves_of(params, tape)
    out = model.step(tape, Tensor(rng.random((1, 6, 6))), Tensor(np.zeros((2, 6, 6))), {}, leaves)
    grads = tape.backward(tape.mse_loss(out.prediction, tape.constant(rng.random((1, 6, 6)))))
    assert np.all(grads["msg_in_weight"].data == 0.0)
    assert np.all(grads["msg_in_bias"].data == 0.0)
    assert np.any(grads["enc_kernel"].data != 0.0)


def test_rollout_equals_chained_steps(tiny_model_config, rng):
    model = NodeModel(3, (1, 2), tiny_model_config)
    leaves = leaves_of(init_params(tiny_model_config, rng))
    x, h = Tensor(rng.random((1, 6, 6))), Tensor(rng.normal(size=(2, 6, 6)))
    msgs = {1: Tensor(rng.normal(size=3)), 2: Tensor(rng.normal(size=3))}
    tape = Tape(record=False)
    rollout = model.rollout(tape, x, h, msgs, leaves, 3)

    inp, state = x, h
    for step in range(3):
        out = model.step(tape, inp, state, msgs, leaves)
        assert np.array_equal(out.prediction.data, rollout.predictions[step].data)
        assert np.array_equal(out.message.data, rollout.messages[step].data)
        inp, state = out.prediction, out.hidden


def test_rollout_with_zeroed_later_messages(rng):
    config = ModelConfig(height=6, width=6, hidden_channels=2, msg_dim=3, rollout_msgs="zero")
    model = NodeModel(1, (2,), config)
    leaves = leaves_of(init_params(config, rng))
    x, h = Tensor(rng.random((1, 6, 6))), Tensor(np.zeros((2, 6, 6)))
    tape = Tape(record=False)
    rollout = model.rollout(tape, x, h, {2: Tensor(rng.normal(size=3))}, leaves, 2)
    second = model.step(tape, rollout.predictions[0], rollout.states[0], {2: Tensor(np.zeros(3))}, leaves)
    assert np.array_equal(second.prediction.data, rollout.predictions[1].data)
    with pytest.raises(ConfigError):
        model.rollout(tape, x, h, {2: Tensor(np.zeros(3))}, leaves, 0)


def test_message_order_does_not_matter(tiny_model_config, rng):
    model = NodeModel(1, (2, 3), tiny_model_config)
    leaves = leaves_of(init_params(tiny_model_config, rng))
    x, h = Tensor(rng.random((1, 6, 6))), Tensor(np.zeros((2, 6, 6)))
    a, b = rng.normal(size=3), rng.normal(size=3)
    tape = Tape(record=False)
    one = model.step(tape, x, h, {2: Tensor(a), 3: Tensor(b)}, leaves)
    two = model.step(tape, x, h, {3: Tensor(a), 2: Tensor(b)}, leaves)
    assert np.array_equal(one.prediction.data, two.prediction.data)


def test_step_gradient_w_r_t_message_matches_finite_differences(tiny_model_config, rng):
    model = NodeModel(1, (2,), tiny_model_config)
    params = init_params(tiny_model_config, rng)
    x, target = rng.random((1, 6, 6)), rng.random((1, 6, 6))
    payload = rng.normal(size=3)

    def loss_at(p):
        tape = Tape(record=False)
        out = model.step(tape, Tensor(x), Tensor(np.zeros((2, 6, 6))), {2: Tensor(p)}, leaves_of(params))
        return tape.mse_loss(out.prediction, Tensor(target)).item()

    tape = Tape()
    msg = tape.watch("msg", payload)
    out = model.step(tape, Tensor(x), Tensor(np.zeros((2, 6, 6))), {2: msg}, leaves_of(params, tape))
    analytic = tape.backward(tape.mse_loss(out.prediction, tape.constant(target)))["msg"].data
    eps = 1e-5
    numeric = np.array([(loss_at(payload + eps * e) - loss_at(payload - eps * e)) / (2 * eps)
                        for e in np.eye(3)])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)


def test_step_rejects_wrong_senders(tiny_model_config):
    model = NodeModel(1, (2,), tiny_model_config)
    leaves = leaves_of(zero_params(tiny_model_config))
    tape = Tape(record=False)
    with pytest.raises(ProtocolViolation, match="missing senders \\[2\\]"):
        model.step(tape, Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((2, 6, 6))), {}, leaves)
    with pytest.raises(ConfigError):
        NodeModel(1, (1, 2), tiny_model_config)


def test_self_message_adds_own_sender(rng):
    config = ModelConfig(height=6, width=6, hidden_channels=2, msg_dim=3, self_message=True)
    assert NodeModel(2, (3, 1), config).senders == (1, 2, 3)


def test_message_set_validation():
    ok = MessageSet(1, 4, {2: Message(2, 4, np.zeros(3))})
    ok.validate((2,), 3)
    with pytest.raises(ProtocolViolation, match="t=3"):
        MessageSet(1, 4, {2: Message(2, 3, np.zeros(3))}).validate((2,), 3)
    with pytest.raises(ProtocolViolation):
        MessageSet(1, 4, {2: Message(2, 4, np.zeros(2))}).validate((2,), 3)
    with pytest.raises(ProtocolViolation):
        MessageSet(1, 4, {2: Message(2, 4, np.array([0.0, np.nan, 0.0]))}).validate((2,), 3)
    with pytest.raises(ProtocolViolation):
        MessageSet(1, 4, {}).validate((2,), 3)


def test_receding_runtime_matches_hand_threading(tiny_model_config, rng):
    model = NodeModel(1, (2,), tiny_model_config)
    params = init_params(tiny_model_config, rng)
    frames = rng.random((2, 6, 6))
    payloads = [{2: rng.normal(size=3)}, {2: rng.normal(size=3)}]

    runtime = NodeRuntime(model, params, horizon=2)
    runtime.rollout(frames[0], payloads[0])
    result = runtime.receding_advance(frames[1], payloads[1])
    assert runtime.hidden.timestep == 1

    tape = Tape(record=False)
    leaves = leaves_of(params)
    first = model.step(tape, Tensor(frames[0][None]), Tensor(np.zeros((2, 6, 6))),
                       {2: Tensor(payloads[0][2])}, leaves)
    expected = model.rollout(tape, Tensor(frames[1][None]), first.hidden, {2: Tensor(payloads[1][2])}, leaves, 2)
    for step in range(2):
        assert np.array_equal(result.predictions[step], expected.predictions[step].data[0])


def test_runtime_needs_a_rollout_before_advancing(tiny_model_config):
    runtime = NodeRuntime(NodeModel(1, (), tiny_model_config), zero_params(tiny_model_config), horizon=1)
    with pytest.raises(ProtocolViolation):
        runtime.receding_advance(np.zeros((6, 6)), {})
    assert np.all(runtime.emit() == 0.0)


def test_autoencoder_learns_constant_frames(tiny_model_config):
    frames = np.full((20, 6, 6), 0.3)
    result = pretrain_message_ae(frames, epochs=20, lr=0.02, config=tiny_model_config, seed=1)
    assert len(result.history) == 20
    assert result.final_mse < result.initial_mse

    node = result.apply_to(zero_params(tiny_model_config))
    for name in ENCODER_SLICES:
        assert np.array_equal(node[name], result.params[name])
    assert np.all(node["out_kernel"] == 0.0)


def test_autoencoder_zero_epochs_and_empty_input(tiny_model_config):
    frames = np.full((4, 6, 6), 0.3)
    init = pretrain_message_ae(frames, epochs=1, lr=0.01, config=tiny_model_config).params
    result = pretrain_message_ae(frames, epochs=0, lr=0.01, config=tiny_model_config, init=init)
    assert np.array_equal(result.params.flat, init.flat)
    assert result.final_mse == result.initial_mse
    with pytest.raises(ConfigError):
        pretrain_message_ae(np.zeros((0, 6, 6)), epochs=1, lr=0.01, config=tiny_model_config)


def reference_conv(x, kernel, bias):
    c_out, c_in, k, _ = kernel.shape
    p = (k - 1) // 2
    _, height, width = x.shape
    out = np.zeros((c_out, height, width))
    for o in range(c_out):
        for y in range(height):
            for z in range(width):
                total = bias[o]
                for c in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            yy, zz = y + a - p, z + b - p
                            if 0 <= yy < height and 0 <= zz < width:
                                total += kernel[o, c, a, b] * x[c, yy, zz]
                out[o, y, z] = total
    return out


def reference_step(params, x, h, payloads):
    mean = sum(payloads) / len(payloads)
    drive = params["msg_in_weight"] @ mean + params["msg_in_bias"]
    pre = (reference_conv(x, params["enc_kernel"], params["enc_bias"])
           + reference_conv(h, params["rec_kernel"], params["rec_bias"])
           + drive[:, None, None])
    hidden = np.tanh(pre)
    prediction = 1.0 / (1.0 + np.exp(-reference_conv(hidden, params["out_kernel"], params["out_bias"])))
    message = params["msg_head_weight"] @ hidden.mean(axis=(1, 2)) + params["msg_head_bias"]
    return prediction, hidden, message


@pytest.mark.parametrize("seed", range(5))
def test_step_matches_reference_formula(tiny_model_config, seed):
    rng = np.random.default_rng(seed)
    model = NodeModel(2, (1, 3), tiny_model_config)
    params = init_params(tiny_model_config, rng)
    params = params.with_slices({name: rng.normal(size=params[name].shape)
                                 for name in ("enc_bias", "rec_bias", "msg_in_bias", "out_bias", "msg_head_bias")})
    x, h = rng.random((1, 6, 6)), rng.normal(size=(2, 6, 6))
    payloads = {1: rng.normal(size=3), 3: rng.normal(size=3)}

    out = model.step(Tape(record=False), Tensor(x), Tensor(h), {s: Tensor(p) for s, p in payloads.items()},
                     leaves_of(params))
    prediction, hidden, message = reference_step(params, x, h, [payloads[1], payloads[3]])
    np.testing.assert_allclose(out.prediction.data, prediction, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.hidden.data, hidden, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.message.data, message, rtol=0, atol=1e-12)


def test_predictions_stay_strictly_inside_the_unit_interval(tiny_model_config):
    model = NodeModel(1, (2,), tiny_model_config)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        leaves = leaves_of(init_params(tiny_model_config, rng))
        rollout = model.rollout(Tape(record=False), Tensor(rng.random((1, 6, 6))), Tensor(rng.normal(size=(2, 6, 6))),
                                {2: Tensor(rng.normal(size=3))}, leaves, 5)
        for prediction in rollout.predictions:
            assert np.all(prediction.data > 0.0) and np.all(prediction.data < 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_reaches_incoming_messages(tiny_model_config, seed):
    rng = np.random.default_rng(seed)
    model = NodeModel(1, (2,), tiny_model_config)
    params = init_params(tiny_model_config, rng)
    tape = Tape()
    msg = tape.watch("msg", rng.normal(size=3))
    out = model.step(tape, Tensor(rng.random((1, 6, 6))), Tensor(np.zeros((2, 6, 6))), {2: msg},
                     leaves_of(params, tape))
    grads = tape.backward(tape.mse_loss(out.prediction, tape.constant(rng.random((1, 6, 6)))))
    assert np.any(grads["msg"].data != 0.0)
    assert np.any(grads["msg_in_weight"].data != 0.0)


def test_autoencoder_is_seeded(tiny_model_config):
    frames = np.random.default_rng(0).random((12, 6, 6))
    one = pretrain_message_ae(frames, epochs=3, lr=0.01, config=tiny_model_config, seed=4, batch_size=5)
    two = pretrain_message_ae(frames, epochs=3, lr=0.01, config=tiny_model_config, seed=4, batch_size=5)
    other = pretrain_message_ae(frames, epochs=3, lr=0.01, config=tiny_model_config, seed=5, batch_size=5)
    assert np.array_equal(one.params.flat, two.params.flat)
    assert one.history == two.history
    assert not np.array_equal(one.params.flat, other.params.flat)


@pytest.mark.slow
def test_autoencoder_reconstructs_constant_frames(tiny_model_config):
    frames = np.full((20, 6, 6), 0.3)
    result = pretrain_message_ae(frames, epochs=200, lr=0.02, config=tiny_model_config, seed=1)
    assert result.final_mse < 1e-3
