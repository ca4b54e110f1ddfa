"""One SSTA: recursive frame predictor and message generator.

A step maps (input frame, hidden state, incoming messages) to (prediction,
next hidden state, outgoing message)::

    m     = mean of incoming payloads (senders in id order)
    h'    = tanh(conv(x, enc) + conv(h, rec) + broadcast(dense(m, msg_in)))
    x_hat = sigmoid(conv(h', out))
    y'    = dense(global_average_pool(h'), msg_head)

The message term is left out entirely when a node has no senders.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ssta.errors import ConfigError, ProtocolViolation, ShapeMismatchError
from ssta.optimizer import Adam
from ssta.tensor_core import DTYPES, ParameterSet, Tape, Tensor, resolve_dtype

logger = logging.getLogger(__name__)

ROLLOUT_MSGS = ("hold", "zero")
MSG_HEAD_SLICES = ("msg_head_weight", "msg_head_bias")
ENCODER_SLICES = ("enc_kernel", "enc_bias") + MSG_HEAD_SLICES


@dataclass(frozen=True)
class ModelConfig:
    height: int = 16
    width: int = 16
    hidden_channels: int = 8
    msg_dim: int = 16
    kernel_size: int = 3
    self_message: bool = False
    rollout_msgs: str = "hold"
    freeze_msg_head: bool = False
    dtype: str = "f64"

    def __post_init__(self):
        for name in ("height", "width", "hidden_channels", "msg_dim", "kernel_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size: must be odd, got {self.kernel_size}")
        if self.rollout_msgs not in ROLLOUT_MSGS:
            raise ConfigError(f"rollout_msgs: expected one of {ROLLOUT_MSGS}, got {self.rollout_msgs!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype: expected one of {sorted(DTYPES)}, got {self.dtype!r}")

    def to_dict(self) -> Dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    c, d, k = config.hidden_channels, config.msg_dim, config.kernel_size
    return {
        "enc_kernel": (c, 1, k, k),
        "enc_bias": (c,),
        "rec_kernel": (c, c, k, k),
        "rec_bias": (c,),
        "msg_in_weight": (c, d),
        "msg_in_bias": (c,),
        "out_kernel": (1, c, k, k),
        "out_bias": (1,),
        "msg_head_weight": (d, c),
        "msg_head_bias": (d,),
    }


def zero_params(config: ModelConfig) -> ParameterSet:
    return ParameterSet(param_shapes(config), dtype=config.dtype)


def _fan_in_init(shapes: Mapping[str, tuple], rng: np.random.Generator, dtype: str) -> ParameterSet:
    arrays = {}
    for name, shape in shapes.items():
        if name.endswith("_bias"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return ParameterSet.from_arrays(arrays, dtype=dtype)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParameterSet:
    """Fan-in scaled normal weights, zero biases."""
    return _fan_in_init(param_shapes(config), rng, config.dtype)


@dataclass
class HiddenState:
    node_id: int
    timestep: int
    data: np.ndarray  # [C_h, H, W]

    @classmethod
    def zeros(cls, config: ModelConfig, node_id: int) -> "HiddenState":
        shape = (config.hidden_channels, config.height, config.width)
        return cls(node_id, 0, np.zeros(shape, dtype=resolve_dtype(config.dtype)))


@dataclass(frozen=True)
class Message:
    sender: int
    timestep: int
    payload: np.ndarray  # [d_msg]
    sample: int = 0


@dataclass
class MessageSet:
    receiver: int
    timestep: int
    messages: Dict[int, Message] = field(default_factory=dict)

    def validate(self, senders: Sequence[int], msg_dim: int) -> None:
        check_senders(self.receiver, senders, self.messages.keys())
        for sender, msg in self.messages.items():
            if msg.timestep != self.timestep:
                raise ProtocolViolation(
                    f"node {self.receiver}: message from {sender} is stamped t={msg.timestep}, "
                    f"round is t={self.timestep}"
                )
            if msg.payload.shape != (msg_dim,):
                raise ProtocolViolation(
                    f"node {self.receiver}: message from {sender} has shape {list(msg.payload.shape)}, "
                    f"expected [{msg_dim}]"
                )
            if not np.all(np.isfinite(msg.payload)):
                raise ProtocolViolation(f"node {self.receiver}: message from {sender} is not finite")

    def payloads(self) -> Dict[int, np.ndarray]:
        return {sender: msg.payload for sender, msg in self.messages.items()}


def check_senders(receiver: int, expected: Sequence[int], actual) -> None:
    expected, actual = set(expected), set(actual)
    if expected != actual:
        raise ProtocolViolation(
            f"node {receiver}: message set is missing senders {sorted(expected - actual)} "
            f"and has unexpected senders {sorted(actual - expected)}"
        )


@dataclass
class StepOutput:
    prediction: Tensor  # [1, H, W]
    hidden: Tensor  # [C_h, H, W]
    message: Tensor  # [d_msg]


@dataclass
class Rollout:
    predictions: List[Tensor]
    states: List[Tensor]
    messages: List[Tensor]


class NodeModel:
    """Predictor and message head of node `node_id`, which listens to `neighbors` (K^i)."""

    def __init__(self, node_id: int, neighbors: Sequence[int], config: ModelConfig):
        if node_id in neighbors:
            raise ConfigError(f"neighbors: node {node_id} cannot list itself; use self_message")
        self.node_id = node_id
        self.neighbors = tuple(sorted(neighbors))
        self.config = config

    @property
    def senders(self) -> tuple:
        """Nodes whose messages enter this node's step, in id order."""
        extra = (self.node_id,) if self.config.self_message else ()
        return tuple(sorted(self.neighbors + extra))

    @property
    def frame_shape(self) -> tuple:
        return (1, self.config.height, self.config.width)

    @property
    def hidden_shape(self) -> tuple:
        return (self.config.hidden_channels, self.config.height, self.config.width)

    def emit(self, tape: Tape, hidden: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        """Outgoing message from a hidden state."""
        return tape.dense(tape.global_average_pool(hidden), params["msg_head_weight"], params["msg_head_bias"])

    def step(self, tape: Tape, x: Tensor, h: Tensor, messages: Mapping[int, Tensor],
             params: Mapping[str, Tensor]) -> StepOutput:
        check_senders(self.node_id, self.senders, messages.keys())
        if x.shape != self.frame_shape:
            raise ShapeMismatchError(f"node {self.node_id}: input {list(x.shape)}, expected {list(self.frame_shape)}")
        if h.shape != self.hidden_shape:
            raise ShapeMismatchError(f"node {self.node_id}: hidden {list(h.shape)}, expected {list(self.hidden_shape)}")
        pre = tape.add(
            tape.conv2d(x, params["enc_kernel"], params["enc_bias"]),
            tape.conv2d(h, params["rec_kernel"], params["rec_bias"]),
        )
        if self.senders:
            total = None
            for sender in self.senders:
                total = messages[sender] if total is None else tape.add(total, messages[sender])
            mean = tape.scale(total, 1.0 / len(self.senders))
            drive = tape.dense(mean, params["msg_in_weight"], params["msg_in_bias"])
            pre = tape.add(pre, tape.broadcast_spatial(drive, self.config.height, self.config.width))
        hidden = tape.tanh(pre)
        prediction = tape.sigmoid(tape.conv2d(hidden, params["out_kernel"], params["out_bias"]))
        return StepOutput(prediction, hidden, self.emit(tape, hidden, params))

    def rollout(self, tape: Tape, x: Tensor, h: Tensor, messages: Mapping[int, Tensor],
                params: Mapping[str, Tensor], horizon: int) -> Rollout:
        """T recursive steps: the true frame first, then each previous prediction.

        Later steps see the same message set as the first one (``rollout_msgs=hold``)
        or all-zero payloads (``rollout_msgs=zero``).
        """
        if horizon < 1:
            raise ConfigError(f"horizon: must be >= 1, got {horizon}")
        later = messages
        if self.config.rollout_msgs == "zero":
            later = {s: tape.constant(np.zeros_like(m.data)) for s, m in messages.items()}
        out = Rollout([], [], [])
        inp, state = x, h
        for step in range(horizon):
            result = self.step(tape, inp, state, messages if step == 0 else later, params)
            out.predictions.append(result.prediction)
            out.states.append(result.hidden)
            out.messages.append(result.message)
            inp, state = result.prediction, result.hidden
        return out


def as_input(frame: np.ndarray) -> np.ndarray:
    """[H, W] frame -> [1, H, W] model input."""
    return frame[None, :, :] if frame.ndim == 2 else frame


@dataclass
class RolloutResult:
    predictions: np.ndarray  # [T, H, W]
    states: np.ndarray  # [T, C_h, H, W]
    messages: np.ndarray  # [T, d_msg]


class NodeRuntime:
    """Streaming inference over a receding horizon.

    Each rollout starts from the retained hidden state. Advancing keeps only the
    first-step state of the previous rollout and drops the rest.
    """

    def __init__(self, model: NodeModel, params: ParameterSet, horizon: int):
        if horizon < 1:
            raise ConfigError(f"horizon: must be >= 1, got {horizon}")
        self.model = model
        self.params = params
        self.horizon = horizon
        self.hidden = HiddenState.zeros(model.config, model.node_id)
        self.last: Optional[RolloutResult] = None

    def emit(self) -> np.ndarray:
        """y_t from the retained hidden state h_t."""
        tape = Tape(record=False)
        leaves = {name: Tensor(self.params[name]) for name in self.params}
        return self.model.emit(tape, Tensor(self.hidden.data), leaves).data

    def rollout(self, frame: np.ndarray, payloads: Mapping[int, np.ndarray]) -> RolloutResult:
        tape = Tape(record=False)
        leaves = {name: Tensor(self.params[name]) for name in self.params}
        msgs = {s: Tensor(p) for s, p in payloads.items()}
        out = self.model.rollout(tape, Tensor(as_input(frame)), Tensor(self.hidden.data),
                                 msgs, leaves, self.horizon)
        self.last = RolloutResult(
            np.stack([p.data[0] for p in out.predictions]),
            np.stack([s.data for s in out.states]),
            np.stack([m.data for m in out.messages]),
        )
        return self.last

    def commit(self) -> None:
        """Retain h_{t+1} from the previous rollout's first step."""
        if self.last is None:
            raise ProtocolViolation(f"node {self.model.node_id}: no prior rollout to advance from")
        self.hidden = HiddenState(self.model.node_id, self.hidden.timestep + 1, self.last.states[0].copy())

    def receding_advance(self, frame: np.ndarray, payloads: Mapping[int, np.ndarray]) -> RolloutResult:
        self.commit()
        return self.rollout(frame, payloads)


# -- message autoencoder -------------------------------------------------------

def autoencoder_shapes(config: ModelConfig) -> Dict[str, tuple]:
    shapes = {name: shape for name, shape in param_shapes(config).items() if name in ENCODER_SLICES}
    pixels = config.height * config.width
    shapes["dec_weight"] = (pixels, config.msg_dim)
    shapes["dec_bias"] = (pixels,)
    return shapes


@dataclass
class AutoencoderResult:
    params: ParameterSet
    initial_mse: float
    final_mse: float
    history: List[float] = field(default_factory=list)

    def encoder_slices(self) -> Dict[str, np.ndarray]:
        return {name: self.params[name].copy() for name in ENCODER_SLICES}

    def apply_to(self, node_params: ParameterSet) -> ParameterSet:
        """Initialize a node's encoder conv and message head from the trained encoder."""
        return node_params.with_slices(self.encoder_slices())


def _reconstruct(tape: Tape, frame: Tensor, p: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    hidden = tape.tanh(tape.conv2d(frame, p["enc_kernel"], p["enc_bias"]))
    code = tape.dense(tape.global_average_pool(hidden), p["msg_head_weight"], p["msg_head_bias"])
    flat = tape.dense(code, p["dec_weight"], p["dec_bias"])
    return tape.sigmoid(tape.reshape(flat, (1, config.height, config.width)))


def _reconstruction_mse(frames: np.ndarray, params: ParameterSet, config: ModelConfig) -> float:
    tape = Tape(record=False)
    leaves = {name: Tensor(params[name]) for name in params}
    total = 0.0
    for frame in frames:
        x = Tensor(as_input(frame))
        total += tape.mse_loss(_reconstruct(tape, x, leaves, config), x).item()
    return total / len(frames)


def pretrain_message_ae(frames: np.ndarray, epochs: int, lr: float, config: ModelConfig,
                        seed: int = 0, batch_size: int = 10,
                        init: Optional[ParameterSet] = None) -> AutoencoderResult:
    """Train a frame autoencoder whose encoder is the message pathway.

    Encoder: conv + tanh, global average pooling, dense to d_msg. Decoder: dense
    back to H x W, sigmoid. Objective: mean squared reconstruction error.
    """
    frames = np.asarray(frames, dtype=resolve_dtype(config.dtype))
    if frames.shape[0] == 0:
        raise ConfigError("pretrain_message_ae: empty frame sample")
    if frames.shape[1:] != (config.height, config.width):
        raise ShapeMismatchError(
            f"pretrain_message_ae: frames are {list(frames.shape[1:])}, model expects "
            f"[{config.height}, {config.width}]"
        )
    if frames.shape[0] < 100:
        logger.warning("pretraining the message encoder on only %d frames", frames.shape[0])
    rng = np.random.default_rng(seed)
    params = init if init is not None else _fan_in_init(autoencoder_shapes(config), rng, config.dtype)
    initial = _reconstruction_mse(frames, params, config)
    history: List[float] = []
    optimizer = Adam(lr=lr)
    for epoch in range(epochs):
        order = rng.permutation(frames.shape[0])
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            tape = Tape()
            leaves = params.watch(tape)
            loss = None
            for idx in batch:
                x = tape.constant(as_input(frames[idx]))
                term = tape.mse_loss(_reconstruct(tape, x, leaves, config), x)
                loss = term if loss is None else tape.add(loss, term)
            loss = tape.scale(loss, 1.0 / len(batch))
            grads = tape.backward(loss)
            params = optimizer.step(params, {name: g.data for name, g in grads.items()})
        history.append(_reconstruction_mse(frames, params, config))
        logger.debug("autoencoder epoch %d: mse %.6g", epoch + 1, history[-1])
    final = history[-1] if history else initial
    return AutoencoderResult(params, initial, final, history)
