"""Networked co-learning: node agents and the five-phase training round.

Every node finishes a phase before any node starts the next one::

    broadcast  emit y_t (or zero / random payloads) to every receiver
    rollout    T-step recursive prediction over the window, local loss
    backprop   local gradients and one GradPacket per consumed message
    exchange   collect the packets returned for this node's own messages
    step       add the message-head correction, one optimizer step

Receivers treat incoming payloads as constants; the only path from a sender's
parameters into another node's loss is the returned packet. Agents talk to
each other only through serialized envelopes in bounded FIFO mailboxes.
"""
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ssta.errors import ConfigError, NonFiniteError, ProtocolViolation, RoundAborted
from ssta.lifelong import ReplayBuffer, draw_batch, id_offer, sw_offer
from ssta.node_model import (MSG_HEAD_SLICES, Message, MessageSet, ModelConfig, NodeModel,
                             Rollout, as_input, init_params)
from ssta.optimizer import Adam
from ssta.tensor_core import ParameterSet, Tape, Tensor, decode_tensor, encode_tensor, resolve_dtype

logger = logging.getLogger(__name__)

MSG_MODES = ("emerged", "zero", "random")
PHASES = ("broadcast", "rollout", "backprop", "exchange", "step")
LIFELONG_MODES = ("none", "sw", "id")

Outgoing = Tuple[int, str, bytes]  # destination node, "message" | "packet", envelope


@dataclass(frozen=True)
class GradPacket:
    """Gradient of the producer's loss with respect to one message it consumed."""
    producer: int
    consumer: int
    timestep: int
    payload: np.ndarray
    sample: int = 0


def encode_envelope(item: Union[Message, GradPacket], receiver: int) -> bytes:
    if isinstance(item, Message):
        meta = {"kind": "message", "sender": item.sender, "receiver": receiver,
                "timestep": item.timestep, "sample": item.sample}
    else:
        meta = {"kind": "packet", "sender": item.producer, "receiver": item.consumer,
                "timestep": item.timestep, "sample": item.sample}
    return encode_tensor(item.payload, meta["kind"], meta)


def decode_envelope(buf: bytes) -> Tuple[int, Union[Message, GradPacket]]:
    """Returns (receiver, item)."""
    record, end = decode_tensor(buf)
    if end != len(buf):
        raise ProtocolViolation(f"envelope has {len(buf) - end} trailing bytes")
    meta = record.meta
    try:
        kind, sender, receiver = meta["kind"], int(meta["sender"]), int(meta["receiver"])
        timestep, sample = int(meta["timestep"]), int(meta["sample"])
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolViolation(f"envelope header is incomplete: {e}") from e
    if kind == "message":
        return receiver, Message(sender, timestep, record.data, sample)
    if kind == "packet":
        return receiver, GradPacket(sender, receiver, timestep, record.data, sample)
    raise ProtocolViolation(f"unknown envelope kind {kind!r}")


class RoundState:
    """Phase barrier of one round: phases run strictly in order, each completed by every node."""

    def __init__(self, timestep: int, node_ids: Sequence[int]):
        self.timestep = timestep
        self.node_ids = tuple(sorted(node_ids))
        self.phase_index = -1
        self.completed: Dict[str, set] = {p: set() for p in PHASES}
        self.losses: Dict[int, float] = {}
        self.reports: Dict[int, "StepReport"] = {}
        self._lock = threading.Lock()

    @property
    def phase(self) -> Optional[str]:
        return PHASES[self.phase_index] if self.phase_index >= 0 else None

    @property
    def done(self) -> bool:
        return self.phase == PHASES[-1] and self.completed[PHASES[-1]] == set(self.node_ids)

    def begin(self, phase: str) -> None:
        expected = PHASES[self.phase_index + 1] if self.phase_index + 1 < len(PHASES) else None
        if phase != expected:
            raise ProtocolViolation(f"round t={self.timestep}: cannot enter {phase!r}, next phase is {expected!r}")
        if self.phase is not None:
            pending = set(self.node_ids) - self.completed[self.phase]
            if pending:
                raise ProtocolViolation(
                    f"round t={self.timestep}: nodes {sorted(pending)} have not finished {self.phase!r}"
                )
        self.phase_index += 1

    def require(self, phase: str) -> None:
        if self.phase != phase:
            raise ProtocolViolation(f"round t={self.timestep}: {phase!r} called during {self.phase!r}")

    def finish(self, phase: str, node_id: int) -> None:
        self.require(phase)
        with self._lock:
            self.completed[phase].add(node_id)


class Mailbox:
    """A node's bounded inboxes of serialized messages and gradient packets."""

    def __init__(self, message_slots: int, packet_slots: int):
        self.messages: "queue.Queue[bytes]" = queue.Queue(maxsize=max(1, message_slots))
        self.packets: "queue.Queue[bytes]" = queue.Queue(maxsize=max(1, packet_slots))

    def post(self, kind: str, envelope: bytes) -> None:
        inbox = self.messages if kind == "message" else self.packets
        try:
            inbox.put_nowait(envelope)
        except queue.Full:
            raise ProtocolViolation(f"{kind} inbox overflow ({inbox.maxsize} slots)") from None

    @staticmethod
    def drain(inbox: "queue.Queue[bytes]") -> List[bytes]:
        items = []
        while True:
            try:
                items.append(inbox.get_nowait())
            except queue.Empty:
                return items


@dataclass
class LifelongConfig:
    mode: str = "none"
    capacity: int = 300
    replay_batch: int = 4
    eviction: str = "smallest"

    def __post_init__(self):
        if self.mode not in LIFELONG_MODES:
            raise ConfigError(f"lifelong: expected one of {LIFELONG_MODES}, got {self.mode!r}")
        if self.replay_batch < 1:
            raise ConfigError(f"replay_batch: must be >= 1, got {self.replay_batch}")


@dataclass
class ReplaySample:
    """One stored training window with the context it was seen in."""
    timestep: int
    window: np.ndarray  # [T + 1, H, W]
    hidden: np.ndarray  # h_t
    payloads: Dict[int, np.ndarray]  # received messages, replayed as constants


@dataclass
class StepUndo:
    """Node state as it was before this round's step, kept until the round commits."""

    params: ParameterSet
    optimizer_state: Dict[str, np.ndarray]
    optimizer_updates: int
    hidden: np.ndarray
    replay_rng: Dict
    buffer: Optional[Tuple] = None


@dataclass
class StepReport:
    node_id: int
    timestep: int
    loss: float
    local_grad_norm: float
    correction_norm: float
    param_version: int
    replayed: int = 0
    stored: Optional[bool] = None


def random_payload(seed: int, epoch: int, timestep: int, node_id: int, sample: int,
                   msg_dim: int, dtype: str) -> np.ndarray:
    """Standard normal payload, reproducible from its coordinates alone."""
    rng = np.random.default_rng([seed, epoch, timestep, node_id, sample])
    return rng.standard_normal(msg_dim).astype(resolve_dtype(dtype))


def window_loss(tape: Tape, model: NodeModel, leaves: Mapping[str, Tensor], hidden: np.ndarray,
                window: np.ndarray, messages: Mapping[int, Tensor]) -> Tuple[Tensor, Rollout]:
    """Sum over the horizon of squared Frobenius prediction errors for one window."""
    horizon = window.shape[0] - 1
    out = model.rollout(tape, tape.constant(as_input(window[0])), tape.constant(hidden),
                        messages, leaves, horizon)
    loss = None
    for tau, prediction in enumerate(out.predictions):
        term = tape.sse_loss(prediction, tape.constant(as_input(window[tau + 1])))
        loss = term if loss is None else tape.add(loss, term)
    return loss, out


def _norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class NodeAgent:
    """One node's worker state and its side of every round phase."""

    def __init__(self, model: NodeModel, params: ParameterSet, receivers: Sequence[int],
                 optimizer: Adam, msg_mode: str = "emerged", n_streams: int = 1, seed: int = 0,
                 lifelong: Optional[LifelongConfig] = None):
        if msg_mode not in MSG_MODES:
            raise ConfigError(f"msg_mode: expected one of {MSG_MODES}, got {msg_mode!r}")
        if n_streams < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {n_streams}")
        self.model = model
        self.params = params
        self.receivers = tuple(sorted(receivers))
        self.optimizer = optimizer
        self.msg_mode = msg_mode
        self.n_streams = n_streams
        self.seed = seed
        self.epoch = 0
        self.lifelong = lifelong or LifelongConfig()
        self.buffer: Optional[ReplayBuffer] = None
        if self.lifelong.mode != "none":
            self.buffer = ReplayBuffer(self.lifelong.capacity, self.lifelong.eviction)
        self._replay_rng = np.random.default_rng([seed, model.node_id, 1])
        self.mailbox = Mailbox(len(model.senders) * n_streams, len(self.receivers) * n_streams)
        self.frozen = MSG_HEAD_SLICES if model.config.freeze_msg_head else ()
        self.last_predictions: Optional[np.ndarray] = None
        self.last_targets: Optional[np.ndarray] = None
        self.last_local_gradient: Dict[str, np.ndarray] = {}
        self.last_correction: Dict[str, np.ndarray] = {}
        self._undo: Optional[StepUndo] = None
        self.reset_hidden()
        self._clear_round()

    @property
    def node_id(self) -> int:
        return self.model.node_id

    def reset_hidden(self) -> None:
        self.hidden = np.zeros((self.n_streams,) + self.model.hidden_shape,
                               dtype=resolve_dtype(self.model.config.dtype))

    def _clear_round(self) -> None:
        self._emit_tape: Optional[Tape] = None
        self._emitted: Dict[int, Tensor] = {}
        self._tape: Optional[Tape] = None
        self._loss: Optional[Tensor] = None
        self._first_states: List[np.ndarray] = []
        self._live: List[ReplaySample] = []
        self._packets: Dict[Tuple[int, int], GradPacket] = {}

    def commit_round(self) -> None:
        """Make this round's step final; a later abort no longer rolls it back."""
        self._undo = None

    def abort_round(self) -> None:
        """Drop everything the current round produced.

        A node that already stepped in this round gets its parameters, optimizer
        moments, hidden state and replay buffer back as they were before the step.
        """
        if self._undo is not None:
            self._restore(self._undo)
            self._undo = None
        Mailbox.drain(self.mailbox.messages)
        Mailbox.drain(self.mailbox.packets)
        self._clear_round()

    def _snapshot(self) -> StepUndo:
        return StepUndo(
            params=self.params,
            optimizer_state={k: v.copy() for k, v in self.optimizer.state_arrays().items()},
            optimizer_updates=self.optimizer.num_updates,
            hidden=self.hidden.copy(),
            replay_rng=self._replay_rng.bit_generator.state,
            buffer=self.buffer.snapshot() if self.buffer is not None else None,
        )

    def _restore(self, undo: StepUndo) -> None:
        self.params = undo.params
        self.optimizer.load_state(undo.optimizer_state, undo.optimizer_updates)
        self.hidden = undo.hidden
        self._replay_rng.bit_generator.state = undo.replay_rng
        if undo.buffer is not None:
            self.buffer.restore(undo.buffer)

    def outgoing_payloads(self, timestep: int) -> Dict[int, np.ndarray]:
        """This round's payload per stream, following the message mode."""
        cfg = self.model.config
        if self.msg_mode == "emerged":
            self._emit_tape = Tape()
            leaves = self.params.watch(self._emit_tape)
            for b in range(self.n_streams):
                h = self._emit_tape.constant(self.hidden[b])
                self._emitted[b] = self.model.emit(self._emit_tape, h, leaves)
            return {b: y.data for b, y in self._emitted.items()}
        if self.msg_mode == "zero":
            return {b: np.zeros(cfg.msg_dim, dtype=resolve_dtype(cfg.dtype)) for b in range(self.n_streams)}
        return {b: random_payload(self.seed, self.epoch, timestep, self.node_id, b, cfg.msg_dim, cfg.dtype)
                for b in range(self.n_streams)}

    # -- phases -----------------------------------------------------------

    def broadcast(self, state: RoundState) -> List[Outgoing]:
        state.require("broadcast")
        payloads = self.outgoing_payloads(state.timestep)
        out = []
        for receiver in self.receivers:
            for b, payload in payloads.items():
                msg = Message(self.node_id, state.timestep, payload, b)
                out.append((receiver, "message", encode_envelope(msg, receiver)))
        return out

    def _incoming(self, state: RoundState) -> Dict[int, MessageSet]:
        sets = {b: MessageSet(self.node_id, state.timestep) for b in range(self.n_streams)}
        for envelope in Mailbox.drain(self.mailbox.messages):
            receiver, msg = decode_envelope(envelope)
            if receiver != self.node_id or not isinstance(msg, Message):
                raise ProtocolViolation(f"node {self.node_id}: misrouted envelope for node {receiver}")
            if msg.sample not in sets:
                raise ProtocolViolation(f"node {self.node_id}: message for unknown stream {msg.sample}")
            if msg.sender in sets[msg.sample].messages:
                raise ProtocolViolation(f"node {self.node_id}: duplicate message from {msg.sender}")
            sets[msg.sample].messages[msg.sender] = msg
        for message_set in sets.values():
            message_set.validate(self.model.senders, self.model.config.msg_dim)
        return sets

    def rollout(self, state: RoundState, windows: np.ndarray) -> float:
        """Local loss: mean over streams of the summed squared errors over the horizon."""
        state.require("rollout")
        if windows.shape[0] != self.n_streams:
            raise ProtocolViolation(f"node {self.node_id}: got {windows.shape[0]} windows for {self.n_streams} streams")
        sets = self._incoming(state)
        self._tape = Tape()
        leaves = self.params.watch(self._tape, "theta/")
        total = None
        predictions = []
        for b in range(self.n_streams):
            payloads = sets[b].payloads()
            msgs = {s: self._tape.watch(f"msg/{s}/{b}", payloads[s]) for s in self.model.senders}
            loss, out = window_loss(self._tape, self.model, leaves, self.hidden[b], windows[b], msgs)
            total = loss if total is None else self._tape.add(total, loss)
            self._first_states.append(out.states[0].data)
            predictions.append(np.stack([p.data[0] for p in out.predictions]))
            if self.buffer is not None:
                self._live.append(ReplaySample(state.timestep, windows[b].copy(), self.hidden[b].copy(),
                                               {s: p.copy() for s, p in payloads.items()}))
        self._loss = self._tape.scale(total, 1.0 / self.n_streams)
        self.last_predictions = np.stack(predictions)  # [B, T, H, W]
        self.last_targets = windows[:, 1:]
        state.losses[self.node_id] = self._loss.item()
        return state.losses[self.node_id]

    def backprop(self, state: RoundState) -> List[Outgoing]:
        state.require("backprop")
        grads = self._tape.backward(self._loss)
        self.last_local_gradient = {name: grads["theta/" + name].data for name in self.params}
        if self.msg_mode != "emerged":
            return []
        out = []
        for sender in self.model.senders:
            for b in range(self.n_streams):
                packet = GradPacket(self.node_id, sender, state.timestep, grads[f"msg/{sender}/{b}"].data, b)
                out.append((sender, "packet", encode_envelope(packet, sender)))
        return out

    def exchange(self, state: RoundState) -> None:
        state.require("exchange")
        expected = set()
        if self.msg_mode == "emerged":
            expected = {(k, b) for k in self.receivers for b in range(self.n_streams)}
        got: Dict[Tuple[int, int], GradPacket] = {}
        for envelope in Mailbox.drain(self.mailbox.packets):
            consumer, packet = decode_envelope(envelope)
            key = (packet.producer, packet.sample)
            if consumer != self.node_id or not isinstance(packet, GradPacket):
                raise ProtocolViolation(f"node {self.node_id}: misrouted envelope for node {consumer}")
            if packet.timestep != state.timestep:
                raise ProtocolViolation(
                    f"edge {packet.producer}->{self.node_id}: packet stamped t={packet.timestep}, "
                    f"round is t={state.timestep}"
                )
            if key not in expected or key in got:
                raise ProtocolViolation(f"edge {packet.producer}->{self.node_id}: unexpected gradient packet")
            if packet.payload.shape != (self.model.config.msg_dim,):
                raise ProtocolViolation(
                    f"edge {packet.producer}->{self.node_id}: packet shape {list(packet.payload.shape)}"
                )
            if not np.all(np.isfinite(packet.payload)):
                raise NonFiniteError(f"gradient packet on edge {packet.producer}->{self.node_id}")
            got[key] = packet
        missing = sorted(expected - got.keys())
        if missing:
            k, b = missing[0]
            raise ProtocolViolation(
                f"missing gradient packet on edge {k}->{self.node_id} (stream {b}) in round t={state.timestep}"
            )
        self._packets = got

    def _message_correction(self) -> Dict[str, np.ndarray]:
        """Sum over returned packets of (d y / d theta)^T g, by one backward pass on the emit tape."""
        if not self._packets:
            return {name: np.zeros(shape, dtype=self.params.flat.dtype) for name, shape in self.params.shapes.items()}
        tape = self._emit_tape
        s = None
        for key in sorted(self._packets):
            packet = self._packets[key]
            term = tape.dot(self._emitted[packet.sample], tape.constant(packet.payload))
            s = term if s is None else tape.add(s, term)
        grads = tape.backward(s)
        return {name: grads[name].data for name in self.params}

    def replay_gradient(self, sample: ReplaySample) -> Dict[str, np.ndarray]:
        """Local gradient on a stored window; the stored payloads are constants and no packets flow."""
        tape = Tape()
        leaves = self.params.watch(tape)
        msgs = {s: tape.constant(p) for s, p in sample.payloads.items()}
        loss, _ = window_loss(tape, self.model, leaves, sample.hidden, sample.window, msgs)
        grads = tape.backward(loss)
        return self._mask_frozen({name: grads[name].data for name in self.params})

    def _mask_frozen(self, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        for name in self.frozen:
            grads[name] = np.zeros_like(grads[name])
        return grads

    def step(self, state: RoundState) -> StepReport:
        state.require("step")
        self._undo = self._snapshot()
        local = self._mask_frozen(dict(self.last_local_gradient))
        correction = self._mask_frozen(self._message_correction())
        self.last_local_gradient, self.last_correction = local, correction
        total = {name: local[name] + correction[name] for name in self.params}
        for name, g in total.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"assembled gradient of {name} on node {self.node_id}")
        replayed, stored = 0, None
        if self.buffer is not None:
            total, replayed, stored = self._lifelong_update(total, _norm(local))
        self.params = self.optimizer.step(self.params, total)
        self.hidden = np.stack(self._first_states)
        report = StepReport(self.node_id, state.timestep, state.losses[self.node_id], _norm(local),
                            _norm(correction), self.params.version, replayed, stored)
        state.reports[self.node_id] = report
        self._clear_round()
        return report

    def _lifelong_update(self, total: Dict[str, np.ndarray], live_norm: float):
        replayed = 0
        if len(self.buffer):
            batch = draw_batch(self.buffer, self.lifelong.replay_batch, self._replay_rng)
            summed = dict(total)
            for sample in batch:
                for name, g in self.replay_gradient(sample).items():
                    summed[name] = summed[name] + g
            replayed = len(batch)
            total = {name: g / (1 + replayed) for name, g in summed.items()}
        stored = None
        for sample in self._live:
            if self.lifelong.mode == "sw":
                sw_offer(self.buffer, sample)
            else:
                _, stored = id_offer(self.buffer, sample, live_norm)
        return total, replayed, stored


def build_network(topology: Mapping[int, Sequence[int]], config: ModelConfig, seed: int = 0,
                  lr: float = 1e-3, msg_mode: str = "emerged", n_streams: int = 1,
                  params: Optional[Mapping[int, ParameterSet]] = None,
                  lifelong: Optional[LifelongConfig] = None) -> Dict[int, NodeAgent]:
    """One agent per topology entry; node i listens to topology[i]."""
    models = {i: NodeModel(i, topology[i], config) for i in sorted(topology)}
    for i, model in models.items():
        unknown = set(model.neighbors) - set(models)
        if unknown:
            raise ConfigError(f"topology: node {i} listens to unknown nodes {sorted(unknown)}")
    agents = {}
    for i, model in models.items():
        receivers = [k for k, other in models.items() if i in other.senders]
        p = params[i] if params and i in params else init_params(config, np.random.default_rng([seed, i]))
        optimizer = Adam(lr=lr, frozen=MSG_HEAD_SLICES if config.freeze_msg_head else ())
        agents[i] = NodeAgent(model, p, receivers, optimizer, msg_mode, n_streams, seed, lifelong)
    return agents


@dataclass
class OracleResult:
    grads: Dict[int, Dict[str, np.ndarray]]
    losses: Dict[int, float]
    total_loss: float = 0.0
    extra: Dict = field(default_factory=dict)


def centralized_oracle(agents: Mapping[int, NodeAgent], windows: Mapping[int, np.ndarray],
                       timestep: int = 0) -> OracleResult:
    """Whole-graph gradient of the summed loss from one joint tape.

    Receivers consume the senders' message tensors directly, so sender gradients
    flow through the receivers' losses without any packets. Agent state is not
    modified.
    """
    tape = Tape()
    leaves = {i: agent.params.watch(tape, f"node{i}/") for i, agent in sorted(agents.items())}
    emitted: Dict[Tuple[int, int], Tensor] = {}
    for i, agent in sorted(agents.items()):
        for b in range(agent.n_streams):
            if agent.msg_mode == "emerged":
                emitted[(i, b)] = agent.model.emit(tape, tape.constant(agent.hidden[b]), leaves[i])
            elif agent.msg_mode == "zero":
                emitted[(i, b)] = tape.constant(np.zeros(agent.model.config.msg_dim,
                                                         dtype=resolve_dtype(agent.model.config.dtype)))
            else:
                cfg = agent.model.config
                emitted[(i, b)] = tape.constant(
                    random_payload(agent.seed, agent.epoch, timestep, i, b, cfg.msg_dim, cfg.dtype))
    losses: Dict[int, Tensor] = {}
    for i, agent in sorted(agents.items()):
        node_total = None
        for b in range(agent.n_streams):
            msgs = {s: emitted[(s, b)] for s in agent.model.senders}
            loss, _ = window_loss(tape, agent.model, leaves[i], agent.hidden[b], windows[i][b], msgs)
            node_total = loss if node_total is None else tape.add(node_total, loss)
        losses[i] = tape.scale(node_total, 1.0 / agent.n_streams)
    total = None
    for i in sorted(losses):
        total = losses[i] if total is None else tape.add(total, losses[i])
    grads = tape.backward(total)
    per_node = {i: {name: grads[f"node{i}/{name}"].data for name in agent.params}
                for i, agent in agents.items()}
    return OracleResult(per_node, {i: l.item() for i, l in losses.items()}, total.item())


def abort_diagnostics(state: RoundState, phase: str, node_id: int, error: Exception) -> RoundAborted:
    diagnostics = {"timestep": state.timestep, "phase": phase, "node": node_id, "error": str(error),
                   "losses": dict(state.losses)}
    return RoundAborted(f"round t={state.timestep} aborted in {phase} on node {node_id}: {error}", diagnostics)
