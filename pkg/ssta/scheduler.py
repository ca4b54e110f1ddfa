"""Round schedulers: a single-threaded serial one and a lockstep one with a worker per node.

Both run the same five phases with the same barrier; the serial scheduler
visits nodes in id order and is the deterministic reference.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np

from ssta.errors import ConfigError, NonFiniteError, ProtocolViolation
from ssta.protocol import NodeAgent, Outgoing, RoundState, StepReport, abort_diagnostics

logger = logging.getLogger(__name__)

SCHEDULERS = ("serial", "parallel")


@dataclass
class RoundResult:
    timestep: int
    losses: Dict[int, float] = field(default_factory=dict)
    reports: Dict[int, StepReport] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def total_loss(self) -> float:
        total = 0.0
        for node_id in sorted(self.losses):
            total += self.losses[node_id]
        return total


def route(agents: Mapping[int, NodeAgent], outgoing: Iterable[Outgoing]) -> None:
    for dest, kind, envelope in outgoing:
        if dest not in agents:
            raise ProtocolViolation(f"no node {dest} to deliver a {kind} to")
        agents[dest].mailbox.post(kind, envelope)


class Scheduler:
    """Drives one training round through every phase."""

    name = "base"

    def run_round(self, agents: Mapping[int, NodeAgent], windows: Mapping[int, np.ndarray],
                  timestep: int) -> RoundResult:
        state = RoundState(timestep, agents.keys())
        start = time.perf_counter()
        try:
            self._phase(state, "broadcast", agents, lambda a: route(agents, a.broadcast(state)))
            self._phase(state, "rollout", agents, lambda a: a.rollout(state, windows[a.node_id]))
            self._phase(state, "backprop", agents, lambda a: route(agents, a.backprop(state)))
            self._phase(state, "exchange", agents, lambda a: a.exchange(state))
            self._phase(state, "step", agents, lambda a: a.step(state))
        except Exception:
            for agent in agents.values():
                agent.abort_round()
            raise
        for agent in agents.values():
            agent.commit_round()
        return RoundResult(timestep, dict(state.losses), dict(state.reports), time.perf_counter() - start)

    def _run(self, state: RoundState, phase: str, agent: NodeAgent, fn: Callable[[NodeAgent], object]) -> None:
        try:
            fn(agent)
        except NonFiniteError as e:
            raise abort_diagnostics(state, phase, agent.node_id, e) from e
        state.finish(phase, agent.node_id)

    def _phase(self, state: RoundState, phase: str, agents: Mapping[int, NodeAgent],
               fn: Callable[[NodeAgent], object]) -> None:
        raise NotImplementedError

    def shutdown(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


class SerialScheduler(Scheduler):
    name = "serial"

    def _phase(self, state, phase, agents, fn):
        state.begin(phase)
        for node_id in sorted(agents):
            self._run(state, phase, agents[node_id], fn)


class LockstepScheduler(Scheduler):
    """One pool task per node per phase; the phase ends when every task has."""

    name = "parallel"

    def __init__(self, workers: int = 0):
        if workers < 0:
            raise ConfigError(f"parallel_workers: must be >= 0, got {workers}")
        self.workers = workers
        self._executor: Optional[ThreadPoolExecutor] = None

    def _pool(self, n_nodes: int) -> ThreadPoolExecutor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.workers or n_nodes,
                                                thread_name_prefix="ssta-node")
        return self._executor

    def _phase(self, state, phase, agents, fn):
        state.begin(phase)
        executor = self._pool(len(agents))
        future_to_node = {
            executor.submit(self._run, state, phase, agent, fn): node_id
            for node_id, agent in agents.items()
        }
        errors = {}
        for future in as_completed(future_to_node):
            exc = future.exception()
            if exc is not None:
                errors[future_to_node[future]] = exc
        if errors:
            first = min(errors)
            if len(errors) > 1:
                logger.warning("round t=%d: %s failed on nodes %s", state.timestep, phase, sorted(errors))
            raise errors[first]

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def make_scheduler(name: str, workers: int = 0) -> Scheduler:
    if name == "serial":
        return SerialScheduler()
    if name == "parallel":
        return LockstepScheduler(workers)
    raise ConfigError(f"scheduler: expected one of {SCHEDULERS}, got {name!r}")


def training_round(agents: Mapping[int, NodeAgent], windows: Mapping[int, np.ndarray], timestep: int,
                   scheduler: Optional[Scheduler] = None) -> RoundResult:
    """Run one round over `windows` (node id -> [B, T + 1, H, W]) and update every node."""
    return (scheduler or SerialScheduler()).run_round(agents, windows, timestep)
