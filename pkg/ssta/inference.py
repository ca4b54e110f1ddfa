"""Receding-horizon prediction over a dataset with a trained network.

At every timestep each node emits its message from the retained hidden state,
receives its neighbors' messages, and re-predicts T frames ahead starting from
the first-step state of its previous rollout.
"""
import logging
from typing import Callable, Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from ssta.checkpoint import load_network
from ssta.dataset import Dataset
from ssta.errors import ConfigError
from ssta.metrics import MetricAccumulator, MetricReport
from ssta.node_model import NodeModel, NodeRuntime, RolloutResult
from ssta.protocol import MSG_MODES, random_payload
from ssta.tensor_core import ParameterSet, resolve_dtype

logger = logging.getLogger(__name__)


def _payloads(runtimes: Mapping[int, NodeRuntime], msg_mode: str, seed: int, t: int) -> Dict[int, np.ndarray]:
    out = {}
    for i, runtime in runtimes.items():
        cfg = runtime.model.config
        if msg_mode == "emerged":
            out[i] = runtime.emit()
        elif msg_mode == "zero":
            out[i] = np.zeros(cfg.msg_dim, dtype=resolve_dtype(cfg.dtype))
        else:
            out[i] = random_payload(seed, 0, t, i, 0, cfg.msg_dim, cfg.dtype)
    return out


def run_receding(models: Mapping[int, NodeModel], params: Mapping[int, ParameterSet],
                 dataset: Dataset, start: int, stop: int, horizon: int,
                 msg_mode: str = "emerged", seed: int = 0) -> Iterator[Tuple[int, Dict[int, RolloutResult]]]:
    """Yield (t, rollouts) for t in [start, stop); the hidden state starts at zero at `start`."""
    if msg_mode not in MSG_MODES:
        raise ConfigError(f"msg_mode: expected one of {MSG_MODES}, got {msg_mode!r}")
    runtimes = {i: NodeRuntime(models[i], params[i], horizon) for i in sorted(models)}
    for t in range(start, stop):
        sent = _payloads(runtimes, msg_mode, seed, t)
        results = {}
        for i, runtime in runtimes.items():
            incoming = {s: sent[s] for s in runtime.model.senders}
            frame = dataset.frames[i][t]
            if runtime.last is None:
                results[i] = runtime.rollout(frame, incoming)
            else:
                results[i] = runtime.receding_advance(frame, incoming)
        yield t, results


def evaluate(models: Mapping[int, NodeModel], params: Mapping[int, ParameterSet], dataset: Dataset,
             horizon: int, start: Optional[int] = None, end: Optional[int] = None,
             msg_mode: str = "emerged", seed: int = 0, holdout_fraction: float = 0.2,
             progress: Optional[Callable[[int], None]] = None) -> MetricReport:
    """Metrics of every T-step prediction made on [start, end), averaged over steps per view.

    `start` defaults to the beginning of the held-out segment.
    """
    if horizon < 1:
        raise ConfigError(f"horizon: must be >= 1, got {horizon}")
    start = dataset.holdout_start(holdout_fraction) if start is None else start
    end = dataset.length if end is None else end
    stop = end - horizon
    if stop <= start:
        raise ConfigError(f"evaluation segment [{start}, {end}) is too short for horizon {horizon}")
    acc = MetricAccumulator()
    for t, results in run_receding(models, params, dataset, start, stop, horizon, msg_mode, seed):
        for i, result in results.items():
            acc.add_sequence(i, result.predictions, dataset.frames[i][t + 1:t + horizon + 1])
        if progress:
            progress(t)
    return acc.report()


def evaluate_checkpoint(ckpt_dir: str, dataset: Dataset, horizon: int, start: Optional[int] = None,
                        msg_mode: Optional[str] = None) -> MetricReport:
    nodes, meta = load_network(ckpt_dir)
    missing = set(nodes) - set(dataset.view_ids)
    if missing:
        raise ConfigError(f"dataset has no views {sorted(missing)} for the checkpointed nodes")
    models = {i: NodeModel(i, ckpt.neighbors, ckpt.config) for i, ckpt in nodes.items()}
    params = {i: ckpt.params for i, ckpt in nodes.items()}
    mode = msg_mode or meta.get("msg_mode", "emerged")
    report = evaluate(models, params, dataset, horizon, start=start, msg_mode=mode,
                      seed=meta.get("seed", 0), holdout_fraction=meta.get("holdout_fraction", 0.2))
    logger.info("evaluated %s over %d nodes (mode %s)", ckpt_dir, len(nodes), mode)
    return report
