"""Training runs: epochs of lockstep rounds, or a single streaming pass with replay.

A run directory holds::

    metrics.csv      epoch,node,mse,psnr,ssim,loss
    run_log.json     event log (see ssta.run_log)
    train_config.json
    checkpoints/     latest completed epoch (see ssta.checkpoint)
    eval.csv         held-out metrics of streaming runs
"""
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ssta.checkpoint import load_network, save_network
from ssta.dataset import Dataset
from ssta.errors import ConfigError, RoundAborted
from ssta.inference import evaluate
from ssta.lifelong import EVICTION_POLICIES
from ssta.metrics import MetricAccumulator, MetricReport, write_report_csv
from ssta.node_model import ENCODER_SLICES, AutoencoderResult, ModelConfig, pretrain_message_ae
from ssta.protocol import LIFELONG_MODES, MSG_MODES, LifelongConfig, NodeAgent, build_network
from ssta.run_log import RunLog
from ssta.scheduler import SCHEDULERS, Scheduler, make_scheduler
from ssta.settings import Settings
from ssta.tensor_core import load_tensors, save_tensors
from ssta.world import build_topology

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "node", "mse", "psnr", "ssim", "loss"]


@dataclass(frozen=True)
class TrainConfig:
    dataset: str
    out: str
    nodes: int = 0  # 0 = every view in the dataset
    k: int = 2
    horizon: int = 5
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 10
    msg_mode: str = "emerged"
    scheduler: str = "serial"
    workers: int = 0
    seed: int = 0
    resume: bool = False
    lifelong: str = "none"
    buffer: int = 300
    replay_batch: int = 4
    id_eviction: str = "smallest"
    holdout_fraction: float = 0.2
    dtype: str = "f64"
    hidden_channels: int = 8
    msg_dim: int = 16
    kernel_size: int = 3
    self_message: bool = False
    rollout_msgs: str = "hold"
    freeze_msg_head: bool = False
    pretrained: Optional[str] = None
    max_run_log_entries: int = 1000

    def __post_init__(self):
        if self.nodes < 0:
            raise ConfigError(f"nodes: must be >= 0, got {self.nodes}")
        if self.horizon < 1:
            raise ConfigError(f"horizon: must be >= 1, got {self.horizon}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.msg_mode not in MSG_MODES:
            raise ConfigError(f"msg_mode: expected one of {MSG_MODES}, got {self.msg_mode!r}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler: expected one of {SCHEDULERS}, got {self.scheduler!r}")
        if self.lifelong not in LIFELONG_MODES:
            raise ConfigError(f"lifelong: expected one of {LIFELONG_MODES}, got {self.lifelong!r}")
        if self.id_eviction not in EVICTION_POLICIES:
            raise ConfigError(f"id_eviction: expected one of {EVICTION_POLICIES}, got {self.id_eviction!r}")
        if self.lifelong != "none" and self.resume:
            raise ConfigError("resume: streaming runs keep no buffer in checkpoints and cannot resume")

    @classmethod
    def from_settings(cls, settings: Settings, **overrides) -> "TrainConfig":
        """Defaults from `settings`; explicit keyword values (not None) win."""
        known = set(cls.__dataclass_fields__)
        values = {key: value for key, value in settings.get_all().items() if key in known}
        if "parallel_workers" in settings.get_all():
            values["workers"] = settings.get("parallel_workers")
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def model_config(self, height: int, width: int) -> ModelConfig:
        return ModelConfig(height=height, width=width, hidden_channels=self.hidden_channels,
                           msg_dim=self.msg_dim, kernel_size=self.kernel_size, self_message=self.self_message,
                           rollout_msgs=self.rollout_msgs, freeze_msg_head=self.freeze_msg_head, dtype=self.dtype)

    def lifelong_config(self) -> LifelongConfig:
        return LifelongConfig(self.lifelong, self.buffer, self.replay_batch, self.id_eviction)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainResult:
    agents: Dict[int, NodeAgent]
    epoch_losses: List[Dict[int, float]] = field(default_factory=list)
    start_epoch: int = 0
    evaluation: Optional[MetricReport] = None
    round_times: List[float] = field(default_factory=list)

    @property
    def mean_round_time(self) -> float:
        return float(np.mean(self.round_times)) if self.round_times else 0.0


class MetricsFile:
    """Per-epoch, per-node metric rows with floats written by repr (round-trip exact)."""

    def __init__(self, path: str):
        self.path = path

    def start(self) -> None:
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(METRIC_COLUMNS)

    def truncate_after(self, epoch: int) -> int:
        """Drop rows of epochs after `epoch`; returns how many were dropped."""
        if not os.path.exists(self.path):
            self.start()
            return 0
        with open(self.path, newline="") as f:
            rows = list(csv.DictReader(f))
        keep = [row for row in rows if int(row["epoch"]) <= epoch]
        with open(self.path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            writer.writerows(keep)
        return len(rows) - len(keep)

    def append(self, epoch: int, report: MetricReport, losses: Dict[int, float]) -> None:
        with open(self.path, "a", newline="") as f:
            writer = csv.writer(f)
            for node_id in sorted(losses):
                m = report.per_view[node_id]
                writer.writerow([epoch, node_id, repr(m.mse), repr(m.psnr), repr(m.ssim), repr(losses[node_id])])

    def rows(self) -> List[Dict]:
        with open(self.path, newline="") as f:
            return list(csv.DictReader(f))


def _select_dataset(config: TrainConfig, dataset: Optional[Dataset]) -> Dataset:
    data = dataset if dataset is not None else Dataset.load(config.dataset)
    if config.nodes:
        if config.nodes > len(data.views):
            raise ConfigError(f"nodes: dataset has {len(data.views)} views, {config.nodes} requested")
        data = data.subset_views(config.nodes)
    return data


def _pretrained_slices(path: Optional[str]) -> Dict[str, np.ndarray]:
    if not path:
        return {}
    arrays = load_tensors(path)
    return {name: arr for name, arr in arrays.items() if name in ENCODER_SLICES}


def build_agents(config: TrainConfig, data: Dataset, n_streams: int) -> Dict[int, NodeAgent]:
    height, width = data.views[0].height, data.views[0].width
    model_config = config.model_config(height, width)
    topology = build_topology(data.views, config.k)
    agents = build_network(topology, model_config, seed=config.seed, lr=config.lr, msg_mode=config.msg_mode,
                           n_streams=n_streams, lifelong=config.lifelong_config())
    slices = _pretrained_slices(config.pretrained)
    if slices:
        for agent in agents.values():
            agent.params = agent.params.with_slices(slices)
        logger.info("initialized %s of %d nodes from %s", sorted(slices), len(agents), config.pretrained)
    return agents


def _stream_windows(data: Dataset, node_ids, starts: List[int], horizon: int) -> Dict[int, np.ndarray]:
    return {i: np.stack([data.window(i, s, horizon) for s in starts]) for i in node_ids}


def _checkpoint_meta(config: TrainConfig, epoch: int, data: Dataset) -> Dict:
    return {"epoch": epoch, "seed": config.seed, "msg_mode": config.msg_mode,
            "holdout_fraction": config.holdout_fraction, "view_ids": data.view_ids,
            "world_seed": data.config.seed}


def _write_config(config: TrainConfig) -> None:
    os.makedirs(config.out, exist_ok=True)
    temp_file = os.path.join(config.out, "train_config.json.tmp")
    with open(temp_file, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    os.replace(temp_file, os.path.join(config.out, "train_config.json"))


def _run_round(scheduler: Scheduler, agents, windows, t: int, run_log: RunLog, epoch: int):
    try:
        return scheduler.run_round(agents, windows, t)
    except RoundAborted as e:
        run_log.round_aborted(epoch, t, e)
        raise


def run_training(config: TrainConfig, dataset: Optional[Dataset] = None) -> TrainResult:
    """Train every node for `config.epochs` epochs; streaming runs when `config.lifelong` is set."""
    if config.lifelong != "none":
        return run_streaming(config, dataset)
    data = _select_dataset(config, dataset)
    _write_config(config)
    run_log = RunLog(os.path.join(config.out, "run_log.json"), config.max_run_log_entries)
    metrics = MetricsFile(os.path.join(config.out, "metrics.csv"))
    ckpt_dir = os.path.join(config.out, "checkpoints")

    train_end = data.holdout_start(config.holdout_fraction)
    seg_len = train_end // config.batch_size
    if seg_len < config.horizon + 1:
        raise ConfigError(
            f"training segment of {train_end} steps cannot hold {config.batch_size} streams "
            f"of horizon {config.horizon}"
        )
    rounds_per_epoch = seg_len - config.horizon

    agents = build_agents(config, data, config.batch_size)
    start_epoch = 0
    if config.resume and os.path.exists(os.path.join(ckpt_dir, "network.json")):
        nodes, meta = load_network(ckpt_dir)
        if set(nodes) != set(agents):
            raise ConfigError(f"resume: checkpoint nodes {sorted(nodes)} differ from run nodes {sorted(agents)}")
        for i, ckpt in nodes.items():
            agents[i].params = ckpt.params
            ckpt.restore_optimizer(agents[i].optimizer)
        start_epoch = int(meta.get("epoch", 0))
        dropped = metrics.truncate_after(start_epoch)
        run_log.record("resumed", message=f"resumed after epoch {start_epoch}", epoch=start_epoch,
                       details={"dropped_rows": dropped})
        logger.info("resuming %s after epoch %d (%d unfinished rows dropped)", config.out, start_epoch, dropped)
    else:
        metrics.start()
        save_network(ckpt_dir, agents, _checkpoint_meta(config, 0, data))

    result = TrainResult(agents, start_epoch=start_epoch)
    with make_scheduler(config.scheduler, config.workers) as scheduler:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            acc = MetricAccumulator()
            loss_sums = {i: 0.0 for i in agents}
            for agent in agents.values():
                agent.reset_hidden()
                agent.epoch = epoch
            for t in range(rounds_per_epoch):
                starts = [b * seg_len + t for b in range(config.batch_size)]
                windows = _stream_windows(data, agents, starts, config.horizon)
                round_result = _run_round(scheduler, agents, windows, t, run_log, epoch)
                result.round_times.append(round_result.wall_time)
                for i, agent in agents.items():
                    loss_sums[i] += round_result.losses[i]
                    for preds, targets in zip(agent.last_predictions, agent.last_targets):
                        acc.add_sequence(i, preds, targets)
            losses = {i: loss_sums[i] / rounds_per_epoch for i in sorted(agents)}
            result.epoch_losses.append(losses)
            report = acc.report()
            metrics.append(epoch, report, losses)
            save_network(ckpt_dir, agents, _checkpoint_meta(config, epoch, data))
            epoch_times = result.round_times[-rounds_per_epoch:]
            run_log.epoch_finished(epoch, config.epochs, losses, report, float(np.mean(epoch_times)))
            run_log.record("checkpoint_saved", message=f"saved epoch {epoch}", epoch=epoch,
                           details={"path": ckpt_dir})
            logger.info("epoch %d/%d: mean loss %.6g", epoch, config.epochs, float(np.mean(list(losses.values()))))
    return result


def run_streaming(config: TrainConfig, dataset: Optional[Dataset] = None) -> TrainResult:
    """One pass over the training segment, one round per step, then held-out evaluation."""
    data = _select_dataset(config, dataset)
    _write_config(config)
    run_log = RunLog(os.path.join(config.out, "run_log.json"), config.max_run_log_entries)
    metrics = MetricsFile(os.path.join(config.out, "metrics.csv"))
    metrics.start()
    ckpt_dir = os.path.join(config.out, "checkpoints")

    train_end = data.holdout_start(config.holdout_fraction)
    steps = train_end - config.horizon
    if steps < 1:
        raise ConfigError(f"training segment of {train_end} steps is shorter than horizon {config.horizon}")
    agents = build_agents(config, data, 1)
    result = TrainResult(agents)
    acc = MetricAccumulator()
    loss_sums = {i: 0.0 for i in agents}
    stored = {i: 0 for i in agents}
    log_every = max(1, steps // 10)
    with make_scheduler(config.scheduler, config.workers) as scheduler:
        for agent in agents.values():
            agent.epoch = 1
        for t in range(steps):
            windows = _stream_windows(data, agents, [t], config.horizon)
            round_result = _run_round(scheduler, agents, windows, t, run_log, 1)
            result.round_times.append(round_result.wall_time)
            for i, agent in agents.items():
                loss_sums[i] += round_result.losses[i]
                stored[i] += int(bool(round_result.reports[i].stored))
                acc.add_sequence(i, agent.last_predictions[0], agent.last_targets[0])
            if (t + 1) % log_every == 0 or t + 1 == steps:
                run_log.record("stream_progress", "debug", f"stream position {t + 1}/{steps}", epoch=1, step=t,
                               details={"position": t + 1,
                                        "buffer": {str(i): len(a.buffer) for i, a in agents.items()},
                                        "stored": {str(i): n for i, n in stored.items()}})
    losses = {i: loss_sums[i] / steps for i in sorted(agents)}
    result.epoch_losses.append(losses)
    report = acc.report()
    metrics.append(1, report, losses)
    save_network(ckpt_dir, agents, _checkpoint_meta(config, 1, data))
    run_log.epoch_finished(1, 1, losses, report, result.mean_round_time)
    run_log.record("checkpoint_saved", message="saved streaming run", epoch=1,
                   details={"path": ckpt_dir, "position": steps})

    models = {i: a.model for i, a in agents.items()}
    params = {i: a.params for i, a in agents.items()}
    result.evaluation = evaluate(models, params, data, config.horizon, start=train_end,
                                 msg_mode=config.msg_mode, seed=config.seed)
    write_report_csv(os.path.join(config.out, "eval.csv"), result.evaluation)
    run_log.evaluated(result.evaluation, epoch=1)
    return result


def run_pretraining(dataset: Dataset, model_config: ModelConfig, epochs: int, lr: float, out: str,
                    seed: int = 0, holdout_fraction: float = 0.2, max_frames: int = 2000) -> AutoencoderResult:
    """Pretrain the message encoder on training-segment frames of every view and save its slices to `out`."""
    train_end = dataset.holdout_start(holdout_fraction)
    frames = np.concatenate([dataset.frames[i][:train_end] for i in dataset.view_ids], axis=0)
    if frames.shape[0] > max_frames:
        pick = np.random.default_rng(seed).choice(frames.shape[0], size=max_frames, replace=False)
        frames = frames[np.sort(pick)]
    result = pretrain_message_ae(frames, epochs, lr, model_config, seed=seed)
    save_tensors(out, result.encoder_slices())
    run_log = RunLog(os.path.join(os.path.dirname(os.path.abspath(out)), "run_log.json"))
    run_log.record("pretrained", message=f"reconstruction mse {result.initial_mse:.6g} -> {result.final_mse:.6g}",
                   details={"frames": int(frames.shape[0]), "epochs": epochs, "history": result.history})
    return result
