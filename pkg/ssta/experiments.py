"""Ablation suites and qualitative frame dumps.

Every suite trains its arms on the same worlds (one per seed), evaluates each
arm on the held-out end of the stream and tabulates mean and standard deviation
over seeds.
"""
import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from ssta.checkpoint import load_network
from ssta.dataset import Dataset
from ssta.errors import ConfigError, OrderingViolation
from ssta.inference import evaluate, run_receding
from ssta.metrics import MetricReport
from ssta.node_model import NodeModel
from ssta.run_log import RunLog
from ssta.trainer import TrainConfig, run_training
from ssta.world import WorldConfig

logger = logging.getLogger(__name__)

SUITES = ("messages", "connectivity", "lifelong", "scalability")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "base"
    seeds: Tuple[int, ...] = (0, 1, 2)
    nodes: int = 8
    k: int = 2
    msg_mode: str = "emerged"
    lifelong: str = "none"
    buffer: int = 300
    horizon: int = 5
    epochs: int = 40
    world_preset: str = "ladder"
    world_steps: int = 400
    view_size: int = 16
    n_vehicles: int = 10
    batch_size: int = 10
    scheduler: str = "serial"
    lr: float = 1e-3

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds: duplicates in {list(self.seeds)}")

    @property
    def repetitions(self) -> int:
        return len(self.seeds)

    def world_config(self, seed: int) -> WorldConfig:
        grid = 4 * self.view_size if self.world_preset == "ladder" else 2 * self.view_size
        return WorldConfig(preset=self.world_preset, grid_size=grid, view_size=self.view_size,
                           n_views=self.nodes, n_vehicles=self.n_vehicles, seed=seed)

    def train_config(self, seed: int, dataset_dir: str, out: str) -> TrainConfig:
        return TrainConfig(dataset=dataset_dir, out=out, nodes=self.nodes, k=self.k, horizon=self.horizon,
                           epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, msg_mode=self.msg_mode,
                           scheduler=self.scheduler, seed=seed, lifelong=self.lifelong, buffer=self.buffer)


@dataclass
class ArmResult:
    name: str
    reports: Dict[int, MetricReport] = field(default_factory=dict)  # seed -> report
    round_times: Dict[int, float] = field(default_factory=dict)  # seed -> mean seconds per round

    def _values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r.mean, metric) for _, r in sorted(self.reports.items())], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self._values(metric).mean())

    def sd(self, metric: str) -> float:
        values = self._values(metric)
        return float(values.std(ddof=1)) if values.size > 1 else 0.0

    @property
    def mean_round_time(self) -> float:
        return float(np.mean(list(self.round_times.values()))) if self.round_times else 0.0


@dataclass
class Comparison:
    suite: str
    arms: Dict[str, ArmResult] = field(default_factory=dict)

    def means(self, metric: str = "mse") -> Dict[str, float]:
        return {name: arm.mean(metric) for name, arm in self.arms.items()}

    def rows(self) -> List[Dict]:
        rows = []
        for name, arm in self.arms.items():
            row = {"suite": self.suite, "arm": name, "seeds": len(arm.reports)}
            for metric in ("mse", "psnr", "ssim"):
                row[f"{metric}_mean"] = arm.mean(metric)
                row[f"{metric}_sd"] = arm.sd(metric)
            row["round_seconds"] = arm.mean_round_time
            rows.append(row)
        return rows

    def write_csv(self, path: str) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    def format_table(self) -> str:
        lines = [f"{self.suite}",
                 f"{'arm':<12} {'mse':>22} {'psnr':>16} {'ssim':>16} {'s/round':>8}"]
        for row in self.rows():
            lines.append(
                f"{row['arm']:<12} {row['mse_mean']:>11.6f} ± {row['mse_sd']:<8.6f} "
                f"{row['psnr_mean']:>7.3f} ± {row['psnr_sd']:<6.3f} "
                f"{row['ssim_mean']:>7.4f} ± {row['ssim_sd']:<6.4f} {row['round_seconds']:>8.3f}"
            )
        return "\n".join(lines)


class ExperimentRunner:
    """Shares one generated world per seed across every arm of every suite."""

    def __init__(self, out_dir: str, run_log: Optional[RunLog] = None):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.run_log = run_log or RunLog(os.path.join(out_dir, "run_log.json"))
        self._worlds: Dict[Tuple, str] = {}

    def dataset_dir(self, spec: ExperimentSpec, seed: int) -> str:
        world = spec.world_config(seed)
        key = (tuple(sorted(world.to_dict().items())), spec.world_steps)
        if key not in self._worlds:
            path = os.path.join(self.out_dir, "worlds", f"{world.preset}_v{world.n_views}_s{seed}")
            if not os.path.exists(os.path.join(path, "manifest.json")):
                Dataset.generate(world, spec.world_steps).write(path)
            self._worlds[key] = path
        return self._worlds[key]

    def run_arm(self, suite: str, arm_name: str, spec: ExperimentSpec) -> ArmResult:
        arm = ArmResult(arm_name)
        for seed in spec.seeds:
            data_dir = self.dataset_dir(spec, seed)
            out = os.path.join(self.out_dir, suite, arm_name, f"seed{seed}")
            config = spec.train_config(seed, data_dir, out)
            dataset = Dataset.load(data_dir)
            result = run_training(config, dataset)
            if result.evaluation is None:
                models = {i: a.model for i, a in result.agents.items()}
                params = {i: a.params for i, a in result.agents.items()}
                result.evaluation = evaluate(models, params, dataset.subset_views(spec.nodes), spec.horizon,
                                             msg_mode=spec.msg_mode, seed=seed)
            arm.reports[seed] = result.evaluation
            arm.round_times[seed] = result.mean_round_time
            self.run_log.record(
                "arm_finished", message=f"{suite}/{arm_name} seed {seed}",
                details={"suite": suite, "arm": arm_name, "seed": seed, "mean_round_time": result.mean_round_time,
                         "mse": result.evaluation.mean.mse},
            )
            logger.info("%s/%s seed %d: held-out mse %.6g", suite, arm_name, seed, result.evaluation.mean.mse)
        return arm

    def compare(self, suite: str, arms: Dict[str, ExperimentSpec]) -> Comparison:
        comparison = Comparison(suite)
        for name, spec in arms.items():
            comparison.arms[name] = self.run_arm(suite, name, spec)
        os.makedirs(os.path.join(self.out_dir, suite), exist_ok=True)
        comparison.write_csv(os.path.join(self.out_dir, suite, "summary.csv"))
        with open(os.path.join(self.out_dir, suite, "summary.txt"), "w") as f:
            f.write(comparison.format_table() + "\n")
        return comparison


def _require(comparison: Comparison, ok: bool, claim: str) -> None:
    if not ok:
        means = comparison.means("mse")
        raise OrderingViolation(f"{comparison.suite}: expected {claim}; mean mse {means}", means)


def _warn_repetitions(base: ExperimentSpec, assert_order: bool) -> None:
    if assert_order and base.repetitions < 3:
        logger.warning("asserting an ordering over %d seed(s); at least 3 are expected", base.repetitions)


def ablate_messages(base: ExperimentSpec, runner: ExperimentRunner, assert_order: bool = False) -> Comparison:
    _warn_repetitions(base, assert_order)
    arms = {mode: replace(base, name=mode, msg_mode=mode) for mode in ("emerged", "zero", "random")}
    comparison = runner.compare("messages", arms)
    if assert_order:
        m = comparison.means("mse")
        _require(comparison, m["emerged"] < m["zero"] and m["emerged"] < m["random"],
                 "emerged < zero and emerged < random")
    return comparison


def ablate_connectivity(base: ExperimentSpec, runner: ExperimentRunner, assert_order: bool = False,
                        ks: Sequence[int] = (2, 4, 7)) -> Comparison:
    _warn_repetitions(base, assert_order)
    arms = {f"k{k}": replace(base, name=f"k{k}", k=k, nodes=8) for k in ks}
    comparison = runner.compare("connectivity", arms)
    m = comparison.means("mse")
    ordered = [m[f"k{k}"] for k in sorted(ks)]
    if any(a < b for a, b in zip(ordered, ordered[1:])):
        logger.info("connectivity trend is not monotone: %s", m)
    if assert_order:
        _require(comparison, m[f"k{max(ks)}"] <= m[f"k{min(ks)}"], f"k{max(ks)} <= k{min(ks)}")
    return comparison


def ablate_lifelong(base: ExperimentSpec, runner: ExperimentRunner, assert_order: bool = False) -> Comparison:
    _warn_repetitions(base, assert_order)
    arms = {f"sw{d}": replace(base, name=f"sw{d}", lifelong="sw", buffer=d) for d in (50, 150, 300)}
    arms["id300"] = replace(base, name="id300", lifelong="id", buffer=300)
    comparison = runner.compare("lifelong", arms)
    if assert_order:
        m = comparison.means("mse")
        _require(comparison, m["id300"] < m["sw300"] and m["sw300"] < m["sw50"],
                 "id300 < sw300 < sw50")
    return comparison


def ablate_scalability(base: ExperimentSpec, runner: ExperimentRunner,
                       sizes: Sequence[int] = (2, 4, 8)) -> Comparison:
    """Identical configuration over growing node counts; wall time per round is reported only."""
    arms = {f"n{n}": replace(base, name=f"n{n}", nodes=n, k=min(base.k, n - 1)) for n in sizes}
    comparison = runner.compare("scalability", arms)
    times = {name: arm.mean_round_time for name, arm in comparison.arms.items()}
    smallest = min(sizes)
    for n in sizes:
        base_time = times[f"n{smallest}"]
        if base_time > 0:
            logger.info("n=%d: %.3fs per round, %.2fx the %d-node time for %.1fx the nodes",
                        n, times[f"n{n}"], times[f"n{n}"] / base_time, smallest, n / smallest)
    return comparison


SUITE_FUNCTIONS: Dict[str, Callable] = {
    "messages": ablate_messages,
    "connectivity": ablate_connectivity,
    "lifelong": ablate_lifelong,
    "scalability": lambda base, runner, assert_order=False: ablate_scalability(base, runner),
}


def run_suites(suites: Sequence[str], base: ExperimentSpec, out_dir: str,
               assert_order: bool = False) -> Dict[str, Comparison]:
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ConfigError(f"suite: unknown {sorted(unknown)}; expected any of {SUITES}")
    runner = ExperimentRunner(out_dir)
    return {suite: SUITE_FUNCTIONS[suite](base, runner, assert_order=assert_order) for suite in suites}


# -- frame dumps ---------------------------------------------------------------

def to_gray8(frame: np.ndarray) -> np.ndarray:
    """[0, 1] intensities to 8-bit levels, round(255 v)."""
    return np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str, frame: np.ndarray) -> None:
    Image.fromarray(to_gray8(frame)).save(path, format="PNG")


def dump_frames(ckpt_dir: str, dataset: Dataset, t: int, horizon: int, out_dir: str) -> Dict:
    """Ground truth and prediction images for x_{t+1..t+T} of every view, plus index.json.

    The network streams from step 0 so the rollout at `t` starts from a warm hidden state.
    """
    nodes, meta = load_network(ckpt_dir)
    if t < 0 or t + horizon >= dataset.length:
        raise ConfigError(f"t={t} with horizon {horizon} runs past the {dataset.length}-step dataset")
    models = {i: NodeModel(i, ckpt.neighbors, ckpt.config) for i, ckpt in nodes.items()}
    params = {i: ckpt.params for i, ckpt in nodes.items()}
    rollouts = {}
    for step, results in run_receding(models, params, dataset, 0, t + 1, horizon,
                                      meta.get("msg_mode", "emerged"), meta.get("seed", 0)):
        if step == t:
            rollouts = results
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i in sorted(rollouts):
        for tau in range(horizon):
            step = t + tau + 1
            for kind, frame in (("gt", dataset.frames[i][step]), ("pred", rollouts[i].predictions[tau])):
                name = f"view{i}_t{step:05d}_{kind}.png"
                save_png(os.path.join(out_dir, name), frame)
                files.append({"view": i, "t": step, "kind": kind, "file": name})
    index = {"checkpoint": os.path.abspath(ckpt_dir), "t": t, "horizon": horizon, "files": files}
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=2)
    logger.info("wrote %d frames to %s", len(files), out_dir)
    return index
