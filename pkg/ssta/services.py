"""Shared state of the run monitor (one instance per process)."""
import csv
import json
import math
import os
from typing import Dict, List, Optional

from ssta.run_log import RunLog
from ssta.settings import Settings

APP_VERSION = "0.3.0"

_services: Optional["MonitorServices"] = None


class MonitorServices:
    """Read-only access to a directory of run outputs."""

    def __init__(self, runs_dir: str):
        self.runs_dir = os.path.abspath(runs_dir)
        self.settings = Settings(config_file=os.path.join(self.runs_dir, "settings.json"))

    @property
    def runs_dir_ok(self) -> bool:
        return os.path.isdir(self.runs_dir)

    def run_path(self, name: str) -> Optional[str]:
        """Directory of run `name`, or None if there is no such run."""
        path = os.path.abspath(os.path.join(self.runs_dir, name))
        if os.path.dirname(path) != self.runs_dir:
            return None
        if not os.path.isfile(os.path.join(path, "metrics.csv")):
            return None
        return path

    def list_runs(self) -> List[Dict]:
        if not self.runs_dir_ok:
            return []
        runs = []
        for name in sorted(os.listdir(self.runs_dir)):
            path = self.run_path(name)
            if path is None:
                continue
            runs.append({"name": name, "completed_epochs": self.completed_epochs(path),
                         "has_eval": os.path.isfile(os.path.join(path, "eval.csv"))})
        return runs

    @staticmethod
    def completed_epochs(path: str) -> int:
        try:
            with open(os.path.join(path, "checkpoints", "network.json")) as f:
                return int(json.load(f).get("meta", {}).get("epoch", 0))
        except (OSError, ValueError):
            return 0

    @staticmethod
    def metric_rows(path: str, node: Optional[str] = None) -> List[Dict]:
        with open(os.path.join(path, "metrics.csv"), newline="") as f:
            rows = list(csv.DictReader(f))
        if node is not None:
            rows = [row for row in rows if row["node"] == str(node)]
        return [{"epoch": int(row["epoch"]), "node": int(row["node"]),
                 **{key: _json_number(row[key]) for key in ("mse", "psnr", "ssim", "loss")}} for row in rows]

    def run_log(self, path: str) -> RunLog:
        return RunLog(os.path.join(path, "run_log.json"),
                      max_entries=self.settings.get("max_run_log_entries", 1000), create=False)


def init_services(runs_dir: str) -> MonitorServices:
    """Initialize singleton services (call once at app startup)."""
    global _services
    _services = MonitorServices(runs_dir=runs_dir)
    return _services


def get_services() -> MonitorServices:
    if _services is None:
        raise RuntimeError("Services not initialized; call init_services() first")
    return _services


def _json_number(text: str) -> Optional[float]:
    """Non-finite values (identical frames, frames too small for SSIM) become null."""
    value = float(text)
    return value if math.isfinite(value) else None
