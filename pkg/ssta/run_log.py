"""Run log: a bounded JSON list of training events.

Each entry carries the event name, its status, and where in the run it
happened (epoch, stream step, node), plus event-specific details. The trainer,
the experiment runner and the monitor all go through :class:`RunLog`.
"""
import json
import logging
import math
import os
import threading
from datetime import datetime, timezone
from typing import Dict, List, Mapping, Optional

from ssta.metrics import MetricReport

logger = logging.getLogger(__name__)

EVENTS = (
    "epoch_finished",
    "checkpoint_saved",
    "resumed",
    "round_aborted",
    "stream_progress",
    "pretrained",
    "evaluated",
    "arm_finished",
)
STATUSES = ("success", "error", "warning", "debug")


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def _report_summary(report: MetricReport) -> Dict:
    mean = report.mean
    return {"mse": _finite_or_none(mean.mse), "psnr": _finite_or_none(mean.psnr),
            "ssim": _finite_or_none(mean.ssim),
            "views": {str(vid): _finite_or_none(m.mse) for vid, m in sorted(report.per_view.items())}}


class RunLog:
    """Appends events to `log_file`, keeping the newest `max_entries`."""

    def __init__(self, log_file: str, max_entries: int = 1000, create: bool = True):
        self.log_file = log_file
        self.max_entries = max_entries
        self._lock = threading.Lock()
        if create:
            self._ensure_log_file()

    def _ensure_log_file(self):
        if not os.path.exists(self.log_file):
            os.makedirs(os.path.dirname(os.path.abspath(self.log_file)), exist_ok=True)
            self._save_logs([])

    def _load_logs(self) -> List[Dict]:
        try:
            with open(self.log_file, "r") as f:
                return json.load(f)
        except (OSError, ValueError):
            return []

    def _save_logs(self, logs: List[Dict]):
        if len(logs) > self.max_entries:
            logs = logs[-self.max_entries:]
        temp_file = self.log_file + ".tmp"
        try:
            with open(temp_file, "w") as f:
                json.dump(logs, f, indent=2)
            os.replace(temp_file, self.log_file)
        except OSError as e:
            logger.error("Error saving run log %s: %s", self.log_file, e)

    def record(self, event: str, status: str = "success", message: Optional[str] = None,
               epoch: Optional[int] = None, step: Optional[int] = None, node: Optional[int] = None,
               details: Optional[Dict] = None) -> Dict:
        """Append one event. `node` is None for events about the whole network."""
        if event not in EVENTS:
            raise ValueError(f"unknown run log event {event!r}")
        if status not in STATUSES:
            raise ValueError(f"unknown run log status {status!r}")
        entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "event": event,
            "status": status,
            "epoch": epoch,
            "step": step,
            "node": node,
            "message": message,
            "details": details or {},
        }
        with self._lock:
            logs = self._load_logs()
            logs.append(entry)
            self._save_logs(logs)
        return entry

    def epoch_finished(self, epoch: int, total_epochs: int, losses: Mapping[int, float],
                       report: MetricReport, mean_round_time: float) -> Dict:
        return self.record(
            "epoch_finished", message=f"epoch {epoch}/{total_epochs}", epoch=epoch,
            details={"losses": {str(i): v for i, v in sorted(losses.items())},
                     "train_metrics": _report_summary(report), "mean_round_time": mean_round_time},
        )

    def round_aborted(self, epoch: Optional[int], step: int, error) -> Dict:
        """`error` is a RoundAborted; its diagnostics name the phase and the node."""
        diagnostics = {k: v for k, v in error.diagnostics.items() if k != "losses"}
        return self.record("round_aborted", "error", str(error), epoch=epoch, step=step,
                           node=diagnostics.get("node"), details=diagnostics)

    def evaluated(self, report: MetricReport, epoch: Optional[int] = None, split: str = "held-out") -> Dict:
        return self.record("evaluated", message=f"{split} mse {report.mean.mse:.6g}", epoch=epoch,
                           details={"split": split, **_report_summary(report)})

    def get_logs(self, limit: int = 100, node: Optional[str] = None, event: Optional[str] = None,
                 status: Optional[str] = None, epoch: Optional[int] = None,
                 include_debug: bool = True) -> List[Dict]:
        """Newest first, optionally filtered."""
        logs = self._load_logs()
        if node is not None:
            logs = [log for log in logs if log.get("node") is not None and str(log["node"]) == str(node)]
        if event:
            logs = [log for log in logs if log.get("event") == event]
        if status:
            logs = [log for log in logs if log.get("status") == status]
        if epoch is not None:
            logs = [log for log in logs if log.get("epoch") == epoch]
        if not include_debug:
            logs = [log for log in logs if log.get("status") != "debug"]
        logs.sort(key=lambda x: x.get("timestamp", ""), reverse=True)
        return logs[:limit]

    def get_stats(self) -> Dict:
        """Progress summary: last finished epoch, its losses, the last evaluation, aborted rounds."""
        logs = self._load_logs()
        event_counts: Dict[str, int] = {}
        for log in logs:
            name = log.get("event", "unknown")
            event_counts[name] = event_counts.get(name, 0) + 1
        epochs = [log for log in logs if log.get("event") == "epoch_finished" and log.get("status") == "success"]
        evals = [log for log in logs if log.get("event") == "evaluated"]
        aborted = [log for log in logs if log.get("event") == "round_aborted"]
        last_epoch = max(epochs, key=lambda log: log["epoch"]) if epochs else None
        return {
            "events": len(logs),
            "errors": len([log for log in logs if log.get("status") == "error"]),
            "event_counts": event_counts,
            "last_epoch": last_epoch["epoch"] if last_epoch else None,
            "last_losses": last_epoch["details"].get("losses") if last_epoch else None,
            "last_eval": evals[-1]["details"] if evals else None,
            "aborted_rounds": [{"epoch": log.get("epoch"), "step": log.get("step"), "node": log.get("node"),
                                "phase": log.get("details", {}).get("phase")} for log in aborted],
            "last_activity": logs[-1].get("timestamp") if logs else None,
        }
