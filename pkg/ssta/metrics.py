"""Frame quality metrics: MSE, PSNR and single-scale SSIM."""
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from skimage.metrics import structural_similarity

from ssta.errors import ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0


def _check_pair(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_pair("mse", a, b)
    diff = a - b
    return float(np.mean(diff * diff))


def psnr_from_mse(err: float, max_val: float = 1.0) -> float:
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / err)


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical frames."""
    return psnr_from_mse(mse(a, b), max_val)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over every position where the 11x11 Gaussian window fits inside the frame.

    skimage computes the map with reflected borders and crops the half-window
    margin before averaging, which leaves exactly the valid positions.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_pair("ssim", a, b)
    if a.ndim != 2 or a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"ssim: frame {list(a.shape)} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window; "
            f"need at least [{SSIM_WINDOW}, {SSIM_WINDOW}]"
        )
    return float(structural_similarity(a, b, data_range=DYNAMIC_RANGE, gaussian_weights=True,
                                       sigma=SSIM_SIGMA, use_sample_covariance=False,
                                       K1=SSIM_K1, K2=SSIM_K2))


def ssim_or_nan(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM, or NaN for frames too small to hold one window."""
    if min(np.shape(a)) < SSIM_WINDOW:
        return math.nan
    return ssim(a, b)


@dataclass
class ViewMetrics:
    mse: float
    psnr: float
    ssim: float
    lpips: Optional[float] = None

    def as_row(self) -> Dict:
        return {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim,
                "lpips": "" if self.lpips is None else self.lpips}


@dataclass
class MetricReport:
    per_view: Dict[int, ViewMetrics] = field(default_factory=dict)

    @property
    def mean(self) -> ViewMetrics:
        views = list(self.per_view.values())
        if not views:
            return ViewMetrics(math.nan, math.nan, math.nan)
        mean_mse = float(np.mean([v.mse for v in views]))
        return ViewMetrics(
            mean_mse,
            psnr_from_mse(mean_mse),
            float(np.mean([v.ssim for v in views])),
        )

    def to_dict(self) -> Dict:
        return {
            "views": {str(vid): m.as_row() for vid, m in sorted(self.per_view.items())},
            "mean": self.mean.as_row(),
        }


class MetricAccumulator:
    """Collects (prediction, target) frame pairs per view and averages them.

    MSE and SSIM are averaged over frames. PSNR is taken from the averaged MSE,
    so one exact frame does not turn a view's PSNR into inf.
    """

    def __init__(self, with_ssim: bool = True):
        self.with_ssim = with_ssim
        self._rows: Dict[int, List[tuple]] = {}

    def add(self, view_id: int, prediction: np.ndarray, target: np.ndarray) -> None:
        s = ssim_or_nan(prediction, target) if self.with_ssim else math.nan
        self._rows.setdefault(view_id, []).append((mse(prediction, target), s))

    def add_sequence(self, view_id: int, predictions: np.ndarray, targets: np.ndarray) -> None:
        for pred, target in zip(predictions, targets):
            self.add(view_id, pred, target)

    def count(self, view_id: int) -> int:
        return len(self._rows.get(view_id, []))

    def report(self) -> MetricReport:
        report = MetricReport()
        for vid, rows in sorted(self._rows.items()):
            arr = np.array(rows, dtype=np.float64)
            mean_mse = float(arr[:, 0].mean())
            report.per_view[vid] = ViewMetrics(mean_mse, psnr_from_mse(mean_mse), float(arr[:, 1].mean()))
        return report


def write_report_csv(path: str, report: MetricReport) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["view", "mse", "psnr", "ssim", "lpips"])
        writer.writeheader()
        for vid, m in sorted(report.per_view.items()):
            writer.writerow({"view": vid, **m.as_row()})
        writer.writerow({"view": "mean", **report.mean.as_row()})


def format_report(report: MetricReport) -> str:
    lines = [f"{'view':>6}  {'mse':>10}  {'psnr':>8}  {'ssim':>7}"]
    rows = [(str(vid), m) for vid, m in sorted(report.per_view.items())] + [("mean", report.mean)]
    for label, m in rows:
        lines.append(f"{label:>6}  {m.mse:>10.6f}  {m.psnr:>8.3f}  {m.ssim:>7.4f}")
    return "\n".join(lines)
