"""RMSE, SSIM and PSNR on fields and trajectories."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .fields import ScalarField

SSIM_SIGMA = 1.5
SSIM_WIN = 11
K1, K2 = 0.01, 0.03


def _arr(a) -> np.ndarray:
    return np.asarray(a.values if isinstance(a, ScalarField) else a, dtype=float)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def rmse(a, b) -> float:
    return math.sqrt(mse(a, b))


def psnr(a, b, data_range: float) -> float:
    """``10 log10(L^2 / mse)``; identical inputs give ``inf``."""
    if not data_range > 0:
        raise ValueError("data range must be positive")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def ssim(a, b, data_range: float) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), periodic wrap-around.

    Local moments use the normalised window weights directly (no sample
    covariance correction); ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``.
    """
    if not data_range > 0:
        raise ValueError("data range must be positive")
    a, b = _pair(a, b)
    # truncate chosen so the kernel radius is exactly (SSIM_WIN - 1) / 2
    truncate = ((SSIM_WIN - 1) / 2) / SSIM_SIGMA

    def filt(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="wrap", truncate=truncate)

    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    rmse: float
    ssim: float
    psnr: float
    data_range: float
    rmse_series: list[float] = field(default_factory=list)
    ssim_series: list[float] = field(default_factory=list)
    psnr_series: list[float] = field(default_factory=list)

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)

    def to_dict(self) -> dict:
        def enc(x):
            return x if math.isfinite(x) else "inf"

        return {
            "rmse": self.rmse,
            "ssim": self.ssim,
            "psnr": enc(self.psnr),
            "psnr_infinite": self.psnr_infinite,
            "data_range": self.data_range,
            "steps": len(self.rmse_series),
        }

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / "metrics.csv"
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "rmse", "ssim", "psnr"])
            for i, row in enumerate(zip(self.rmse_series, self.ssim_series, self.psnr_series)):
                w.writerow([i, *(repr(v) for v in row)])
        json_path = directory / "metrics.json"
        json_path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return csv_path, json_path


def evaluate_rollout(pred: Sequence, ref: Sequence, data_range: float | None = None) -> MetricReport:
    """Per-step and step-averaged metrics.

    ``data_range`` defaults to ``max(ref) - min(ref)`` over the whole reference.
    The aggregate PSNR is the mean of the per-step values (``inf`` if any step
    is exact).
    """
    if len(pred) != len(ref):
        raise ValueError(f"trajectory length mismatch: {len(pred)} vs {len(ref)}")
    if not ref:
        raise ValueError("empty trajectories")
    P = [_arr(p) for p in pred]
    R = [_arr(r) for r in ref]
    for p, r in zip(P, R):
        if p.shape != r.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {r.shape}")
    if data_range is None:
        stacked = np.stack(R)
        data_range = float(stacked.max() - stacked.min())
        if data_range == 0:
            data_range = 1.0
    r_s = [rmse(p, r) for p, r in zip(P, R)]
    s_s = [ssim(p, r, data_range) for p, r in zip(P, R)]
    p_s = [psnr(p, r, data_range) for p, r in zip(P, R)]
    return MetricReport(float(np.mean(r_s)), float(np.mean(s_s)), float(np.mean(p_s)), data_range, r_s, s_s, p_s)
