"""PSNR and SSIM on ``[3,H,W]`` images in [0, 1], evaluated on the 0..255 scale."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataIOError, ShapeError
from .rain import load_image

log = logging.getLogger(__name__)

MAX_VALUE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
C1 = (K1 * MAX_VALUE) ** 2
C2 = (K2 * MAX_VALUE) ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a * MAX_VALUE, b * MAX_VALUE


def psnr(a, b) -> float:
    """10 log10(255^2 / MSE) with one MSE over all channels; ``inf`` when identical."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(MAX_VALUE ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, valid region only
    x = sliding_window_view(x, g.size, axis=-2) @ g
    return sliding_window_view(x, g.size, axis=-1) @ g


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ConfigError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {a.shape[-2]}x{a.shape[-1]}")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over the valid map of every channel (11x11 Gaussian, sigma 1.5)."""
    return float(np.mean(ssim_map(a, b)))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)      # (name, psnr, ssim)
    unmatched: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else math.nan

    def add(self, name, a, b):
        self.rows.append((name, psnr(a, b), ssim(a, b)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "psnr_db", "ssim"])
        for name, p, s in self.rows:
            w.writerow([name, "inf" if math.isinf(p) else repr(p), repr(s)])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    def table(self) -> str:
        width = max([len("name")] + [len(r[0]) for r in self.rows])
        lines = [f"{'name':<{width}}  {'PSNR(dB)':>9}  {'SSIM':>6}"]
        for name, p, s in self.rows:
            lines.append(f"{name:<{width}}  {_fmt_db(p):>9}  {s:6.4f}")
        lines.append(f"{'mean':<{width}}  {_fmt_db(self.mean_psnr):>9}  {self.mean_ssim:6.4f}")
        if self.unmatched:
            lines.append(f"excluded {len(self.unmatched)} unmatched: {', '.join(self.unmatched)}")
        return "\n".join(lines)


def _fmt_db(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.2f}"


def read_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["name", "psnr_db", "ssim"]:
        raise DataIOError("not an evaluation CSV (bad header)")
    return [(n, float(p), float(s)) for n, p, s in rows[1:]]


def evaluate_pairs(named) -> EvalReport:
    """``named`` yields ``(name, derained, clean)``; rows are sorted by name."""
    report = EvalReport()
    for name, a, b in sorted(named, key=lambda t: t[0]):
        report.add(name, a, b)
    return report


def evaluate_dir(derained_dir, clean_dir) -> EvalReport:
    """Score every ``<stem>.png`` present in both directories."""
    derained_dir, clean_dir = Path(derained_dir), Path(clean_dir)
    for d in (derained_dir, clean_dir):
        if not d.is_dir():
            raise DataIOError(f"not a directory: {d}")
    a = {p.stem: p for p in derained_dir.glob("*.png")}
    b = {p.stem: p for p in clean_dir.glob("*.png")}
    report = EvalReport(unmatched=sorted(set(a) ^ set(b)))
    if report.unmatched:
        log.warning("excluding %d unmatched stems", len(report.unmatched))
    for stem in sorted(set(a) & set(b)):
        x, y = load_image(a[stem]), load_image(b[stem])
        if x.shape != y.shape:
            raise DataIOError(f"size mismatch for {stem}: {a[stem]} {x.shape} vs {b[stem]} {y.shape}")
        report.add(stem, x, y)
    return report
