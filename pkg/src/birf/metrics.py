"""PSNR and SSIM."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0


def _check(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def mse_to_psnr(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100 dB."""
    pred, target = _check(pred, target)
    return mse_to_psnr(float(np.mean((pred - target) ** 2)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    h = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0), win, axis=1)
    return out[h:-h, h:-h]


def ssim(pred: np.ndarray, target: np.ndarray, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity; Gaussian window, per channel, averaged.

    Local statistics are only taken where the window fits inside the image.
    """
    pred, target = _check(pred, target)
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    if min(pred.shape[:2]) < win_size:
        raise ValueError(f"image {pred.shape[:2]} is smaller than the {win_size}x{win_size} SSIM window")
    win = _gaussian_window(win_size, sigma)
    c1, c2 = k1**2, k2**2
    vals = []
    for c in range(pred.shape[-1]):
        x, y = pred[..., c], target[..., c]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def add(self, name: str, pred: np.ndarray, target: np.ndarray) -> None:
        self.names.append(name)
        self.psnr.append(psnr(pred, target))
        self.ssim.append(ssim(pred, target))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        return {
            "images": [{"name": n, "psnr": p, "ssim": s} for n, p, s in zip(self.names, self.psnr, self.ssim)],
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim},
        }

    def to_text(self) -> str:
        lines = [f"{'image':<16} {'psnr_db':>10} {'ssim':>8}"]
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            lines.append(f"{n:<16} {p:>10.4f} {s:>8.5f}")
        lines.append(f"{'mean':<16} {self.mean_psnr:>10.4f} {self.mean_ssim:>8.5f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
