"""Image-quality metrics: L1, PSNR and single-scale SSIM.

Images are (H, W, 3) arrays with values in [0, 1].
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
LUMA = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """``10 log10(1 / MSE)``, capped at 99 dB for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.asarray(LUMA)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable valid-mode correlation (the window is symmetric)
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def ssim(a, b, data_range=1.0):
    """Mean SSIM over all valid 11x11 window positions of the luminance."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def crop(img, box):
    x0, y0, x1, y1 = box
    return np.asarray(img)[y0:y1, x0:x1]


@dataclass
class MetricReport:
    """Per-image metrics for full frames and foreground-box crops."""

    rows: list = field(default_factory=list)
    label: str = ""

    def add(self, frame, pred, target, box=None):
        row = {"frame": frame, "l1": l1(pred, target), "psnr": psnr(pred, target), "ssim": ssim(pred, target)}
        if box is not None:
            cp, ct = crop(pred, box), crop(target, box)
            row["l1_crop"] = l1(cp, ct)
            row["psnr_crop"] = psnr(cp, ct)
            row["ssim_crop"] = ssim(cp, ct) if min(ct.shape[:2]) >= SSIM_WINDOW else float("nan")
        self.rows.append(row)
        return row

    def mean(self, key):
        vals = [r[key] for r in self.rows if key in r and np.isfinite(r[key])]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def columns(self):
        cols = ["frame", "l1", "psnr", "ssim"]
        if any("l1_crop" in r for r in self.rows):
            cols += ["l1_crop", "psnr_crop", "ssim_crop"]
        return cols

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = self.columns
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([r.get(c, "") if c == "frame" else f"{r.get(c, float('nan')):.6f}" for c in cols])
        writer.writerow(["mean"] + [f"{self.mean(c):.6f}" for c in cols[1:]])
        return buf.getvalue()

    def table(self):
        cols = self.columns
        lines = [" ".join(f"{c:>10}" for c in cols)]
        for r in self.rows:
            lines.append(" ".join(
                f"{r[c]:>10}" if c == "frame" else f"{r.get(c, float('nan')):>10.4f}" for c in cols))
        lines.append(" ".join([f"{'mean':>10}"] + [f"{self.mean(c):>10.4f}" for c in cols[1:]]))
        lines.append("LPIPS: not computed (needs a pretrained perceptual network)")
        return "\n".join(lines)
