"""Stealthiness metrics for clean vs. poisoned event-frame tensors."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from snnbd.errors import EmptyDataset, MixedShapes, ShapeMismatch

SSIM_WINDOW = 8
K1, K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical.

    Counts have no fixed ceiling, so ``max_value`` defaults to the largest
    cell value across both tensors.
    """
    a, b = _pair(a, b)
    if max_value is None:
        max_value = float(max(a.max(initial=0.0), b.max(initial=0.0)))
    elif max_value <= 0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10 * math.log10(max_value ** 2 / err)


def _window_sums(x: np.ndarray, wh: int, ww: int) -> np.ndarray:
    """Sums over every ``wh x ww`` window fully inside the last two axes."""
    c = np.cumsum(np.cumsum(x, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    return c[..., wh:, ww:] - c[..., :-wh, ww:] - c[..., wh:, :-ww] + c[..., :-wh, :-ww]


def ssim_map(a, b, data_range: float | None = None, window: int = SSIM_WINDOW) -> np.ndarray:
    """Local SSIM for each valid window position of each ``(H, W)`` image."""
    a, b = _pair(a, b)
    H, W = a.shape[-2:]
    wh, ww = min(window, H), min(window, W)
    n = wh * ww
    if data_range is None:
        data_range = float(max(a.max(), b.max()) - min(a.min(), b.min()))
    if data_range == 0:
        data_range = 1.0
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _window_sums(a, wh, ww) / n
    mu_b = _window_sums(b, wh, ww) / n
    # unbiased (N - 1) window statistics
    cov_norm = n / (n - 1) if n > 1 else 1.0
    var_a = (_window_sums(a * a, wh, ww) / n - mu_a * mu_a) * cov_norm
    var_b = (_window_sums(b * b, wh, ww) / n - mu_b * mu_b) * cov_norm
    cov = (_window_sums(a * b, wh, ww) / n - mu_a * mu_b) * cov_norm
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float | None = None) -> float:
    """Mean SSIM over 8x8 valid windows and over every frame-channel image."""
    return float(np.mean(ssim_map(a, b, data_range)))


def _entropy_bits(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def _stack(dataset) -> np.ndarray:
    frames = getattr(dataset, "frames", dataset)
    if isinstance(frames, (list, tuple)):
        shapes = {np.shape(f) for f in frames}
        if len(shapes) > 1:
            raise MixedShapes(f"samples have differing shapes: {sorted(shapes)}")
        frames = np.stack(frames) if frames else np.zeros((0, 1, 2, 1, 1))
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 5:
        raise MixedShapes(f"expected (N, T, 2, H, W) frames, got shape {frames.shape}")
    return frames


def pixel_value_entropy(dataset, bins: int = 64) -> float:
    """Entropy of the histogram of all cell values, normalised by ``log2(bins)``."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    values = np.asarray(getattr(dataset, "frames", dataset), dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyDataset("no pixel values")
    top = values.max()
    if top <= 0:
        return 0.0
    counts, _ = np.histogram(values, bins=bins, range=(0.0, top))
    return _entropy_bits(counts) / math.log2(bins)


def mean_activations_per_frame(dataset) -> np.ndarray:
    """``(T, 2)`` mean over samples of the total count in each frame-channel."""
    frames = _stack(dataset)
    if len(frames) == 0:
        raise EmptyDataset("no samples")
    return frames.sum(axis=(3, 4)).mean(axis=0)


def _hist_entropy(values: np.ndarray, bins: int) -> float:
    lo, hi = values.min(), values.max()
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    return _entropy_bits(counts)


def frame_activation_entropy(dataset, bins: int = 64) -> np.ndarray:
    """``(T, 2)`` entropy in bits of per-sample activation totals, across samples."""
    frames = _stack(dataset)
    if len(frames) == 0:
        raise EmptyDataset("no samples")
    totals = frames.sum(axis=(3, 4))  # (N, T, 2)
    T, C = totals.shape[1:]
    return np.array([[_hist_entropy(totals[:, t, c], bins) for c in range(C)] for t in range(T)])


def sample_frame_entropy(frames, bins: int = 64) -> np.ndarray:
    """``(T, 2)`` entropy in bits of cell values within each frame of one sample."""
    frames = np.asarray(frames, dtype=np.float64)
    T, C = frames.shape[:2]
    return np.array([[_hist_entropy(frames[t, c].ravel(), bins) for c in range(C)] for t in range(T)])


@dataclass
class StealthReport:
    mean_mse: float
    psnr_db: float
    ssim: float
    pixel_entropy_clean: float
    pixel_entropy_poisoned: float
    activation_curves: dict
    frame_entropy_curves: dict

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return json.dumps(d, indent=2)

    def write_curves_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "variant", "frame", "channel", "value"])
            for metric, curves in (("mean_activations", self.activation_curves),
                                   ("frame_entropy", self.frame_entropy_curves)):
                for variant, curve in curves.items():
                    for t, row in enumerate(curve):
                        for c, v in enumerate(row):
                            w.writerow([metric, variant, t, "ON" if c == 0 else "OFF", v])


def stealth_report(clean, poisoned, bins: int = 64, mix_ratio: float = 1.0) -> StealthReport:
    """Compare matched clean/poisoned sets.

    ``mix_ratio`` is the number of poisoned samples per clean sample in the
    mixed set used for the curves (1.0 is a 1:1 mix, 0.1 is one in ten).
    """
    clean = _stack(clean)
    poisoned = _stack(poisoned)
    if clean.shape != poisoned.shape:
        raise ShapeMismatch(f"clean {clean.shape} vs poisoned {poisoned.shape}")
    if len(clean) == 0:
        raise EmptyDataset("no samples")
    n_mix = max(1, int(round(mix_ratio * len(clean))))
    mixed = np.concatenate([clean, poisoned[:n_mix]])
    sets = {"clean": clean, "poisoned": poisoned, "mixed": mixed}
    return StealthReport(
        mean_mse=mse(clean, poisoned),
        psnr_db=psnr(clean, poisoned),
        ssim=float(np.mean([ssim(c, p) for c, p in zip(clean, poisoned)])),
        pixel_entropy_clean=pixel_value_entropy(clean, bins),
        pixel_entropy_poisoned=pixel_value_entropy(poisoned, bins),
        activation_curves={k: mean_activations_per_frame(v).tolist() for k, v in sets.items()},
        frame_entropy_curves={k: frame_activation_entropy(v, bins).tolist() for k, v in sets.items()},
    )
