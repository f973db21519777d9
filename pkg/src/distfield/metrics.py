"""Image quality and consensus metrics, plus the per-round CSV log schema."""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(img_a, img_b) -> float:
    """Peak signal-to-noise ratio in dB for images with values in [0, 1].

    Identical images (zero MSE) return the 99 dB cap, which also bounds the
    result for near-identical pairs so logs stay finite.
    """
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _to_gray(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        return img.mean(axis=-1)
    return img


def ssim(img_a, img_b) -> float:
    """Structural similarity on luminance with a uniform 8x8 window.

    Windows slide with stride 1 and stay fully inside the image; constants
    are c1 = 0.01^2 and c2 = 0.03^2 at unit dynamic range.
    """
    a = _to_gray(img_a)
    b = _to_gray(img_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    w = SSIM_WINDOW
    if a.shape[0] < w or a.shape[1] < w:
        raise ValueError(f"image smaller than the {w}x{w} SSIM window")

    from numpy.lib.stride_tricks import sliding_window_view

    wa = sliding_window_view(a, (w, w)).reshape(-1, w * w)
    wb = sliding_window_view(b, (w, w)).reshape(-1, w * w)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    var_a = (wa**2).mean(axis=1) - mu_a**2
    var_b = (wb**2).mean(axis=1) - mu_b**2
    cov = (wa * wb).mean(axis=1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def consensus_residual(thetas, pairs=None) -> float:
    """Largest pairwise infinity-norm disagreement among parameter vectors.

    ``pairs`` restricts the comparison (e.g. to communication-graph edges);
    by default all pairs are compared.  A single vector has residual 0.
    """
    thetas = list(thetas)
    if len(thetas) == 0:
        raise ValueError("need at least one parameter vector")
    if len(thetas) == 1:
        return 0.0
    if pairs is None:
        pairs = [(i, j) for i in range(len(thetas)) for j in range(i + 1, len(thetas))]
    r = 0.0
    for (i, j) in pairs:
        r = max(r, float(np.max(np.abs(thetas[i] - thetas[j]))))
    return r


METRICS_FIELDS = [
    "round", "agent_id", "reference_id", "is_reference",
    "psnr", "ssim", "rot_err_deg", "trans_err",
    "alpha_err_max", "beta_err_max",
    "consensus_residual", "bytes_cumulative",
]


@dataclass
class RoundMetrics:
    """One CSV row: one agent's evaluation after a given round."""

    round: int
    agent_id: int
    reference_id: int
    is_reference: bool
    psnr: float
    ssim: float
    rot_err_deg: float
    trans_err: float
    alpha_err_max: float
    beta_err_max: float
    consensus_residual: float
    bytes_cumulative: int

    def row(self) -> dict:
        return asdict(self)


def write_metrics_csv(path, rows) -> None:
    """Write RoundMetrics (or equivalent dicts) with the fixed header."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow(r.row() if isinstance(r, RoundMetrics) else r)
