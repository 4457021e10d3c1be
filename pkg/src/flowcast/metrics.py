"""Volumetric image-quality metrics and the last-context-image baseline.

Conventions (recorded in report metadata so cross-implementations can
match): NRMSE is RMSE divided by the ground-truth intensity range; PSNR is
10*log10(range^2 / mse), capped for vanishing error; SSIM is the mean
local similarity over a 7x7x7 uniform window with sample-covariance
normalization, constants C1 = (0.01*L)^2 and C2 = (0.03*L)^2, and
L = ground-truth range unless an explicit data range is passed. All three
are computed volumetrically in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DataError, ShapeError
from .series import Volume, VolumeSequence

SSIM_WINDOW = 7
PSNR_CAP_DB = 100.0
RANGE_FLOOR = 1e-8


def _as_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred.voxels if isinstance(pred, Volume) else pred, dtype=np.float64)
    g = np.asarray(gt.voxels if isinstance(gt, Volume) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"metric inputs differ in shape: {p.shape} vs {g.shape}")
    return p, g


def _range(g: np.ndarray) -> float:
    return float(g.max() - g.min())


def nrmse(pred, gt) -> float:
    """Root mean squared error normalized by the ground-truth range.

    A constant ground truth has zero range; the divisor falls back to 1 so
    the value stays finite (plain RMSE in that case).
    """
    p, g = _as_pair(pred, gt)
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    rng = _range(g)
    return rmse / (rng if rng > 0 else 1.0)


def psnr(pred, gt, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB against the ground-truth range,
    clamped at ``cap_db`` (returned exactly at zero error)."""
    p, g = _as_pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return cap_db
    rng = max(_range(g), RANGE_FLOOR)
    return min(10.0 * np.log10(rng * rng / mse), cap_db)


def ssim3d(pred, gt, data_range: float | None = None, window: int = SSIM_WINDOW) -> float:
    """Mean local structural similarity over a cubic uniform window.

    Local means/variances/covariance come from a ``window``-wide uniform
    filter (sample-covariance normalization); the border where the window
    would leave the volume is cropped before averaging. ``data_range``
    defaults to the ground-truth range, floored to keep the constants
    finite for constant images.
    """
    p, g = _as_pair(pred, gt)
    if min(p.shape) < window:
        raise ShapeError(f"volume {p.shape} smaller than the {window}^3 window")
    if data_range is None:
        data_range = max(_range(g), RANGE_FLOOR)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    n = window**3
    cov_norm = n / (n - 1)
    filt = lambda a: uniform_filter(a, size=window)
    mu_p = filt(p)
    mu_g = filt(g)
    var_p = cov_norm * (filt(p * p) - mu_p * mu_p)
    var_g = cov_norm * (filt(g * g) - mu_g * mu_g)
    cov = cov_norm * (filt(p * g) - mu_p * mu_g)
    # The difference-of-squares form leaves ~eps*mu^2 rounding noise where a
    # window is constant; that noise would swamp c2 when the data range is at
    # the floor, so moments below the noise scale are exactly zero.
    tiny = 1e-12 * max(1.0, float(np.max(p * p)), float(np.max(g * g)))
    for moment in (var_p, var_g, cov):
        moment[np.abs(moment) < tiny] = 0.0

    sim = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2)
    )
    pad = (window - 1) // 2
    core = sim[tuple(slice(pad, s - pad) for s in sim.shape)]
    return float(core.mean())


def metric_triple(pred, gt) -> dict[str, float]:
    return {"nrmse": nrmse(pred, gt), "ssim": ssim3d(pred, gt), "psnr": psnr(pred, gt)}


def lci(seq: VolumeSequence, observed: list[bool] | None = None) -> Volume:
    """Last-context-image baseline: the observed context with the largest
    timestamp (timestamps are strictly increasing, so the last observed)."""
    if observed is None:
        observed = [True] * seq.n_contexts
    if len(observed) != seq.n_contexts:
        raise ShapeError("observed flags must match the context count")
    idx = [i for i, flag in enumerate(observed) if flag]
    if not idx:
        raise DataError(f"no observed context for patient {seq.patient_id}")
    return seq.contexts[idx[-1]][0]
