"""
Baseline synchrony and per-person measures: windowed cross-correlation
duration, 1-D earth mover's distance, AU durations / intensities, and
the MEA-based univariate variants.
"""
from __future__ import annotations

import math
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import wasserstein_distance

from .core import K_AU, DegenerateSessionError, SchemaError, WCCParams, get_logger
from .session import Role, Session
from .warping import AlignmentConstraints, ddtw_align, wp_meddev

logger = get_logger("baselines")

AU_VISIBLE_THRESHOLD = 1.0
ZERO_VARIANCE = 1e-12


def _frames(seconds: float, f_s: float) -> int:
    return int(math.floor(seconds * f_s + 1e-6))


def _standardized_windows(x: np.ndarray, width: int) -> np.ndarray:
    """Every length-``width`` window of x, centred and scaled to unit norm; zero rows if flat."""
    windows = sliding_window_view(x, width)
    centred = windows - windows.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1, keepdims=True)
    flat = norms[:, 0] <= ZERO_VARIANCE * math.sqrt(width)
    norms[flat] = 1.0
    out = centred / norms
    out[flat] = 0.0
    return out


def wcc_duration(x1, x2, params: WCCParams, f_s: float) -> float:
    """Fraction of sliding windows whose peak |lagged Pearson r| reaches the threshold."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.ndim != 1:
        raise ValueError("wcc_duration needs two 1-D signals of equal length")
    n = x1.size
    width = max(2, _frames(params.window_seconds, f_s))
    step = max(1, _frames(params.increment_seconds, f_s))
    max_lag = _frames(params.max_lag_seconds, f_s)
    if n < width:
        raise DegenerateSessionError(f"session of {n} frames is shorter than one {width}-frame window")

    z1 = _standardized_windows(x1, width)
    z2 = _standardized_windows(x2, width)
    starts = np.arange(0, n - width + 1, step)
    a = z1[starts]
    peak = np.zeros(starts.size)
    for lag in range(-max_lag, max_lag + 1):
        shifted = starts + lag
        valid = (shifted >= 0) & (shifted <= n - width)
        if not valid.any():
            continue
        r = np.abs(np.einsum("ij,ij->i", a[valid], z2[shifted[valid]]))
        peak[valid] = np.maximum(peak[valid], r)
    # 1e-12 slack keeps r == 1 windows from rounding below the threshold
    return float(np.mean(peak + 1e-12 >= params.sync_threshold))


def emd_1d(x1, x2) -> float:
    """Earth mover's distance between two nonnegative signals as unit-mass distributions."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.ndim != 1:
        raise ValueError("emd_1d needs two 1-D signals of equal length")
    if np.any(x1 < 0) or np.any(x2 < 0):
        raise ValueError("emd_1d is defined for nonnegative signals only")
    mass1, mass2 = x1.sum(), x2.sum()
    if mass1 == 0 and mass2 == 0:
        return 0.0
    if mass1 == 0 or mass2 == 0:
        return float(x1.size)
    positions = np.arange(x1.size, dtype=float)
    return float(wasserstein_distance(positions, positions, u_weights=x1, v_weights=x2))


def au_duration_features(session: Session, role: Role | str) -> np.ndarray:
    return np.mean(session.subject(role).au > AU_VISIBLE_THRESHOLD, axis=1)


def au_intensity_features(session: Session, role: Role | str) -> np.ndarray:
    return np.mean(session.subject(role).au, axis=1)


def session_wcc_features(session: Session, params: WCCParams) -> np.ndarray:
    return np.array([
        wcc_duration(session.h.au[k], session.t.au[k], params, session.frame_rate_hz)
        for k in range(K_AU)
    ])


def session_emd_features(session: Session) -> np.ndarray:
    # reconstructions can dip slightly below zero; mass must stay nonnegative
    h = np.clip(session.h.au, 0.0, None)
    t = np.clip(session.t.au, 0.0, None)
    return np.array([emd_1d(h[k], t[k]) for k in range(K_AU)])


def mea_sync_features(
    session: Session,
    method: Literal["wcc_duration", "wp_meddev"],
    *,
    params: WCCParams | None = None,
    constraints: AlignmentConstraints | None = None,
) -> float:
    if not session.has_mea:
        raise SchemaError(f"session {session.session_id} has no MEA series for both subjects")
    if method == "wp_meddev":
        constraints = constraints or AlignmentConstraints(5.0, session.frame_rate_hz)
        return wp_meddev(ddtw_align(session.h.mea, session.t.mea, constraints))
    if method == "wcc_duration":
        return wcc_duration(session.h.mea, session.t.mea, params or WCCParams(), session.frame_rate_hz)
    raise ValueError(f"unknown MEA method {method!r}")
