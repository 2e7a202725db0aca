"""
Banded dynamic time warping (DTW) and derivative DTW on paired AU signals,
plus the warping-path synchrony features extracted from them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Literal, Tuple

import numpy as np
from numba import njit

from .core import AU_COLUMNS, K_AU, AlignmentError, DegenerateSessionError, get_logger
from .session import Session

logger = get_logger("warping")

SyncMethod = Literal["wp_ddtw", "wp_dtw", "dist_ddtw", "dist_dtw"]
SYNC_METHODS: Tuple[str, ...] = ("wp_ddtw", "wp_dtw", "dist_ddtw", "dist_dtw")
MEASURES = {
    "wp_ddtw": "wp_meddev",
    "wp_dtw": "wp_meddev",
    "dist_ddtw": "ddtw_distance",
    "dist_dtw": "dtw_distance",
}

# move codes, in tie-break preference order
DIAGONAL, STEP_V, STEP_U = 0, 1, 2


@dataclass(frozen=True)
class AlignmentConstraints:
    theta_seconds: float
    frame_rate_hz: float

    def __post_init__(self) -> None:
        if self.theta_seconds <= 0:
            raise ValueError("theta_seconds must be positive")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")

    @property
    def band_frames(self) -> int:
        return int(math.floor(self.theta_seconds * self.frame_rate_hz + 1e-6))


@dataclass(frozen=True, eq=False)
class WarpingPath:
    """Aligned 0-based index pairs (u[t], v[t]) and the accumulated L1 cost."""
    u: np.ndarray
    v: np.ndarray
    total_cost: float

    def __len__(self) -> int:
        return len(self.u)

    @property
    def deviation(self) -> np.ndarray:
        return np.abs(self.v - self.u)


@dataclass(frozen=True, eq=False)
class SyncFeatureVector:
    session_id: str
    measure: str
    values: np.ndarray


@njit(cache=True)
def _banded_dtw(a, b, band):
    n = a.shape[0]
    width = 2 * band + 1
    acc = np.full((n, width), np.inf)
    move = np.full((n, width), -1, dtype=np.int8)
    acc[0, band] = abs(a[0] - b[0])
    for i in range(n):
        lo = max(0, i - band)
        hi = min(n - 1, i + band)
        for j in range(lo, hi + 1):
            if i == 0 and j == 0:
                continue
            c = j - i + band
            best = np.inf
            best_move = -1
            if i > 0 and j > 0:
                if acc[i - 1, c] < best:
                    best = acc[i - 1, c]
                    best_move = 0
            if j > 0 and c > 0:
                if acc[i, c - 1] < best:
                    best = acc[i, c - 1]
                    best_move = 1
            if i > 0 and c < width - 1:
                if acc[i - 1, c + 1] < best:
                    best = acc[i - 1, c + 1]
                    best_move = 2
            acc[i, c] = best + abs(a[i] - b[j])
            move[i, c] = best_move

    u = np.empty(2 * n - 1, dtype=np.int64)
    v = np.empty(2 * n - 1, dtype=np.int64)
    i = n - 1
    j = n - 1
    k = 0
    while True:
        u[k] = i
        v[k] = j
        k += 1
        if i == 0 and j == 0:
            break
        m = move[i, j - i + band]
        if m == 0:
            i -= 1
            j -= 1
        elif m == 1:
            j -= 1
        else:
            i -= 1
    return u[:k][::-1].copy(), v[:k][::-1].copy(), acc[n - 1, band]


def _as_series(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def dtw_align(x1, x2, constraints: AlignmentConstraints) -> WarpingPath:
    a, b = _as_series(x1), _as_series(x2)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"signals must be 1-D with equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("signals must not be empty")
    band = min(constraints.band_frames, a.size - 1)
    u, v, cost = _banded_dtw(a, b, band)
    return WarpingPath(u, v, float(cost))


def derivative_series(x) -> np.ndarray:
    x = _as_series(x)
    if x.size < 3:
        raise DegenerateSessionError(f"derivative needs at least 3 samples, got {x.size}")
    d = np.empty_like(x)
    d[1:-1] = ((x[1:-1] - x[:-2]) + (x[2:] - x[:-2]) / 2.0) / 2.0
    d[0] = d[1]
    d[-1] = d[-2]
    return d


def ddtw_align(x1, x2, constraints: AlignmentConstraints) -> WarpingPath:
    return dtw_align(derivative_series(x1), derivative_series(x2), constraints)


def wp_meddev(path: WarpingPath) -> float:
    return float(np.median(path.deviation)) / math.sqrt(2.0)


def normalized_dtw_distance(path: WarpingPath, m_n: int) -> float:
    if m_n < 1:
        raise ValueError("m_n must be >= 1")
    return path.total_cost / m_n


def path_cost(x1, x2, path: WarpingPath) -> float:
    """Sum of |x1[u] - x2[v]| along a path."""
    a, b = _as_series(x1), _as_series(x2)
    return float(np.sum(np.abs(a[path.u] - b[path.v])))


def align_pair(x1, x2, method: str, constraints: AlignmentConstraints) -> WarpingPath:
    if method not in MEASURES:
        raise ValueError(f"unknown alignment method {method!r}; expected one of {SYNC_METHODS}")
    if method.endswith("ddtw"):
        return ddtw_align(x1, x2, constraints)
    return dtw_align(x1, x2, constraints)


def align_session(session: Session, method: str, constraints: AlignmentConstraints) -> List[WarpingPath]:
    """Align H to T on every AU channel."""
    paths = []
    for k in range(K_AU):
        try:
            paths.append(align_pair(session.h.au[k], session.t.au[k], method, constraints))
        except (ValueError, DegenerateSessionError) as exc:
            raise AlignmentError(
                f"session {session.session_id} channel {AU_COLUMNS[k]}: {exc}"
            ) from exc
    return paths


def path_feature(path: WarpingPath, method: str, n_frames: int) -> float:
    if method.startswith("wp_"):
        return wp_meddev(path)
    return normalized_dtw_distance(path, n_frames)


def session_sync_features(
    session: Session, method: str, constraints: AlignmentConstraints
) -> SyncFeatureVector:
    paths = align_session(session, method, constraints)
    values = np.array([path_feature(p, method, session.n_frames) for p in paths])
    return SyncFeatureVector(session.session_id, MEASURES[method], values)
