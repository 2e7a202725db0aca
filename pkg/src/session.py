"""
Dyadic session model: CSV ingestion, quality gating, confidence-adaptive
smoothing, linear imputation and trust-label binarization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core import (
    AU_COLUMNS,
    AU_INTENSITY_MAX,
    K_AU,
    TRUST_AMOUNTS,
    DegenerateSessionError,
    EmptyInputError,
    LabelError,
    PreprocessConfig,
    SchemaError,
    get_logger,
)

logger = get_logger("session")

REQUIRED_COLUMNS = ["frame", "timestamp", "confidence", *AU_COLUMNS]
MANIFEST_COLUMNS = ["session_id", "h_csv", "t_csv", "trust_amount"]
FRAME_RATE_TOLERANCE = 0.01


class Role(str, Enum):
    H = "H"
    T = "T"


class TrustClass(IntEnum):
    PARTIAL = 0
    FULL = 1


@dataclass(frozen=True, eq=False)
class Subject:
    """Per-frame AU intensities (K_AU x M), confidence (M,) and optional MEA (M,)."""
    au: np.ndarray
    confidence: np.ndarray
    mea: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.au.ndim != 2 or self.au.shape[0] != K_AU:
            raise SchemaError(f"expected {K_AU} AU channels, got array of shape {self.au.shape}")
        if self.confidence.shape != (self.au.shape[1],):
            raise SchemaError("confidence length does not match the AU frame count")
        if self.mea is not None and self.mea.shape != (self.au.shape[1],):
            raise SchemaError("MEA length does not match the AU frame count")

    @property
    def n_frames(self) -> int:
        return self.au.shape[1]

    def truncated(self, n_frames: int) -> "Subject":
        return Subject(
            au=self.au[:, :n_frames],
            confidence=self.confidence[:n_frames],
            mea=None if self.mea is None else self.mea[:n_frames],
        )

    def reordered(self, index: np.ndarray) -> "Subject":
        return Subject(
            au=self.au[:, index],
            confidence=self.confidence[index],
            mea=None if self.mea is None else self.mea[index],
        )


@dataclass(frozen=True, eq=False)
class Session:
    """One dyadic interaction between an H player and a T player."""
    session_id: str
    frame_rate_hz: float
    h: Subject
    t: Subject
    timestamps: np.ndarray
    trust_amount: Optional[float] = None
    partner_session_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.frame_rate_hz <= 0:
            raise SchemaError(f"session {self.session_id}: frame rate must be positive")
        if self.h.n_frames != self.t.n_frames:
            raise SchemaError(f"session {self.session_id}: subjects differ in frame count")
        if self.timestamps.shape != (self.h.n_frames,):
            raise SchemaError(f"session {self.session_id}: timestamp length does not match frames")

    @property
    def n_frames(self) -> int:
        return self.h.n_frames

    @property
    def subjects(self) -> Tuple[Subject, Subject]:
        return self.h, self.t

    def subject(self, role: Role | str) -> Subject:
        return self.h if Role(role) is Role.H else self.t

    @property
    def trust_class(self) -> Optional[TrustClass]:
        if self.trust_amount is None:
            return None
        return binarize_trust(self.trust_amount)

    @property
    def has_mea(self) -> bool:
        return self.h.mea is not None and self.t.mea is not None

    def truncated(self, n_frames: int) -> "Session":
        return replace(
            self,
            h=self.h.truncated(n_frames),
            t=self.t.truncated(n_frames),
            timestamps=self.timestamps[:n_frames],
        )


@dataclass(frozen=True)
class ManifestEntry:
    session_id: str
    h_csv: Path
    t_csv: Path
    trust_amount: Optional[float] = None


@dataclass
class SubjectFile:
    subject: Subject
    timestamps: np.ndarray = field(repr=False)

    @property
    def frame_rate_hz(self) -> float:
        return frame_rate_from_timestamps(self.timestamps)


# --- Ingestion ---


def frame_rate_from_timestamps(timestamps: np.ndarray) -> float:
    if len(timestamps) < 2:
        raise SchemaError("at least two frames are needed to derive a frame rate")
    span = float(timestamps[-1] - timestamps[0])
    if span <= 0:
        raise SchemaError("timestamps must increase over the recording")
    return (len(timestamps) - 1) / span


def read_subject_csv(path: Path | str, *, check_range: bool = True) -> SubjectFile:
    """Read one OpenFace-style per-subject CSV.

    ``check_range`` enforces raw AU intensities in [0, 5]; processed files
    carry matching-pursuit reconstructions and only need finite values.
    """
    path = Path(path)
    df = pd.read_csv(path, skipinitialspace=True)
    df.columns = [str(c).strip() for c in df.columns]
    for column in REQUIRED_COLUMNS:
        if column not in df.columns:
            raise SchemaError(f"{path.name}: missing required column {column}")
    if len(df) == 0:
        raise SchemaError(f"{path.name}: file has zero frames")

    columns = REQUIRED_COLUMNS + (["mea"] if "mea" in df.columns else [])
    numeric = {}
    for column in columns:
        values = pd.to_numeric(df[column], errors="coerce")
        if values.isna().any():
            row = int(values.isna().to_numpy().argmax())
            raise SchemaError(f"{path.name}: non-numeric value in column {column} at row {row + 1}")
        numeric[column] = values.to_numpy(dtype=float)

    au = np.vstack([numeric[c] for c in AU_COLUMNS])
    confidence = numeric["confidence"]
    mea = numeric.get("mea")

    if np.any((confidence < 0) | (confidence > 1)):
        raise SchemaError(f"{path.name}: confidence outside [0, 1]")
    if not np.all(np.isfinite(au)):
        raise SchemaError(f"{path.name}: non-finite AU intensity")
    if check_range and np.any((au < 0) | (au > AU_INTENSITY_MAX)):
        raise SchemaError(f"{path.name}: AU intensity outside [0, {AU_INTENSITY_MAX:g}]")
    if mea is not None and check_range and np.any(mea < 0):
        raise SchemaError(f"{path.name}: negative MEA value")

    return SubjectFile(Subject(au=au, confidence=confidence, mea=mea), numeric["timestamp"])


def write_subject_csv(path: Path | str, subject: Subject, timestamps: np.ndarray) -> None:
    data = {
        "frame": np.arange(1, subject.n_frames + 1),
        "timestamp": timestamps,
        "confidence": subject.confidence,
    }
    for k, column in enumerate(AU_COLUMNS):
        data[column] = subject.au[k]
    if subject.mea is not None:
        data["mea"] = subject.mea
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(data).to_csv(path, index=False, float_format="%.10g")


def load_session(
    h_csv_path: Path | str,
    t_csv_path: Path | str,
    trust_amount: Optional[float] = None,
    *,
    session_id: Optional[str] = None,
    check_range: bool = True,
) -> Session:
    h_file = read_subject_csv(h_csv_path, check_range=check_range)
    t_file = read_subject_csv(t_csv_path, check_range=check_range)
    session_id = session_id or Path(h_csv_path).stem

    fs_h, fs_t = h_file.frame_rate_hz, t_file.frame_rate_hz
    if abs(fs_h - fs_t) > FRAME_RATE_TOLERANCE * max(fs_h, fs_t):
        raise SchemaError(f"session {session_id}: mismatched frame rates {fs_h:.3f} Hz and {fs_t:.3f} Hz")

    h, t = h_file.subject, t_file.subject
    timestamps = h_file.timestamps
    n_frames = min(h.n_frames, t.n_frames)
    if h.n_frames != t.n_frames:
        logger.warning(
            "session=%s stage=load outcome=truncated h_frames=%d t_frames=%d kept=%d",
            session_id, h.n_frames, t.n_frames, n_frames,
        )
        h, t, timestamps = h.truncated(n_frames), t.truncated(n_frames), timestamps[:n_frames]

    if trust_amount is not None:
        binarize_trust(trust_amount)
    return Session(
        session_id=session_id,
        frame_rate_hz=fs_h,
        h=h,
        t=t,
        timestamps=timestamps,
        trust_amount=trust_amount,
    )


def load_manifest(path: Path | str) -> List[ManifestEntry]:
    """Read a session manifest; relative CSV paths resolve against its directory."""
    path = Path(path)
    df = pd.read_csv(path, dtype={"session_id": str, "h_csv": str, "t_csv": str}, keep_default_na=True)
    df.columns = [str(c).strip() for c in df.columns]
    for column in MANIFEST_COLUMNS:
        if column not in df.columns:
            raise SchemaError(f"{path.name}: missing required column {column}")
    if len(df) == 0:
        raise EmptyInputError(f"{path.name}: manifest lists no sessions")

    entries = []
    for row in df.itertuples(index=False):
        amount = None if pd.isna(row.trust_amount) else float(row.trust_amount)
        entries.append(ManifestEntry(
            session_id=str(row.session_id),
            h_csv=_resolve(path.parent, row.h_csv),
            t_csv=_resolve(path.parent, row.t_csv),
            trust_amount=amount,
        ))
    return entries


def write_manifest(path: Path | str, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    rows = [
        {
            "session_id": e.session_id,
            "h_csv": _relative(path.parent, e.h_csv),
            "t_csv": _relative(path.parent, e.t_csv),
            "trust_amount": "" if e.trust_amount is None else f"{e.trust_amount:.2f}",
        }
        for e in entries
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False)


def _resolve(base: Path, value: str) -> Path:
    p = Path(str(value).strip())
    return p if p.is_absolute() else base / p


def _relative(base: Path, p: Path) -> str:
    try:
        return Path(p).relative_to(base).as_posix()
    except ValueError:
        return str(p)


# --- Quality gate ---


def min_confidence(session: Session) -> np.ndarray:
    return np.minimum(session.h.confidence, session.t.confidence)


def low_confidence_fraction(confidence: np.ndarray, tau: float) -> float:
    return float(np.mean(confidence < tau))


def exclude_low_quality(
    sessions: Sequence[Session], cfg: PreprocessConfig
) -> Tuple[List[Session], List[str]]:
    retained: List[Session] = []
    excluded: List[str] = []
    for session in sessions:
        worst = max(low_confidence_fraction(s.confidence, cfg.tau) for s in session.subjects)
        if worst > cfg.exclusion_fraction:
            logger.info(
                "session=%s stage=quality outcome=excluded low_fraction=%.4f",
                session.session_id, worst,
            )
            excluded.append(session.session_id)
        else:
            retained.append(session)
    return retained, excluded


# --- Smoothing ---


def adaptive_half_width(conf: np.ndarray, d_max: int) -> np.ndarray:
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    conf = np.asarray(conf, dtype=float)
    widths = np.floor(d_max - (d_max - 1) * conf + 1e-9)
    return np.clip(widths, 0, d_max).astype(np.int64)


def smooth(signal: np.ndarray, half_widths: np.ndarray) -> np.ndarray:
    """Moving average with per-frame half-widths; boundary windows shrink.

    Works on a single series or on a stack of series sharing the last axis.
    """
    x = np.asarray(signal, dtype=float)
    d = np.asarray(half_widths, dtype=np.int64)
    n = x.shape[-1]
    if d.shape != (n,):
        raise ValueError("half_widths length must equal the signal length")
    m = np.arange(n)
    lo = np.maximum(m - d, 0)
    hi = np.minimum(m + d, n - 1)
    csum = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)
    return (csum[..., hi + 1] - csum[..., lo]) / (hi - lo + 1)


def select_d_max(conf: np.ndarray, cfg: PreprocessConfig) -> int:
    conf = np.asarray(conf, dtype=float)
    n = len(conf)
    if n < 10:
        raise DegenerateSessionError(f"need at least 10 frames to select d_max, got {n}")
    best_d, best_count = 1, -1
    for d_max in range(1, max(1, n // cfg.d_max_cap_divisor) + 1):
        smoothed = smooth(conf, adaptive_half_width(conf, d_max))
        count = int(np.count_nonzero(smoothed >= cfg.tau))
        if count > best_count:
            best_d, best_count = d_max, count
    return best_d


# --- Imputation ---


def low_confidence_runs(smoothed_conf: np.ndarray, tau: float) -> List[Tuple[int, int]]:
    """Maximal [start, end] index runs (inclusive, 0-based) with confidence below tau."""
    mask = np.asarray(smoothed_conf) < tau
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def impute_linear(signal: np.ndarray, smoothed_conf: np.ndarray, tau: float) -> np.ndarray:
    x = np.array(signal, dtype=float, copy=True)
    n = x.shape[-1]
    for m1, m2 in low_confidence_runs(smoothed_conf, tau):
        left = m1 - 1 if m1 > 0 else None
        right = m2 + 1 if m2 < n - 1 else None
        if left is None and right is None:
            logger.debug("every frame below tau; imputation skipped")
            continue
        if left is None:
            x[..., m1:m2 + 1] = x[..., right, None]
        elif right is None:
            x[..., m1:m2 + 1] = x[..., left, None]
        else:
            frac = np.arange(1, m2 - m1 + 2) / (m2 - m1 + 2)
            lo, hi = x[..., left, None], x[..., right, None]
            x[..., m1:m2 + 1] = lo + frac * (hi - lo)
    return x


def smooth_subject(subject: Subject, cfg: PreprocessConfig) -> Tuple[Subject, int]:
    """Smooth every AU channel (and impute, when enabled) with this subject's d_max."""
    d_max = select_d_max(subject.confidence, cfg)
    widths = adaptive_half_width(subject.confidence, d_max)
    au = smooth(subject.au, widths)
    if cfg.impute:
        au = impute_linear(au, smooth(subject.confidence, widths), cfg.tau)
    return replace(subject, au=au), d_max


def smooth_session(session: Session, cfg: PreprocessConfig) -> Session:
    h, d_h = smooth_subject(session.h, cfg)
    t, d_t = smooth_subject(session.t, cfg)
    logger.debug("session=%s stage=smooth d_max_h=%d d_max_t=%d", session.session_id, d_h, d_t)
    return replace(session, h=h, t=t)


# --- Labels ---


def binarize_trust(amount: float) -> TrustClass:
    for legal in TRUST_AMOUNTS:
        if math.isclose(amount, legal, abs_tol=1e-9):
            return TrustClass.FULL if legal == TRUST_AMOUNTS[-1] else TrustClass.PARTIAL
    raise LabelError(f"trust amount {amount} is not one of {list(TRUST_AMOUNTS)}")
