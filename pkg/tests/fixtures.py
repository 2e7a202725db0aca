"""
Shared test fixtures: factories for sessions, subject CSVs and feature matrices
"""

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.core import AU_COLUMNS, K_AU
from src.prediction import FeatureMatrix
from src.session import Session, Subject

SAMPLE_CONFIG_TEXT = """\
# run settings
tau = 0.7
exclusion_fraction = 0.30
impute = true
theta_seconds = 5
mp_atoms = 25
mp_sigmas = 2, 4, 8, 16, 32
lambda = 0.0518
alpha = 0.802
folds = 5
min_repeats = 50
seed = 7
"""


def create_subject(
    n_frames: int = 60,
    au: Optional[np.ndarray] = None,
    confidence: Optional[np.ndarray] = None,
    mea: Optional[np.ndarray] = None,
) -> Subject:
    """Create a subject; AU defaults to zeros and confidence to ones"""
    if au is None:
        au = np.zeros((K_AU, n_frames))
    elif au.ndim == 1:
        au = np.tile(au, (K_AU, 1))
    n_frames = au.shape[1]
    if confidence is None:
        confidence = np.ones(n_frames)
    return Subject(au=np.asarray(au, dtype=float), confidence=np.asarray(confidence, dtype=float), mea=mea)


def create_session(
    session_id: str = "s001",
    h_au: Optional[np.ndarray] = None,
    t_au: Optional[np.ndarray] = None,
    *,
    n_frames: int = 60,
    frame_rate: float = 30.0,
    h_conf: Optional[np.ndarray] = None,
    t_conf: Optional[np.ndarray] = None,
    h_mea: Optional[np.ndarray] = None,
    t_mea: Optional[np.ndarray] = None,
    trust_amount: Optional[float] = None,
) -> Session:
    """Create a session from (K, M) or single-channel (M,) AU arrays"""
    h = create_subject(n_frames, h_au, h_conf, h_mea)
    t = create_subject(h.n_frames, t_au, t_conf, t_mea)
    return Session(
        session_id=session_id,
        frame_rate_hz=frame_rate,
        h=h,
        t=t,
        timestamps=np.arange(h.n_frames) / frame_rate,
        trust_amount=trust_amount,
    )


def create_subject_frame(
    n_frames: int = 50,
    frame_rate: float = 30.0,
    value: float = 1.0,
    confidence: float = 0.98,
    seed: Optional[int] = None,
) -> pd.DataFrame:
    """Create an OpenFace-style per-subject table"""
    data = {
        "frame": np.arange(1, n_frames + 1),
        "timestamp": np.arange(n_frames) / frame_rate,
        "confidence": np.full(n_frames, confidence),
    }
    rng = np.random.default_rng(seed) if seed is not None else None
    for column in AU_COLUMNS:
        data[column] = rng.uniform(0, 5, n_frames) if rng is not None else np.full(n_frames, value)
    return pd.DataFrame(data)


def write_subject_file(path: Path, frame: Optional[pd.DataFrame] = None, **kwargs) -> Path:
    """Write a per-subject CSV with OpenFace's ', ' separated header"""
    frame = create_subject_frame(**kwargs) if frame is None else frame
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, sep=",")
    text = path.read_text()
    header, _, body = text.partition("\n")
    path.write_text(", ".join(header.split(",")) + "\n" + body)
    return path


def write_manifest_file(path: Path, rows: Sequence[dict]) -> Path:
    pd.DataFrame(rows, columns=["session_id", "h_csv", "t_csv", "trust_amount"]).to_csv(path, index=False)
    return path


def create_feature_matrix(X: np.ndarray, y: np.ndarray, names: Optional[Sequence[str]] = None) -> FeatureMatrix:
    n, k = X.shape
    return FeatureMatrix(
        X=np.asarray(X, dtype=float),
        y=np.asarray(y, dtype=int),
        session_ids=tuple(f"s{i:03d}" for i in range(n)),
        feature_names=tuple(names) if names is not None else tuple(f"f{j}" for j in range(k)),
    )


def create_informative_matrix(
    n_per_class: int = 40,
    n_noise: int = 16,
    shift: float = 2.0,
    seed: int = 0,
) -> FeatureMatrix:
    """One feature shifted by class, the rest pure noise; informative feature is column 0"""
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n_per_class)
    informative = rng.normal(0, 1, y.size) + shift * y
    noise = rng.normal(0, 1, (y.size, n_noise))
    return create_feature_matrix(np.column_stack([informative, noise]), y)


def create_logistic_matrix(n: int = 40, k: int = 5, seed: int = 0) -> FeatureMatrix:
    """Overlapping classes drawn from a logistic model, never perfectly separable"""
    rng = np.random.default_rng(seed)
    X = rng.normal(0, 1, (n, k)) * rng.uniform(0.5, 3.0, k) + rng.normal(0, 2, k)
    eta = 0.3 + (X - X.mean(axis=0)) @ rng.normal(0, 0.4, k)
    y = (rng.uniform(size=n) < 1 / (1 + np.exp(-eta))).astype(int)
    X[1] = X[0]
    y[:2] = [0, 1]
    return create_feature_matrix(X, y)
