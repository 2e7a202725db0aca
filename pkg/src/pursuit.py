"""
Matching-pursuit sparse decomposition over a Gaussian / Mexican-hat dictionary.

Atoms are never materialized as a matrix. Correlations of the residual with
every (kind, sigma, mu) atom are computed per step as one batched
overlap-add convolution against compactly supported kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Iterator, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import oaconvolve

from .core import AU_NAMES, DEFAULT_SIGMAS, K_AU, UndefinedLossError, get_logger

logger = get_logger("pursuit")

SUPPORT_CUTOFF = 1e-12
SUPPORT_SIGMAS = 8.0
TIE_TOLERANCE = 1e-10


class AtomKind(IntEnum):
    GAUSSIAN = 0
    MEXICAN_HAT = 1


def _profile(kind: AtomKind, offsets: np.ndarray, sigma: float) -> np.ndarray:
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    if kind is AtomKind.MEXICAN_HAT:
        g = (1.0 - offsets ** 2 / sigma ** 2) * g
    g[np.abs(g) < SUPPORT_CUTOFF] = 0.0
    return g


@dataclass(frozen=True, eq=False)
class Atom:
    kind: AtomKind
    mu: int
    sigma: float
    samples: np.ndarray


def _make_atom(kind: AtomKind, mu: int, sigma: float, length: int) -> Atom:
    if length < 1:
        raise ValueError("atom length must be >= 1")
    if not 1 <= mu <= length:
        raise ValueError(f"mu={mu} outside 1..{length}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(1, length + 1, dtype=float) - mu
    raw = _profile(kind, offsets, sigma)
    return Atom(kind, mu, float(sigma), raw / np.linalg.norm(raw))


def gaussian_atom(mu: int, sigma: float, length: int) -> Atom:
    return _make_atom(AtomKind.GAUSSIAN, mu, sigma, length)


def mexican_hat_atom(mu: int, sigma: float, length: int) -> Atom:
    return _make_atom(AtomKind.MEXICAN_HAT, mu, sigma, length)


class Dictionary:
    """Lazy dictionary of 2 * length * len(sigma_grid) unit-norm atoms.

    Atom id = (kind * S + sigma_index) * length + (mu - 1), so ids order
    lexicographically by (kind, sigma, mu).
    """

    def __init__(self, length: int, sigma_grid: Sequence[float] = DEFAULT_SIGMAS):
        if length < 1:
            raise ValueError("dictionary signal length must be >= 1")
        if len(sigma_grid) == 0:
            raise ValueError("sigma grid must not be empty")
        if any(s <= 0 for s in sigma_grid):
            raise ValueError("sigma values must be positive")
        self.signal_length = int(length)
        self.sigma_grid: Tuple[float, ...] = tuple(float(s) for s in sigma_grid)

    def __len__(self) -> int:
        return 2 * self.signal_length * len(self.sigma_grid)

    def __iter__(self) -> Iterator[Atom]:
        for atom_id in range(len(self)):
            yield self.atom(atom_id)

    def describe(self, atom_id: int) -> Tuple[AtomKind, float, int]:
        if not 0 <= atom_id < len(self):
            raise IndexError(f"atom id {atom_id} out of range")
        row, mu0 = divmod(atom_id, self.signal_length)
        kind, s = divmod(row, len(self.sigma_grid))
        return AtomKind(kind), self.sigma_grid[s], mu0 + 1

    def atom(self, atom_id: int) -> Atom:
        kind, sigma, mu = self.describe(atom_id)
        return _make_atom(kind, mu, sigma, self.signal_length)

    def atom_id(self, kind: AtomKind, sigma: float, mu: int) -> int:
        s = self.sigma_grid.index(float(sigma))
        return (int(kind) * len(self.sigma_grid) + s) * self.signal_length + (mu - 1)

    @cached_property
    def kernels(self) -> np.ndarray:
        """Unnormalized kernels, one row per (kind, sigma), centred in a common odd length."""
        half = int(math.ceil(SUPPORT_SIGMAS * max(self.sigma_grid)))
        offsets = np.arange(-half, half + 1, dtype=float)
        rows = [
            _profile(kind, offsets, sigma)
            for kind in AtomKind
            for sigma in self.sigma_grid
        ]
        return np.vstack(rows)

    @cached_property
    def atom_norms(self) -> np.ndarray:
        """L2 norm of every boundary-truncated atom, shape (2S, length)."""
        ones = np.ones((self.kernels.shape[0], self.signal_length))
        energy = oaconvolve(ones, self.kernels ** 2, mode="same", axes=-1)
        return np.sqrt(np.maximum(energy, 0.0))

    def correlations(self, residual: np.ndarray) -> np.ndarray:
        """Inner products of the residual with every atom, flattened in id order."""
        stacked = np.broadcast_to(residual, (self.kernels.shape[0], residual.shape[0]))
        raw = oaconvolve(stacked, self.kernels, mode="same", axes=-1)
        return (raw / self.atom_norms).ravel()


def build_dictionary(length: int, sigma_grid: Sequence[float] = DEFAULT_SIGMAS) -> Dictionary:
    return Dictionary(length, sigma_grid)


@dataclass(frozen=True, eq=False)
class Decomposition:
    atom_ids: np.ndarray
    coefficients: np.ndarray
    reconstruction: np.ndarray
    residual_norms: np.ndarray

    @property
    def selections(self) -> List[Tuple[int, float]]:
        return list(zip(self.atom_ids.tolist(), self.coefficients.tolist()))


def matching_pursuit(signal: np.ndarray, dictionary: Dictionary, q: int = 25) -> Decomposition:
    x = np.asarray(signal, dtype=float)
    if x.shape != (dictionary.signal_length,):
        raise ValueError(
            f"signal length {x.shape} does not match dictionary length {dictionary.signal_length}"
        )
    if q < 1:
        raise ValueError("q must be >= 1")

    residual = x.copy()
    reconstruction = np.zeros_like(x)
    ids = np.zeros(q, dtype=np.int64)
    coefs = np.zeros(q)
    norms = np.empty(q + 1)
    norms[0] = np.linalg.norm(residual)

    for step in range(q):
        if norms[step] == 0.0:
            norms[step + 1] = 0.0
            continue
        scores = np.abs(dictionary.correlations(residual))
        peak = scores.max()
        if peak == 0.0:
            norms[step + 1] = norms[step]
            continue
        best = int(np.flatnonzero(scores >= peak * (1.0 - TIE_TOLERANCE))[0])
        atom = dictionary.atom(best).samples
        c = float(residual @ atom)
        residual -= c * atom
        reconstruction += c * atom
        ids[step], coefs[step] = best, c
        norms[step + 1] = min(np.linalg.norm(residual), norms[step])

    return Decomposition(ids, coefs, reconstruction, norms)


def decompose_channels(channels: np.ndarray, dictionary: Dictionary, q: int = 25) -> np.ndarray:
    """Matching-pursuit reconstruction of every row of a (K, M) array."""
    return np.vstack([matching_pursuit(row, dictionary, q).reconstruction for row in channels])


# --- Information loss ---


def loss_ratios(original: np.ndarray, reconstruction: np.ndarray) -> np.ndarray:
    """Per-entry ||x_hat - x||^2 / ||x||^2 over the last axis; NaN where ||x|| = 0."""
    original = np.asarray(original, dtype=float)
    reconstruction = np.asarray(reconstruction, dtype=float)
    if original.shape != reconstruction.shape:
        raise ValueError("original and reconstruction shapes differ")
    energy = np.sum(original ** 2, axis=-1)
    err = np.sum((reconstruction - original) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(energy > 0, err / energy, np.nan)


def aggregate_loss(ratios: np.ndarray, channel: int) -> float:
    """Mean over subjects of the mean over sessions, for a (N, 2, K) ratio stack."""
    per_subject = []
    for i in range(ratios.shape[1]):
        values = ratios[:, i, channel]
        values = values[~np.isnan(values)]
        if values.size:
            per_subject.append(values.mean())
    if not per_subject:
        raise UndefinedLossError(f"every session has a zero-norm signal on channel {channel}")
    return float(np.mean(per_subject))


def information_loss(
    originals: Sequence[np.ndarray], reconstructions: Sequence[np.ndarray], channel: int
) -> float:
    """Relative energy lost on one channel.

    Each element of ``originals`` / ``reconstructions`` holds one session as
    a (2, K, M) array (subjects x channels x frames); M may differ between
    sessions.
    """
    if len(originals) != len(reconstructions):
        raise ValueError("originals and reconstructions differ in session count")
    ratios = np.stack([loss_ratios(x, x_hat) for x, x_hat in zip(originals, reconstructions)])
    return aggregate_loss(ratios, channel)


def loss_table(ratios: np.ndarray) -> pd.DataFrame:
    rows = []
    for k in range(K_AU):
        try:
            loss = 100.0 * aggregate_loss(ratios, k)
        except UndefinedLossError:
            logger.warning("loss undefined for %s: all signals are zero", AU_NAMES[k])
            loss = float("nan")
        rows.append({"au_name": AU_NAMES[k], "loss_percent": loss})
    return pd.DataFrame(rows, columns=["au_name", "loss_percent"])
