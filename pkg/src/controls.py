"""
Shuffle controls and the synthetic dyad generator.
"""
from __future__ import annotations

import math
from dataclasses import replace
from typing import Dict, List, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import AU_INTENSITY_MAX, K_AU, TRUST_AMOUNTS, DegenerateSessionError, LabelError, RunConfig, get_logger
from .session import Session, Subject, TrustClass

logger = get_logger("controls")

MAX_DERANGEMENT_ATTEMPTS = 10_000


class Coupling(BaseModel):
    """How the T player's channel relates to the H player's in a coupled session."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["none", "lag", "mimic"] = "none"
    lag: int = Field(default=0, ge=0)
    gain: float = Field(default=1.0, gt=0.0)

    @classmethod
    def none(cls) -> "Coupling":
        return cls()

    @classmethod
    def lagged(cls, lag: int) -> "Coupling":
        return cls(kind="lag", lag=lag)

    @classmethod
    def mimic(cls, gain: float, lag: int = 0) -> "Coupling":
        return cls(kind="mimic", gain=gain, lag=lag)


class SynthSpec(BaseModel):
    n_sessions: int = Field(default=72, ge=1)
    frames: int = Field(default=1800, ge=10)
    frame_rate_hz: float = Field(default=30.0, gt=0.0)
    coupling: List[Coupling] = Field(default_factory=lambda: [Coupling() for _ in range(K_AU)])
    coupled_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    bump_rate: float = Field(default=12.0, gt=0.0, description="events per minute")
    bump_width_sigma: float = Field(default=10.0, gt=0.0, description="frames")
    noise_sd: float = Field(default=0.05, ge=0.0)
    dropouts: int = Field(default=0, ge=0, description="sessions given a low-confidence stretch")
    dropout_fraction: float = Field(default=0.4, gt=0.0, le=1.0)
    dropout_confidence: float = Field(default=0.3, ge=0.0, le=1.0)
    with_mea: bool = True
    seed: int = 0

    @field_validator("coupling")
    @classmethod
    def one_per_channel(cls, v: List[Coupling]) -> List[Coupling]:
        if len(v) != K_AU:
            raise ValueError(f"coupling needs one entry per AU channel ({K_AU}), got {len(v)}")
        return v

    @model_validator(mode="after")
    def dropouts_fit(self) -> "SynthSpec":
        if self.dropouts > self.n_sessions:
            raise ValueError("dropouts cannot exceed n_sessions")
        return self

    @property
    def max_lag(self) -> int:
        return max(c.lag for c in self.coupling)

    @classmethod
    def from_config(cls, config: RunConfig) -> "SynthSpec":
        coupled = set(config.synth_coupled_channels)
        return cls(
            n_sessions=config.synth_sessions,
            frames=config.synth_frames,
            frame_rate_hz=config.synth_frame_rate,
            coupling=[
                Coupling.lagged(config.synth_lag_frames) if k in coupled else Coupling.none()
                for k in range(K_AU)
            ],
            bump_rate=config.synth_bump_rate,
            bump_width_sigma=config.synth_bump_width,
            noise_sd=config.synth_noise_sd,
            dropouts=config.synth_dropouts,
            seed=config.seed,
        )


# --- Shuffle controls ---


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    identity = np.arange(n)
    for _ in range(MAX_DERANGEMENT_ATTEMPTS):
        perm = rng.permutation(n)
        if not np.any(perm == identity):
            return perm
    raise RuntimeError(f"no derangement of {n} items found")


def shuffle_pairs(sessions: Sequence[Session], seed: int = 0) -> List[Session]:
    """Re-pair every H player with the T player of another session of the same trust class."""
    by_class: Dict[TrustClass, List[int]] = {}
    for i, session in enumerate(sessions):
        cls = session.trust_class
        if cls is None:
            raise LabelError(f"session {session.session_id} has no trust amount to shuffle within")
        by_class.setdefault(cls, []).append(i)

    rng = np.random.default_rng(seed)
    partner = np.empty(len(sessions), dtype=np.int64)
    for cls in sorted(by_class):
        members = np.array(by_class[cls])
        if members.size < 2:
            raise LabelError(f"trust class {int(cls)} has fewer than 2 sessions; cannot shuffle pairs")
        partner[members] = members[_derangement(members.size, rng)]

    shuffled = []
    for i, session in enumerate(sessions):
        other = sessions[partner[i]]
        n_frames = min(session.n_frames, other.n_frames)
        if session.n_frames != other.n_frames:
            logger.warning(
                "session=%s stage=shuffle_pairs outcome=truncated partner=%s kept=%d",
                session.session_id, other.session_id, n_frames,
            )
        shuffled.append(replace(
            session,
            h=session.h.truncated(n_frames),
            t=other.t.truncated(n_frames),
            timestamps=session.timestamps[:n_frames],
            partner_session_id=other.session_id,
        ))
    return shuffled


def block_permutation(n_frames: int, block: int, rng: np.random.Generator) -> np.ndarray:
    """Frame index order after shuffling consecutive blocks; a trailing partial block is kept."""
    n_blocks = math.ceil(n_frames / block)
    order = rng.permutation(n_blocks)
    return np.concatenate([np.arange(b * block, min((b + 1) * block, n_frames)) for b in order])


def shuffle_time_series(
    session: Session,
    interval_seconds: float = 10.0,
    seed: int = 0,
    scope: Literal["both", "t"] = "both",
) -> Session:
    """Shuffle fixed-length time blocks with one permutation shared by all channels.

    ``scope="both"`` permutes both subjects identically; ``scope="t"`` permutes
    only the T player, breaking within-block coupling between partners.
    """
    block = int(math.floor(interval_seconds * session.frame_rate_hz + 1e-6))
    if block < 1 or session.n_frames < block:
        raise DegenerateSessionError(
            f"session {session.session_id} ({session.n_frames} frames) is shorter than one "
            f"{interval_seconds:g} s interval"
        )
    index = block_permutation(session.n_frames, block, np.random.default_rng(seed))
    if scope == "both":
        return replace(session, h=session.h.reordered(index), t=session.t.reordered(index))
    if scope == "t":
        return replace(session, t=session.t.reordered(index))
    raise ValueError(f"unknown shuffle scope {scope!r}")


# --- Synthetic dyads ---


def _bump_train(length: int, quiet: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian bumps with centres kept `quiet` frames away from either end."""
    rate_per_frame = spec.bump_rate / (60.0 * spec.frame_rate_hz)
    active = max(length - 2 * quiet, 0)
    n_events = rng.poisson(rate_per_frame * active)
    centres = rng.uniform(quiet, quiet + active, size=n_events)
    amplitudes = rng.uniform(1.0, 4.0, size=n_events)
    m = np.arange(length, dtype=float)
    offsets = m[None, :] - centres[:, None]
    return np.sum(amplitudes[:, None] * np.exp(-(offsets ** 2) / (2.0 * spec.bump_width_sigma ** 2)), axis=0)


def _finish(clean: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    noisy = clean + rng.normal(0.0, spec.noise_sd, size=clean.shape) if spec.noise_sd > 0 else clean
    return np.clip(noisy, 0.0, AU_INTENSITY_MAX)


def _motion_energy(au: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.abs(np.diff(au, axis=1)).sum(axis=0)])


def _dropout_confidence(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    confidence = np.ones(spec.frames)
    run = int(math.ceil(spec.dropout_fraction * spec.frames))
    start = int(rng.integers(0, spec.frames - run + 1))
    confidence[start:start + run] = spec.dropout_confidence
    return confidence


def _synth_session(
    index: int, coupled: bool, dropout: bool, spec: SynthSpec, seed_seq: np.random.SeedSequence
) -> Session:
    rng = np.random.default_rng(seed_seq)
    pad = spec.max_lag
    extended = spec.frames + pad
    # bumps only where both partners see them
    quiet = pad + int(math.ceil(4.0 * spec.bump_width_sigma))
    h_au = np.empty((K_AU, spec.frames))
    t_au = np.empty((K_AU, spec.frames))
    for k, coupling in enumerate(spec.coupling):
        train = _bump_train(extended, quiet, spec, rng)
        h_au[k] = _finish(train[pad:], spec, rng)
        if coupled and coupling.kind != "none":
            delayed = train[pad - coupling.lag: pad - coupling.lag + spec.frames]
            gain = coupling.gain if coupling.kind == "mimic" else 1.0
            t_au[k] = _finish(gain * delayed, spec, rng)
        else:
            t_au[k] = _finish(_bump_train(extended, quiet, spec, rng)[pad:], spec, rng)

    h_conf = _dropout_confidence(spec, rng) if dropout else np.ones(spec.frames)
    trust = TRUST_AMOUNTS[-1] if coupled else float(rng.choice(TRUST_AMOUNTS[:-1]))
    return Session(
        session_id=f"synth_{index:03d}",
        frame_rate_hz=spec.frame_rate_hz,
        h=Subject(h_au, h_conf, _motion_energy(h_au) if spec.with_mea else None),
        t=Subject(t_au, np.ones(spec.frames), _motion_energy(t_au) if spec.with_mea else None),
        timestamps=np.arange(spec.frames) / spec.frame_rate_hz,
        trust_amount=trust,
    )


def generate_synthetic_sessions(spec: SynthSpec) -> List[Session]:
    """Seeded dyads: coupled sessions (trust 1.00) share delayed bump trains on coupled channels."""
    root = np.random.SeedSequence(spec.seed)
    session_seeds = root.spawn(spec.n_sessions)
    layout_rng = np.random.default_rng(root.spawn(1)[0])
    n_coupled = int(round(spec.coupled_fraction * spec.n_sessions))
    dropout_ids = set(layout_rng.choice(spec.n_sessions, size=spec.dropouts, replace=False).tolist())
    sessions = [
        _synth_session(i, i < n_coupled, i in dropout_ids, spec, session_seeds[i])
        for i in range(spec.n_sessions)
    ]
    logger.info("generated %d synthetic sessions (%d coupled)", len(sessions), n_coupled)
    return sessions

