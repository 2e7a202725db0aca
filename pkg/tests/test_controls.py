"""
Tests for shuffle controls and the synthetic dyad generator
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.controls import (
    Coupling,
    SynthSpec,
    _derangement,
    block_permutation,
    generate_synthetic_sessions,
    shuffle_pairs,
    shuffle_time_series,
)
from src.core import K_AU, TRUST_AMOUNTS, DegenerateSessionError, LabelError, RunConfig
from src.warping import AlignmentConstraints, session_sync_features
from tests.fixtures import create_session


def _labelled_sessions(amounts, n_frames=60):
    rng = np.random.default_rng(0)
    return [
        create_session(
            f"s{i:02d}",
            h_au=rng.uniform(0, 5, n_frames),
            t_au=rng.uniform(0, 5, n_frames),
            trust_amount=amount,
        )
        for i, amount in enumerate(amounts)
    ]


def _lagged_spec(lag, **overrides):
    settings = dict(
        n_sessions=1,
        frames=900,
        coupling=[Coupling.lagged(lag) for _ in range(K_AU)],
        coupled_fraction=1.0,
        bump_rate=30.0,
        bump_width_sigma=5.0,
        noise_sd=0.0,
        seed=4,
    )
    settings.update(overrides)
    return SynthSpec(**settings)


class TestDerangement:
    """Test fixed-point-free permutations"""

    @pytest.mark.parametrize("n", [2, 3, 5, 10, 36])
    def test_no_fixed_points(self, n):
        """Test no session is paired with itself"""
        rng = np.random.default_rng(n)
        for _ in range(20):
            perm = _derangement(n, rng)
            assert sorted(perm.tolist()) == list(range(n))
            assert not np.any(perm == np.arange(n))


class TestShufflePairs:
    """Test the shuffled-pairs control"""

    def test_two_sessions_swap(self):
        """Test two sessions swap partners"""
        sessions = _labelled_sessions([1.0, 1.0])
        shuffled = shuffle_pairs(sessions, seed=0)
        assert [s.partner_session_id for s in shuffled] == ["s01", "s00"]
        np.testing.assert_array_equal(shuffled[0].t.au, sessions[1].t.au)
        np.testing.assert_array_equal(shuffled[0].h.au, sessions[0].h.au)

    def test_partners_stay_within_class(self):
        """Test new partners share the trust class"""
        amounts = [1.0, 0.8, 1.0, 0.0, 1.0, 0.4, 0.6, 1.0]
        sessions = _labelled_sessions(amounts)
        by_id = {s.session_id: s for s in sessions}

        shuffled = shuffle_pairs(sessions, seed=3)

        partners = [s.partner_session_id for s in shuffled]
        assert sorted(partners) == sorted(by_id)
        for session in shuffled:
            assert session.partner_session_id != session.session_id
            assert by_id[session.partner_session_id].trust_class == session.trust_class

    def test_same_seed_same_pairing(self):
        sessions = _labelled_sessions([1.0] * 6 + [0.2] * 5)
        first = [s.partner_session_id for s in shuffle_pairs(sessions, seed=9)]
        second = [s.partner_session_id for s in shuffle_pairs(sessions, seed=9)]
        assert first == second

    def test_unequal_lengths_truncate(self, caplog):
        """Test partners of unequal length truncate with a warning"""
        sessions = _labelled_sessions([1.0], n_frames=60) + [
            create_session("long", n_frames=80, trust_amount=1.0)
        ]
        with caplog.at_level("WARNING", logger="trustsync"):
            shuffled = shuffle_pairs(sessions, seed=0)
        assert all(s.n_frames == 60 for s in shuffled)
        assert "outcome=truncated" in caplog.text

    def test_singleton_class(self):
        """Test a class with one session cannot be shuffled"""
        with pytest.raises(LabelError):
            shuffle_pairs(_labelled_sessions([1.0, 1.0, 0.8]), seed=0)

    def test_unlabelled_session(self):
        with pytest.raises(LabelError):
            shuffle_pairs(_labelled_sessions([1.0, None]), seed=0)


class TestShuffleTimeSeries:
    """Test the block-shuffled time-series control"""

    def test_block_permutation(self):
        """Test the permutation moves whole blocks"""
        index = block_permutation(25, 10, np.random.default_rng(1))
        assert sorted(index.tolist()) == list(range(25))
        tail = np.flatnonzero(index == 20)[0]
        np.testing.assert_array_equal(index[tail:tail + 5], np.arange(20, 25))

    def test_values_preserved(self):
        """Test shuffling keeps the multiset of values"""
        session = _labelled_sessions([1.0], n_frames=300)[0]
        shuffled = shuffle_time_series(session, interval_seconds=1.0, seed=2)
        for original, moved in ((session.h.au, shuffled.h.au), (session.t.au, shuffled.t.au)):
            np.testing.assert_array_equal(np.sort(original, axis=1), np.sort(moved, axis=1))
        np.testing.assert_array_equal(shuffled.timestamps, session.timestamps)

    def test_both_subjects_share_the_permutation(self):
        """Test scope both moves H and T together"""
        x = np.random.default_rng(3).uniform(0, 5, 300)
        session = create_session(h_au=x, t_au=x.copy())
        shuffled = shuffle_time_series(session, interval_seconds=1.0, seed=4)
        np.testing.assert_array_equal(shuffled.h.au, shuffled.t.au)
        assert not np.array_equal(shuffled.h.au, session.h.au)

    def test_scope_t_leaves_h(self):
        """Test scope t leaves H untouched"""
        session = _labelled_sessions([1.0], n_frames=300)[0]
        shuffled = shuffle_time_series(session, interval_seconds=1.0, seed=5, scope="t")
        np.testing.assert_array_equal(shuffled.h.au, session.h.au)
        assert not np.array_equal(shuffled.t.au, session.t.au)

    def test_single_block_is_identity(self):
        session = _labelled_sessions([1.0], n_frames=300)[0]
        shuffled = shuffle_time_series(session, interval_seconds=10.0, seed=6)
        np.testing.assert_array_equal(shuffled.h.au, session.h.au)
        np.testing.assert_array_equal(shuffled.t.au, session.t.au)

    def test_shorter_than_interval(self):
        """Test a session shorter than one block is rejected"""
        session = create_session(n_frames=100)
        with pytest.raises(DegenerateSessionError):
            shuffle_time_series(session, interval_seconds=10.0)

    def test_unknown_scope(self):
        with pytest.raises(ValueError):
            shuffle_time_series(create_session(n_frames=300), interval_seconds=1.0, scope="h")


class TestSynthSpec:
    """Test generator settings"""

    def test_coupling_per_channel(self):
        """Test the coupling list needs one entry per channel"""
        with pytest.raises(ValidationError):
            SynthSpec(coupling=[Coupling()] * 3)

    def test_dropouts_bounded(self):
        with pytest.raises(ValidationError):
            SynthSpec(n_sessions=4, dropouts=5)

    def test_from_config(self):
        """Test the generator settings derive from the run config"""
        spec = SynthSpec.from_config(RunConfig(seed=3, synth_lag_frames=12))
        lagged = [k for k, c in enumerate(spec.coupling) if c.kind == "lag"]
        assert lagged == [0, 2, 4, 8, 14, 16]
        assert spec.max_lag == 12
        assert spec.seed == 3
        assert RunConfig().synth_spec() == SynthSpec.from_config(RunConfig())


class TestSyntheticSessions:
    """Test the seeded dyad generator"""

    def test_layout(self):
        """Test session ids, classes and value ranges"""
        spec = SynthSpec(n_sessions=8, frames=300, seed=1)
        sessions = generate_synthetic_sessions(spec)
        assert [s.session_id for s in sessions] == [f"synth_{i:03d}" for i in range(8)]
        assert [s.trust_amount for s in sessions[:4]] == [1.0] * 4
        assert all(s.trust_amount in TRUST_AMOUNTS[:-1] for s in sessions[4:])
        for session in sessions:
            assert session.n_frames == 300
            assert session.has_mea
            assert np.all((session.h.au >= 0) & (session.h.au <= 5))
            assert np.all(session.h.confidence == 1.0)

    def test_reproducible(self):
        """Test the same seed reproduces every session"""
        spec = SynthSpec(n_sessions=3, frames=200, seed=7)
        first, second = generate_synthetic_sessions(spec), generate_synthetic_sessions(spec)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.h.au, b.h.au)
            np.testing.assert_array_equal(a.t.au, b.t.au)
        other = generate_synthetic_sessions(spec.model_copy(update={"seed": 8}))
        assert not np.array_equal(first[0].h.au, other[0].h.au)

    def test_dropouts(self):
        spec = SynthSpec(n_sessions=10, frames=200, dropouts=3, seed=2)
        sessions = generate_synthetic_sessions(spec)
        low = [s for s in sessions if np.mean(s.h.confidence < 0.7) > 0.3]
        assert len(low) == 3

    def test_lagged_copy(self):
        """Test a lagged coupling copies H into T shifted by the lag"""
        spec = _lagged_spec(30)
        session = generate_synthetic_sessions(spec)[0]
        np.testing.assert_array_equal(session.t.au[:, 30:], session.h.au[:, :-30])

    def test_edges_hold_no_unmatched_bumps(self):
        """Test a lagged copy starts and ends on flat stretches at least as long as the lag"""
        for seed in range(5):
            session = generate_synthetic_sessions(_lagged_spec(120, seed=seed))[0]
            assert np.all(session.t.au[:, :120] < 1e-2)
            assert np.all(session.h.au[:, -120:] < 1e-2)
            assert session.h.au[:, :-120].max() > 1.0

    def test_mimic_scales(self):
        """Test a mimic coupling scales the copy by its gain"""
        spec = _lagged_spec(0, coupling=[Coupling.mimic(0.5, 10) for _ in range(K_AU)])
        session = generate_synthetic_sessions(spec)[0]
        h, t = session.h.au[:, :-10], session.t.au[:, 10:]
        unclipped = h < 5.0
        np.testing.assert_allclose(t[unclipped], 0.5 * h[unclipped])

    def test_uncoupled_partners_are_independent(self):
        """Test uncoupled sessions share no bumps"""
        spec = _lagged_spec(30, coupled_fraction=0.0)
        session = generate_synthetic_sessions(spec)[0]
        assert not np.allclose(session.t.au[:, 30:], session.h.au[:, :-30])

    def test_lag_recovered_by_warping_path(self):
        """Noise-free lag of 30 frames: every channel's median deviation is exactly the lag"""
        session = generate_synthetic_sessions(_lagged_spec(30))[0]
        features = session_sync_features(session, "wp_ddtw", AlignmentConstraints(5.0, 30.0))
        np.testing.assert_allclose(features.values, 30 / math.sqrt(2))

    def test_coupled_channels_deviate_less(self):
        """Test coupled channels have a lower mean WP-meddev than uncoupled ones at equal noise"""
        coupled = list(range(8))
        wins = 0
        for seed in range(20):
            spec = SynthSpec(
                n_sessions=1,
                frames=900,
                coupling=[Coupling.lagged(10) if k in coupled else Coupling() for k in range(K_AU)],
                coupled_fraction=1.0,
                seed=seed,
            )
            session = generate_synthetic_sessions(spec)[0]
            values = session_sync_features(session, "wp_ddtw", AlignmentConstraints(5.0, 30.0)).values
            mask = np.isin(np.arange(K_AU), coupled)
            wins += values[mask].mean() < values[~mask].mean()
        assert wins >= 19
