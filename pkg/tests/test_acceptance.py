"""
End-to-end checks on synthetic dyads: alignment oracles, decomposition loss,
coupling detection, shuffle controls and the band-width sweep
"""

import math
from functools import lru_cache

import numpy as np
import pytest
from scipy.optimize import linprog

from src.baselines import emd_1d
from src.controls import Coupling, SynthSpec, generate_synthetic_sessions
from src.core import AU_COLUMNS, K_AU, RunConfig
from src.pipeline import (
    DEFAULT_THETAS,
    run_control,
    run_preprocess,
    run_sweep,
    run_synchrony,
    run_synth,
    run_train,
)
from src.pursuit import build_dictionary, decompose_channels, information_loss
from src.warping import AlignmentConstraints, ddtw_align, derivative_series, dtw_align, session_sync_features

pytestmark = pytest.mark.slow

COUPLED_CHANNELS = [0, 2, 4, 8, 14, 16]


def _exhaustive_cost(a, b, band):
    n = len(a)

    @lru_cache(maxsize=None)
    def best(i, j):
        here = abs(a[i] - b[j])
        if (i, j) == (n - 1, n - 1):
            return here
        nexts = [
            best(i + di, j + dj)
            for di, dj in ((1, 1), (0, 1), (1, 0))
            if i + di < n and j + dj < n and abs(i + di - j - dj) <= band
        ]
        return here + min(nexts)

    return best(0, 0)


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """72 synthetic sessions, half coupled on six channels with a 10-frame lag, preprocessed"""
    out = tmp_path_factory.mktemp("acceptance")
    config = RunConfig(seed=21, synth_sessions=72, synth_lag_frames=10, synth_coupled_channels=COUPLED_CHANNELS)
    run_preprocess(run_synth(out, config), out, config, jobs=-1)
    return out, config


def _replicate(tmp_path_factory, name, seeds, **settings):
    runs = []
    for seed in seeds:
        out = tmp_path_factory.mktemp(f"{name}_{seed}")
        config = RunConfig(seed=seed, synth_coupled_channels=COUPLED_CHANNELS, **settings)
        run_preprocess(run_synth(out, config), out, config, jobs=-1)
        runs.append((out, config))
    return runs


@pytest.fixture(scope="module")
def replications(tmp_path_factory):
    """20 independently seeded copies of the 72-session coupled design"""
    return _replicate(tmp_path_factory, "replica", range(100, 120), synth_sessions=72, synth_lag_frames=10)


@pytest.fixture(scope="module")
def control_run(tmp_path_factory):
    """200 shorter sessions, so chance-level accuracy has a narrow spread"""
    return _replicate(
        tmp_path_factory, "control", [31], synth_sessions=200, synth_frames=900, synth_lag_frames=10
    )[0]


def _accuracy(out, method, config):
    features = run_synchrony(out, method, config, jobs=-1)
    return run_train(features, out / "train" / method, config)


class TestAlignmentOracles:
    """Test DTW against exhaustive search and DDTW against its definition"""

    def test_dtw_cost_is_optimal(self):
        """Test banded DTW cost equals exhaustive search on short sequences"""
        rng = np.random.default_rng(0)
        for _ in range(500):
            n = int(rng.integers(1, 13))
            band = int(rng.integers(0, 5))
            a = tuple(rng.integers(0, 5, n).astype(float))
            b = tuple(rng.integers(0, 5, n).astype(float))
            path = dtw_align(a, b, AlignmentConstraints(band + 0.5, 1.0))
            assert path.total_cost == _exhaustive_cost(a, b, min(band, n - 1))

    def test_ddtw_is_dtw_on_derivatives(self):
        """Test DDTW is DTW applied to the derivative estimates"""
        rng = np.random.default_rng(1)
        constraints = AlignmentConstraints(4.0, 1.0)
        for _ in range(100):
            a, b = rng.normal(size=(2, 40))
            direct = ddtw_align(a, b, constraints)
            manual = dtw_align(derivative_series(a), derivative_series(b), constraints)
            assert direct.total_cost == manual.total_cost
            np.testing.assert_array_equal(direct.u, manual.u)
            np.testing.assert_array_equal(direct.v, manual.v)

    @pytest.mark.parametrize("lag", [10, 30, 60, 120, 180])
    def test_lag_recovery(self, lag):
        """Test the median path deviation recovers a lag up to the band width"""
        spec = SynthSpec(
            n_sessions=1,
            frames=1200,
            coupling=[Coupling.lagged(lag) for _ in range(K_AU)],
            coupled_fraction=1.0,
            bump_rate=30.0,
            bump_width_sigma=5.0,
            noise_sd=0.0,
            seed=lag,
        )
        session = generate_synthetic_sessions(spec)[0]
        values = session_sync_features(session, "wp_ddtw", AlignmentConstraints(5.0, 30.0)).values
        if lag <= 150:
            np.testing.assert_allclose(values, lag / math.sqrt(2), atol=0.5)
        else:
            assert np.all(values <= 150 / math.sqrt(2) + 1e-12)

    def test_emd_matches_transport(self):
        """Test EMD equals the optimal transport cost from a linear program"""
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 11))
            p, q = rng.uniform(0, 5, (2, n))
            cost = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).ravel()
            result = linprog(
                cost,
                A_eq=np.vstack([np.kron(np.eye(n), np.ones(n)), np.kron(np.ones(n), np.eye(n))]),
                b_eq=np.concatenate([p / p.sum(), q / q.sum()]),
                bounds=(0, None),
                method="highs",
            )
            assert emd_1d(p, q) == pytest.approx(result.fun, abs=1e-9)


class TestDecompositionLoss:
    """Test matching-pursuit loss on AU-like signals"""

    def test_loss_band(self):
        """Test mean reconstruction loss stays in a narrow band for 25 atoms"""
        spec = SynthSpec(n_sessions=4, frames=1800, bump_rate=20.0, noise_sd=0.1, seed=3)
        sessions = generate_synthetic_sessions(spec)
        dictionary = build_dictionary(1800)
        originals, reconstructions = [], []
        for session in sessions:
            stacked = np.stack([session.h.au, session.t.au])
            originals.append(stacked)
            reconstructions.append(np.stack([decompose_channels(x, dictionary, 25) for x in stacked]))
        losses = [information_loss(originals, reconstructions, k) for k in range(K_AU)]
        assert 0.005 <= np.mean(losses) <= 0.15


class TestCouplingDetection:
    """Test the full pipeline on coupled versus uncoupled dyads"""

    def test_warping_path_detects_coupling(self, pipeline_run):
        """Test WP-DDTW separates coupled from uncoupled sessions"""
        out, config = pipeline_run
        report = _accuracy(out, "wp_ddtw", config)

        assert report.overall_accuracy >= 0.75
        freq = report.selection_frequency
        coupled = [freq[AU_COLUMNS[k]] for k in COUPLED_CHANNELS]
        uncoupled = [freq[c] for k, c in enumerate(AU_COLUMNS) if k not in COUPLED_CHANNELS]
        assert np.mean(coupled) > np.median(uncoupled)

    def test_coupled_channels_selected_across_seeds(self, replications):
        """Test every coupled channel outranks the uncoupled median in most seeded runs"""
        wins = np.zeros(len(COUPLED_CHANNELS))
        for out, config in replications:
            freq = _accuracy(out, "wp_ddtw", config).selection_frequency
            uncoupled = np.median([freq[c] for k, c in enumerate(AU_COLUMNS) if k not in COUPLED_CHANNELS])
            wins += [freq[AU_COLUMNS[k]] > uncoupled for k in COUPLED_CHANNELS]
        assert np.all(wins / len(replications) >= 0.8), dict(zip(COUPLED_CHANNELS, wins))

    def test_warping_path_beats_baselines_across_seeds(self, replications):
        """Test WP-DDTW is at least as accurate as each baseline in most seeded runs"""
        baselines = ["wcc", "dist_dtw", "emd", "intensity_h"]
        wins = dict.fromkeys(baselines, 0)
        for out, config in replications:
            wp = _accuracy(out, "wp_ddtw", config).overall_accuracy
            for method in baselines:
                wins[method] += wp >= _accuracy(out, method, config).overall_accuracy
        for method in baselines:
            assert wins[method] / len(replications) >= 0.7, wins

    def test_shuffled_pairs_at_chance(self, control_run):
        """Test partners swapped within class predict at chance"""
        out, config = control_run
        run_control(out, "pairs", config)
        report = _accuracy(out / "control_pairs", "wp_ddtw", config)
        assert 0.40 <= report.overall_accuracy <= 0.60

    def test_shuffled_time_series_at_chance(self, control_run):
        """Test block-permuted T series predict at chance"""
        out, config = control_run
        dest = out / "control_time_t"
        run_control(out, "time", config, dest=dest, scope="t")
        report = _accuracy(dest, "wp_ddtw", config)
        assert 0.40 <= report.overall_accuracy <= 0.60

    def test_coupled_session_is_detectable_in_control_design(self, control_run):
        """Test the unshuffled control design is itself well above chance"""
        out, config = control_run
        assert _accuracy(out, "wp_ddtw", config).overall_accuracy >= 0.75


class TestBandWidthSweep:
    """Test the band-width sweep on synthetic data"""

    def test_sweep_table(self, pipeline_run):
        """Test the sweep emits one row per default band width"""
        out, config = pipeline_run
        table = run_sweep(out, config.with_overrides(min_repeats=10), jobs=-1)
        assert table["theta_seconds"].tolist() == list(DEFAULT_THETAS)
        assert table["overall_acc"].between(0, 1).all()
        assert (out / "theta_sweep.csv").exists()

    def test_band_matching_lag_is_best(self, tmp_path_factory):
        """Test a 5 s band attains the top accuracy when partners lag by 5 s"""
        runs = _replicate(
            tmp_path_factory, "lag5s", range(200, 210), synth_sessions=72, synth_lag_frames=150, min_repeats=20
        )
        hits = 0
        for out, config in runs:
            table = run_sweep(out, config, jobs=-1).set_index("theta_seconds")
            hits += table.loc[5.0, "overall_acc"] >= table["overall_acc"].max() - 1e-12
        assert hits / len(runs) >= 0.7
