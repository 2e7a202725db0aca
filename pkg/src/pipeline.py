"""
Stage orchestration behind the CLI. Every stage reads and writes plain
CSV/JSON files under one output directory:

    <out>/raw/                      synthetic session CSVs (synth)
    <out>/manifest.csv              synthetic manifest (synth)
    <out>/processed/                smoothed + reconstructed sessions (preprocess, control)
    <out>/features_<method>.csv     per-session feature rows (synchrony)
    <out>/paths/<method>/           warping paths (synchrony --emit-paths)
    <out>/train/<method>_<model>/   cv_report.json, selection_frequency.csv (train)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .baselines import (
    au_duration_features,
    au_intensity_features,
    mea_sync_features,
    session_emd_features,
    session_wcc_features,
)
from .controls import generate_synthetic_sessions, shuffle_pairs, shuffle_time_series
from .core import (
    AU_COLUMNS,
    AU_NAMES,
    TRUST_AMOUNTS,
    ArtifactMissingError,
    RunConfig,
    TrustSyncError,
    capture_logs,
    get_logger,
    replay_logs,
)
from .prediction import (
    CVReport,
    FeatureMatrix,
    GridResult,
    balanced_subsample,
    fit_elastic_net,
    grid_search,
    repeated_cv,
)
from .pursuit import build_dictionary, decompose_channels, loss_ratios, loss_table
from .session import (
    ManifestEntry,
    Session,
    binarize_trust,
    exclude_low_quality,
    load_manifest,
    load_session,
    smooth_session,
    write_manifest,
    write_subject_csv,
)
from .warping import SYNC_METHODS, AlignmentConstraints, WarpingPath, align_session, path_feature

logger = get_logger("pipeline")

FLOAT_FORMAT = "%.10g"
PROCESSED = "processed"
MANIFEST = "manifest.csv"
PREPROCESS_META = "preprocess.json"

# method -> (model name, measure, features extracted)
METHOD_INFO: Dict[str, Tuple[str, str, str]] = {
    "wp_ddtw": ("WP-DDTW", "WP-meddev", "AUs"),
    "wp_dtw": ("WP-DTW", "WP-meddev", "AUs"),
    "dist_ddtw": ("DDTW-distance", "DDTW distance", "AUs"),
    "dist_dtw": ("DTW-distance", "DTW distance", "AUs"),
    "wcc": ("WCC-AUs", "WCC synchrony duration", "AUs"),
    "emd": ("EMD", "Earth mover's distance", "AUs"),
    "duration_h": ("AU-durations (H)", "AU duration", "AUs of H"),
    "duration_t": ("AU-durations (T)", "AU duration", "AUs of T"),
    "intensity_h": ("AU-intensities (H)", "AU intensity", "AUs of H"),
    "intensity_t": ("AU-intensities (T)", "AU intensity", "AUs of T"),
    "wcc_mea": ("WCC-MEA", "WCC synchrony duration", "MEA"),
    "wp_mea": ("WP-MEA", "WP-meddev", "MEA"),
}
FEATURE_METHODS: Tuple[str, ...] = tuple(METHOD_INFO)
REPORT_COLUMNS = ["model_name", "measure", "features", "class0_acc", "class1_acc", "overall_acc", "model"]
DEFAULT_THETAS = (2.0, 3.0, 5.0, 10.0, 15.0, 20.0)


@dataclass
class SessionOutcome:
    session_id: str
    ok: bool
    error: str = ""
    ratios: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    trust_amount: Optional[float] = None
    records: List[logging.LogRecord] = field(default_factory=list)


@dataclass
class PreprocessSummary:
    retained: List[str] = field(default_factory=list)
    excluded: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ArtifactMissingError(f"missing {what}: {path}")
    return path


def _processed_manifest(out: Path) -> Path:
    return _require(out / PROCESSED / MANIFEST, "processed-session manifest (run preprocess first)")


def _load_processed(entry: ManifestEntry) -> Session:
    return load_session(entry.h_csv, entry.t_csv, entry.trust_amount, session_id=entry.session_id, check_range=False)


def _write_session(dest: Path, session: Session) -> ManifestEntry:
    h_path = dest / f"{session.session_id}_H.csv"
    t_path = dest / f"{session.session_id}_T.csv"
    write_subject_csv(h_path, session.h, session.timestamps)
    write_subject_csv(t_path, session.t, session.timestamps)
    return ManifestEntry(session.session_id, h_path, t_path, session.trust_amount)


# --- preprocess ---


def _preprocess_one(session: Session, config: RunConfig, dest: Path) -> SessionOutcome:
    with capture_logs() as records:
        try:
            smoothed = smooth_session(session, config.preprocess_config())
            dictionary = build_dictionary(session.n_frames, config.mp_sigmas)
            h_rec = decompose_channels(smoothed.h.au, dictionary, config.mp_atoms)
            t_rec = decompose_channels(smoothed.t.au, dictionary, config.mp_atoms)
            # loss is measured against the raw signal, before smoothing or imputation
            ratios = np.stack([loss_ratios(session.h.au, h_rec), loss_ratios(session.t.au, t_rec)])
            processed = replace(smoothed, h=replace(smoothed.h, au=h_rec), t=replace(smoothed.t, au=t_rec))
            _write_session(dest, processed)
            outcome = SessionOutcome(session.session_id, True, ratios=ratios, trust_amount=session.trust_amount)
        except Exception as exc:
            outcome = SessionOutcome(session.session_id, False, error=_describe(exc))
    outcome.records = records
    return outcome


def run_preprocess(manifest_path: Path, out: Path, config: RunConfig, jobs: int = 1) -> PreprocessSummary:
    entries = load_manifest(manifest_path)
    dest = out / PROCESSED
    dest.mkdir(parents=True, exist_ok=True)
    summary = PreprocessSummary()

    sessions = []
    for entry in entries:
        try:
            sessions.append(load_session(entry.h_csv, entry.t_csv, entry.trust_amount, session_id=entry.session_id))
        except (TrustSyncError, ValueError, OSError) as exc:
            logger.error("session=%s stage=load outcome=failed error=%s", entry.session_id, _describe(exc))
            summary.failed[entry.session_id] = _describe(exc)

    retained, summary.excluded = exclude_low_quality(sessions, config.preprocess_config())
    outcomes = Parallel(n_jobs=jobs)(delayed(_preprocess_one)(s, config, dest) for s in retained)

    kept_entries, ratios = [], []
    for outcome in outcomes:
        replay_logs(outcome.records)
        if outcome.ok:
            logger.info("session=%s stage=preprocess outcome=ok", outcome.session_id)
            summary.retained.append(outcome.session_id)
            ratios.append(outcome.ratios)
            kept_entries.append(ManifestEntry(
                outcome.session_id,
                dest / f"{outcome.session_id}_H.csv",
                dest / f"{outcome.session_id}_T.csv",
                outcome.trust_amount,
            ))
        else:
            logger.error("session=%s stage=preprocess outcome=failed error=%s", outcome.session_id, outcome.error)
            summary.failed[outcome.session_id] = outcome.error

    write_manifest(dest / MANIFEST, kept_entries)
    exclusions = [{"session_id": s, "reason": "low_confidence"} for s in summary.excluded]
    exclusions += [{"session_id": s, "reason": f"failed: {e}"} for s, e in summary.failed.items()]
    pd.DataFrame(exclusions, columns=["session_id", "reason"]).to_csv(dest / "exclusions.csv", index=False)
    if ratios:
        loss_table(np.stack(ratios)).to_csv(dest / "loss_report.csv", index=False, float_format="%.4f")
    else:
        logger.warning("no session survived preprocessing; loss report not written")
    meta = {
        "tau": config.tau,
        "exclusion_fraction": config.exclusion_fraction,
        "impute": config.impute,
        "d_max_cap_divisor": config.d_max_cap_divisor,
        "mp_atoms": config.mp_atoms,
        "mp_sigmas": list(config.mp_sigmas),
    }
    (dest / PREPROCESS_META).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return summary


# --- synchrony ---


def compute_features(
    session: Session, method: str, config: RunConfig, *, theta_seconds: Optional[float] = None
) -> Tuple[np.ndarray, Optional[List[WarpingPath]]]:
    """Feature values for one session, plus the warping paths for alignment methods."""
    if method in SYNC_METHODS:
        constraints = AlignmentConstraints(theta_seconds or config.theta_seconds, session.frame_rate_hz)
        paths = align_session(session, method, constraints)
        return np.array([path_feature(p, method, session.n_frames) for p in paths]), paths
    if method == "wcc":
        return session_wcc_features(session, config.wcc_params()), None
    if method == "emd":
        return session_emd_features(session), None
    if method.startswith("duration_"):
        return au_duration_features(session, method[-1].upper()), None
    if method.startswith("intensity_"):
        return au_intensity_features(session, method[-1].upper()), None
    if method == "wcc_mea":
        return np.array([mea_sync_features(session, "wcc_duration", params=config.wcc_params())]), None
    if method == "wp_mea":
        constraints = AlignmentConstraints(config.theta_seconds, session.frame_rate_hz)
        return np.array([mea_sync_features(session, "wp_meddev", constraints=constraints)]), None
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(FEATURE_METHODS)}")


def feature_names(method: str) -> List[str]:
    return ["mea"] if method.endswith("_mea") else list(AU_COLUMNS)


def write_paths(dest: Path, session_id: str, paths: Sequence[WarpingPath]) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    for column, path in zip(AU_COLUMNS, paths):
        pd.DataFrame({
            "t": np.arange(1, len(path) + 1),
            "u": path.u + 1,
            "v": path.v + 1,
            "deviation": path.deviation,
        }).to_csv(dest / f"{session_id}_{column}.csv", index=False)


def _features_one(
    entry: ManifestEntry,
    method: str,
    config: RunConfig,
    paths_dir: Optional[Path],
    theta_seconds: Optional[float] = None,
) -> SessionOutcome:
    with capture_logs() as records:
        try:
            session = _load_processed(entry)
            values, paths = compute_features(session, method, config, theta_seconds=theta_seconds)
            if paths_dir is not None and paths is not None:
                write_paths(paths_dir, session.session_id, paths)
            outcome = SessionOutcome(entry.session_id, True, features=values, trust_amount=entry.trust_amount)
        except Exception as exc:
            outcome = SessionOutcome(entry.session_id, False, error=_describe(exc), trust_amount=entry.trust_amount)
    outcome.records = records
    return outcome


def _feature_frame(outcomes: Sequence[SessionOutcome], method: str, stage: str) -> pd.DataFrame:
    rows = []
    for outcome in outcomes:
        replay_logs(outcome.records)
        if not outcome.ok:
            logger.error("session=%s stage=%s outcome=failed error=%s", outcome.session_id, stage, outcome.error)
            continue
        logger.info("session=%s stage=%s outcome=ok", outcome.session_id, stage)
        label = None if outcome.trust_amount is None else int(binarize_trust(outcome.trust_amount))
        row = {"session_id": outcome.session_id, "trust_class": label}
        row.update(zip(feature_names(method), outcome.features.tolist()))
        rows.append(row)
    frame = pd.DataFrame(rows, columns=["session_id", "trust_class", *feature_names(method)])
    frame["trust_class"] = frame["trust_class"].astype("Int64")
    return frame


def run_synchrony(out: Path, method: str, config: RunConfig, *, emit_paths: bool = False, jobs: int = 1) -> Path:
    if method not in METHOD_INFO:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(FEATURE_METHODS)}")
    entries = load_manifest(_processed_manifest(out))
    paths_dir = None
    if emit_paths:
        if method in SYNC_METHODS:
            paths_dir = out / "paths" / method
        else:
            logger.warning("--emit-paths ignored: %s does not align signals", method)

    outcomes = Parallel(n_jobs=jobs)(
        delayed(_features_one)(entry, method, config, paths_dir) for entry in entries
    )
    frame = _feature_frame(outcomes, method, f"synchrony:{method}")
    target = out / f"features_{method}.csv"
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)

    failed = [o for o in outcomes if not o.ok]
    if failed:
        pd.DataFrame(
            [{"session_id": o.session_id, "error": o.error} for o in failed], columns=["session_id", "error"]
        ).to_csv(out / f"features_{method}_errors.csv", index=False)
    return target


# --- train / grid ---


def _method_from_features(features_path: Path) -> Optional[str]:
    stem = features_path.stem
    return stem[len("features_"):] if stem.startswith("features_") else None


def _imputed(features_path: Path) -> bool:
    meta = features_path.parent / PROCESSED / PREPROCESS_META
    if not meta.exists():
        return False
    return bool(json.loads(meta.read_text(encoding="utf-8")).get("impute", False))


def _au_label(feature: str) -> str:
    return AU_NAMES[AU_COLUMNS.index(feature)] if feature in AU_COLUMNS else feature


def run_train(
    features_path: Path,
    run_dir: Optional[Path],
    config: RunConfig,
    *,
    model: str = "enet",
) -> CVReport:
    fm = FeatureMatrix.from_csv(_require(features_path, "feature file (run synchrony first)"))
    method = _method_from_features(features_path)
    report = repeated_cv(
        fm,
        config.lam,
        config.alpha,
        folds=config.folds,
        min_visits=config.min_repeats,
        seed=config.seed,
        model=model,
        n_trees=config.n_trees,
    )
    update = {"method": method, "imputed": _imputed(features_path)}
    if model == "enet":
        final = fit_elastic_net(balanced_subsample(fm, config.seed), config.lam, config.alpha)
        update["coefficients"] = dict(zip(fm.feature_names, final.coef.tolist()))
        update["intercept"] = final.intercept
    report = report.model_copy(update=update)

    run_dir = run_dir or features_path.parent / "train" / f"{method or features_path.stem}_{model}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "cv_report.json").write_text(report.to_json(), encoding="utf-8")
    pd.DataFrame(
        [
            {"au_name": _au_label(name), "percent_retained": 100.0 * freq}
            for name, freq in report.selection_frequency.items()
        ],
        columns=["au_name", "percent_retained"],
    ).to_csv(run_dir / "selection_frequency.csv", index=False, float_format="%.4f")
    return report


def run_grid(
    features_path: Path,
    out: Path,
    config: RunConfig,
    lambda_grid: Sequence[float],
    alpha_grid: Sequence[float],
    jobs: int = 1,
) -> GridResult:
    fm = FeatureMatrix.from_csv(_require(features_path, "feature file (run synchrony first)"))
    result = grid_search(
        fm, lambda_grid, alpha_grid,
        folds=config.folds, min_visits=config.min_repeats, seed=config.seed, n_jobs=jobs,
    )
    out.mkdir(parents=True, exist_ok=True)
    result.surface.to_csv(out / "grid_surface.csv", index=False, float_format=FLOAT_FORMAT)
    best = {"lambda": result.best_lambda, "alpha": result.best_alpha, "overall_accuracy": result.best_accuracy}
    (out / "grid_best.json").write_text(json.dumps(best, indent=2, sort_keys=True), encoding="utf-8")
    return result


# --- control / synth ---


def _control_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_control(
    out: Path,
    mode: str,
    config: RunConfig,
    *,
    dest: Optional[Path] = None,
    interval_seconds: Optional[float] = None,
    scope: str = "both",
) -> Path:
    """Write a shuffled copy of the processed sessions under ``dest/processed``."""
    entries = load_manifest(_processed_manifest(out))
    sessions = [_load_processed(e) for e in entries]
    if mode == "pairs":
        shuffled = shuffle_pairs(sessions, config.seed)
    elif mode == "time":
        interval = interval_seconds or config.shuffle_interval_seconds
        shuffled = [
            shuffle_time_series(s, interval, _control_seed(config.seed, i), scope)
            for i, s in enumerate(sessions)
        ]
    else:
        raise ValueError(f"unknown control mode {mode!r}; expected 'pairs' or 'time'")

    dest = dest or out / f"control_{mode}"
    target = dest / PROCESSED
    target.mkdir(parents=True, exist_ok=True)
    write_manifest(target / MANIFEST, [_write_session(target, s) for s in shuffled])
    if mode == "pairs":
        pd.DataFrame(
            [{"session_id": s.session_id, "partner_session_id": s.partner_session_id} for s in shuffled],
            columns=["session_id", "partner_session_id"],
        ).to_csv(target / "pairs.csv", index=False)
    meta = out / PROCESSED / PREPROCESS_META
    if meta.exists():
        (target / PREPROCESS_META).write_text(meta.read_text(encoding="utf-8"), encoding="utf-8")
    for s in shuffled:
        logger.info("session=%s stage=control:%s outcome=ok", s.session_id, mode)
    return target / MANIFEST


def run_synth(out: Path, config: RunConfig) -> Path:
    sessions = generate_synthetic_sessions(config.synth_spec())
    raw = out / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    entries = [_write_session(raw, s) for s in sessions]
    write_manifest(out / MANIFEST, entries)
    return out / MANIFEST


# --- report / sweep ---


def report_row(report: CVReport) -> Dict[str, object]:
    name, measure, features = METHOD_INFO.get(report.method or "", (report.method or "unknown", "", ""))
    if report.imputed:
        name = f"{name} (imputed)"
    return {
        "model_name": name,
        "measure": measure,
        "features": features,
        "class0_acc": report.class0_acc,
        "class1_acc": report.class1_acc,
        "overall_acc": report.overall_accuracy,
        "model": report.model,
    }


def trust_distribution(manifest_path: Path) -> pd.DataFrame:
    amounts = [e.trust_amount for e in load_manifest(manifest_path) if e.trust_amount is not None]
    rows = []
    for amount in TRUST_AMOUNTS:
        count = sum(1 for a in amounts if abs(a - amount) < 1e-9)
        rows.append({"trust_amount": amount, "sessions": count, "trust_class": int(binarize_trust(amount))})
    return pd.DataFrame(rows, columns=["trust_amount", "sessions", "trust_class"])


def run_report(
    reports: Sequence[Path], out: Path, *, manifest: Optional[Path] = None
) -> pd.DataFrame:
    rows = []
    for path in reports:
        path = path / "cv_report.json" if path.is_dir() else path
        _require(path, "cv report (run train first)")
        rows.append(report_row(CVReport.model_validate_json(path.read_text(encoding="utf-8"))))
    table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "report.csv", index=False, float_format="%.4f")
    if manifest is not None:
        trust_distribution(_require(manifest, "manifest")).to_csv(out / "trust_distribution.csv", index=False)
    return table


def discover_reports(out: Path) -> List[Path]:
    return sorted((out / "train").glob("*/cv_report.json"))


def run_sweep(
    out: Path, config: RunConfig, thetas: Sequence[float] = DEFAULT_THETAS, jobs: int = 1
) -> pd.DataFrame:
    """WP-DDTW features and repeated CV at every band width, one shared seed schedule."""
    entries = load_manifest(_processed_manifest(out))
    rows = []
    for theta in thetas:
        outcomes = Parallel(n_jobs=jobs)(
            delayed(_features_one)(entry, "wp_ddtw", config, None, theta) for entry in entries
        )
        fm = FeatureMatrix.from_frame(_feature_frame(outcomes, "wp_ddtw", f"sweep:theta={theta:g}"))
        report = repeated_cv(
            fm, config.lam, config.alpha,
            folds=config.folds, min_visits=config.min_repeats, seed=config.seed,
        )
        rows.append({
            "theta_seconds": float(theta),
            "class0_acc": report.class0_acc,
            "class1_acc": report.class1_acc,
            "overall_acc": report.overall_accuracy,
        })
    table = pd.DataFrame(rows, columns=["theta_seconds", "class0_acc", "class1_acc", "overall_acc"])
    table.to_csv(out / "theta_sweep.csv", index=False, float_format="%.4f")
    return table

