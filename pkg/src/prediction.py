"""
Trust-class prediction: elastic-net penalized logistic regression,
class-balanced repeated stratified cross-validation, (lambda, alpha) grid
search and a bagged-tree baseline.

The elastic-net objective is

    (1/N) * sum_n D(y_n, eta_n) + lam * ((1 - alpha)/2 * ||beta||_2^2 + alpha * ||beta||_1)

with D the binomial deviance and eta = beta0 + z_std @ beta. Features are
z-scored at fit time and the intercept is not penalized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from numba import njit
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, logit
from sklearn.ensemble import RandomForestClassifier
from sklearn.model_selection import StratifiedKFold

from .core import LabelError, get_logger

logger = get_logger("prediction")

OUTER_TOL = 1e-9
INNER_TOL = 1e-10
MAX_OUTER = 10_000
MAX_SWEEPS = 100_000
MIN_WEIGHT = 1e-5

ModelKind = Literal["enet", "rf"]


# --- Feature matrix ---


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    session_ids: Tuple[str, ...]
    feature_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-D array")
        n, k = self.X.shape
        if self.y.shape != (n,) or len(self.session_ids) != n:
            raise ValueError("X, y and session_ids disagree on the row count")
        if len(self.feature_names) != k:
            raise ValueError("feature_names length does not match the column count")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("feature matrix contains missing or non-finite values")
        if not np.all(np.isin(self.y, (0, 1))):
            raise LabelError("labels must be binary 0/1")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def class_counts(self) -> Tuple[int, int]:
        ones = int(self.y.sum())
        return len(self) - ones, ones

    def take(self, rows: np.ndarray) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            X=self.X[rows],
            y=self.y[rows],
            session_ids=tuple(self.session_ids[i] for i in rows),
            feature_names=self.feature_names,
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "FeatureMatrix":
        """Build from a features table (session_id, trust_class, features...).

        Rows without a trust class are dropped with a warning.
        """
        for column in ("session_id", "trust_class"):
            if column not in df.columns:
                raise LabelError(f"feature table lacks a {column} column")
        labelled = df[df["trust_class"].notna()]
        dropped = len(df) - len(labelled)
        if dropped:
            logger.warning("Dropped %d session(s) without a trust class", dropped)
        if labelled.empty:
            raise LabelError("no labelled sessions in feature table")
        names = [c for c in df.columns if c not in ("session_id", "trust_class")]
        return cls(
            X=labelled[names].to_numpy(dtype=float),
            y=labelled["trust_class"].to_numpy().astype(int),
            session_ids=tuple(str(s) for s in labelled["session_id"]),
            feature_names=tuple(names),
        )

    @classmethod
    def from_csv(cls, path: Path | str) -> "FeatureMatrix":
        return cls.from_frame(pd.read_csv(path, dtype={"session_id": str}))


def _require_both_classes(y: np.ndarray) -> None:
    if np.unique(y).size < 2:
        raise LabelError("both trust classes must be present to fit a model")


# --- Elastic net ---


@dataclass(frozen=True, eq=False)
class ElasticNetFit:
    beta: np.ndarray
    beta0: float
    coef: np.ndarray
    intercept: float
    lam: float
    alpha: float
    converged: bool
    n_iterations: int
    mean: np.ndarray
    scale: np.ndarray
    feature_names: Tuple[str, ...] = ()

    @property
    def support(self) -> np.ndarray:
        return self.beta != 0.0


def deviance(beta0: float, beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    """Mean binomial deviance."""
    eta = beta0 + X @ beta
    return float(np.mean(2.0 * (np.logaddexp(0.0, eta) - y * eta)))


def deviance_gradient(
    beta0: float, beta: np.ndarray, X: np.ndarray, y: np.ndarray
) -> Tuple[float, np.ndarray]:
    resid = expit(beta0 + X @ beta) - y
    n = X.shape[0]
    return float(2.0 * resid.sum() / n), 2.0 * (X.T @ resid) / n


def penalty(beta: np.ndarray, lam: float, alpha: float) -> float:
    return lam * ((1.0 - alpha) / 2.0 * float(beta @ beta) + alpha * float(np.abs(beta).sum()))


def lambda_max(X: np.ndarray, y: np.ndarray, alpha: float) -> float:
    """Smallest lambda at which every standardized coefficient is zero."""
    Z, _, _ = standardize(X)
    score = np.abs(2.0 * Z.T @ (y.mean() - y) / Z.shape[0])
    return float(score.max() / max(alpha, 1e-3))


def standardize(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return (X - mean) / scale, mean, scale


@njit(cache=True)
def _weighted_cd(X, w, z, beta0, beta, l1, l2, tol, max_sweeps):
    n, p = X.shape
    resid = z - beta0
    for j in range(p):
        if beta[j] != 0.0:
            resid -= beta[j] * X[:, j]
    curv = np.empty(p)
    for j in range(p):
        curv[j] = 2.0 * np.sum(w * X[:, j] * X[:, j]) / n
    wsum = np.sum(w)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        shift = np.sum(w * resid) / wsum
        beta0 += shift
        resid -= shift
        max_change = abs(shift)
        for j in range(p):
            denom = curv[j] + l2
            new = 0.0
            if denom > 0.0:
                rho = 2.0 * np.sum(w * X[:, j] * resid) / n + curv[j] * beta[j]
                if rho > l1:
                    new = (rho - l1) / denom
                elif rho < -l1:
                    new = (rho + l1) / denom
            delta = new - beta[j]
            if delta != 0.0:
                resid -= delta * X[:, j]
                beta[j] = new
                if abs(delta) > max_change:
                    max_change = abs(delta)
        if max_change < tol:
            break
    return beta0, beta, sweeps


def _fit_standardized(
    Z: np.ndarray, y: np.ndarray, lam: float, alpha: float
) -> Tuple[float, np.ndarray, bool, int]:
    """IRLS outer loop around weighted coordinate descent, with step halving."""
    n, p = Z.shape
    Zf = np.asfortranarray(Z)
    l1, l2 = lam * alpha, lam * (1.0 - alpha)
    beta = np.zeros(p)
    beta0 = float(logit(np.clip(y.mean(), 1e-6, 1 - 1e-6)))
    objective = deviance(beta0, beta, Z, y) + penalty(beta, lam, alpha)

    for iteration in range(1, MAX_OUTER + 1):
        eta = beta0 + Z @ beta
        prob = expit(eta)
        w = np.maximum(prob * (1.0 - prob), MIN_WEIGHT)
        working = eta + (y - prob) / w
        cand0, cand, _ = _weighted_cd(Zf, w, working, beta0, beta.copy(), l1, l2, INNER_TOL, MAX_SWEEPS)

        step = 1.0
        new0, new = cand0, cand
        new_obj = deviance(new0, new, Z, y) + penalty(new, lam, alpha)
        while new_obj > objective + 1e-12 * max(1.0, abs(objective)) and step > 1e-10:
            step /= 2.0
            new0 = beta0 + step * (cand0 - beta0)
            new = beta + step * (cand - beta)
            new_obj = deviance(new0, new, Z, y) + penalty(new, lam, alpha)

        change = max(abs(new0 - beta0), float(np.max(np.abs(new - beta), initial=0.0)))
        beta0, beta, objective = float(new0), new, new_obj
        if change < OUTER_TOL:
            return beta0, beta, True, iteration
    return beta0, beta, False, MAX_OUTER


def fit_elastic_net(X: FeatureMatrix, lam: float, alpha: float) -> ElasticNetFit:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    raw = np.asarray(X.X, dtype=float)
    y = np.asarray(X.y, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite feature values")
    _require_both_classes(y)

    Z, mean, scale = standardize(raw)
    beta0, beta, converged, n_iter = _fit_standardized(Z, y, lam, alpha)
    if not converged:
        logger.warning("elastic net did not converge in %d iterations (lambda=%g, alpha=%g)", n_iter, lam, alpha)
    coef = beta / scale
    return ElasticNetFit(
        beta=beta,
        beta0=beta0,
        coef=coef,
        intercept=float(beta0 - coef @ mean),
        lam=float(lam),
        alpha=float(alpha),
        converged=converged,
        n_iterations=n_iter,
        mean=mean,
        scale=scale,
        feature_names=X.feature_names,
    )


def predict(fit: ElasticNetFit, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Probability of trust class 1 and the predicted class for one row or a matrix of rows."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != fit.beta.size:
        raise ValueError(f"expected {fit.beta.size} features, got {z.shape[-1]}")
    prob = expit(((z - fit.mean) / fit.scale) @ fit.beta + fit.beta0)
    return prob, (prob >= 0.5).astype(int)


# --- Random forest ---


def fit_random_forest(X: FeatureMatrix, n_trees: int = 20, seed: int = 0) -> RandomForestClassifier:
    _require_both_classes(X.y)
    model = RandomForestClassifier(
        n_estimators=n_trees,
        criterion="gini",
        max_features=int(math.ceil(math.sqrt(X.X.shape[1]))),
        bootstrap=True,
        min_samples_split=2,
        random_state=seed,
    )
    return model.fit(X.X, X.y)


def predict_random_forest(model: RandomForestClassifier, z: np.ndarray) -> np.ndarray:
    """Hard majority vote over the trees; a tied vote goes to class 0."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    votes = np.zeros(z.shape[0])
    for tree in model.estimators_:
        votes += model.classes_[tree.predict(z).astype(int)]
    return (votes > len(model.estimators_) / 2.0).astype(int)


# --- Cross-validation ---


def _balanced_rows(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    zeros, ones = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
    if zeros.size == ones.size:
        return np.arange(y.size)
    minority, majority = (zeros, ones) if zeros.size < ones.size else (ones, zeros)
    kept = rng.choice(majority, size=minority.size, replace=False)
    return np.sort(np.concatenate([minority, kept]))


def balanced_subsample(X: FeatureMatrix, seed) -> FeatureMatrix:
    _require_both_classes(X.y)
    return X.take(_balanced_rows(X.y, np.random.default_rng(seed)))


class FoldRecord(BaseModel):
    repeat: int
    fold: int
    train_ids: List[str]
    test_ids: List[str]


class CVReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    model: str = "enet"
    method: Optional[str] = None
    lam: Optional[float] = Field(default=None, alias="lambda")
    alpha: Optional[float] = None
    folds: int
    min_visits: int
    seed: int
    n_repeats: int
    n_fits: int
    class_accuracy: List[float]
    overall_accuracy: float
    selection_frequency: Dict[str, float]
    visits: Dict[str, int]
    correct: Dict[str, int]
    coefficients: Optional[Dict[str, float]] = None
    intercept: Optional[float] = None
    imputed: bool = False
    fold_log: List[FoldRecord] = Field(default_factory=list, exclude=True)

    @property
    def class0_acc(self) -> float:
        return self.class_accuracy[0]

    @property
    def class1_acc(self) -> float:
        return self.class_accuracy[1]

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


def _repeat_seeds(seed: int, repeat: int) -> Tuple[int, int]:
    state = np.random.SeedSequence([seed, repeat]).generate_state(2)
    return int(state[0]), int(state[1])


def repeated_cv(
    X: FeatureMatrix,
    lam: float = 0.0518,
    alpha: float = 0.802,
    *,
    folds: int = 5,
    min_visits: int = 50,
    seed: int = 0,
    model: ModelKind = "enet",
    n_trees: int = 20,
    keep_fold_log: bool = False,
    max_repeats: Optional[int] = None,
) -> CVReport:
    """Repeat balanced subsampling + stratified k-fold until every session was held out min_visits times."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    _require_both_classes(X.y)
    if min(X.class_counts) < folds:
        raise LabelError(f"each class needs at least {folds} sessions for {folds}-fold CV")
    max_repeats = max_repeats or 100 * min_visits

    n, k = X.X.shape
    visits = np.zeros(n, dtype=np.int64)
    correct = np.zeros(n, dtype=np.int64)
    selected = np.zeros(k)
    n_fits = 0
    fold_log: List[FoldRecord] = []

    repeat = 0
    while visits.min() < min_visits:
        if repeat >= max_repeats:
            logger.warning("repeated CV stopped at the %d-repeat cap", max_repeats)
            break
        sub_seed, fold_seed = _repeat_seeds(seed, repeat)
        rows = _balanced_rows(X.y, np.random.default_rng(sub_seed))
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=fold_seed)
        for fold, (train, test) in enumerate(splitter.split(X.X[rows], X.y[rows])):
            train_rows, test_rows = rows[train], rows[test]
            train_fm = X.take(train_rows)
            try:
                if model == "rf":
                    forest = fit_random_forest(train_fm, n_trees, seed=(fold_seed + fold) % 2**32)
                    labels = predict_random_forest(forest, X.X[test_rows])
                    selected += forest.feature_importances_ > 0
                else:
                    fit = fit_elastic_net(train_fm, lam, alpha)
                    _, labels = predict(fit, X.X[test_rows])
                    selected += fit.support
            except Exception as exc:
                exc.add_note(f"raised in repeat {repeat}, fold {fold}")
                raise
            n_fits += 1
            visits[test_rows] += 1
            correct[test_rows] += labels == X.y[test_rows]
            if keep_fold_log:
                fold_log.append(FoldRecord(
                    repeat=repeat,
                    fold=fold,
                    train_ids=[X.session_ids[i] for i in train_rows],
                    test_ids=[X.session_ids[i] for i in test_rows],
                ))
        repeat += 1

    class_accuracy = []
    for cls in (0, 1):
        mask = X.y == cls
        total = visits[mask].sum()
        class_accuracy.append(float(correct[mask].sum() / total) if total else 0.0)

    return CVReport(
        model=model,
        lam=lam if model == "enet" else None,
        alpha=alpha if model == "enet" else None,
        folds=folds,
        min_visits=min_visits,
        seed=seed,
        n_repeats=repeat,
        n_fits=n_fits,
        class_accuracy=class_accuracy,
        overall_accuracy=float(np.mean(class_accuracy)),
        selection_frequency={name: float(selected[j] / max(n_fits, 1)) for j, name in enumerate(X.feature_names)},
        visits={sid: int(v) for sid, v in zip(X.session_ids, visits)},
        correct={sid: int(c) for sid, c in zip(X.session_ids, correct)},
        fold_log=fold_log,
    )


# --- Grid search ---


def default_lambda_grid(points: int = 10) -> np.ndarray:
    return np.linspace(0.02, 0.25, points)


def default_alpha_grid(points: int = 10) -> np.ndarray:
    return np.linspace(0.01, 1.0, points)


@dataclass
class GridResult:
    best_lambda: float
    best_alpha: float
    best_accuracy: float
    surface: pd.DataFrame = field(repr=False)


def grid_search(
    X: FeatureMatrix,
    lambda_grid: Sequence[float],
    alpha_grid: Sequence[float],
    *,
    folds: int = 5,
    min_visits: int = 50,
    seed: int = 0,
    n_jobs: int = 1,
) -> GridResult:
    """Repeated CV at every (lambda, alpha); ties go to larger lambda, then larger alpha."""
    if len(lambda_grid) == 0 or len(alpha_grid) == 0:
        raise ValueError("lambda and alpha grids must be nonempty")
    points = [(float(lam), float(alpha)) for lam in lambda_grid for alpha in alpha_grid]
    reports = Parallel(n_jobs=n_jobs)(
        delayed(repeated_cv)(X, lam, alpha, folds=folds, min_visits=min_visits, seed=seed)
        for lam, alpha in points
    )
    surface = pd.DataFrame(
        [
            {
                "lambda": lam,
                "alpha": alpha,
                "overall_accuracy": r.overall_accuracy,
                "class0_acc": r.class0_acc,
                "class1_acc": r.class1_acc,
            }
            for (lam, alpha), r in zip(points, reports)
        ],
        columns=["lambda", "alpha", "overall_accuracy", "class0_acc", "class1_acc"],
    )
    best = max(range(len(points)), key=lambda i: (reports[i].overall_accuracy, points[i][0], points[i][1]))
    return GridResult(
        best_lambda=points[best][0],
        best_alpha=points[best][1],
        best_accuracy=reports[best].overall_accuracy,
        surface=surface,
    )
