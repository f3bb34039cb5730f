"""
Reliability and validity statistics for OAM scores.

- coefficient of variation of repeated instance scores
- Pearson correlation and paired t-tests
- forward-selection linear models scored by leave-one-out correlation,
  evaluated leave-one-speaker-out
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import betainc

from .config import SelectionConfig
from .exceptions import (
    ConstantInput,
    DegenerateInput,
    EmptyInput,
    InsufficientData,
    NoOverlap,
    ShapeMismatch,
    ZeroMean,
)
from .oam import OamScore

logger = logging.getLogger(__name__)


# --- Coefficient of variation ---

@dataclass(frozen=True)
class ConsonantScoreSet:
    speaker_id: str
    consonant: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class CovRow:
    speaker_id: str
    consonant: str
    gamma: float
    n: int

    def to_dict(self) -> dict:
        return {"speaker_id": self.speaker_id, "consonant": self.consonant, "gamma": self.gamma, "n": self.n}


def cov(values: ConsonantScoreSet | Sequence[float]) -> float:
    """sigma / |mu| with the population (1/N) standard deviation"""
    if isinstance(values, ConsonantScoreSet):
        values = values.values
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise EmptyInput("coefficient of variation needs at least one value")
    mu = a.mean()
    if mu == 0:
        raise ZeroMean("coefficient of variation is undefined for a zero mean")
    sigma = np.sqrt(np.mean((a - mu) ** 2))
    return float(sigma / abs(mu))


def score_sets(scores: Sequence[OamScore]) -> list[ConsonantScoreSet]:
    """Instance values grouped by (speaker, consonant), sorted"""
    grouped: dict[tuple[str, str], list[float]] = {}
    for s in scores:
        grouped.setdefault((s.speaker_id, s.target_consonant), []).append(s.value)
    return [ConsonantScoreSet(spk, c, tuple(v)) for (spk, c), v in sorted(grouped.items())]


def cov_table(scores: Sequence[OamScore]) -> list[CovRow]:
    rows = []
    for score_set in score_sets(scores):
        try:
            gamma = cov(score_set)
        except ZeroMean:
            logger.warning(f"Skipping {score_set.speaker_id}/{score_set.consonant}: zero mean score")
            continue
        rows.append(CovRow(score_set.speaker_id, score_set.consonant, gamma, len(score_set.values)))
    return rows


def cov_summary(rows: Sequence[CovRow]) -> list[dict]:
    """Per-consonant box statistics of gamma over speakers"""
    by_consonant: dict[str, list[float]] = {}
    for row in rows:
        by_consonant.setdefault(row.consonant, []).append(row.gamma)
    summary = []
    for consonant in sorted(by_consonant):
        g = np.asarray(by_consonant[consonant])
        q1, median, q3 = np.percentile(g, [25, 50, 75])
        summary.append({
            "consonant": consonant, "n": int(g.size), "min": float(g.min()),
            "q1": float(q1), "median": float(median), "q3": float(q3), "max": float(g.max()),
        })
    return summary


# --- Correlation and t-tests ---

def _two_sided_p(t: float, df: int) -> float:
    """Two-sided Student-t tail probability via the regularized incomplete beta"""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    t_stat: float
    p_value: float

    def to_dict(self) -> dict:
        return {"n": self.n, "r": self.r, "t": self.t_stat, "p": self.p_value}


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float

    def to_dict(self) -> dict:
        return {"t": self.t, "df": self.df, "p": self.p}


def _paired_arrays(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    x, y = _paired_arrays(x, y)
    n = x.size
    if n < 3:
        raise InsufficientData(f"Pearson correlation needs at least 3 pairs, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ConstantInput("Pearson correlation is undefined for a constant input")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    t = math.copysign(math.inf, r) if abs(r) == 1.0 else r * math.sqrt(df / (1.0 - r * r))
    return CorrelationResult(r, n, t, _two_sided_p(t, df))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Paired t-test on a - b with the sample (n - 1) standard deviation"""
    a, b = _paired_arrays(a, b)
    n = a.size
    if n < 2:
        raise InsufficientData(f"paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    df = n - 1
    if np.all(d == 0):
        return TTestResult(0.0, df, 1.0)
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateInput("all paired differences are identical")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return TTestResult(t, df, _two_sided_p(t, df))


# --- Linear models ---

def _design(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x])


def _solve(design: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    gram = design.T @ design + ridge * np.eye(design.shape[1])
    return np.linalg.solve(gram, design.T @ y)


def loo_predictions(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """
    Leave-one-out predictions of a ridge-damped linear fit with intercept.

    Uses the hat-matrix identity, which is exact for a fixed ridge term:
    loo_i = y_i - (y_i - yhat_i) / (1 - h_ii). Rows with leverage 1 get NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    design = _design(x)
    gram = design.T @ design + ridge * np.eye(design.shape[1])
    hat = design @ np.linalg.solve(gram, design.T)
    fitted = hat @ y
    leverage = np.diag(hat)
    with np.errstate(divide="ignore", invalid="ignore"):
        residual = (y - fitted) / (1.0 - leverage)
    residual[np.isclose(leverage, 1.0)] = np.nan
    return y - residual


def loo_criterion(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> float:
    """Pearson r between leave-one-out predictions and targets; -inf when undefined"""
    predictions = loo_predictions(x, y, ridge)
    if not np.all(np.isfinite(predictions)) or np.ptp(predictions) == 0:
        return -math.inf
    try:
        return pearson(predictions, y).r
    except ConstantInput:
        return -math.inf


@dataclass(frozen=True)
class SelectionStep:
    step: int
    feature: int
    criterion: float


@dataclass(frozen=True, eq=False)
class LinearModel:
    selected: tuple[int, ...]
    weights: np.ndarray
    intercept: float
    trace: tuple[SelectionStep, ...]
    column_means: np.ndarray
    criterion: float
    rank_deficient: bool = False
    feature_names: Optional[tuple[str, ...]] = field(default=None)

    @property
    def selected_names(self) -> list[str]:
        if self.feature_names is None:
            return [str(i) for i in self.selected]
        return [self.feature_names[i] for i in self.selected]

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Predictions for rows of the full feature matrix; NaNs take the training means"""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        x = np.where(np.isnan(x), self.column_means, x)
        return self.intercept + x[:, list(self.selected)] @ self.weights


def _impute(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = (~np.isnan(features)).sum(axis=0)
    sums = np.nansum(features, axis=0)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return np.where(np.isnan(features), means, features), means


def fit_forward_linear(
    features: np.ndarray,
    ratings: Sequence[float],
    config: SelectionConfig = SelectionConfig(),
    feature_names: Optional[Sequence[str]] = None,
) -> LinearModel:
    """
    Greedy forward selection on leave-one-out Pearson r, then a ridge-damped fit.

    Missing cells take the column mean of the given rows; columns with no
    observed values are never selected. Selection starts from a criterion
    of 0 and stops when the best addition improves it by less than
    config.min_improvement or config.max_features are selected.
    """
    features = np.asarray(features, dtype=np.float64)
    y = np.asarray(ratings, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != y.size:
        raise ShapeMismatch(f"feature matrix {features.shape} does not match {y.size} ratings")
    if y.size < 3:
        raise InsufficientData(f"linear model needs at least 3 speakers, got {y.size}")

    observed = ~np.all(np.isnan(features), axis=0)
    x, means = _impute(features)
    remaining = [j for j in range(x.shape[1]) if observed[j]]
    selected: list[int] = []
    trace: list[SelectionStep] = []
    current = 0.0

    while remaining and len(selected) < config.max_features:
        scored = [(loo_criterion(x[:, selected + [j]], y, config.ridge), j) for j in remaining]
        best_value, best_feature = max(scored, key=lambda item: (item[0], -item[1]))
        if best_value - current < config.min_improvement:
            break
        selected.append(best_feature)
        remaining.remove(best_feature)
        current = best_value
        trace.append(SelectionStep(len(selected), best_feature, best_value))
        logger.debug(f"Selected feature {best_feature} (criterion {best_value:.4f})")

    design = _design(x[:, selected])
    rank_deficient = bool(np.linalg.matrix_rank(design) < design.shape[1])
    if rank_deficient:
        logger.warning(f"Design matrix for features {selected} is rank deficient; ridge term keeps the solve defined")
    coef = _solve(design, y, config.ridge)

    return LinearModel(
        selected=tuple(selected),
        weights=coef[1:],
        intercept=float(coef[0]),
        trace=tuple(trace),
        column_means=means,
        criterion=current,
        rank_deficient=rank_deficient,
        feature_names=tuple(feature_names) if feature_names is not None else None,
    )


@dataclass(frozen=True, eq=False)
class LosoResult:
    speaker_ids: tuple[str, ...]
    ratings: np.ndarray
    predictions: np.ndarray
    correlation: CorrelationResult
    models: tuple[LinearModel, ...]


def loso_evaluate(
    features: np.ndarray,
    ratings: Sequence[float],
    speaker_ids: Sequence[str],
    config: SelectionConfig = SelectionConfig(),
    feature_names: Optional[Sequence[str]] = None,
    threads: int = 1,
) -> LosoResult:
    """Leave-one-speaker-out predictions; each fold selects and fits on the other speakers only"""
    features = np.asarray(features, dtype=np.float64)
    y = np.asarray(ratings, dtype=np.float64)
    n = y.size
    if n < 4:
        raise InsufficientData(f"leave-one-speaker-out needs at least 4 speakers, got {n}")

    def fold(held_out: int) -> tuple[float, LinearModel]:
        train_rows = np.arange(n) != held_out
        model = fit_forward_linear(features[train_rows], y[train_rows], config, feature_names)
        return float(model.predict(features[held_out])[0]), model

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(fold, range(n)))
    else:
        folds = [fold(i) for i in range(n)]

    predictions = np.asarray([p for p, _ in folds])
    correlation = pearson(predictions, y)
    logger.info(f"Leave-one-speaker-out over {n} speakers: r = {correlation.r:.4f}")
    return LosoResult(tuple(speaker_ids), y, predictions, correlation, tuple(m for _, m in folds))


# --- Comparing two score tables ---

@dataclass(frozen=True)
class CovComparison:
    pairs: tuple[tuple[str, str, float, float], ...]  # (speaker, consonant, gamma_a, gamma_b)
    rows_a: tuple[CovRow, ...]
    rows_b: tuple[CovRow, ...]
    ttest: TTestResult


def cov_compare(scores_a: Sequence[OamScore], scores_b: Sequence[OamScore]) -> CovComparison:
    """Gamma per matched (speaker, consonant) cell and a paired t-test over the cells"""
    rows_a, rows_b = cov_table(scores_a), cov_table(scores_b)
    gamma_b = {(r.speaker_id, r.consonant): r.gamma for r in rows_b}
    pairs = tuple(
        (r.speaker_id, r.consonant, r.gamma, gamma_b[(r.speaker_id, r.consonant)])
        for r in rows_a
        if (r.speaker_id, r.consonant) in gamma_b
    )
    if not pairs:
        raise NoOverlap("the two score tables share no (speaker, consonant) cell")
    ttest = paired_ttest([p[2] for p in pairs], [p[3] for p in pairs])
    logger.info(f"Compared {len(pairs)} matched cells: t = {ttest.t:.4f}, p = {ttest.p:.4g}")
    return CovComparison(pairs, tuple(rows_a), tuple(rows_b), ttest)
