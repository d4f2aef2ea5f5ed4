"""End-to-end orchestration: cluster the training panel, augment the design
with cluster dummies, pick penalty strength by cross-validation, fit, and
forecast the held-out periods.

Leakage rules are strict and testable: clustering, standardization, and
hyperparameter selection see training rows only.  Test rows are assigned to
clusters through the nearest-core-point rule and never feed back into any
training statistic, so deleting or perturbing them leaves every training
artifact byte-identical.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import (
    NOISE,
    DbscanParams,
    ScanRow,
    assign_by_nearest_core,
    dbscan,
    k_distance_profile,
    scan_params,
    suggest_params,
)
from .errors import NumericalError, ValidationError
from ._backend import BACKEND
from .panel import (
    PER_FEATURE_MAX,
    PanelDataset,
    TransformSpec,
    energy_mix_features,
    invert_log,
    log_transform,
)
from .regression import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    ELASTIC_NET,
    LASSO,
    PENALTY_KINDS,
    RIDGE,
    DesignMatrix,
    FittedModel,
    PenaltySpec,
    RankDeficiencyError,
    fit_elastic_net,
    fit_lasso,
    fit_ridge,
    regularization_path,
    standardize,
)
from .tables import write_table

UNIQUE_DUMMY = "unique_dummy"
EXCLUDE = "exclude"
OUTLIER_POLICIES = (UNIQUE_DUMMY, EXCLUDE)

FOLD_ROWS = "rows"
FOLD_PERIODS = "periods"
FOLD_MODES = (FOLD_ROWS, FOLD_PERIODS)

_DEFAULT_LAMBDAS = tuple(float(v) for v in np.logspace(-4, np.log10(0.5), 20))


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split: train periods are the prefix, test the suffix."""

    train_periods: tuple
    test_periods: tuple
    cv_folds: int = 5

    def __post_init__(self) -> None:
        if len(self.train_periods) == 0 or len(self.test_periods) == 0:
            raise ValidationError("both train and test period lists must be non-empty")
        if set(self.train_periods) & set(self.test_periods):
            raise ValidationError("train and test periods overlap")
        if int(self.cv_folds) != self.cv_folds or self.cv_folds < 2:
            raise ValidationError(f"cv_folds must be an integer >= 2, got {self.cv_folds}")


@dataclass
class DprConfig:
    """Declarative description of one full run; mirrors the CLI config file."""

    transform: TransformSpec = field(default_factory=TransformSpec)
    dbscan: DbscanParams | None = None
    eps_grid: tuple | None = None
    minpts_grid: tuple | None = None
    core_strict: bool = False
    penalty_kind: str = ELASTIC_NET
    lambda_grid: tuple = _DEFAULT_LAMBDAS
    alpha_grid: tuple = (0.3, 0.5, 1.0)
    outlier_policy: str = UNIQUE_DUMMY
    baseline_cluster: int = 0
    fold_mode: str = FOLD_ROWS
    holdout_periods: int = 0
    refit_clusters_full: bool = False
    threads: int = 1
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self) -> None:
        if self.penalty_kind not in PENALTY_KINDS:
            raise ValidationError(
                f"penalty_kind must be one of {PENALTY_KINDS}, got {self.penalty_kind!r}"
            )
        if self.outlier_policy not in OUTLIER_POLICIES:
            raise ValidationError(
                f"outlier_policy must be one of {OUTLIER_POLICIES}, got {self.outlier_policy!r}"
            )
        if self.fold_mode not in FOLD_MODES:
            raise ValidationError(f"fold_mode must be one of {FOLD_MODES}")
        if not self.lambda_grid:
            raise ValidationError("lambda_grid is empty")
        if self.penalty_kind == ELASTIC_NET and not self.alpha_grid:
            raise ValidationError("alpha_grid is empty for elastic_net")
        if self.holdout_periods < 0:
            raise ValidationError("holdout_periods must be >= 0")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")


def chronological_split(data: PanelDataset, spec: SplitSpec) -> tuple[PanelDataset, PanelDataset]:
    """Forecasting split by period membership; row order is period-agnostic."""
    n_train = len(spec.train_periods)
    if list(spec.train_periods) != data.periods[:n_train]:
        raise ValidationError(
            f"train periods {list(spec.train_periods)} are not the leading panel periods "
            f"{data.periods[:n_train]}"
        )
    if list(spec.test_periods) != data.periods[n_train:]:
        raise ValidationError(
            f"test periods {list(spec.test_periods)} are not the trailing panel periods "
            f"{data.periods[n_train:]}"
        )
    return (
        data.subset_by_periods(spec.train_periods),
        data.subset_by_periods(spec.test_periods),
    )


def design_from_panel(panel: PanelDataset) -> DesignMatrix:
    """Unstandardized design straight from the panel; rejects rows without targets."""
    missing = np.flatnonzero(np.isnan(panel.targets))
    if missing.size:
        keys = [panel.row_keys()[i] for i in missing[:5]]
        raise ValidationError(
            f"{missing.size} observation(s) lack a target, e.g. {keys}; "
            "regression requires targets"
        )
    return DesignMatrix(
        X=panel.features.copy(),
        y=panel.targets.copy(),
        column_names=list(panel.feature_names),
        standardized=False,
        source_rows=np.arange(panel.n_obs),
    )


def augment_with_dummies(dm: DesignMatrix, labels, policy: str = UNIQUE_DUMMY,
                         baseline: int = 0) -> DesignMatrix:
    """Append 0/1 cluster-membership columns against a baseline cluster.

    k clusters produce k-1 columns named ``cluster_<id>``.  Noise rows are
    handled per policy: ``unique_dummy`` gives each its own singleton column
    ``noise_<row>``, ``exclude`` drops the rows (the dropped identities stay
    visible through ``source_rows``).
    """
    if dm.standardized:
        raise ValidationError("augment_with_dummies expects an unstandardized design")
    if policy not in OUTLIER_POLICIES:
        raise ValidationError(f"unknown outlier policy {policy!r}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (dm.n,):
        raise ValidationError(f"labels length {labels.shape} does not match {dm.n} rows")
    if np.any(labels < NOISE):
        raise ValidationError("labels must be cluster ids >= 0 or -1 for noise")

    ids = sorted(int(c) for c in np.unique(labels[labels != NOISE]))
    if ids and baseline not in ids:
        raise ValidationError(f"baseline cluster {baseline} not among cluster ids {ids}")

    rowids = dm.source_rows if dm.source_rows is not None else np.arange(dm.n)
    if policy == EXCLUDE:
        keep = labels != NOISE
        if not keep.any():
            raise ValidationError("outlier policy 'exclude' removed every row")
        X = dm.X[keep]
        y = dm.y[keep]
        labels_kept = labels[keep]
        rowids = rowids[keep]
        noise_rows: list[int] = []
    else:
        X = dm.X
        y = dm.y
        labels_kept = labels
        noise_rows = [int(i) for i in np.flatnonzero(labels == NOISE)]

    n = X.shape[0]
    cols: list[np.ndarray] = []
    names: list[str] = []
    for c in ids:
        if c == baseline:
            continue
        col = np.zeros(n)
        col[labels_kept == c] = 1.0
        cols.append(col)
        names.append(f"cluster_{c}")
    for i in noise_rows:
        col = np.zeros(n)
        col[i] = 1.0
        cols.append(col)
        names.append(f"noise_{int(rowids[i])}")

    X_aug = np.column_stack([X] + cols) if cols else X.copy()
    return DesignMatrix(
        X=X_aug,
        y=y.copy(),
        column_names=list(dm.column_names) + names,
        standardized=False,
        source_rows=rowids.copy(),
    )


@dataclass(frozen=True)
class CvCell:
    lam: float
    alpha: float | None
    mean_mse: float
    mean_r2: float


@dataclass
class CvResult:
    best_lambda: float
    best_alpha: float | None
    table: list[CvCell]
    fold_sizes: list[int]


def _fold_blocks(n: int, folds: int) -> list[np.ndarray]:
    edges = [int(b * n / folds) for b in range(folds + 1)]
    return [np.arange(edges[b], edges[b + 1]) for b in range(folds)]


def _fold_blocks_by_period(period_of_row: np.ndarray, folds: int) -> list[np.ndarray]:
    uniq = sorted(set(int(p) for p in period_of_row))
    if len(uniq) < folds:
        raise ValidationError(f"{len(uniq)} periods cannot form {folds} period-blocked folds")
    edges = [int(b * len(uniq) / folds) for b in range(folds + 1)]
    blocks = []
    for b in range(folds):
        chunk = set(uniq[edges[b]:edges[b + 1]])
        blocks.append(np.flatnonzero([int(p) in chunk for p in period_of_row]))
    return blocks


def _predict_standardized(model: FittedModel, X: np.ndarray) -> np.ndarray:
    # rows already live in the standardized design space
    return model.intercept + X @ model.coefficients


def _cell_metrics(model: FittedModel, Xv: np.ndarray, yv: np.ndarray) -> tuple[float, float]:
    yhat = _predict_standardized(model, Xv)
    mse = float(np.mean((yv - yhat) ** 2))
    tss = float(np.sum((yv - yv.mean()) ** 2))
    r2 = math.nan if tss == 0.0 else 1.0 - float(np.sum((yv - yhat) ** 2)) / tss
    return mse, r2


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def cross_validate(dm: DesignMatrix, folds: int, kind: str, lambda_grid,
                   alpha_grid=None, fold_mode: str = FOLD_ROWS,
                   period_of_row: np.ndarray | None = None, threads: int = 1,
                   tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> CvResult:
    """Grid search by deterministic contiguous-block cross-validation.

    Folds are contiguous blocks of the row order (or of the period order when
    ``fold_mode='periods'``).  Within a fold chain the lambda grid is walked
    descending with warm starts.  The winner minimizes mean validation MSE;
    exact ties break toward the larger lambda, then the larger alpha.  Ridge
    cells that hit a rank-deficient system (lambda=0 on collinear columns)
    are recorded with NA metrics and never win.
    """
    if kind not in PENALTY_KINDS:
        raise ValidationError(f"unknown penalty kind {kind!r}")
    if not dm.standardized:
        raise ValidationError("cross_validate expects a standardized design")
    if int(folds) != folds or folds < 2:
        raise ValidationError(f"folds must be an integer >= 2, got {folds}")
    lams = [float(l) for l in lambda_grid]
    if not lams:
        raise ValidationError("lambda grid is empty")
    if kind == ELASTIC_NET:
        alphas = [float(a) for a in (alpha_grid or [])]
        if not alphas:
            raise ValidationError("elastic_net cross-validation needs an alpha grid")
    else:
        alphas = [None]

    if fold_mode == FOLD_PERIODS:
        if period_of_row is None:
            raise ValidationError("fold_mode='periods' needs period_of_row")
        blocks = _fold_blocks_by_period(np.asarray(period_of_row), int(folds))
    elif fold_mode == FOLD_ROWS:
        blocks = _fold_blocks(dm.n, int(folds))
    else:
        raise ValidationError(f"unknown fold_mode {fold_mode!r}")
    for b, block in enumerate(blocks):
        if block.size < 2:
            raise ValidationError(f"fold {b} has {block.size} rows; folds need >= 2")
        if dm.n - block.size < 2:
            raise ValidationError(f"fold {b} leaves fewer than 2 training rows")

    all_rows = np.arange(dm.n)
    lam_desc = sorted(set(lams), reverse=True)

    def _chain(work) -> dict:
        alpha, block = work
        train_rows = np.setdiff1d(all_rows, block)
        sub = dm.subset_rows(train_rows)
        Xv = dm.X[block]
        yv = dm.y[block]
        out: dict[tuple[float, float | None], tuple[float, float]] = {}
        if kind == RIDGE:
            for lam in lam_desc:
                try:
                    m = fit_ridge(sub, lam)
                except RankDeficiencyError:
                    out[(lam, None)] = (math.nan, math.nan)
                    continue
                out[(lam, None)] = _cell_metrics(m, Xv, yv)
        else:
            warm = None
            a = 1.0 if kind == LASSO else float(alpha)
            for lam in lam_desc:
                m = fit_elastic_net(sub, lam, a, tol=tol, max_iter=max_iter, warm_start=warm)
                warm = m.coefficients
                out[(lam, alpha)] = _cell_metrics(m, Xv, yv)
        return out

    chains = [(alpha, block) for alpha in alphas for block in blocks]
    results = _pmap(_chain, chains, threads)

    table: list[CvCell] = []
    best: CvCell | None = None
    for lam in lams:
        for alpha in alphas:
            per_fold = []
            for (chain_alpha, _), res in zip(chains, results):
                if chain_alpha == alpha:
                    per_fold.append(res[(lam, alpha)])
            mean_mse = float(np.mean([m for m, _ in per_fold]))
            mean_r2 = float(np.mean([r for _, r in per_fold]))
            cell = CvCell(lam, alpha, mean_mse, mean_r2)
            table.append(cell)
            if math.isnan(mean_mse):
                continue
            if (
                best is None
                or cell.mean_mse < best.mean_mse
                or (cell.mean_mse == best.mean_mse and cell.lam > best.lam)
                or (
                    cell.mean_mse == best.mean_mse
                    and cell.lam == best.lam
                    and (best.alpha is not None and cell.alpha is not None
                         and cell.alpha > best.alpha)
                )
            ):
                best = cell
    if best is None:
        raise NumericalError("every cross-validation cell failed; no usable hyperparameters")
    return CvResult(
        best_lambda=best.lam,
        best_alpha=best.alpha,
        table=table,
        fold_sizes=[int(b.size) for b in blocks],
    )


@dataclass
class ForecastRow:
    entity: str
    period: object
    cluster: int
    is_noise: bool
    actual_log: float | None
    predicted_log: float
    actual_source: float | None
    predicted_source: float
    relative_error: float | None


@dataclass
class ForecastResult:
    rows: list[ForecastRow]
    mean_error: float | None
    error_variance: float | None

    @property
    def n_noise_rows(self) -> int:
        return sum(1 for r in self.rows if r.is_noise)


def forecast_report(model: FittedModel, test: PanelDataset, transform: TransformSpec,
                    extra_columns: np.ndarray | None = None,
                    extra_labels: np.ndarray | None = None) -> ForecastResult:
    """Predict the test panel and compare against actuals in both unit systems.

    ``extra_columns`` carries the dummy block when the model was fit on an
    augmented design (the pipeline builds it from the cluster assignment in
    ``extra_labels``).  The relative error is the deviation on the exp scale,
    |exp(yhat) - exp(y)| / exp(y); the source-unit value columns apply the
    full inverse transform exp(v) - offset.  Rows without a target predict
    but contribute nothing to the summary; the summary is the mean and the
    population variance of the log-unit errors (yhat - y).
    """
    if test.transform is not None:
        raise ValidationError("forecast_report expects a source-unit test panel")
    test_log = log_transform(test, transform)
    X = test_log.features
    if extra_columns is not None:
        extra_columns = np.asarray(extra_columns, dtype=np.float64)
        if extra_columns.shape[0] != test.n_obs:
            raise ValidationError("extra_columns row count does not match the test panel")
        X = np.hstack([X, extra_columns])
    p = len(model.column_names)
    if X.shape[1] != p:
        raise ValidationError(
            f"test design has {X.shape[1]} columns, model expects {p}; "
            "was the dummy block supplied?"
        )
    from .regression import predict

    yhat = predict(model, X)
    labels = (
        np.full(test.n_obs, NOISE, dtype=np.intp)
        if extra_labels is None
        else np.asarray(extra_labels, dtype=np.intp)
    )

    rows: list[ForecastRow] = []
    errors: list[float] = []
    keys = test.row_keys()
    for i, (entity, period) in enumerate(keys):
        y = float(test_log.targets[i])
        have = not math.isnan(y)
        pred_src = float(invert_log(np.array(yhat[i]), transform))
        if have:
            rel = abs(math.exp(yhat[i]) - math.exp(y)) / math.exp(y)
            errors.append(float(yhat[i]) - y)
        rows.append(
            ForecastRow(
                entity=entity,
                period=period,
                cluster=int(labels[i]),
                is_noise=bool(labels[i] == NOISE),
                actual_log=y if have else None,
                predicted_log=float(yhat[i]),
                actual_source=float(invert_log(np.array(y), transform)) if have else None,
                predicted_source=pred_src,
                relative_error=rel if have else None,
            )
        )
    if errors:
        e = np.asarray(errors)
        mean_error = float(e.mean())
        error_variance = float(np.mean((e - e.mean()) ** 2))
    else:
        mean_error = None
        error_variance = None
    return ForecastResult(rows=rows, mean_error=mean_error, error_variance=error_variance)


def _mix_for_new_rows(train: PanelDataset, new: PanelDataset, mode: str) -> np.ndarray:
    """Mix features for unseen rows using train-derived statistics.

    Row shares and the identity mode are row-local, so nothing leaks either
    way.  Per-feature-max divides by the entity's training-period maxima;
    entities absent from training fall back to their own maxima.
    """
    if mode != PER_FEATURE_MAX:
        matrix, _ = energy_mix_features(new, mode)
        return matrix
    train_max: dict[str, np.ndarray] = {}
    for e, name in enumerate(train.entities):
        rows = np.flatnonzero(train.entity_idx == e)
        if rows.size:
            train_max[name] = train.features[rows].max(axis=0)
    out = np.zeros_like(new.features)
    for e, name in enumerate(new.entities):
        rows = np.flatnonzero(new.entity_idx == e)
        if rows.size == 0:
            continue
        maxima = train_max.get(name)
        if maxima is None:
            maxima = new.features[rows].max(axis=0)
        pos = np.flatnonzero(maxima > 0)
        out[np.ix_(rows, pos)] = new.features[np.ix_(rows, pos)] / maxima[pos]
    return out


def _dummy_block(dummy_names: list[str], labels: np.ndarray) -> np.ndarray:
    block = np.zeros((labels.shape[0], len(dummy_names)))
    for c, name in enumerate(dummy_names):
        if name.startswith("cluster_"):
            cid = int(name.split("_", 1)[1])
            block[labels == cid, c] = 1.0
    return block


@dataclass
class RunReport:
    """Everything one run produced; ``write`` lays it out as a directory."""

    backend: str
    split: SplitSpec
    penalty_kind: str
    cluster_params: DbscanParams
    cluster_k: int
    cluster_sc: float | None
    cluster_sse: float
    train_keys: list
    test_keys: list
    train_labels: np.ndarray
    test_labels: np.ndarray
    core_mask: np.ndarray
    scan_rows: list[ScanRow] | None
    chosen: PenaltySpec
    cv: CvResult
    model: FittedModel
    fitted_keys: list
    fitted_actual: np.ndarray
    fitted_predicted: np.ndarray
    forecast: ForecastResult
    metrics: dict
    path_lambdas: list[float]
    path_models: list[FittedModel]
    k_distance: np.ndarray
    zero_mix_rows: list
    full_labels: np.ndarray | None
    model_bundle: dict

    def write(self, out_dir) -> None:
        write_report(self, out_dir)


def _metrics_block(y: np.ndarray, yhat: np.ndarray) -> dict:
    resid = y - yhat
    mse = float(np.mean(resid**2))
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = None if tss == 0.0 else 1.0 - float(np.sum(resid**2)) / tss
    return {"r2": r2, "mse": mse}


@contextmanager
def _stage(name: str):
    try:
        yield
    except (ValidationError, NumericalError) as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc


def run_dpr(data: PanelDataset, config: DprConfig, split: SplitSpec) -> RunReport:
    """Execute the full flow and return the report.

    Stages: chronological split, clustering features from the source-unit
    training panel, dbscan (given parameters or the SC-maximizing scan cell),
    log transform, dummy augmentation, standardization, cross-validated
    hyperparameter choice, final fit, a coefficient path at the chosen
    mixing, and test-period forecasting with nearest-core cluster assignment.
    Any stage failure aborts with the stage named in the error.
    """
    if data.transform is not None:
        raise ValidationError("run_dpr expects a source-unit panel")

    with _stage("split"):
        train_p, test_p = chronological_split(data, split)

    with _stage("mix"):
        mode = config.transform.normalize_mode
        mix_train, zero_rows = energy_mix_features(train_p, mode)

    with _stage("cluster"):
        scan_rows: list[ScanRow] | None = None
        if config.dbscan is not None:
            params = config.dbscan
        else:
            if config.eps_grid is None or config.minpts_grid is None:
                raise ValidationError(
                    "config needs either dbscan parameters or eps/min_pts scan grids"
                )
            scan_rows = scan_params(
                mix_train, config.eps_grid, config.minpts_grid,
                core_strict=config.core_strict, threads=config.threads,
            )
            suggestion = suggest_params(scan_rows)
            if suggestion is None:
                raise NumericalError(
                    "no scan cell had a defined silhouette; adjust the grids"
                )
            params = DbscanParams(
                eps=suggestion.eps, min_pts=suggestion.min_pts,
                core_strict=config.core_strict,
            )
        cmodel = dbscan(mix_train, params)
        if cmodel.k > 0 and config.baseline_cluster not in range(cmodel.k):
            raise ValidationError(
                f"baseline cluster {config.baseline_cluster} does not exist; "
                f"clustering found ids 0..{cmodel.k - 1}"
            )

    with _stage("transform"):
        train_log = log_transform(train_p, config.transform)
        test_log = log_transform(test_p, config.transform)

    with _stage("design"):
        dm0 = design_from_panel(train_log)
        dm1 = augment_with_dummies(
            dm0, cmodel.labels, policy=config.outlier_policy,
            baseline=config.baseline_cluster,
        )

    with _stage("standardize"):
        dmS = standardize(dm1.X, dm1.y, dm1.column_names, source_rows=dm1.source_rows)

    with _stage("cv"):
        period_of_row = None
        if config.fold_mode == FOLD_PERIODS:
            period_of_row = train_log.period_idx[dmS.source_rows]
        cv = cross_validate(
            dmS, split.cv_folds, config.penalty_kind, config.lambda_grid,
            alpha_grid=config.alpha_grid, fold_mode=config.fold_mode,
            period_of_row=period_of_row, threads=config.threads,
            tol=config.tol, max_iter=config.max_iter,
        )

    with _stage("fit"):
        if config.penalty_kind == RIDGE:
            model = fit_ridge(dmS, cv.best_lambda)
        elif config.penalty_kind == LASSO:
            model = fit_lasso(dmS, cv.best_lambda, tol=config.tol, max_iter=config.max_iter)
        else:
            model = fit_elastic_net(
                dmS, cv.best_lambda, cv.best_alpha, tol=config.tol, max_iter=config.max_iter
            )

    with _stage("path"):
        path_alpha = {RIDGE: 0.0, LASSO: 1.0}.get(config.penalty_kind, cv.best_alpha)
        path_lams = sorted(set(float(l) for l in config.lambda_grid), reverse=True)
        path_models = regularization_path(
            dmS, path_lams, path_alpha, tol=config.tol, max_iter=config.max_iter
        )

    with _stage("holdout"):
        holdout_metrics = None
        if config.holdout_periods:
            if config.holdout_periods >= len(split.train_periods):
                raise ValidationError(
                    "holdout_periods must leave at least one training period"
                )
            held = set(split.train_periods[-config.holdout_periods:])
            held_idx = {train_log.periods.index(p) for p in held}
            row_periods = train_log.period_idx[dmS.source_rows]
            hold_rows = np.flatnonzero([int(p) in held_idx for p in row_periods])
            fit_rows = np.flatnonzero([int(p) not in held_idx for p in row_periods])
            if hold_rows.size < 1 or fit_rows.size < 2:
                raise ValidationError("holdout split leaves too few rows")
            sub = dmS.subset_rows(fit_rows)
            if config.penalty_kind == RIDGE:
                hm = fit_ridge(sub, cv.best_lambda)
            elif config.penalty_kind == LASSO:
                hm = fit_lasso(sub, cv.best_lambda, tol=config.tol, max_iter=config.max_iter)
            else:
                hm = fit_elastic_net(sub, cv.best_lambda, cv.best_alpha,
                                     tol=config.tol, max_iter=config.max_iter)
            yhat_h = _predict_standardized(hm, dmS.X[hold_rows])
            holdout_metrics = _metrics_block(dmS.y[hold_rows], yhat_h)

    with _stage("forecast"):
        mix_test = _mix_for_new_rows(train_p, test_p, mode)
        test_labels = assign_by_nearest_core(mix_train, cmodel, mix_test)
        dummy_names = list(dmS.column_names[len(train_log.feature_names):])
        block = _dummy_block(dummy_names, test_labels)
        fres = forecast_report(
            model, test_p, config.transform,
            extra_columns=block, extra_labels=test_labels,
        )

    with _stage("report"):
        yhat_train = _predict_standardized(model, dmS.X)
        train_metrics = dict(model.diagnostics)
        have_test = [i for i, r in enumerate(fres.rows) if r.actual_log is not None]
        test_metrics = None
        if have_test:
            y_t = np.array([fres.rows[i].actual_log for i in have_test])
            yh_t = np.array([fres.rows[i].predicted_log for i in have_test])
            test_metrics = _metrics_block(y_t, yh_t)
        winner = next(
            c for c in cv.table
            if c.lam == cv.best_lambda and c.alpha == cv.best_alpha
        )
        metrics = {
            "train": {
                "r2": train_metrics["r2"],
                "mse": train_metrics["mse"],
                "sparsity": train_metrics["sparsity"],
            },
            "validation": {"mean_mse": winner.mean_mse, "mean_r2": winner.mean_r2},
            "holdout": holdout_metrics,
            "test": test_metrics,
        }

        full_labels = None
        if config.refit_clusters_full:
            mix_full, _ = energy_mix_features(data, mode)
            full_labels = dbscan(mix_full, params).labels

        kd_k = min(params.min_pts, mix_train.shape[0] - 1)
        k_dist = k_distance_profile(mix_train, max(1, kd_k))

        train_keys = train_p.row_keys()
        bundle = {
            "format": "dprkit-model-v1",
            "regression": model.to_dict(),
            "transform": {
                "log_offset": config.transform.log_offset,
                "normalize_mode": mode,
            },
            "features": list(train_log.feature_names),
            "clustering": {
                "eps": params.eps,
                "min_pts": params.min_pts,
                "core_strict": params.core_strict,
                "k": cmodel.k,
                "baseline": config.baseline_cluster,
                "outlier_policy": config.outlier_policy,
                "core_points": [[float(v) for v in mix_train[i]]
                                for i in np.flatnonzero(cmodel.core_mask)],
                "core_labels": [int(cmodel.labels[i])
                                for i in np.flatnonzero(cmodel.core_mask)],
                "dummy_names": dummy_names,
            },
            "entity_maxima": (
                {
                    e: [float(v) for v in train_p.features[
                        np.flatnonzero(train_p.entity_idx == i)].max(axis=0)]
                    for i, e in enumerate(train_p.entities)
                    if np.any(train_p.entity_idx == i)
                }
                if mode == PER_FEATURE_MAX
                else None
            ),
        }

        return RunReport(
            backend=BACKEND,
            split=split,
            penalty_kind=config.penalty_kind,
            cluster_params=params,
            cluster_k=cmodel.k,
            cluster_sc=cmodel.sc,
            cluster_sse=cmodel.sse,
            train_keys=train_keys,
            test_keys=test_p.row_keys(),
            train_labels=cmodel.labels,
            test_labels=test_labels,
            core_mask=cmodel.core_mask,
            scan_rows=scan_rows,
            chosen=model.penalty,
            cv=cv,
            model=model,
            fitted_keys=[train_keys[i] for i in dmS.source_rows],
            fitted_actual=dmS.y.copy(),
            fitted_predicted=yhat_train,
            forecast=fres,
            metrics=metrics,
            path_lambdas=path_lams,
            path_models=path_models,
            k_distance=k_dist,
            zero_mix_rows=[train_keys[i] for i in zero_rows],
            full_labels=full_labels,
            model_bundle=bundle,
        )


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_report(report: RunReport, out_dir) -> None:
    """Serialize the report as a directory of delimited tables plus JSON records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for (entity, period), lab, is_core in zip(
        report.train_keys, report.train_labels, report.core_mask
    ):
        rows.append([entity, period, "train", int(lab), int(is_core)])
    for (entity, period), lab in zip(report.test_keys, report.test_labels):
        rows.append([entity, period, "test", int(lab), None])
    write_table(out / "clusters.csv", ["entity", "period", "split", "label", "core"], rows)

    if report.full_labels is not None:
        keys = report.train_keys + report.test_keys
        write_table(
            out / "clusters_full.csv",
            ["entity", "period", "label"],
            [[e, p, int(l)] for (e, p), l in zip(keys, report.full_labels)],
        )

    if report.scan_rows is not None:
        write_table(
            out / "scan.csv",
            ["eps", "min_pts", "k", "sc", "sse"],
            [[r.eps, r.min_pts, r.k, r.sc, r.sse] for r in report.scan_rows],
        )

    write_table(
        out / "cv_table.csv",
        ["lambda", "alpha", "mean_mse", "mean_r2"],
        [
            [c.lam, c.alpha, _nan_none(c.mean_mse), _nan_none(c.mean_r2)]
            for c in report.cv.table
        ],
    )

    m = report.model
    coef_rows = [["(intercept)", m.intercept, m.source_intercept, 0]]
    src = m.source_coefficients
    for j, name in enumerate(m.column_names):
        coef_rows.append(
            [name, float(m.coefficients[j]), float(src[j]), int(m.zero_variance[j])]
        )
    write_table(
        out / "coefficients.csv",
        ["name", "standardized", "source_scale", "forced_zero"],
        coef_rows,
    )

    write_table(
        out / "fitted.csv",
        ["entity", "period", "actual_log", "predicted_log", "residual"],
        [
            [e, p, float(a), float(f), float(a) - float(f)]
            for (e, p), a, f in zip(
                report.fitted_keys, report.fitted_actual, report.fitted_predicted
            )
        ],
    )

    write_table(
        out / "forecast.csv",
        [
            "entity", "period", "cluster", "noise_row", "actual_log", "predicted_log",
            "actual_source", "predicted_source", "relative_error_source",
        ],
        [
            [
                r.entity, r.period, r.cluster, int(r.is_noise), r.actual_log,
                r.predicted_log, r.actual_source, r.predicted_source, r.relative_error,
            ]
            for r in report.forecast.rows
        ],
    )

    summary = {
        "chosen": {
            "kind": report.chosen.kind,
            "lambda": report.chosen.lam,
            "alpha": report.chosen.alpha,
        },
        "clustering": {
            "eps": report.cluster_params.eps,
            "min_pts": report.cluster_params.min_pts,
            "core_strict": report.cluster_params.core_strict,
            "k": report.cluster_k,
            "sc": report.cluster_sc,
            "sse": report.cluster_sse,
            "n_noise": int(np.sum(report.train_labels == NOISE)),
            "n_core": int(np.sum(report.core_mask)),
        },
        "metrics": report.metrics,
        "forecast": {
            "mean_error": report.forecast.mean_error,
            "error_variance": report.forecast.error_variance,
            "n_rows": len(report.forecast.rows),
            "n_noise_rows": report.forecast.n_noise_rows,
        },
        "fit": {
            "iterations": report.model.diagnostics.get("iterations"),
            "converged": report.model.diagnostics.get("converged"),
            "backend": report.backend,
        },
        "split": {
            "train_periods": list(report.split.train_periods),
            "test_periods": list(report.split.test_periods),
            "cv_folds": report.split.cv_folds,
        },
        "flagged": {
            "zero_mix_rows": [[e, p] for e, p in report.zero_mix_rows],
            "test_noise_rows": [
                [r.entity, r.period] for r in report.forecast.rows if r.is_noise
            ],
        },
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, default=_json_default) + "\n", encoding="utf-8"
    )
    (out / "model.json").write_text(
        json.dumps(report.model_bundle, indent=2, default=_json_default) + "\n",
        encoding="utf-8",
    )


def _nan_none(v: float):
    return None if isinstance(v, float) and math.isnan(v) else v
