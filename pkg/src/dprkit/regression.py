"""Penalized linear regression over a standardized design matrix.

All three fitters minimize

    (1/N) * sum_i (y_i - b0 - x_i . b)^2  +  lambda * P(b)

with P(b) = alpha*||b||_1 + (1-alpha)*||b||_2^2 and an unpenalized
intercept.  alpha=1 is the lasso, alpha=0 is ridge; there is no extra 1/2 on
the quadratic term.  The split-penalty convention that drops the 1/N and
carries separate multipliers (lambda_1 on the L1 term, lambda_2 on the L2
term) maps onto this objective via lambda_1 = N*lambda*alpha and
lambda_2 = N*lambda*(1-alpha).

Ridge is solved in closed form from the normal equations; lasso and elastic
net run cyclic coordinate descent with soft thresholding, which produces
exact zeros.  The sweep kernel is compiled when the extension built; a numpy
fallback with the same update order is selected at import otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._backend import enet_sweeps
from .errors import ConvergenceError, RankDeficiencyError, ValidationError

RIDGE = "ridge"
LASSO = "lasso"
ELASTIC_NET = "elastic_net"
PENALTY_KINDS = (RIDGE, LASSO, ELASTIC_NET)

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 100_000


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family and strength; alpha is meaningful only for elastic_net."""

    kind: str
    lam: float
    alpha: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in PENALTY_KINDS:
            raise ValidationError(f"penalty kind must be one of {PENALTY_KINDS}, got {self.kind!r}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.kind == ELASTIC_NET:
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValidationError(f"elastic_net requires alpha in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ValidationError(f"alpha is only meaningful for elastic_net, got kind {self.kind!r}")

    @property
    def mixing(self) -> float:
        """Effective alpha for the shared objective: ridge 0, lasso 1."""
        if self.kind == RIDGE:
            return 0.0
        if self.kind == LASSO:
            return 1.0
        return float(self.alpha)


@dataclass
class DesignMatrix:
    """Regression design: X, y, names, and (once standardized) column stats.

    ``zero_variance`` marks constant columns; they are left untouched by
    standardization and their coefficients are forced to zero by every
    fitter.  ``source_rows`` traces each row back to the originating panel
    observation when the matrix was built by the pipeline.
    """

    X: np.ndarray
    y: np.ndarray
    column_names: list[str]
    standardized: bool = False
    column_means: np.ndarray | None = None
    column_stds: np.ndarray | None = None
    zero_variance: np.ndarray | None = None
    source_rows: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValidationError(f"X must be 2-d, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValidationError(
                f"y shape {self.y.shape} does not match {self.X.shape[0]} design rows"
            )
        if len(self.column_names) != self.X.shape[1]:
            raise ValidationError(
                f"{len(self.column_names)} column names for {self.X.shape[1]} columns"
            )
        if len(set(self.column_names)) != len(self.column_names):
            raise ValidationError("column names must be unique")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("design matrix contains non-finite values")
        if not np.all(np.isfinite(self.y)):
            raise ValidationError("targets contain non-finite values")
        if self.zero_variance is None:
            self.zero_variance = np.zeros(self.X.shape[1], dtype=bool)
        else:
            self.zero_variance = np.asarray(self.zero_variance, dtype=bool)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset_rows(self, rows) -> "DesignMatrix":
        """Row subset sharing the parent's column stats and flags (used by CV)."""
        rows = np.asarray(rows)
        return DesignMatrix(
            X=self.X[rows].copy(),
            y=self.y[rows].copy(),
            column_names=list(self.column_names),
            standardized=self.standardized,
            column_means=self.column_means,
            column_stds=self.column_stds,
            zero_variance=self.zero_variance.copy(),
            source_rows=None if self.source_rows is None else self.source_rows[rows].copy(),
        )


def _constant_columns(X: np.ndarray) -> np.ndarray:
    if X.shape[0] == 0:
        return np.ones(X.shape[1], dtype=bool)
    return np.all(X == X[0, :], axis=0)


def standardize(X, y, column_names: list[str] | None = None,
                source_rows: np.ndarray | None = None) -> DesignMatrix:
    """Center and scale each column to sample mean 0 and sample std 1 (ddof=1).

    The target is left unscaled.  Constant columns cannot be scaled: they are
    flagged in ``zero_variance``, passed through untouched, and their stored
    std is 0.  Requires at least two rows.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"X must be 2-d, got shape {X.shape}")
    if X.shape[0] < 2:
        raise ValidationError(f"standardization needs >= 2 rows, got {X.shape[0]}")
    if column_names is None:
        column_names = [f"x{j}" for j in range(X.shape[1])]
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValidationError("standardize: non-finite values in X or y")

    means = X.mean(axis=0)
    stds = X.std(axis=0, ddof=1)
    zv = _constant_columns(X) | (stds == 0.0)
    out = X.copy()
    active = ~zv
    out[:, active] = (X[:, active] - means[active]) / stds[active]
    stds = stds.copy()
    stds[zv] = 0.0
    return DesignMatrix(
        X=out,
        y=y.copy(),
        column_names=list(column_names),
        standardized=True,
        column_means=means,
        column_stds=stds,
        zero_variance=zv,
        source_rows=source_rows,
    )


@dataclass
class FittedModel:
    """Coefficients on the standardized scale plus everything needed to predict.

    ``diagnostics`` holds training r2 (None when var(y)=0), mse, sparsity,
    iterations (coordinate-descent sweeps; 0 for the closed-form ridge), and
    the converged flag.  Source-scale equivalents fold the stored column
    stats back in, so predictions agree between the two parameterizations.
    """

    intercept: float
    coefficients: np.ndarray
    penalty: PenaltySpec
    column_names: list[str]
    column_means: np.ndarray
    column_stds: np.ndarray
    zero_variance: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def source_coefficients(self) -> np.ndarray:
        out = np.zeros_like(self.coefficients)
        active = ~self.zero_variance
        out[active] = self.coefficients[active] / self.column_stds[active]
        return out

    @property
    def source_intercept(self) -> float:
        active = ~self.zero_variance
        shift = float(
            np.dot(self.coefficients[active], self.column_means[active] / self.column_stds[active])
        )
        return self.intercept - shift

    def to_dict(self) -> dict:
        return {
            "penalty": {"kind": self.penalty.kind, "lambda": self.penalty.lam,
                        "alpha": self.penalty.alpha},
            "intercept": self.intercept,
            "coefficients": [float(b) for b in self.coefficients],
            "source_intercept": self.source_intercept,
            "source_coefficients": [float(b) for b in self.source_coefficients],
            "column_names": list(self.column_names),
            "column_means": [float(v) for v in self.column_means],
            "column_stds": [float(v) for v in self.column_stds],
            "zero_variance": [bool(v) for v in self.zero_variance],
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        pen = d["penalty"]
        return cls(
            intercept=float(d["intercept"]),
            coefficients=np.asarray(d["coefficients"], dtype=np.float64),
            penalty=PenaltySpec(pen["kind"], float(pen["lambda"]),
                                None if pen["alpha"] is None else float(pen["alpha"])),
            column_names=list(d["column_names"]),
            column_means=np.asarray(d["column_means"], dtype=np.float64),
            column_stds=np.asarray(d["column_stds"], dtype=np.float64),
            zero_variance=np.asarray(d["zero_variance"], dtype=bool),
            diagnostics=dict(d["diagnostics"]),
        )


def soft_threshold(z: float, gamma: float) -> float:
    """sign(z) * max(|z| - gamma, 0); gamma must be >= 0."""
    if gamma < 0:
        raise ValidationError(f"soft threshold requires gamma >= 0, got {gamma}")
    az = abs(z) - gamma
    if az <= 0.0:
        return 0.0
    return math.copysign(az, z)


def _check_fit_inputs(dm: DesignMatrix, lam: float) -> None:
    if not isinstance(dm, DesignMatrix):
        raise ValidationError("fit expects a DesignMatrix")
    if not dm.standardized:
        raise ValidationError("fit expects a standardized DesignMatrix")
    if not math.isfinite(lam) or lam < 0:
        raise ValidationError(f"lambda must be finite and >= 0, got {lam}")
    if dm.n < 2:
        raise ValidationError(f"fit needs >= 2 rows, got {dm.n}")


def _centered_active(dm: DesignMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, np.ndarray]:
    """Active (non-flagged, non-degenerate) centered columns for the fit rows.

    Centering is done on the rows actually being fit, so subsets of a
    standardized matrix (CV folds) are handled exactly: the intercept is
    recovered as ybar - means . beta afterwards.  Columns constant on these
    rows (e.g. a singleton dummy whose row fell out of the fold) are dropped
    from the update set; their coefficients stay zero.
    """
    active = ~dm.zero_variance & ~_constant_columns(dm.X)
    Xa = dm.X[:, active]
    means = Xa.mean(axis=0)
    Xc = Xa - means
    ybar = float(dm.y.mean())
    yc = dm.y - ybar
    return Xc, yc, means, ybar, active


def _diagnostics(dm: DesignMatrix, intercept: float, beta: np.ndarray,
                 iterations: int, converged: bool, zv: np.ndarray) -> dict:
    yhat = intercept + dm.X @ beta
    resid = dm.y - yhat
    mse = float(np.mean(resid**2))
    tss = float(np.sum((dm.y - dm.y.mean()) ** 2))
    r2 = None if tss == 0.0 else 1.0 - float(np.sum(resid**2)) / tss
    p_eff = int(np.sum(~zv))
    sparsity = 0.0 if p_eff == 0 else float(np.count_nonzero(beta[~zv])) / p_eff
    return {
        "r2": r2,
        "mse": mse,
        "sparsity": sparsity,
        "iterations": int(iterations),
        "converged": bool(converged),
    }


def fit_ridge(dm: DesignMatrix, lam: float) -> FittedModel:
    """Closed-form ridge via the normal equations (X'X + N*lambda*I) b = X'y.

    At lambda=0 a rank-deficient system (collinear columns) raises
    RankDeficiencyError instead of returning one of infinitely many least
    squares solutions.
    """
    _check_fit_inputs(dm, lam)
    Xc, yc, means, ybar, active = _centered_active(dm)
    n, pa = Xc.shape
    beta = np.zeros(dm.p)
    if pa > 0:
        if lam == 0.0 and np.linalg.matrix_rank(Xc) < pa:
            raise RankDeficiencyError(
                "ridge with lambda=0 on rank-deficient columns; "
                "use lambda > 0 or drop collinear columns"
            )
        G = Xc.T @ Xc + n * lam * np.eye(pa)
        try:
            ba = np.linalg.solve(G, Xc.T @ yc)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"normal equations are singular: {exc}") from None
        beta[active] = ba
        intercept = ybar - float(means @ ba)
    else:
        intercept = ybar
    return FittedModel(
        intercept=intercept,
        coefficients=beta,
        penalty=PenaltySpec(RIDGE, float(lam)),
        column_names=list(dm.column_names),
        column_means=dm.column_means.copy(),
        column_stds=dm.column_stds.copy(),
        zero_variance=dm.zero_variance.copy(),
        diagnostics=_diagnostics(dm, intercept, beta, 0, True, dm.zero_variance),
    )


def enet_objective(X, y, intercept: float, beta, lam: float, alpha: float) -> float:
    """(1/N)||y - b0 - X b||^2 + lambda*(alpha*||b||_1 + (1-alpha)*||b||_2^2)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    resid = y - intercept - X @ beta
    return float(
        np.mean(resid**2)
        + lam * (alpha * np.abs(beta).sum() + (1.0 - alpha) * np.dot(beta, beta))
    )


def _fit_cd(dm: DesignMatrix, lam: float, alpha: float, kind: str,
            rec_alpha: float | None, tol: float, max_iter: int,
            warm_start: np.ndarray | None, debug: bool,
            kernel=None) -> FittedModel:
    _check_fit_inputs(dm, lam)
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    if not tol > 0:
        raise ValidationError(f"tol must be > 0, got {tol}")
    if int(max_iter) != max_iter or max_iter < 1:
        raise ValidationError(f"max_iter must be an integer >= 1, got {max_iter}")
    sweeps_fn = enet_sweeps if kernel is None else kernel

    Xc, yc, means, ybar, active = _centered_active(dm)
    n, pa = Xc.shape
    beta_full = np.zeros(dm.p)
    iterations = 0
    converged = True
    if pa > 0:
        Xf = np.asfortranarray(Xc)
        col_scale = np.einsum("ij,ij->j", Xc, Xc) / n
        ba = np.zeros(pa)
        if warm_start is not None:
            ws = np.asarray(warm_start, dtype=np.float64)
            if ws.shape != (dm.p,):
                raise ValidationError(
                    f"warm start has shape {ws.shape}, expected ({dm.p},)"
                )
            ba[:] = ws[active]
        resid = yc - Xf @ ba
        thresh = lam * alpha / 2.0
        l2 = lam * (1.0 - alpha)
        if debug:
            # one sweep at a time so the objective can be asserted monotone
            prev = math.inf
            converged = False
            while iterations < max_iter:
                done, _, conv = sweeps_fn(Xf, resid, ba, col_scale, thresh, l2, tol, 1)
                iterations += done
                obj = float(np.mean(resid**2)) + lam * (
                    alpha * np.abs(ba).sum() + (1.0 - alpha) * np.dot(ba, ba)
                )
                if obj > prev + 1e-12 * max(1.0, abs(prev)):
                    raise ConvergenceError(
                        f"objective increased during sweep {iterations}: {prev} -> {obj}"
                    )
                prev = obj
                if conv:
                    converged = True
                    break
        else:
            iterations, _, converged = sweeps_fn(
                Xf, resid, ba, col_scale, thresh, l2, tol, int(max_iter)
            )
        beta_full[active] = ba
        intercept = ybar - float(means @ ba)
    else:
        intercept = ybar
    return FittedModel(
        intercept=intercept,
        coefficients=beta_full,
        penalty=PenaltySpec(kind, float(lam), rec_alpha),
        column_names=list(dm.column_names),
        column_means=dm.column_means.copy(),
        column_stds=dm.column_stds.copy(),
        zero_variance=dm.zero_variance.copy(),
        diagnostics=_diagnostics(dm, intercept, beta_full, iterations, converged,
                                 dm.zero_variance),
    )


def fit_elastic_net(dm: DesignMatrix, lam: float, alpha: float,
                    tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                    warm_start: np.ndarray | None = None, debug: bool = False,
                    kernel=None) -> FittedModel:
    """Cyclic coordinate descent for the elastic net.

    Convergence is declared when the largest coefficient change in a sweep
    drops below ``tol``; hitting ``max_iter`` sweeps instead is reported via
    ``diagnostics['converged'] = False``, never silently.  ``debug=True``
    fits one sweep at a time and asserts the objective never increases.
    ``kernel`` overrides the backend sweep function (benchmarking/tests).
    """
    return _fit_cd(dm, lam, alpha, ELASTIC_NET, float(alpha), tol, max_iter,
                   warm_start, debug, kernel)


def fit_lasso(dm: DesignMatrix, lam: float,
              tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              warm_start: np.ndarray | None = None, debug: bool = False,
              kernel=None) -> FittedModel:
    """Lasso = elastic net at alpha 1, recorded under its own penalty kind."""
    return _fit_cd(dm, lam, 1.0, LASSO, None, tol, max_iter, warm_start, debug, kernel)


def regularization_path(dm: DesignMatrix, lambdas: Sequence[float], alpha: float,
                        tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                        debug: bool = False, kernel=None) -> list[FittedModel]:
    """Warm-started fits along a strictly descending lambda grid.

    Each solution seeds the next; within tol the results match cold starts.
    """
    lams = [float(l) for l in lambdas]
    if not lams:
        raise ValidationError("lambda grid is empty")
    for a, b in zip(lams, lams[1:]):
        if not b < a:
            raise ValidationError(f"lambda grid must be strictly descending: {a} -> {b}")
    models: list[FittedModel] = []
    warm: np.ndarray | None = None
    for lam in lams:
        m = fit_elastic_net(dm, lam, alpha, tol=tol, max_iter=max_iter,
                            warm_start=warm, debug=debug, kernel=kernel)
        models.append(m)
        warm = m.coefficients
    return models


def predict(model: FittedModel, rows) -> np.ndarray:
    """Predict targets for rows given in the unstandardized design space.

    Rows are standardized with the stats stored in the model; flagged
    zero-variance columns are skipped (their coefficients are zero).
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    p = len(model.column_names)
    if rows.shape[1] != p:
        raise ValidationError(f"prediction rows have {rows.shape[1]} columns, model has {p}")
    if not np.all(np.isfinite(rows)):
        raise ValidationError("prediction rows contain non-finite values")
    active = ~model.zero_variance
    z = (rows[:, active] - model.column_means[active]) / model.column_stds[active]
    return model.intercept + z @ model.coefficients[active]


def metric_mse(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size == 0:
        raise ValidationError("mse needs matching non-empty vectors")
    return float(np.mean((y - yhat) ** 2))


def metric_r2(y, yhat) -> float:
    """1 - RSS/TSS; undefined (raises) when y has zero variance."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size == 0:
        raise ValidationError("r2 needs matching non-empty vectors")
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss == 0.0:
        raise ValidationError("r2 undefined: target has zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / tss


def metric_sparsity(coefficients, zero_variance=None) -> float:
    """Share of penalized coefficients that are exactly nonzero.

    Accepts a :class:`FittedModel` or a bare coefficient vector.  Zero-variance
    columns are forced to zero by construction, so they are excluded from
    numerator and denominator alike; the intercept never counts.  All-zero
    width gives 0, fully dense gives 1.
    """
    if isinstance(coefficients, FittedModel):
        zero_variance = coefficients.zero_variance
        coefficients = coefficients.coefficients
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if zero_variance is None:
        zero_variance = np.zeros(coefficients.shape[0], dtype=bool)
    active = ~np.asarray(zero_variance, dtype=bool)
    p_eff = int(active.sum())
    if p_eff == 0:
        return 0.0
    return float(np.count_nonzero(coefficients[active])) / p_eff
