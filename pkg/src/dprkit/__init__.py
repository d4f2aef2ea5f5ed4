"""Density-clustered penalized regression for panel forecasting.

The package splits into layers: ``panel`` (loading, transforms, mix
features), ``clustering`` (density clustering and its diagnostics),
``regression`` (penalized fits on a standardized design), ``pipeline``
(the end-to-end flow with leakage-safe splitting), and ``cli``.  The
coordinate descent inner loop runs on a compiled kernel when the extension
built, with a pure numpy fallback; set ``DPRKIT_FORCE_PURE=1`` to force
the fallback.
"""

from ._backend import BACKEND
from .clustering import (
    NOISE,
    ClusterModel,
    DbscanParams,
    ScanRow,
    assign_by_nearest_core,
    dbscan,
    k_distance_profile,
    pairwise_distances,
    scan_params,
    silhouette_sc,
    sse,
    suggest_params,
)
from .errors import (
    ConvergenceError,
    DprError,
    NumericalError,
    RankDeficiencyError,
    ValidationError,
)
from .panel import (
    EmissionFactorTable,
    Observation,
    PanelDataset,
    PanelSchema,
    TransformSpec,
    compute_emissions,
    energy_mix_features,
    invert_log,
    load_panel,
    log_transform,
    write_panel,
)
from .pipeline import (
    CvResult,
    DprConfig,
    ForecastResult,
    RunReport,
    SplitSpec,
    augment_with_dummies,
    chronological_split,
    cross_validate,
    design_from_panel,
    forecast_report,
    run_dpr,
    write_report,
)
from .regression import (
    DesignMatrix,
    FittedModel,
    PenaltySpec,
    enet_objective,
    fit_elastic_net,
    fit_lasso,
    fit_ridge,
    metric_mse,
    metric_r2,
    metric_sparsity,
    predict,
    regularization_path,
    soft_threshold,
    standardize,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "NOISE",
    "ClusterModel",
    "ConvergenceError",
    "CvResult",
    "DbscanParams",
    "DesignMatrix",
    "DprConfig",
    "DprError",
    "EmissionFactorTable",
    "FittedModel",
    "ForecastResult",
    "NumericalError",
    "Observation",
    "PanelDataset",
    "PanelSchema",
    "PenaltySpec",
    "RankDeficiencyError",
    "RunReport",
    "ScanRow",
    "SplitSpec",
    "TransformSpec",
    "ValidationError",
    "assign_by_nearest_core",
    "augment_with_dummies",
    "chronological_split",
    "compute_emissions",
    "cross_validate",
    "dbscan",
    "design_from_panel",
    "energy_mix_features",
    "enet_objective",
    "fit_elastic_net",
    "fit_lasso",
    "fit_ridge",
    "forecast_report",
    "invert_log",
    "k_distance_profile",
    "load_panel",
    "log_transform",
    "metric_mse",
    "metric_r2",
    "metric_sparsity",
    "pairwise_distances",
    "predict",
    "regularization_path",
    "run_dpr",
    "scan_params",
    "silhouette_sc",
    "soft_threshold",
    "sse",
    "standardize",
    "suggest_params",
    "write_panel",
    "write_report",
]
