"""Command line front end.

Each subcommand validates its inputs fully before writing anything, prints
exactly one machine-parsable ``<stage> ok key=value ...`` line to stdout on
success, and reserves stderr for diagnostics.  Exit codes: 0 success, 1
invalid input or usage, 2 numerical failure (rank deficiency, divergence,
no usable cross-validation cell).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import clustering, pipeline, regression
from .clustering import ClusterModel, DbscanParams, dbscan, scan_params, suggest_params
from .errors import ConvergenceError, NumericalError, ValidationError
from ._backend import BACKEND
from .panel import (
    MIX_MODES,
    NO_NORMALIZATION,
    RAW_SHARES,
    EmissionFactorTable,
    PanelDataset,
    PanelSchema,
    TransformSpec,
    compute_emissions,
    energy_mix_features,
    load_panel,
    log_transform,
    write_panel,
)
from .regression import ELASTIC_NET, LASSO, PENALTY_KINDS, RIDGE, FittedModel, standardize
from .tables import NA, fmt, write_table


class _Parser(argparse.ArgumentParser):
    # usage problems are invalid input, not numerical failure
    def error(self, message: str):
        raise ValidationError(message)


def _parse_grid(text: str) -> list[float]:
    """Grid syntax: ``a,b,c`` literal, ``range:lo:hi:step``, ``logspace:lo:hi:n``."""
    text = text.strip()
    try:
        if text.startswith("range:"):
            _, lo, hi, step = text.split(":")
            lo, hi, step = float(lo), float(hi), float(step)
            if step <= 0:
                raise ValidationError(f"grid step must be positive in {text!r}")
            vals = np.arange(lo, hi + step / 2, step)
            return [float(v) for v in vals]
        if text.startswith("logspace:"):
            _, lo, hi, n = text.split(":")
            return [float(v) for v in np.logspace(float(lo), float(hi), int(n))]
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"cannot parse grid {text!r}: {exc}") from exc


def _parse_int_grid(text: str) -> list[int]:
    vals = _parse_grid(text)
    out = []
    for v in vals:
        if v != int(v):
            raise ValidationError(f"grid {text!r} must contain integers")
        out.append(int(v))
    return out


def _parse_period_token(tok: str, as_int: bool):
    tok = tok.strip()
    if not as_int:
        return tok
    try:
        return int(tok)
    except ValueError as exc:
        raise ValidationError(f"period {tok!r} is not an integer") from exc


def _parse_periods(text: str, panel_periods: list) -> list:
    """Either ``a,b,c`` or an inclusive integer range ``a-b``."""
    as_int = bool(panel_periods) and isinstance(panel_periods[0], int)
    text = text.strip()
    if as_int and "-" in text and "," not in text:
        lo_s, _, hi_s = text.partition("-")
        try:
            lo, hi = int(lo_s), int(hi_s)
        except ValueError as exc:
            raise ValidationError(f"cannot parse period range {text!r}") from exc
        if hi < lo:
            raise ValidationError(f"period range {text!r} is reversed")
        return [p for p in panel_periods if lo <= p <= hi]
    return [_parse_period_token(t, as_int) for t in text.split(",") if t.strip()]


def _read_config(path) -> dict[str, str]:
    """key=value lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {path}")
    for ln, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValidationError(f"{path}:{ln}: empty key")
        if key in out:
            raise ValidationError(f"{path}:{ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _require_input(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"input file not found: {path}")
    return p


def _load_canonical(path) -> PanelDataset:
    return load_panel(_require_input(path), PanelSchema())


def _ok(stage: str, **kv) -> None:
    parts = [stage, "ok"]
    for key, value in kv.items():
        if isinstance(value, float):
            parts.append(f"{key}={fmt(value)}")
        elif value is None:
            parts.append(f"{key}={NA}")
        else:
            parts.append(f"{key}={value}")
    print(" ".join(parts))


def _mix_matrix(panel: PanelDataset, mode: str) -> np.ndarray:
    matrix, flagged = energy_mix_features(panel, mode)
    for i in flagged[:5]:
        entity, period = panel.row_keys()[i]
        print(f"warning: zero feature row at ({entity}, {period})", file=sys.stderr)
    return matrix


def _cluster_bundle(panel: PanelDataset, model: ClusterModel, points: np.ndarray,
                    mode: str) -> dict:
    return {
        "format": "dprkit-clusters-v1",
        "params": {
            "eps": model.params.eps,
            "min_pts": model.params.min_pts,
            "core_strict": model.params.core_strict,
        },
        "mix_mode": mode,
        "k": model.k,
        "sc": model.sc,
        "sse": model.sse,
        "row_keys": [[e, p] for e, p in panel.row_keys()],
        "labels": [int(v) for v in model.labels],
        "core_mask": [int(v) for v in model.core_mask],
        "points": [[float(v) for v in row] for row in points],
    }


def _labels_for_panel(panel: PanelDataset, bundle_path) -> np.ndarray:
    """Row-aligned labels from a cluster bundle, validated against the panel."""
    p = _require_input(bundle_path)
    try:
        bundle = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{bundle_path}: not valid JSON: {exc}") from exc
    if bundle.get("format") != "dprkit-clusters-v1":
        raise ValidationError(f"{bundle_path}: not a cluster bundle")
    keys = [(str(e), p) for e, p in bundle["row_keys"]]
    panel_keys = [(e, p if isinstance(p, str) else int(p)) for e, p in panel.row_keys()]
    norm = [(e, p if isinstance(p, str) else int(p)) for e, p in keys]
    if norm != panel_keys:
        raise ValidationError(
            f"{bundle_path}: row keys do not match the panel; "
            "cluster the same panel the model is fit on"
        )
    return np.asarray(bundle["labels"], dtype=np.intp)


def _design_for_fit(panel: PanelDataset, offset: float, labels, policy: str,
                    baseline: int):
    spec = TransformSpec(log_offset=offset, normalize_mode=NO_NORMALIZATION)
    logged = log_transform(panel, spec)
    dm = pipeline.design_from_panel(logged)
    if labels is not None:
        dm = pipeline.augment_with_dummies(dm, labels, policy=policy, baseline=baseline)
    return standardize(dm.X, dm.y, dm.column_names, source_rows=dm.source_rows), logged


# ---------------------------------------------------------------- subcommands


def _cmd_ingest(args) -> int:
    schema = PanelSchema(
        entity=args.entity_column,
        period=args.period_column,
        # empty name: the raw file has no target column (factors supply it)
        target=args.target_column or None,
        features=args.features.split(",") if args.features else None,
        delimiter=args.delimiter,
    )
    panel = load_panel(_require_input(args.input), schema)
    if args.factors:
        table = EmissionFactorTable.from_csv(_require_input(args.factors))
        panel = compute_emissions(panel, table)
    write_panel(panel, args.output)
    _ok(
        "ingest",
        rows=panel.n_obs,
        entities=len(panel.entities),
        periods=len(panel.periods),
        features=panel.n_features,
    )
    return 0


def _cmd_synth(args) -> int:
    from . import testkit

    overrides: dict = {}
    if args.spec:
        for key, value in _read_config_text(args.spec).items():
            if key not in testkit.SyntheticSpec.__dataclass_fields__:
                raise ValidationError(f"unknown synth spec field {key!r}")
            overrides[key] = _coerce_spec_value(key, value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = testkit.SyntheticSpec(**overrides)
    panel, truth = testkit.generate_panel(spec)
    write_panel(panel, args.output)
    _ok(
        "synth",
        rows=panel.n_obs,
        entities=spec.n_entities,
        periods=spec.n_periods,
        clusters=spec.n_clusters,
        seed=spec.seed,
    )
    return 0


def _coerce_spec_value(key: str, value: str):
    int_fields = {"n_entities", "n_periods", "n_features", "n_clusters", "seed"}
    if key in int_fields:
        try:
            return int(value)
        except ValueError as exc:
            raise ValidationError(f"synth field {key}={value!r} must be an integer") from exc
    try:
        return float(value)
    except ValueError as exc:
        raise ValidationError(f"synth field {key}={value!r} must be numeric") from exc


def _read_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ValidationError(f"expected key=value, got {chunk!r}")
        key, _, value = chunk.partition("=")
        out[key.strip()] = value.strip()
    return out


def _cmd_cluster(args) -> int:
    panel = _load_canonical(args.input)
    points = _mix_matrix(panel, args.mix)
    params = DbscanParams(eps=args.eps, min_pts=args.min_pts, core_strict=args.core_strict)
    model = dbscan(points, params)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(
        out / "clusters.csv",
        ["entity", "period", "label", "core"],
        [
            [e, p, int(l), int(c)]
            for (e, p), l, c in zip(panel.row_keys(), model.labels, model.core_mask)
        ],
    )
    bundle = _cluster_bundle(panel, model, points, args.mix)
    (out / "cluster_model.json").write_text(
        json.dumps(bundle, indent=2) + "\n", encoding="utf-8"
    )
    _ok("cluster", k=model.k, noise=model.n_noise, sc=model.sc, sse=model.sse)
    return 0


def _cmd_scan(args) -> int:
    panel = _load_canonical(args.input)
    points = _mix_matrix(panel, args.mix)
    rows = scan_params(
        points,
        _parse_grid(args.eps_grid),
        _parse_int_grid(args.minpts_grid),
        core_strict=args.core_strict,
        threads=args.threads,
    )
    write_table(
        Path(args.output),
        ["eps", "min_pts", "k", "sc", "sse"],
        [[r.eps, r.min_pts, r.k, r.sc, r.sse] for r in rows],
    )
    best = suggest_params(rows)
    if best is None:
        _ok("scan", cells=len(rows), best_eps=None, best_min_pts=None)
    else:
        _ok(
            "scan",
            cells=len(rows),
            best_eps=best.eps,
            best_min_pts=best.min_pts,
            best_sc=best.sc,
        )
    return 0


def _penalty_from_args(kind: str, lam: float, alpha) -> tuple[str, float, float | None]:
    if kind not in PENALTY_KINDS:
        raise ValidationError(f"--penalty must be one of {PENALTY_KINDS}")
    if kind == ELASTIC_NET:
        if alpha is None:
            raise ValidationError("elastic_net needs --alpha")
    elif alpha is not None:
        raise ValidationError(f"--alpha is only valid for elastic_net, not {kind}")
    return kind, lam, alpha


def _fit_once(dm, kind: str, lam: float, alpha):
    if kind == RIDGE:
        return regression.fit_ridge(dm, lam)
    if kind == LASSO:
        return regression.fit_lasso(dm, lam)
    return regression.fit_elastic_net(dm, lam, alpha)


def _cmd_fit(args) -> int:
    panel = _load_canonical(args.input)
    kind, lam, alpha = _penalty_from_args(args.penalty, args.lam, args.alpha)
    labels = (
        _labels_for_panel(panel, args.cluster_model) if args.cluster_model else None
    )
    dm, _ = _design_for_fit(
        panel, args.log_offset, labels, args.outlier_policy, args.baseline
    )
    model = _fit_once(dm, kind, lam, alpha)
    if not model.diagnostics["converged"]:
        raise ConvergenceError(
            f"fit did not converge in {model.diagnostics['iterations']} sweeps"
        )
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    src = model.source_coefficients
    rows = [["(intercept)", model.intercept, model.source_intercept, 0]]
    for j, name in enumerate(model.column_names):
        rows.append(
            [name, float(model.coefficients[j]), float(src[j]), int(model.zero_variance[j])]
        )
    write_table(
        out / "coefficients.csv",
        ["name", "standardized", "source_scale", "forced_zero"],
        rows,
    )
    (out / "model.json").write_text(
        json.dumps(
            {"format": "dprkit-fit-v1", "regression": model.to_dict()},
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    d = model.diagnostics
    _ok(
        "fit",
        kind=kind,
        r2=d["r2"],
        mse=d["mse"],
        sparsity=d["sparsity"],
        iterations=d["iterations"],
        backend=BACKEND,
    )
    return 0


def _cmd_cv(args) -> int:
    panel = _load_canonical(args.input)
    labels = (
        _labels_for_panel(panel, args.cluster_model) if args.cluster_model else None
    )
    dm, logged = _design_for_fit(
        panel, args.log_offset, labels, args.outlier_policy, args.baseline
    )
    alpha_grid = _parse_grid(args.alpha_grid) if args.alpha_grid else None
    period_of_row = None
    if args.fold_mode == pipeline.FOLD_PERIODS:
        period_of_row = logged.period_idx[dm.source_rows]
    result = pipeline.cross_validate(
        dm,
        args.folds,
        args.penalty,
        _parse_grid(args.lambda_grid),
        alpha_grid=alpha_grid,
        fold_mode=args.fold_mode,
        period_of_row=period_of_row,
        threads=args.threads,
    )
    write_table(
        Path(args.output),
        ["lambda", "alpha", "mean_mse", "mean_r2"],
        [
            [c.lam, c.alpha, pipeline._nan_none(c.mean_mse), pipeline._nan_none(c.mean_r2)]
            for c in result.table
        ],
    )
    winner = next(
        c for c in result.table
        if c.lam == result.best_lambda and c.alpha == result.best_alpha
    )
    _ok(
        "cv",
        cells=len(result.table),
        best_lambda=result.best_lambda,
        best_alpha=result.best_alpha,
        mean_mse=winner.mean_mse,
    )
    return 0


def _cmd_path(args) -> int:
    panel = _load_canonical(args.input)
    kind = args.penalty
    if kind not in PENALTY_KINDS:
        raise ValidationError(f"--penalty must be one of {PENALTY_KINDS}")
    alpha = {RIDGE: 0.0, LASSO: 1.0}.get(kind, args.alpha)
    if alpha is None:
        raise ValidationError("elastic_net path needs --alpha")
    labels = (
        _labels_for_panel(panel, args.cluster_model) if args.cluster_model else None
    )
    dm, _ = _design_for_fit(
        panel, args.log_offset, labels, args.outlier_policy, args.baseline
    )
    lams = sorted(set(_parse_grid(args.lambda_grid)), reverse=True)
    models = regression.regularization_path(dm, lams, alpha)
    write_table(
        Path(args.output),
        ["lambda", "intercept"] + list(dm.column_names),
        [
            [lam, m.intercept] + [float(v) for v in m.coefficients]
            for lam, m in zip(lams, models)
        ],
    )
    _ok("path", points=len(lams), columns=dm.p, backend=BACKEND)
    return 0


_RUN_KEYS = {
    "penalty", "lambda_grid", "alpha_grid", "eps", "min_pts", "eps_grid",
    "minpts_grid", "core_strict", "mix", "log_offset", "outlier_policy",
    "baseline", "folds", "fold_mode", "holdout_periods", "train_periods",
    "test_periods", "train_count", "threads", "refit_clusters_full",
}


def _effective_run_settings(args) -> dict:
    settings: dict[str, str] = {}
    if args.config:
        cfg = _read_config(args.config)
        unknown = set(cfg) - _RUN_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        settings.update(cfg)
    cli_map = {
        "penalty": args.penalty,
        "lambda_grid": args.lambda_grid,
        "alpha_grid": args.alpha_grid,
        "eps": args.eps,
        "min_pts": args.min_pts,
        "eps_grid": args.eps_grid,
        "minpts_grid": args.minpts_grid,
        "core_strict": args.core_strict,
        "mix": args.mix,
        "log_offset": args.log_offset,
        "outlier_policy": args.outlier_policy,
        "baseline": args.baseline,
        "folds": args.folds,
        "fold_mode": args.fold_mode,
        "holdout_periods": args.holdout_periods,
        "train_periods": args.train_periods,
        "test_periods": args.test_periods,
        "train_count": args.train_count,
        "threads": args.threads,
        "refit_clusters_full": args.refit_clusters_full,
    }
    for key, value in cli_map.items():
        if value is not None:
            settings[key] = value
    return settings


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"cannot parse boolean {value!r}")


def _as_int(value, name: str) -> int:
    try:
        return int(str(value))
    except ValueError as exc:
        raise ValidationError(f"{name} must be an integer, got {value!r}") from exc


def _as_float(value, name: str) -> float:
    try:
        return float(str(value))
    except ValueError as exc:
        raise ValidationError(f"{name} must be numeric, got {value!r}") from exc


def _build_run(settings: dict, panel: PanelDataset):
    kind = str(settings.get("penalty", ELASTIC_NET))
    transform = TransformSpec(
        log_offset=_as_float(settings.get("log_offset", 1.0), "log_offset"),
        normalize_mode=str(settings.get("mix", RAW_SHARES)),
    )
    params = None
    eps_grid = minpts_grid = None
    if "eps" in settings or "min_pts" in settings:
        if not ("eps" in settings and "min_pts" in settings):
            raise ValidationError("eps and min_pts must be given together")
        params = DbscanParams(
            eps=_as_float(settings["eps"], "eps"),
            min_pts=_as_int(settings["min_pts"], "min_pts"),
            core_strict=_as_bool(settings.get("core_strict", False)),
        )
    else:
        if not ("eps_grid" in settings and "minpts_grid" in settings):
            raise ValidationError(
                "give either eps+min_pts or eps_grid+minpts_grid (config or flags)"
            )
        grid = settings["eps_grid"]
        eps_grid = tuple(grid if isinstance(grid, list) else _parse_grid(str(grid)))
        grid = settings["minpts_grid"]
        minpts_grid = tuple(grid if isinstance(grid, list) else _parse_int_grid(str(grid)))

    lam_grid = settings.get("lambda_grid")
    if lam_grid is None:
        lambda_grid = pipeline._DEFAULT_LAMBDAS
    else:
        lambda_grid = tuple(lam_grid if isinstance(lam_grid, list) else _parse_grid(str(lam_grid)))
    a_grid = settings.get("alpha_grid")
    if a_grid is None:
        alpha_grid = (0.3, 0.5, 1.0)
    else:
        alpha_grid = tuple(a_grid if isinstance(a_grid, list) else _parse_grid(str(a_grid)))

    config = pipeline.DprConfig(
        transform=transform,
        dbscan=params,
        eps_grid=eps_grid,
        minpts_grid=minpts_grid,
        core_strict=_as_bool(settings.get("core_strict", False)),
        penalty_kind=kind,
        lambda_grid=lambda_grid,
        alpha_grid=alpha_grid,
        outlier_policy=str(settings.get("outlier_policy", pipeline.UNIQUE_DUMMY)),
        baseline_cluster=_as_int(settings.get("baseline", 0), "baseline"),
        fold_mode=str(settings.get("fold_mode", pipeline.FOLD_ROWS)),
        holdout_periods=_as_int(settings.get("holdout_periods", 0), "holdout_periods"),
        refit_clusters_full=_as_bool(settings.get("refit_clusters_full", False)),
        threads=_as_int(settings.get("threads", 1), "threads"),
    )

    if "train_count" in settings:
        count = _as_int(settings["train_count"], "train_count")
        if not 1 <= count < len(panel.periods):
            raise ValidationError(
                f"train_count {count} must leave both train and test periods "
                f"({len(panel.periods)} total)"
            )
        train = panel.periods[:count]
        test = panel.periods[count:]
    elif "train_periods" in settings and "test_periods" in settings:
        train = _parse_periods(str(settings["train_periods"]), panel.periods)
        test = _parse_periods(str(settings["test_periods"]), panel.periods)
    else:
        raise ValidationError("give train_count, or train_periods and test_periods")
    split = pipeline.SplitSpec(
        train_periods=tuple(train),
        test_periods=tuple(test),
        cv_folds=_as_int(settings.get("folds", 5), "folds"),
    )
    return config, split


def _cmd_run(args) -> int:
    panel = _load_canonical(args.input)
    settings = _effective_run_settings(args)
    config, split = _build_run(settings, panel)
    report = pipeline.run_dpr(panel, config, split)
    if not report.model.diagnostics["converged"]:
        raise ConvergenceError(
            f"final fit did not converge in {report.model.diagnostics['iterations']} sweeps"
        )
    report.write(args.output_dir)
    if args.plots:
        emit_plot_data(report, args.output_dir)
    test_mse = report.metrics["test"]["mse"] if report.metrics["test"] else None
    _ok(
        "run",
        k=report.cluster_k,
        noise=int(np.sum(report.train_labels == clustering.NOISE)),
        kind=report.chosen.kind,
        best_lambda=report.chosen.lam,
        best_alpha=report.chosen.alpha,
        train_r2=report.metrics["train"]["r2"],
        test_mse=test_mse,
        backend=report.backend,
    )
    return 0


def _cmd_forecast(args) -> int:
    panel = _load_canonical(args.input)
    p = _require_input(args.model)
    try:
        bundle = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.model}: not valid JSON: {exc}") from exc
    if bundle.get("format") != "dprkit-model-v1":
        raise ValidationError(f"{args.model}: not a run model bundle")
    model = FittedModel.from_dict(bundle["regression"])
    transform = TransformSpec(
        log_offset=float(bundle["transform"]["log_offset"]),
        normalize_mode=str(bundle["transform"]["normalize_mode"]),
    )
    features = list(bundle["features"])
    if features != panel.feature_names:
        raise ValidationError(
            f"panel features {panel.feature_names} do not match model features {features}"
        )

    clus = bundle["clustering"]
    mode = transform.normalize_mode
    if mode == "perfeaturemax":
        maxima = bundle.get("entity_maxima") or {}
        points = np.zeros_like(panel.features)
        for e, name in enumerate(panel.entities):
            rows = np.flatnonzero(panel.entity_idx == e)
            if rows.size == 0:
                continue
            mx = np.asarray(maxima.get(name, panel.features[rows].max(axis=0)), dtype=np.float64)
            pos = np.flatnonzero(mx > 0)
            points[np.ix_(rows, pos)] = panel.features[np.ix_(rows, pos)] / mx[pos]
    else:
        points, _ = energy_mix_features(panel, mode)

    core_points = np.asarray(clus["core_points"], dtype=np.float64)
    core_labels = np.asarray(clus["core_labels"], dtype=np.intp)
    if core_points.size:
        mini = ClusterModel(
            params=DbscanParams(
                eps=float(clus["eps"]),
                min_pts=int(clus["min_pts"]),
                core_strict=bool(clus["core_strict"]),
            ),
            labels=core_labels,
            k=int(clus["k"]),
            sc=None,
            sse=0.0,
            core_mask=np.ones(core_labels.shape[0], dtype=bool),
        )
        labels = clustering.assign_by_nearest_core(core_points, mini, points)
    else:
        labels = np.full(panel.n_obs, clustering.NOISE, dtype=np.intp)
    block = pipeline._dummy_block(list(clus["dummy_names"]), labels)
    result = pipeline.forecast_report(
        model, panel, transform, extra_columns=block, extra_labels=labels
    )
    write_table(
        Path(args.output),
        [
            "entity", "period", "cluster", "noise_row", "actual_log", "predicted_log",
            "actual_source", "predicted_source", "relative_error_source",
        ],
        [
            [
                r.entity, r.period, r.cluster, int(r.is_noise), r.actual_log,
                r.predicted_log, r.actual_source, r.predicted_source, r.relative_error,
            ]
            for r in result.rows
        ],
    )
    _ok(
        "forecast",
        rows=len(result.rows),
        noise_rows=result.n_noise_rows,
        mean_error=result.mean_error,
        error_variance=result.error_variance,
    )
    return 0


def emit_plot_data(report: pipeline.RunReport, out_dir) -> None:
    """Plain tables a plotting tool can consume; no rendering here."""
    plots = Path(out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    write_table(
        plots / "path_trajectories.csv",
        ["lambda", "intercept"] + list(report.model.column_names),
        [
            [lam, m.intercept] + [float(v) for v in m.coefficients]
            for lam, m in zip(report.path_lambdas, report.path_models)
        ],
    )
    write_table(
        plots / "fit_scatter.csv",
        ["actual_log", "predicted_log"],
        [
            [float(a), float(p)]
            for a, p in zip(report.fitted_actual, report.fitted_predicted)
        ],
    )
    write_table(
        plots / "k_distance.csv",
        ["rank", "distance"],
        [[i + 1, float(d)] for i, d in enumerate(report.k_distance)],
    )


# --------------------------------------------------------------------- parser


def _add_common_design_flags(sp) -> None:
    sp.add_argument("--cluster-model", default=None,
                    help="cluster_model.json from the cluster subcommand")
    sp.add_argument("--log-offset", type=float, default=1.0)
    sp.add_argument("--outlier-policy", default=pipeline.UNIQUE_DUMMY,
                    choices=list(pipeline.OUTLIER_POLICIES))
    sp.add_argument("--baseline", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dprkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="normalize a raw table into the canonical panel layout")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--entity-column", default="entity")
    sp.add_argument("--period-column", default="period")
    sp.add_argument("--target-column", default="target")
    sp.add_argument("--features", default=None,
                    help="comma list; default: every other numeric column")
    sp.add_argument("--delimiter", default=",")
    sp.add_argument("--factors", default=None,
                    help="per-feature factor table; computes targets from features")
    sp.set_defaults(handler=_cmd_ingest)

    sp = sub.add_parser("synth", help="generate a synthetic clustered panel")
    sp.add_argument("--output", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--spec", default=None, help="comma list of field=value overrides")
    sp.set_defaults(handler=_cmd_synth)

    sp = sub.add_parser("cluster", help="density clustering of the panel mix features")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--min-pts", type=int, required=True)
    sp.add_argument("--core-strict", action="store_true")
    sp.add_argument("--mix", default=RAW_SHARES, choices=list(MIX_MODES))
    sp.set_defaults(handler=_cmd_cluster)

    sp = sub.add_parser("scan", help="grid scan of clustering parameters")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--eps-grid", required=True)
    sp.add_argument("--minpts-grid", required=True)
    sp.add_argument("--core-strict", action="store_true")
    sp.add_argument("--mix", default=RAW_SHARES, choices=list(MIX_MODES))
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(handler=_cmd_scan)

    sp = sub.add_parser("fit", help="one penalized fit on the log design")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--penalty", required=True)
    sp.add_argument("--lam", type=float, required=True)
    sp.add_argument("--alpha", type=float, default=None)
    _add_common_design_flags(sp)
    sp.set_defaults(handler=_cmd_fit)

    sp = sub.add_parser("cv", help="cross-validated hyperparameter table")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--penalty", required=True)
    sp.add_argument("--lambda-grid", required=True)
    sp.add_argument("--alpha-grid", default=None)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--fold-mode", default=pipeline.FOLD_ROWS,
                    choices=list(pipeline.FOLD_MODES))
    sp.add_argument("--threads", type=int, default=1)
    _add_common_design_flags(sp)
    sp.set_defaults(handler=_cmd_cv)

    sp = sub.add_parser("path", help="coefficient trajectory over a lambda grid")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--penalty", required=True)
    sp.add_argument("--lambda-grid", required=True)
    sp.add_argument("--alpha", type=float, default=None)
    _add_common_design_flags(sp)
    sp.set_defaults(handler=_cmd_path)

    sp = sub.add_parser("run", help="full clustering + fit + forecast flow")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--config", default=None, help="key=value file; flags override")
    sp.add_argument("--penalty", default=None)
    sp.add_argument("--lambda-grid", default=None)
    sp.add_argument("--alpha-grid", default=None)
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--min-pts", type=int, default=None)
    sp.add_argument("--eps-grid", default=None)
    sp.add_argument("--minpts-grid", default=None)
    sp.add_argument("--core-strict", action="store_true", default=None)
    sp.add_argument("--mix", default=None, choices=list(MIX_MODES))
    sp.add_argument("--log-offset", type=float, default=None)
    sp.add_argument("--outlier-policy", default=None,
                    choices=list(pipeline.OUTLIER_POLICIES))
    sp.add_argument("--baseline", type=int, default=None)
    sp.add_argument("--folds", type=int, default=None)
    sp.add_argument("--fold-mode", default=None, choices=list(pipeline.FOLD_MODES))
    sp.add_argument("--holdout-periods", type=int, default=None)
    sp.add_argument("--train-periods", default=None)
    sp.add_argument("--test-periods", default=None)
    sp.add_argument("--train-count", type=int, default=None)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--refit-clusters-full", action="store_true", default=None)
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(handler=_cmd_run)

    sp = sub.add_parser("forecast", help="predict a new panel from a saved run model")
    sp.add_argument("--input", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(handler=_cmd_forecast)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
