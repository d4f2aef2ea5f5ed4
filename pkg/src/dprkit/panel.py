"""Panel data model: ingestion, emission accounting, and feature transforms.

A panel is a long-format table of observations keyed by (entity, period),
carrying a vector of non-negative consumption features and an optional
non-negative target.  Rows are normalized to lexicographic (entity, period)
order on load so that every downstream computation sees a canonical order.

Three transforms are provided ahead of modeling:

* emission accounting: target recomputed as the factor-weighted sum of the
  features, with factors supplied externally (never hard-coded);
* natural-log transform ``ln(x + offset)`` of features and target, invertible
  via ``exp(v) - offset``;
* mix normalization for clustering: row shares, per-entity column maxima,
  or no normalization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Iterator, Sequence

import numpy as np

from .errors import ValidationError
from .tables import fmt

RAW_SHARES = "rawshares"
PER_FEATURE_MAX = "perfeaturemax"
NO_NORMALIZATION = "none"
MIX_MODES = (RAW_SHARES, PER_FEATURE_MAX, NO_NORMALIZATION)


@dataclass(frozen=True)
class TransformSpec:
    """How features are prepared: log offset for regression, mix mode for clustering."""

    log_offset: float = 1.0
    normalize_mode: str = RAW_SHARES

    def __post_init__(self) -> None:
        if not math.isfinite(self.log_offset) or self.log_offset < 0:
            raise ValidationError(f"log_offset must be finite and >= 0, got {self.log_offset}")
        if self.normalize_mode not in MIX_MODES:
            raise ValidationError(
                f"normalize_mode must be one of {MIX_MODES}, got {self.normalize_mode!r}"
            )


@dataclass(frozen=True)
class EmissionFactorTable:
    """Per-feature emission factors, loaded from an external two-column table."""

    factor_per_feature: dict[str, float]

    def __post_init__(self) -> None:
        for name, f in self.factor_per_feature.items():
            if not math.isfinite(f) or f < 0:
                raise ValidationError(f"emission factor for {name!r} must be finite and >= 0, got {f}")

    @classmethod
    def from_csv(cls, source, delimiter: str = ",") -> "EmissionFactorTable":
        """Read ``feature,factor`` rows (header required)."""
        if isinstance(source, (str, Path)):
            with open(source, "r", encoding="utf-8", newline="") as fh:
                return cls.from_csv(fh, delimiter)
        reader = csv.reader(source, delimiter=delimiter)
        try:
            next(reader)
        except StopIteration:
            raise ValidationError("factor table is empty") from None
        factors: dict[str, float] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise ValidationError(f"factor table line {lineno}: expected 2 columns")
            name = row[0].strip()
            try:
                value = float(row[1])
            except ValueError:
                raise ValidationError(
                    f"factor table line {lineno}: non-numeric factor {row[1]!r}"
                ) from None
            if name in factors:
                raise ValidationError(f"factor table line {lineno}: duplicate feature {name!r}")
            factors[name] = value
        if not factors:
            raise ValidationError("factor table has no rows")
        return cls(factors)


@dataclass(frozen=True)
class Observation:
    entity: str
    period: object
    features: np.ndarray
    target: float  # NaN when absent


@dataclass
class PanelDataset:
    """Long-format panel in canonical (entity, period) row order.

    ``targets`` uses NaN for rows without a target (forecast-only rows).
    ``transform`` records the log transform once applied, so that predictions
    can be inverted back to source units; it is None for source-unit data.
    """

    entities: list[str]
    periods: list
    feature_names: list[str]
    entity_idx: np.ndarray
    period_idx: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    transform: TransformSpec | None = None

    def __post_init__(self) -> None:
        self.entity_idx = np.asarray(self.entity_idx, dtype=np.intp)
        self.period_idx = np.asarray(self.period_idx, dtype=np.intp)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        n = self.entity_idx.shape[0]
        if self.period_idx.shape != (n,) or self.targets.shape != (n,):
            raise ValidationError("panel arrays have inconsistent lengths")
        if self.features.shape != (n, len(self.feature_names)):
            raise ValidationError(
                f"feature matrix shape {self.features.shape} does not match "
                f"{n} rows x {len(self.feature_names)} features"
            )
        if n == 0:
            raise ValidationError("panel has no observations")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("panel features contain non-finite values")
        kinds = {type(p) for p in self.periods}
        if len(kinds) > 1:
            raise ValidationError(f"periods mix types {sorted(k.__name__ for k in kinds)}")
        for a, b in zip(self.periods, self.periods[1:]):
            if not a < b:
                raise ValidationError(f"periods are not strictly increasing at {a!r} >= {b!r}")
        seen: set[tuple[int, int]] = set()
        for e, p in zip(self.entity_idx, self.period_idx):
            key = (int(e), int(p))
            if key in seen:
                raise ValidationError(
                    f"duplicate observation for entity {self.entities[e]!r}, "
                    f"period {self.periods[p]!r}"
                )
            seen.add(key)

    @property
    def n_obs(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n_obs):
            yield Observation(
                self.entities[self.entity_idx[i]],
                self.periods[self.period_idx[i]],
                self.features[i],
                float(self.targets[i]),
            )

    def row_keys(self) -> list[tuple[str, object]]:
        return [
            (self.entities[e], self.periods[p])
            for e, p in zip(self.entity_idx, self.period_idx)
        ]

    def subset_by_periods(self, keep: Sequence) -> "PanelDataset":
        """Rows whose period is in ``keep``; period list restricted accordingly."""
        keep_set = set(keep)
        unknown = keep_set - set(self.periods)
        if unknown:
            raise ValidationError(f"periods not present in panel: {sorted(unknown)!r}")
        new_periods = [p for p in self.periods if p in keep_set]
        mask = np.array([self.periods[p] in keep_set for p in self.period_idx], dtype=bool)
        if not mask.any():
            raise ValidationError("period subset selects no observations")
        remap = {self.periods.index(p): i for i, p in enumerate(new_periods)}
        return PanelDataset(
            entities=list(self.entities),
            periods=new_periods,
            feature_names=list(self.feature_names),
            entity_idx=self.entity_idx[mask].copy(),
            period_idx=np.array([remap[int(p)] for p in self.period_idx[mask]], dtype=np.intp),
            features=self.features[mask].copy(),
            targets=self.targets[mask].copy(),
            transform=self.transform,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.periods == other.periods
            and self.feature_names == other.feature_names
            and np.array_equal(self.entity_idx, other.entity_idx)
            and np.array_equal(self.period_idx, other.period_idx)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.targets, other.targets, equal_nan=True)
            and self.transform == other.transform
        )


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for :func:`load_panel`.

    ``features=None`` means: every column not otherwise claimed is a feature,
    in file order.  ``target=None`` means the panel carries no target column.
    """

    entity: str = "entity"
    period: str = "period"
    target: str | None = "target"
    features: tuple[str, ...] | None = None
    delimiter: str = ","


def _parse_periods(raw: list[str]) -> list:
    try:
        return [int(v) for v in raw]
    except ValueError:
        return raw


def load_panel(source, schema: PanelSchema | None = None) -> PanelDataset:
    """Parse a delimited text table into a canonical :class:`PanelDataset`.

    Validation is strict: missing schema columns, duplicate (entity, period)
    pairs, non-numeric cells, and negative features or targets are all
    rejected with the offending row and column named.  Empty target cells are
    allowed and become NaN (forecast-only rows).
    """
    schema = schema or PanelSchema()
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return load_panel(fh, schema)

    reader = csv.reader(source, delimiter=schema.delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError("panel file is empty: header row is required") from None

    col_of = {name: i for i, name in enumerate(header)}
    for required in (schema.entity, schema.period):
        if required not in col_of:
            raise ValidationError(f"required column {required!r} missing from header {header}")
    if schema.target is not None and schema.target not in col_of:
        raise ValidationError(f"target column {schema.target!r} missing from header {header}")

    if schema.features is None:
        claimed = {schema.entity, schema.period}
        if schema.target is not None:
            claimed.add(schema.target)
        feature_names = [h for h in header if h not in claimed]
    else:
        feature_names = list(schema.features)
        for name in feature_names:
            if name not in col_of:
                raise ValidationError(f"feature column {name!r} missing from header {header}")
    if not feature_names:
        raise ValidationError("schema selects no feature columns")

    feat_cols = [col_of[name] for name in feature_names]
    ent_col = col_of[schema.entity]
    per_col = col_of[schema.period]
    tgt_col = col_of[schema.target] if schema.target is not None else None

    raw_entities: list[str] = []
    raw_periods: list[str] = []
    feats: list[list[float]] = []
    targets: list[float] = []
    first_line: dict[tuple[str, str], int] = {}
    width = len(header)
    for lineno, row in enumerate(reader, start=2):
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != width:
            raise ValidationError(f"line {lineno}: expected {width} cells, found {len(row)}")
        key = (row[ent_col].strip(), row[per_col].strip())
        if key in first_line:
            raise ValidationError(
                f"line {lineno}: duplicate observation for entity {key[0]!r}, "
                f"period {key[1]!r} (first seen on line {first_line[key]})"
            )
        first_line[key] = lineno
        raw_entities.append(key[0])
        raw_periods.append(key[1])
        vec = []
        for name, c in zip(feature_names, feat_cols):
            cell = row[c].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ValidationError(
                    f"line {lineno}, column {name!r}: non-numeric value {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise ValidationError(f"line {lineno}, column {name!r}: non-finite value {cell!r}")
            if v < 0:
                raise ValidationError(f"line {lineno}, column {name!r}: negative value {v}")
            vec.append(v)
        feats.append(vec)
        if tgt_col is None:
            targets.append(math.nan)
        else:
            cell = row[tgt_col].strip()
            if cell == "" or cell == "NA":
                targets.append(math.nan)
            else:
                try:
                    t = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"line {lineno}, column {schema.target!r}: non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(t):
                    raise ValidationError(
                        f"line {lineno}, column {schema.target!r}: non-finite value {cell!r}"
                    )
                if t < 0:
                    raise ValidationError(
                        f"line {lineno}, column {schema.target!r}: negative value {t}"
                    )
                targets.append(t)

    if not raw_entities:
        raise ValidationError("panel file has a header but no data rows")

    entities = sorted(set(raw_entities))
    period_values = _parse_periods(raw_periods)
    periods = sorted(set(period_values))
    ent_index = {e: i for i, e in enumerate(entities)}
    per_index = {p: i for i, p in enumerate(periods)}
    entity_idx = np.array([ent_index[e] for e in raw_entities], dtype=np.intp)
    period_idx = np.array([per_index[p] for p in period_values], dtype=np.intp)

    order = np.lexsort((period_idx, entity_idx))
    return PanelDataset(
        entities=entities,
        periods=periods,
        feature_names=feature_names,
        entity_idx=entity_idx[order],
        period_idx=period_idx[order],
        features=np.asarray(feats, dtype=np.float64)[order],
        targets=np.asarray(targets, dtype=np.float64)[order],
    )


def write_panel(data: PanelDataset, dest, delimiter: str = ",") -> None:
    """Write the canonical panel layout: entity, period, target, features."""

    def _write(fh: IO[str]) -> None:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["entity", "period", "target"] + list(data.feature_names))
        for i in range(data.n_obs):
            t = data.targets[i]
            writer.writerow(
                [
                    data.entities[data.entity_idx[i]],
                    data.periods[data.period_idx[i]],
                    "" if math.isnan(t) else fmt(float(t)),
                ]
                + [fmt(float(v)) for v in data.features[i]]
            )

    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)
    else:
        _write(dest)


def compute_emissions(data: PanelDataset, factors: EmissionFactorTable) -> PanelDataset:
    """Recompute every target as the factor-weighted sum of the features.

    Every feature must have a factor; features are left untouched.
    """
    if data.transform is not None:
        raise ValidationError("emission accounting must run on source-unit data")
    missing = [n for n in data.feature_names if n not in factors.factor_per_feature]
    if missing:
        raise ValidationError(f"no emission factor for features: {missing}")
    weights = np.array(
        [factors.factor_per_feature[n] for n in data.feature_names], dtype=np.float64
    )
    return replace(data, targets=data.features @ weights)


def log_transform(data: PanelDataset, spec: TransformSpec) -> PanelDataset:
    """Apply ``ln(x + offset)`` to features and any present targets."""
    if data.transform is not None:
        raise ValidationError("panel is already log-transformed")
    off = spec.log_offset
    if np.any(data.features + off <= 0):
        raise ValidationError(
            f"log transform undefined: some feature + offset ({off}) is <= 0"
        )
    have_target = ~np.isnan(data.targets)
    if np.any(data.targets[have_target] + off <= 0):
        raise ValidationError(
            f"log transform undefined: some target + offset ({off}) is <= 0"
        )
    targets = data.targets.copy()
    targets[have_target] = np.log(targets[have_target] + off)
    return replace(
        data,
        features=np.log(data.features + off),
        targets=targets,
        transform=spec,
    )


def invert_log(values: np.ndarray, spec: TransformSpec):
    """Inverse of the log transform: ``exp(v) - offset``."""
    return np.exp(values) - spec.log_offset


def energy_mix_features(
    data: PanelDataset, mode: str = RAW_SHARES
) -> tuple[np.ndarray, np.ndarray]:
    """Clustering features from the consumption mix.

    rawshares        row divided by its sum (composition on the simplex)
    perfeaturemax    each cell divided by that entity's maximum for the
                     column across its periods (0 when the maximum is 0)
    none             features copied through unchanged

    Returns (matrix, flagged) where ``flagged`` holds the indices of rows
    whose feature sum is zero; under rawshares those rows come out all-zero.
    """
    if mode not in MIX_MODES:
        raise ValidationError(f"unknown mix mode {mode!r}; expected one of {MIX_MODES}")
    X = data.features
    sums = X.sum(axis=1)
    flagged = [int(i) for i in np.flatnonzero(sums == 0)]
    if mode == NO_NORMALIZATION:
        return X.copy(), flagged
    if mode == RAW_SHARES:
        out = np.zeros_like(X)
        ok = sums > 0
        out[ok] = X[ok] / sums[ok, None]
        return out, flagged
    out = np.zeros_like(X)
    for e in range(len(data.entities)):
        rows = np.flatnonzero(data.entity_idx == e)
        if rows.size == 0:
            continue
        maxima = X[rows].max(axis=0)
        pos = maxima > 0
        out[np.ix_(rows, np.flatnonzero(pos))] = X[np.ix_(rows, np.flatnonzero(pos))] / maxima[pos]
    return out, flagged
