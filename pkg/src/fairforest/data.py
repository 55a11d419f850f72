"""Instance streams: CSV readers and a seeded synthetic generator.

Streams yield ``(x, y, a)`` tuples one instance at a time: a float64
feature vector, an integer task label, and an integer protected-group
label.  The CSV reader never buffers more than one row; categorical
features are expected to be pre-encoded by the caller.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DataError, DomainError

NORMALIZATION_MODES = ("none", "online", "fixed")


@dataclass
class DatasetSchema:
    """Column layout and normalization policy of a CSV stream.

    ``normalization`` is one of ``none``, ``online`` (running
    standardization using only rows seen so far), or ``fixed`` (apply the
    provided per-feature means and scales).
    """

    feature_columns: list[str]
    label_column: str = "y"
    group_column: str = "a"
    normalization: str = "none"
    feature_means: np.ndarray | None = None
    feature_scales: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.feature_columns:
            raise ConfigurationError("schema needs at least one feature column")
        special = {self.label_column, self.group_column}
        if len(special) != 2:
            raise ConfigurationError("label and group columns must differ")
        if special & set(self.feature_columns):
            raise ConfigurationError(
                "label/group columns cannot double as feature columns"
            )
        if len(set(self.feature_columns)) != len(self.feature_columns):
            raise ConfigurationError("duplicate feature column names")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigurationError(
                f"unknown normalization mode {self.normalization!r}"
            )
        if self.normalization == "fixed":
            d = len(self.feature_columns)
            if self.feature_means is None or self.feature_scales is None:
                raise ConfigurationError(
                    "fixed normalization needs feature_means and feature_scales"
                )
            self.feature_means = np.asarray(self.feature_means, dtype=np.float64)
            self.feature_scales = np.asarray(self.feature_scales, dtype=np.float64)
            if self.feature_means.shape != (d,) or self.feature_scales.shape != (d,):
                raise ConfigurationError(
                    "normalization statistics must have one entry per feature"
                )
            if (self.feature_scales <= 0).any():
                raise ConfigurationError("feature scales must be positive")

    @property
    def n_features(self) -> int:
        return len(self.feature_columns)


def default_schema(n_features: int, normalization: str = "none") -> DatasetSchema:
    """Schema for the package's own CSV convention: features ``f0..f{d-1}``,
    label column ``y``, group column ``a``."""
    return DatasetSchema(
        feature_columns=[f"f{i}" for i in range(n_features)],
        normalization=normalization,
    )


class _OnlineScaler:
    """Streaming per-feature standardization with no lookahead.

    Each row first updates the running mean/variance, then is transformed
    with the updated statistics, so the output at step ``t`` depends only
    on rows ``1..t``.
    """

    def __init__(self, n_features: int):
        self.count = 0
        self.mean = np.zeros(n_features)
        self.m2 = np.zeros(n_features)

    def transform(self, x: np.ndarray) -> np.ndarray:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        if self.count < 2:
            return x - self.mean
        scale = np.sqrt(self.m2 / self.count)
        scale = np.where(scale < 1e-12, 1.0, scale)
        return (x - self.mean) / scale


def _parse_int(cell: str, row: int, column: str) -> int:
    text = cell.strip()
    try:
        value = int(text)
    except ValueError:
        raise DomainError(
            f"row {row}, column {column!r}: expected an integer label, got {cell!r}"
        ) from None
    if value < 0:
        raise DomainError(
            f"row {row}, column {column!r}: labels must be non-negative, got {value}"
        )
    return value


def read_stream(path, schema: DatasetSchema) -> Iterator[tuple]:
    """Stream ``(x, y, a)`` instances from a headered CSV file.

    Raises DataError naming the row and column on any malformed cell, and
    DomainError on label or group values that are not non-negative
    integers.  Rows are parsed and yielded one at a time.
    """
    if not os.path.exists(path):
        raise DataError(f"no such data file: {path}")
    return _read_stream_rows(path, schema)


def _read_stream_rows(path, schema: DatasetSchema) -> Iterator[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, expected a header row")
        positions = {name: i for i, name in enumerate(header)}
        missing = [
            name
            for name in schema.feature_columns
            + [schema.label_column, schema.group_column]
            if name not in positions
        ]
        if missing:
            raise DataError(f"{path}: header is missing columns {missing}")
        feat_idx = [positions[name] for name in schema.feature_columns]
        label_idx = positions[schema.label_column]
        group_idx = positions[schema.group_column]
        scaler = (
            _OnlineScaler(schema.n_features)
            if schema.normalization == "online"
            else None
        )
        for row_number, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"row {row_number}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            x = np.empty(schema.n_features)
            for j, (column, idx) in enumerate(zip(schema.feature_columns, feat_idx)):
                cell = row[idx]
                try:
                    x[j] = float(cell)
                except ValueError:
                    raise DataError(
                        f"row {row_number}, column {column!r}: "
                        f"could not parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(x[j]):
                    raise DataError(
                        f"row {row_number}, column {column!r}: "
                        f"non-finite value {cell!r}"
                    )
            y = _parse_int(row[label_idx], row_number, schema.label_column)
            a = _parse_int(row[group_idx], row_number, schema.group_column)
            if scaler is not None:
                x = scaler.transform(x)
            elif schema.normalization == "fixed":
                x = (x - schema.feature_means) / schema.feature_scales
            yield x, y, a


GROUP_MARKER_SHIFT = 0.2
GROUP_MARKER_SCALE = 0.2


@dataclass
class SyntheticConfig:
    """Parameters of the built-in biased binary stream.

    ``bias`` couples the label to the group: the label starts equal to
    the group with probability ``(1 + bias) / 2``.  ``noise`` then flips
    the observed label.  The first half of the coordinates carry the task
    signal: a label-dependent shift of ``±separation/2`` under unit
    Gaussian noise, following the pre-flip label so that ``noise``
    behaves as irreducible label noise.  The remaining coordinates are
    low-variance demographic markers: a small group-dependent shift of
    ``±GROUP_MARKER_SHIFT`` under Gaussian noise of scale
    ``GROUP_MARKER_SCALE``.  The markers still carry some task signal
    through the label-group correlation, so an unconstrained learner
    picks them up and inherits their group disparity.
    """

    n: int
    n_features: int = 10
    bias: float = 0.5
    separation: float = 0.5
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigurationError(f"n must be >= 1, got {self.n}")
        if self.n_features < 1:
            raise ConfigurationError(
                f"n_features must be >= 1, got {self.n_features}"
            )
        if not 0.0 <= self.bias <= 1.0:
            raise ConfigurationError(f"bias must be in [0, 1], got {self.bias}")
        if not 0.0 <= self.noise <= 0.5:
            raise ConfigurationError(f"noise must be in [0, 0.5], got {self.noise}")
        if self.separation < 0:
            raise ConfigurationError("separation must be non-negative")


def generate_synthetic(config: SyntheticConfig) -> Iterator[tuple]:
    """Yield ``config.n`` seeded instances of the biased binary stream."""
    rng = np.random.default_rng(config.seed)
    d = config.n_features
    n_label_coords = (d + 1) // 2
    label_shift = np.zeros(d)
    label_shift[:n_label_coords] = config.separation / 2.0
    group_shift = np.zeros(d)
    group_shift[n_label_coords:] = GROUP_MARKER_SHIFT
    noise_scale = np.ones(d)
    noise_scale[n_label_coords:] = GROUP_MARKER_SCALE
    p_match = (1.0 + config.bias) / 2.0
    for _ in range(config.n):
        a = int(rng.integers(0, 2))
        y_clean = a if rng.random() < p_match else 1 - a
        y = 1 - y_clean if rng.random() < config.noise else y_clean
        center = (
            (2 * y_clean - 1) * label_shift + (2 * a - 1) * group_shift
        )
        x = center + noise_scale * rng.standard_normal(d)
        yield x, y, a
