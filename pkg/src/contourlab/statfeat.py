"""Hand-crafted statistical summary features of a pitch contour.

Seventeen numbers per contour: seven shape statistics computed in the
cents domain and again in the Hz domain, plus three global descriptors
(fitted slope, total variation, voiced fraction). All statistics use the
valid region only and population conventions (std divides by n).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from typing import Iterable, TextIO

import numpy as np

from .contour import CONTOUR_LEN, Contour
from .errors import FeatureError, ParseError, ValidationError
from .ingest import DEFAULT_FRAME_PERIOD

MIN_VALID_FOR_FEATURES = 4   # shorter contours have no usable modulation stats
MOD_PEAK_THRESHOLD = 0.2     # autocorrelation height a peak must clear

STAT_FEATURE_NAMES = (
    "mean_cents", "std_cents", "range_cents", "mean_abs_grad_cents",
    "sign_change_rate_cents", "mod_rate_cents", "mod_extent_cents",
    "mean_hz", "std_hz", "range_hz", "mean_abs_grad_hz",
    "sign_change_rate_hz", "mod_rate_hz", "mod_extent_hz",
    "fit_slope", "total_variation", "valid_fraction",
)


@dataclass(frozen=True)
class StatFeatures:
    """The 17 summary features of one contour, in canonical order."""

    mean_cents: float
    std_cents: float
    range_cents: float
    mean_abs_grad_cents: float
    sign_change_rate_cents: float
    mod_rate_cents: float
    mod_extent_cents: float
    mean_hz: float
    std_hz: float
    range_hz: float
    mean_abs_grad_hz: float
    sign_change_rate_hz: float
    mod_rate_hz: float
    mod_extent_hz: float
    fit_slope: float
    total_variation: float
    valid_fraction: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in STAT_FEATURE_NAMES],
                        dtype=np.float64)


assert tuple(f.name for f in fields(StatFeatures)) == STAT_FEATURE_NAMES


def _detrend(x: np.ndarray) -> np.ndarray:
    # Remove the least-squares line so slow drift does not mask vibrato.
    n = len(x)
    t = np.arange(n, dtype=np.float64)
    slope, intercept = np.polyfit(t, x, 1)
    return x - (slope * t + intercept)


def _sign_change_rate(x: np.ndarray) -> float:
    d = np.diff(x)
    if len(d) < 2:
        return 0.0
    s = np.sign(d)
    flips = int(np.sum(s[1:] * s[:-1] < 0))
    return flips / (len(d) - 1)


def _modulation(x: np.ndarray, frame_period: float) -> tuple[float, float]:
    """First-autocorrelation-peak rate (Hz) and sqrt(2)*std extent.

    Both are computed on the detrended signal. The peak search starts at
    lag 2 so the reported rate never exceeds the frame-rate Nyquist; with
    no peak above the threshold the rate is 0.
    """
    z = _detrend(x)
    extent = float(np.sqrt(2.0) * np.std(z))
    energy = float(np.dot(z, z))
    if energy == 0.0:
        return 0.0, extent
    n = len(z)
    r = np.correlate(z, z, mode="full")[n - 1:] / energy  # r[0] == 1
    for k in range(2, n - 1):
        if r[k] > MOD_PEAK_THRESHOLD and r[k] >= r[k - 1] and r[k] >= r[k + 1]:
            return 1.0 / (k * frame_period), extent
    return 0.0, extent


def _domain_stats(x: np.ndarray, frame_period: float) -> tuple[float, ...]:
    mod_rate, mod_extent = _modulation(x, frame_period)
    return (
        float(np.mean(x)),
        float(np.std(x)),
        float(np.max(x) - np.min(x)),
        float(np.mean(np.abs(np.diff(x)))),
        _sign_change_rate(x),
        mod_rate,
        mod_extent,
    )


def extract_stat_features(
    contour: Contour,
    frame_period: float = DEFAULT_FRAME_PERIOD,
) -> StatFeatures:
    """Compute the 17 features over the contour's valid region.

    Raises :class:`FeatureError` for contours with fewer than
    4 valid frames; callers batching many contours may catch it and skip.
    """
    n = contour.valid_length
    if n < MIN_VALID_FOR_FEATURES:
        raise FeatureError(
            f"{contour.recording_id} @ {contour.start_frame}: "
            f"{n} valid frames, need at least {MIN_VALID_FOR_FEATURES}")
    cents = np.asarray(contour.values_cents[:n], dtype=np.float64)
    hz = np.asarray(contour.values_hz[:n], dtype=np.float64)
    t = np.arange(n, dtype=np.float64) * frame_period
    slope = float(np.polyfit(t, cents, 1)[0])  # cents per second
    values = (
        *_domain_stats(cents, frame_period),
        *_domain_stats(hz, frame_period),
        slope,
        float(np.sum(np.abs(np.diff(cents)))),
        n / CONTOUR_LEN,
    )
    result = StatFeatures(*values)
    arr = result.to_array()
    if not np.all(np.isfinite(arr)):
        bad = STAT_FEATURE_NAMES[int(np.argmax(~np.isfinite(arr)))]
        raise FeatureError(f"non-finite feature {bad}")
    return result


def stat_feature_matrix(
    contours: Iterable[Contour],
    frame_period: float = DEFAULT_FRAME_PERIOD,
    skip_short: bool = False,
) -> np.ndarray:
    """Feature rows for many contours; optionally drop too-short ones."""
    rows = []
    for c in contours:
        try:
            rows.append(extract_stat_features(c, frame_period).to_array())
        except FeatureError:
            if not skip_short:
                raise
    if not rows:
        return np.zeros((0, len(STAT_FEATURE_NAMES)), dtype=np.float64)
    return np.stack(rows)


def zscore_block(
    matrix: np.ndarray,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Standardize columns to zero mean, unit variance.

    With ``stats=None`` the (mean, std) pair is computed from ``matrix``
    (population std; constant columns get divisor 1 so they map to 0) and
    returned for reuse; pass the pair back in to transform held-out rows
    with training statistics.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"zscore_block expects a 2-D matrix, got shape {m.shape}")
    if stats is None:
        if m.shape[0] < 2:
            raise ValidationError("need at least 2 rows to estimate column statistics")
        mean = m.mean(axis=0)
        std = m.std(axis=0)
        std = np.where(std == 0, 1.0, std)
        stats = (mean, std)
    mean, std = stats
    if mean.shape != (m.shape[1],) or std.shape != (m.shape[1],):
        raise ValidationError(
            f"statistics dimension {mean.shape} does not match matrix {m.shape}")
    return (m - mean) / std, stats


def features_to_csv(matrix: np.ndarray, names: Iterable[str] = STAT_FEATURE_NAMES,
                    ids: list[tuple[str, int]] | None = None) -> str:
    """Render a feature matrix as CSV, optionally keyed by contour identity."""
    names = list(names)
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != len(names):
        raise ValidationError(f"matrix shape {m.shape} does not match {len(names)} names")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    key_cols = ["recording_id", "start_frame"] if ids is not None else []
    writer.writerow(key_cols + names)
    for i, row in enumerate(m):
        key = [ids[i][0], ids[i][1]] if ids is not None else []
        writer.writerow(key + [repr(float(v)) for v in row])
    return out.getvalue()


def features_from_csv(source: str | TextIO) -> tuple[np.ndarray, list[str],
                                                     list[tuple[str, int]] | None]:
    """Parse a feature CSV; returns (matrix, column names, optional ids)."""
    text = source.read() if hasattr(source, "read") else source
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty feature file") from None
    keyed = header[:2] == ["recording_id", "start_frame"]
    names = header[2:] if keyed else header
    if not names:
        raise ParseError("feature file has no feature columns")
    rows, ids = [], [] if keyed else None
    for lineno, raw in enumerate(reader, start=2):
        if not raw:
            continue
        if len(raw) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} columns, got {len(raw)}")
        try:
            if keyed:
                ids.append((raw[0], int(raw[1])))
                rows.append([float(v) for v in raw[2:]])
            else:
                rows.append([float(v) for v in raw])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    if not rows:
        raise ParseError("feature file has no data rows")
    return np.asarray(rows, dtype=np.float64), names, ids
