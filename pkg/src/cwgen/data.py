"""Dataset synthesis, CSV ingestion, splitting, normalization, and windowing.

A :class:`Series` is a (d, T) float64 array plus normalization metadata.  The
synthetic generator produces trend + seasonality + a VAR(1) noise process with
a cyclic volatility scale and fixed cross-correlation, and carries the exact
generating quantities alongside (`SyntheticTruth`) so tests can compare
estimators against the ground truth.  Splits are chronological; z-score
statistics always come from the training split alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, DataError


@dataclass
class SyntheticTruth:
    """Exact generating quantities of a synthetic series (same units as values)."""

    deterministic: np.ndarray      # (d, T) trend + seasonality (+ test shift)
    noise: np.ndarray              # (d, T) VAR(1) noise component
    noise_cov: np.ndarray          # (T, d, d) marginal covariance of noise[:, t]
    innovation_cov: np.ndarray     # (T, d, d) covariance of the step-t innovation
    var_coeff: float               # VAR(1) coefficient
    scale: np.ndarray              # (T,) volatility cycle s_t

    def rescale(self, mean: np.ndarray, std: np.ndarray) -> "SyntheticTruth":
        outer = np.outer(std, std)
        return SyntheticTruth(
            deterministic=(self.deterministic - mean[:, None]) / std[:, None],
            noise=self.noise / std[:, None],
            noise_cov=self.noise_cov / outer,
            innovation_cov=self.innovation_cov / outer,
            var_coeff=self.var_coeff,
            scale=self.scale.copy(),
        )

    def slice(self, start: int, stop: int) -> "SyntheticTruth":
        return SyntheticTruth(
            deterministic=self.deterministic[:, start:stop],
            noise=self.noise[:, start:stop],
            noise_cov=self.noise_cov[start:stop],
            innovation_cov=self.innovation_cov[start:stop],
            var_coeff=self.var_coeff,
            scale=self.scale[start:stop],
        )


@dataclass
class Series:
    """A (d, T) multivariate series with optional train-split z-score stats."""

    values: np.ndarray
    name: str = "series"
    train_mean: np.ndarray | None = None
    train_std: np.ndarray | None = None
    truth: SyntheticTruth | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractViolation(f"series values must be (d, T), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains non-finite values")

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split ratios and window geometry."""

    ratios: tuple[float, float, float] = (3.0, 1.0, 1.0)
    t_h: int = 24
    t_f: int = 12

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ContractViolation(f"ratios must be three positive numbers, got {self.ratios}")
        if self.t_h < 1 or self.t_f < 1:
            raise ContractViolation("window lengths must be positive")

    @property
    def eval_stride(self) -> int:
        # evaluation windows are fully non-overlapping
        return self.t_h + self.t_f


@dataclass(frozen=True)
class TimeSeriesWindow:
    """A (history, future) pair cut from one series."""

    history: np.ndarray            # (d, T_h)
    future: np.ndarray             # (d, T_f)
    start: int                     # index of the first history column
    series_name: str = "series"

    @property
    def future_start(self) -> int:
        return self.start + self.history.shape[1]


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic generator.

    The series is trend + seasonality + VAR(1) noise.  The noise innovation at
    step t is s_t * sigma_noise * chol(R) eta_t with eta iid standard normal,
    R the fixed cross-correlation matrix with off-diagonal rho, and
    s_t = 1 + vol_amp * sin(2 pi t / vol_period) the volatility cycle.
    ``shift_delta`` adds a level shift (in units of the pre-shift standard
    deviation of each channel) from ``shift_fraction`` of the length onward,
    emulating a train/test distribution shift; 0 disables it.
    """

    d: int = 3
    length: int = 1800
    trend_amp: float = 0.6
    trend_period: float = 480.0
    slope: float = 0.0
    season_amp: float = 1.0
    season_period: float = 24.0
    var_coeff: float = 0.5
    cross_corr: float = 0.6
    noise_std: float = 0.7
    vol_amp: float = 0.5
    vol_period: float = 96.0
    shift_delta: float = 0.0
    shift_fraction: float = 0.8


def generate_synthetic(config: SyntheticConfig, seed: int) -> Series:
    """Generate a synthetic series with its exact generating truth attached."""
    d, t_total = config.d, config.length
    if abs(config.var_coeff) >= 1.0:
        raise ContractViolation(
            f"VAR coefficient {config.var_coeff} is unstable (|coeff| must be < 1)")
    if not (0.0 <= config.vol_amp < 1.0):
        raise ContractViolation("vol_amp must lie in [0, 1) to keep scales positive")
    rng = np.random.default_rng(seed)

    t_idx = np.arange(t_total, dtype=np.float64)
    phases = 2.0 * np.pi * np.arange(d) / d
    trend = config.trend_amp * np.sin(2.0 * np.pi * t_idx[None, :] / config.trend_period
                                      + phases[:, None] / 2.0)
    trend = trend + config.slope * t_idx[None, :]
    season = config.season_amp * np.sin(2.0 * np.pi * t_idx[None, :] / config.season_period
                                        + phases[:, None])
    det = trend + season

    rho = config.cross_corr
    corr = np.full((d, d), rho) + (1.0 - rho) * np.eye(d)
    if d > 1:
        min_eig = 1.0 - rho  # eigenvalues of corr are {1+(d-1)rho, 1-rho}
        if min_eig <= 0 or 1.0 + (d - 1) * rho <= 0:
            raise ContractViolation(f"cross correlation {rho} is not positive definite for d={d}")
    chol = np.linalg.cholesky(corr)

    scale = 1.0 + config.vol_amp * np.sin(2.0 * np.pi * t_idx / config.vol_period)
    phi = config.var_coeff
    noise = np.zeros((d, t_total))
    innov_cov = np.zeros((t_total, d, d))
    noise_cov = np.zeros((t_total, d, d))
    base_cov = (config.noise_std ** 2) * corr
    prev = np.zeros(d)
    prev_cov = np.zeros((d, d))
    eta = rng.standard_normal((t_total, d))
    for t in range(t_total):
        innov_cov[t] = (scale[t] ** 2) * base_cov
        innovation = scale[t] * config.noise_std * (chol @ eta[t])
        prev = phi * prev + innovation
        prev_cov = (phi ** 2) * prev_cov + innov_cov[t]
        noise[:, t] = prev
        noise_cov[t] = prev_cov

    values = det + noise

    if config.shift_delta != 0.0:
        t0 = int(round(config.shift_fraction * t_total))
        pre_std = values[:, :t0].std(axis=1)
        shift = config.shift_delta * pre_std
        values[:, t0:] += shift[:, None]
        det = det.copy()
        det[:, t0:] += shift[:, None]

    truth = SyntheticTruth(deterministic=det, noise=noise, noise_cov=noise_cov,
                           innovation_cov=innov_cov, var_coeff=phi, scale=scale)
    return Series(values=values, name=f"synthetic-{seed}", truth=truth)


@dataclass
class CsvSchema:
    """How to read a CSV: header required, optional leading timestamp column."""

    delimiter: str = ","
    timestamp_column: str = "auto"  # "auto" | "none" | "first"


def load_csv(path, schema: CsvSchema | None = None) -> Series:
    """Read a variables-as-columns CSV into a Series.

    Rows are time steps.  Rows with any unparseable cell are rejected and
    reported by line number; an empty result is an error.
    """
    schema = schema or CsvSchema()
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows after the header")

    drop_first = False
    if schema.timestamp_column == "first":
        drop_first = True
    elif schema.timestamp_column == "auto":
        first_name = header[0].strip().lower()
        looks_named = first_name in {"date", "time", "timestamp", "datetime"}
        try:
            float(rows[0][0])
            looks_numeric = True
        except (ValueError, IndexError):
            looks_numeric = False
        drop_first = looks_named or not looks_numeric

    start_col = 1 if drop_first else 0
    n_cols = len(header) - start_col
    if n_cols < 1:
        raise DataError(f"{path}: no numeric columns")

    parsed = []
    bad_lines = []
    for line_no, row in enumerate(rows, start=2):
        cells = row[start_col:]
        if len(cells) != n_cols:
            bad_lines.append(f"line {line_no}: expected {n_cols} cells, got {len(cells)}")
            continue
        try:
            parsed.append([float(c) for c in cells])
        except ValueError:
            bad_lines.append(f"line {line_no}: non-numeric cell")
    if not parsed:
        raise DataError(f"{path}: no parseable rows; " + "; ".join(bad_lines[:5]))
    if bad_lines:
        import warnings
        warnings.warn(f"{path}: rejected {len(bad_lines)} rows ({'; '.join(bad_lines[:3])} ...)")
    values = np.asarray(parsed, dtype=np.float64).T  # (d, T)
    return Series(values=values, name=str(path))


def split_and_normalize(series: Series, spec: SplitSpec) -> tuple[Series, Series, Series]:
    """Chronological split plus z-scoring with train statistics only."""
    total = sum(spec.ratios)
    n = series.length
    n_train = int(round(n * spec.ratios[0] / total))
    n_val = int(round(n * spec.ratios[1] / total))
    n_test = n - n_train - n_val
    min_len = spec.t_h + spec.t_f
    if min(n_train, n_val, n_test) < min_len:
        raise ContractViolation(
            f"split lengths {(n_train, n_val, n_test)} shorter than T_h+T_f={min_len}")

    train_raw = series.values[:, :n_train]
    mean = train_raw.mean(axis=1)
    std = train_raw.std(axis=1)
    dead = np.flatnonzero(std <= 1e-12)
    if dead.size:
        raise DataError(f"degenerate (zero-variance) channels on the train split: {dead.tolist()}")

    def cut(start, stop, tag):
        vals = (series.values[:, start:stop] - mean[:, None]) / std[:, None]
        truth = None
        if series.truth is not None:
            truth = series.truth.rescale(mean, std).slice(start, stop)
        return Series(values=vals, name=f"{series.name}/{tag}",
                      train_mean=mean.copy(), train_std=std.copy(), truth=truth)

    return (cut(0, n_train, "train"),
            cut(n_train, n_train + n_val, "val"),
            cut(n_train + n_val, n, "test"))


def make_windows(series: Series, t_h: int, t_f: int, mode: str) -> list[TimeSeriesWindow]:
    """Cut (history, future) windows; training stride 1, evaluation stride T_h+T_f."""
    if mode not in ("training", "evaluation"):
        raise ContractViolation(f"mode must be 'training' or 'evaluation', got {mode!r}")
    stride = 1 if mode == "training" else t_h + t_f
    span = t_h + t_f
    if series.length < span:
        raise DataError(f"series of length {series.length} is shorter than T_h+T_f={span}")
    count = (series.length - span) // stride + 1
    windows = []
    for k in range(count):
        start = k * stride
        windows.append(TimeSeriesWindow(
            history=series.values[:, start:start + t_h].copy(),
            future=series.values[:, start + t_h:start + span].copy(),
            start=start,
            series_name=series.name,
        ))
    return windows


def window_truth(series: Series, window: TimeSeriesWindow):
    """Ground-truth conditional mean and per-step covariance for one window.

    Only available on synthetic series.  The conditional mean of future step k
    (0-based) given the history is deterministic(t) + phi^(k+1) * noise at the
    last history step; the conditional covariance accumulates the innovation
    covariances through the VAR recursion.
    Returns (mean (d, T_f), cov (T_f, d, d)).
    """
    tr = series.truth
    if tr is None:
        raise ContractViolation("series carries no synthetic truth")
    t_h = window.history.shape[1]
    t_f = window.future.shape[1]
    j = window.start + t_h - 1          # last history index
    phi = tr.var_coeff
    d = series.d
    mean = np.empty((d, t_f))
    cov = np.empty((t_f, d, d))
    run_cov = np.zeros((d, d))
    z_last = tr.noise[:, j]
    for k in range(t_f):
        t = j + 1 + k
        mean[:, k] = tr.deterministic[:, t] + (phi ** (k + 1)) * z_last
        run_cov = (phi ** 2) * run_cov + tr.innovation_cov[t]
        cov[k] = run_cov
    return mean, cov


def windows_as_arrays(windows: list[TimeSeriesWindow]):
    """Stack windows into (N, d, T_h) and (N, d, T_f) arrays."""
    hist = np.stack([w.history for w in windows])
    fut = np.stack([w.future for w in windows])
    return hist, fut
