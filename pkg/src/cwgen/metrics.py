"""Probabilistic-forecasting metrics and win-rate aggregation.

All metrics are lower-better and operate on sample ensembles of shape
(m, d, T_f) against an observed future (d, T_f):

* crps      -- scalar-wise ensemble CRPS, averaged over the d x T_f grid
* qice      -- mean absolute deviation of quantile-bin coverage from nominal
* prob_corr -- per-step cross-dimension correlation discrepancy (Frobenius,
               normalized by d) against sliding-window correlations of truth
* prob_mse / prob_mae -- errors of the ensemble mean (point-forecast view)
* cond_fid  -- Frechet distance between Gaussian fits of hand-crafted window
               features of generated vs. observed futures

Everything is permutation-invariant over ensemble members and deterministic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ContractViolation
from .jmce import sliding_window_cov

_EPS = 1e-12


@dataclass
class SampleEnsemble:
    """Generated futures for one conditioning window, with provenance."""

    samples: np.ndarray   # (m, d, T_f)
    window_id: int = 0
    model_id: str = ""
    base_seed: int = 0
    n_steps: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3:
            raise ContractViolation(f"samples must be (m, d, T_f), got {self.samples.shape}")
        if self.samples.shape[0] < 2:
            raise ContractViolation("an ensemble needs at least 2 members")
        if not np.all(np.isfinite(self.samples)):
            raise ContractViolation("ensemble contains non-finite values")

    @property
    def m(self) -> int:
        return self.samples.shape[0]


def _check_truth(ensemble: SampleEnsemble, truth: np.ndarray) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != ensemble.samples.shape[1:]:
        raise ContractViolation(
            f"truth shape {truth.shape} does not match ensemble {ensemble.samples.shape[1:]}")
    return truth


def crps(ensemble: SampleEnsemble, truth: np.ndarray) -> float:
    """Ensemble CRPS per scalar, averaged over dimensions and steps.

    Scalar estimator: mean_i |x_i - y| - (1 / (2 m^2)) sum_ij |x_i - x_j|;
    the pairwise sum uses the sorted-values identity, so the cost is m log m.
    """
    truth = _check_truth(ensemble, truth)
    x = ensemble.samples
    m = x.shape[0]
    term1 = np.abs(x - truth[None]).mean(axis=0)
    xs = np.sort(x, axis=0)
    weights = 2.0 * np.arange(m) - m + 1.0
    pair_sum = 2.0 * np.einsum("i,ijk->jk", weights, xs)
    term2 = pair_sum / (2.0 * m * m)
    return float((term1 - term2).mean())


def qice(ensemble: SampleEnsemble, truth: np.ndarray, m_bins: int = 10) -> float:
    """Quantile-interval coverage error over the window's d x T_f scalars."""
    counts = qice_counts(ensemble, truth, m_bins)
    rates = counts / counts.sum()
    return float(np.abs(rates - 1.0 / m_bins).mean())


def qice_counts(ensemble: SampleEnsemble, truth: np.ndarray, m_bins: int = 10) -> np.ndarray:
    """Per-bin truth counts; pool these across windows before normalizing."""
    truth = _check_truth(ensemble, truth)
    m = ensemble.m
    if m % m_bins != 0:
        raise ContractViolation(f"ensemble size {m} not divisible into {m_bins} bins")
    x = np.sort(ensemble.samples.reshape(m, -1), axis=0)
    step = m // m_bins
    edges = x[step - 1::step][:m_bins - 1]          # (m_bins-1, n_scalars)
    y = truth.reshape(-1)
    bins = (y[None, :] > edges).sum(axis=0)         # 0 .. m_bins-1
    return np.bincount(bins, minlength=m_bins).astype(np.float64)


def qice_pooled(pairs: list[tuple[SampleEnsemble, np.ndarray]], m_bins: int = 10) -> float:
    """QICE with coverage rates pooled over many windows."""
    counts = np.zeros(m_bins)
    for ensemble, truth in pairs:
        counts += qice_counts(ensemble, truth, m_bins)
    rates = counts / counts.sum()
    return float(np.abs(rates - 1.0 / m_bins).mean())


def _corr_from_cov(cov: np.ndarray) -> np.ndarray | None:
    diag = np.diag(cov).copy()
    if np.any(diag <= _EPS):
        return None
    inv = 1.0 / np.sqrt(diag)
    return cov * np.outer(inv, inv)


def prob_corr(ensemble: SampleEnsemble, truth: np.ndarray, w: int = 15) -> float:
    """Mean over steps of ||Corr_gen(t) - Corr_true(t)||_F / d.

    The generated side correlates ensemble members at each step; the true side
    uses the sliding-window covariance of the observed future (window w).
    Steps with a zero-variance dimension on either side are skipped (reported
    via a warning when any are).
    """
    truth = _check_truth(ensemble, truth)
    d, t_f = truth.shape
    if d < 2:
        raise ContractViolation("prob_corr needs at least 2 dimensions")
    true_cov = sliding_window_cov(truth, w).matrices
    x = ensemble.samples
    centered = x - x.mean(axis=0, keepdims=True)
    gen_cov = np.einsum("mit,mjt->tij", centered, centered) / x.shape[0]
    dists = []
    skipped = 0
    for t in range(t_f):
        cg = _corr_from_cov(gen_cov[t])
        ct = _corr_from_cov(true_cov[t])
        if cg is None or ct is None:
            skipped += 1
            continue
        dists.append(np.sqrt(((cg - ct) ** 2).sum()) / d)
    if skipped:
        warnings.warn(f"prob_corr skipped {skipped}/{t_f} steps with zero variance")
    if not dists:
        raise ContractViolation("prob_corr: every step had a zero-variance dimension")
    return float(np.mean(dists))


def prob_mse(ensemble: SampleEnsemble, truth: np.ndarray) -> float:
    """Squared error of the ensemble mean, averaged over the d x T_f grid."""
    truth = _check_truth(ensemble, truth)
    return float(((ensemble.samples.mean(axis=0) - truth) ** 2).mean())


def prob_mae(ensemble: SampleEnsemble, truth: np.ndarray) -> float:
    """Absolute error of the ensemble mean, averaged over the d x T_f grid."""
    truth = _check_truth(ensemble, truth)
    return float(np.abs(ensemble.samples.mean(axis=0) - truth).mean())


# ---------------------------------------------------------------------------
# conditional Frechet distance on window features


def window_features(window: np.ndarray) -> np.ndarray:
    """Hand-crafted embedding of a (d, T_f) window.

    Per dimension: mean, std, lag-1 autocorrelation, min, max; plus the upper
    triangle of the cross-dimension correlation matrix.  Degenerate (constant)
    dimensions contribute zero correlations.
    """
    x = np.asarray(window, dtype=np.float64)
    d = x.shape[0]
    mean = x.mean(axis=1)
    std = x.std(axis=1)
    lag1 = np.zeros(d)
    for i in range(d):
        a, b = x[i, :-1], x[i, 1:]
        sa, sb = a.std(), b.std()
        if sa > _EPS and sb > _EPS:
            lag1[i] = ((a - a.mean()) * (b - b.mean())).mean() / (sa * sb)
    feats = [mean, std, lag1, x.min(axis=1), x.max(axis=1)]
    if d > 1:
        centered = x - mean[:, None]
        cov = centered @ centered.T / x.shape[1]
        corr = _corr_from_cov(cov)
        iu = np.triu_indices(d, k=1)
        feats.append(corr[iu] if corr is not None else np.zeros(len(iu[0])))
    return np.concatenate(feats)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root with relative clipping of round-off negatives."""
    w, v = linalg.jacobi_eigh_stack(mat[None])
    w, v = w[0], v[0]
    floor = -1e-9 * max(1.0, float(np.abs(w).max()))
    if w[-1] < floor:
        raise ContractViolation(f"matrix is not PSD: min eigenvalue {w[-1]:.3e}")
    out = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (out + out.T)


def frechet_gaussian(mu1: np.ndarray, cov1: np.ndarray,
                     mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Frechet distance between two Gaussians:
    ||mu1-mu2||^2 + tr(cov1 + cov2 - 2 (cov1^1/2 cov2 cov1^1/2)^1/2)."""
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    cov1 = linalg.check_symmetric(cov1)
    cov2 = linalg.check_symmetric(cov2)
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    inner = 0.5 * (inner + inner.T)
    cross = _psd_sqrt(inner)
    val = float(((mu1 - mu2) ** 2).sum()) + float(np.trace(cov1 + cov2 - 2.0 * cross))
    return max(val, 0.0)


def _fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    centered = features - mu
    cov = centered.T @ centered / max(features.shape[0] - 1, 1)
    cov = 0.5 * (cov + cov.T)
    w, _ = linalg.jacobi_eigh_stack(cov[None])
    if w[0][-1] < 1e-10:
        warnings.warn("singular feature covariance; adding 1e-6 jitter")
        cov = cov + 1e-6 * np.eye(cov.shape[0])
    return mu, cov


def cond_fid(ensembles: list[SampleEnsemble], truths: list[np.ndarray]) -> float:
    """Frechet distance between feature clouds of generated and observed futures.

    Generated features come from every member of every ensemble; observed
    features from the paired true windows.  Needs at least two windows.
    """
    if len(ensembles) != len(truths):
        raise ContractViolation("ensembles and truths must pair up")
    if len(ensembles) < 2:
        raise ContractViolation("cond_fid needs at least two windows")
    gen = np.stack([window_features(s) for e in ensembles for s in e.samples])
    true = np.stack([window_features(np.asarray(t, dtype=np.float64)) for t in truths])
    mu_g, cov_g = _fit_gaussian(gen)
    mu_t, cov_t = _fit_gaussian(true)
    return frechet_gaussian(mu_g, cov_g, mu_t, cov_t)


# ---------------------------------------------------------------------------
# reports and win rates

METRIC_NAMES = ("crps", "qice", "prob_corr", "cond_fid", "prob_mse", "prob_mae")


@dataclass
class MetricReport:
    """Per-metric (mean, std, n) for one model and variant."""

    model_id: str
    variant: str  # "raw" | "cw"
    values: dict = field(default_factory=dict)  # metric -> (mean, std, n)

    def add(self, metric: str, samples: list[float]) -> None:
        arr = np.asarray(samples, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"non-finite {metric} values for {self.model_id}")
        self.values[metric] = (float(arr.mean()), float(arr.std()), int(arr.size))

    def mean(self, metric: str) -> float:
        return self.values[metric][0]


@dataclass
class WinRateTable:
    """Counts of strict CW wins per metric and overall."""

    per_metric: dict          # metric -> (wins, total)
    wins: int
    total: int

    @property
    def fraction(self) -> float:
        return self.wins / self.total if self.total else 0.0

    def format(self) -> str:
        lines = [f"overall CW win rate: {self.wins}/{self.total} = {100*self.fraction:.2f}%"]
        for metric, (w, t) in self.per_metric.items():
            pct = 100.0 * w / t if t else 0.0
            lines.append(f"  {metric}: {w}/{t} = {pct:.2f}%")
        return "\n".join(lines)


def win_rate(pairs: list[tuple[MetricReport, MetricReport]]) -> WinRateTable:
    """Fraction of (model, metric) pairs where the CW variant is strictly lower."""
    per_metric: dict = {}
    wins = 0
    total = 0
    for raw, cw in pairs:
        if raw.model_id != cw.model_id or raw.variant == cw.variant:
            raise ContractViolation(
                f"unpaired reports: {raw.model_id}/{raw.variant} vs {cw.model_id}/{cw.variant}")
        for metric in raw.values:
            if metric not in cw.values:
                raise ContractViolation(f"metric {metric} missing from CW report")
            w, t = per_metric.get(metric, (0, 0))
            win = cw.mean(metric) < raw.mean(metric)
            per_metric[metric] = (w + int(win), t + 1)
            wins += int(win)
            total += 1
    return WinRateTable(per_metric=per_metric, wins=wins, total=total)
