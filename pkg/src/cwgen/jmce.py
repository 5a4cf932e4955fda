"""Joint mean / covariance estimation for future windows.

The estimator maps a history window to a conditional mean matrix and one
lower-triangular factor per future step; the implied per-step covariance is
factor @ factor.T, positive semi-definite by construction.  Training targets
are centered sliding-window covariances of the observed future.  The loss
combines squared mean error, Frobenius and nuclear covariance errors, and a
penalty that pushes every covariance eigenvalue above a floor:

    total = l2 + l_svd + lambda_min * sqrt(d * T_f) * l_f + w_eigen * penalty

Gradients flow through the eigenvalue maps via eigenvector outer products
(exact at simple eigenvalues, a.e.-correct subgradients at ties).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg, nn
from .errors import ContractViolation
from .data import TimeSeriesWindow, windows_as_arrays

_NORM_FLOOR = 1e-300


@dataclass
class CovTargets:
    """Per-step sliding-window covariance targets for one future window."""

    matrices: np.ndarray  # (T_f, d, d)
    window: int


@dataclass
class JmceOutput:
    """Estimator output for one history window."""

    mu_hat: np.ndarray    # (d, T_f)
    factors: np.ndarray   # (T_f, d, d), lower triangular

    def sigma(self) -> np.ndarray:
        """Implied per-step covariances factor @ factor.T, shape (T_f, d, d)."""
        return np.einsum("tik,tjk->tij", self.factors, self.factors)


@dataclass
class JmceLossBreakdown:
    l2: float
    l_f: float
    l_svd: float
    eigen_penalty: float
    total: float


def identity_output(d: int, t_f: int) -> JmceOutput:
    """The neutral prior: zero mean, identity factors."""
    return JmceOutput(mu_hat=np.zeros((d, t_f)),
                      factors=np.tile(np.eye(d), (t_f, 1, 1)))


def sliding_window_cov(x0: np.ndarray, w: int) -> CovTargets:
    """Centered sliding-window covariance of a (d, T_f) future window.

    The window around step t is clipped to the sequence bounds; the divisor is
    the effective window length (population form), which keeps every target
    positive semi-definite.
    """
    if w < 3 or w % 2 == 0:
        raise ContractViolation(f"window size must be odd and >= 3, got {w}")
    x0 = np.asarray(x0, dtype=np.float64)
    d, t_f = x0.shape
    half = (w - 1) // 2
    out = np.empty((t_f, d, d))
    for t in range(t_f):
        lo = max(0, t - half)
        hi = min(t_f, t + half + 1)
        seg = x0[:, lo:hi]
        centered = seg - seg.mean(axis=1, keepdims=True)
        out[t] = (centered @ centered.T) / seg.shape[1]
    return CovTargets(matrices=out, window=w)


def eigen_penalty(sigma_hat: np.ndarray, lambda_min: float) -> float:
    """Sum of ReLU(lambda_min - eigenvalue) over the eigenvalues of sigma_hat."""
    if lambda_min <= 0:
        raise ContractViolation(f"lambda_min must be positive, got {lambda_min}")
    w, _ = linalg.sym_eigen(sigma_hat)
    return float(np.maximum(lambda_min - w, 0.0).sum())


def jmce_loss(output: JmceOutput, x0: np.ndarray, targets: CovTargets,
              lambda_min: float, w_eigen: float) -> JmceLossBreakdown:
    """Composite loss for a single window (plain numpy, no gradients)."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != output.mu_hat.shape:
        raise ContractViolation(
            f"future shape {x0.shape} does not match mean shape {output.mu_hat.shape}")
    if targets.matrices.shape != output.factors.shape:
        raise ContractViolation(
            f"target stack {targets.matrices.shape} does not match factors "
            f"{output.factors.shape}")
    if w_eigen < 0:
        raise ContractViolation("w_eigen must be nonnegative")
    d, t_f = x0.shape
    sigma = output.sigma()
    l2 = float(((x0 - output.mu_hat) ** 2).sum())
    l_f = 0.0
    l_svd = 0.0
    pen = 0.0
    for t in range(t_f):
        diff = targets.matrices[t] - sigma[t]
        l_f += linalg.frobenius_norm(diff)
        l_svd += linalg.nuclear_norm(diff)
        pen += eigen_penalty(sigma[t], lambda_min)
    total = l2 + l_svd + lambda_min * np.sqrt(d * t_f) * l_f + w_eigen * pen
    return JmceLossBreakdown(l2=l2, l_f=l_f, l_svd=l_svd, eigen_penalty=pen, total=total)


# ---------------------------------------------------------------------------
# differentiable loss pieces (batched custom ops)


def _sym(mats: np.ndarray) -> np.ndarray:
    return 0.5 * (mats + np.swapaxes(mats, -1, -2))


def frobenius_sum_op(sigma_hat: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean over batch of sum_t ||target - sigma_hat||_F."""
    batch = sigma_hat.data.shape[0]
    diff = targets - sigma_hat.data
    norms = np.sqrt((diff * diff).sum(axis=(-2, -1)))
    out = norms.sum() / batch

    def bw(g):
        safe = np.where(norms > _NORM_FLOOR, norms, 1.0)
        grad = -diff / safe[..., None, None]
        grad = np.where((norms > _NORM_FLOOR)[..., None, None], grad, 0.0)
        return (g * grad / batch,)

    return ad.from_op(out, (sigma_hat,), bw, "frobenius_sum")


def nuclear_sum_op(sigma_hat: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean over batch of sum_t ||target - sigma_hat||_N (sum |eigenvalue|)."""
    batch = sigma_hat.data.shape[0]
    diff = _sym(targets - sigma_hat.data)
    w, v = linalg.jacobi_eigh_stack(diff)
    out = np.abs(w).sum() / batch

    def bw(g):
        # subgradient V sign(L) V^T; the minus flips it onto sigma_hat
        grad = -np.einsum("...ik,...k,...jk->...ij", v, np.sign(w), v)
        return (g * grad / batch,)

    return ad.from_op(out, (sigma_hat,), bw, "nuclear_sum")


def eigen_penalty_op(sigma_hat: ad.Tensor, lambda_min: float) -> ad.Tensor:
    """Mean over batch of sum_t sum_i ReLU(lambda_min - eigenvalue_i)."""
    batch = sigma_hat.data.shape[0]
    w, v = linalg.jacobi_eigh_stack(_sym(sigma_hat.data))
    out = np.maximum(lambda_min - w, 0.0).sum() / batch

    def bw(g):
        active = (w < lambda_min).astype(np.float64)
        grad = -np.einsum("...ik,...k,...jk->...ij", v, active, v)
        return (g * grad / batch,)

    return ad.from_op(out, (sigma_hat,), bw, "eigen_penalty")


def tril_scatter(entries: ad.Tensor, d: int) -> ad.Tensor:
    """Scatter (..., d(d+1)/2) packed entries into (..., d, d) lower triangles."""
    rows, cols = np.tril_indices(d)
    lead = entries.data.shape[:-1]
    out = np.zeros(lead + (d, d))
    out[..., rows, cols] = entries.data

    def bw(g):
        return (g[..., rows, cols],)

    return ad.from_op(out, (entries,), bw, "tril_scatter")


def batch_loss_tensors(mu: ad.Tensor, sigma: ad.Tensor, x0: np.ndarray,
                       targets: np.ndarray, lambda_min: float, w_eigen: float):
    """Batched composite loss; returns (total Tensor, JmceLossBreakdown)."""
    d, t_f = x0.shape[1], x0.shape[2]
    l2 = ad.tmean(ad.sqnorm(ad.sub(ad.Tensor(x0), mu), axis=(1, 2)))
    l_f = frobenius_sum_op(sigma, targets)
    l_svd = nuclear_sum_op(sigma, targets)
    pen = eigen_penalty_op(sigma, lambda_min)
    total = ad.add(ad.add(l2, l_svd),
                   ad.add(ad.scale(l_f, lambda_min * float(np.sqrt(d * t_f))),
                          ad.scale(pen, w_eigen)))
    breakdown = JmceLossBreakdown(
        l2=float(l2.data), l_f=float(l_f.data), l_svd=float(l_svd.data),
        eigen_penalty=float(pen.data), total=float(total.data))
    return total, breakdown


# ---------------------------------------------------------------------------
# network


class JmceNet:
    """History encoder plus a head emitting the mean and triangular factors.

    A learned per-dimension gate (initialized at zero) anchors the mean to the
    last observed history value, which lets the estimator track level shifts
    without hurting the zero-parameter contract (all-zero weights produce
    exactly zero outputs).
    """

    def __init__(self, d: int, t_h: int, t_f: int, rng: np.random.Generator,
                 enc_hidden: int = 48, hidden: int = 96):
        self.d = d
        self.t_h = t_h
        self.t_f = t_f
        self.enc_hidden = enc_hidden
        self.hidden = hidden
        self.n_tri = d * (d + 1) // 2
        self.out_dim = d * t_f + t_f * self.n_tri
        self.net = nn.NetParams()
        nn.add_encoder_params(self.net, "enc", d, enc_hidden, rng)
        nn.add_mlp_params(self.net, "head", [enc_hidden + d, hidden, hidden, self.out_dim], rng)
        self.net.add("gate", np.zeros(d))

    def forward_tensors(self, c: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
        """Batched forward pass: (B, d, T_h) -> mean (B, d, T_f), factors (B, T_f, d, d)."""
        c = np.asarray(c, dtype=np.float64)
        batch = c.shape[0]
        h = nn.rnn_encode(self.net, "enc", c)
        c_last = c[:, :, -1]
        z = ad.concat([h, ad.Tensor(c_last)], axis=1)
        out = nn.mlp_apply(self.net, "head", z, 3)
        mu_flat = ad.slice_axis(out, 1, 0, self.d * self.t_f)
        mu = ad.reshape(mu_flat, (batch, self.d, self.t_f))
        anchor = ad.mul(ad.reshape(self.net["gate"], (1, self.d, 1)),
                        ad.Tensor(c_last[:, :, None]))
        mu = ad.add(mu, anchor)
        fac_flat = ad.slice_axis(out, 1, self.d * self.t_f, self.out_dim)
        fac = ad.reshape(fac_flat, (batch, self.t_f, self.n_tri))
        factors = tril_scatter(fac, self.d)
        return mu, factors

    def forward(self, c: np.ndarray) -> JmceOutput:
        """Single-window forward pass (no gradients)."""
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (self.d, self.t_h):
            raise ContractViolation(f"history must be ({self.d}, {self.t_h}), got {c.shape}")
        with ad.no_grad():
            mu, factors = self.forward_tensors(c[None])
        return JmceOutput(mu_hat=mu.data[0], factors=factors.data[0])

    def forward_batch(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched forward pass without gradients: arrays (B,d,T_f), (B,T_f,d,d)."""
        with ad.no_grad():
            mu, factors = self.forward_tensors(c)
        return mu.data, factors.data

    def meta(self) -> dict[str, float]:
        return {"d": float(self.d), "t_h": float(self.t_h), "t_f": float(self.t_f),
                "enc_hidden": float(self.enc_hidden), "hidden": float(self.hidden)}

    def save(self, path, extra_meta: dict[str, float] | None = None) -> None:
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        nn.save_checkpoint(path, self.net.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["JmceNet", dict[str, float]]:
        arrays, meta = nn.load_checkpoint(path)
        model = cls(int(meta["d"]), int(meta["t_h"]), int(meta["t_f"]),
                    rng=np.random.default_rng(0),
                    enc_hidden=int(meta["enc_hidden"]), hidden=int(meta["hidden"]))
        model.net.load_state_arrays(arrays)
        return model, meta


# ---------------------------------------------------------------------------
# training


@dataclass
class JmceTrainConfig:
    lambda_min: float = 0.1
    w_eigen: float = 50.0
    cov_window: int = 15
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    enc_hidden: int = 48
    hidden: int = 96
    seed: int = 0


def cov_targets_for(windows: list[TimeSeriesWindow], w: int) -> np.ndarray:
    """Stack of sliding-window covariance targets, shape (N, T_f, d, d)."""
    return np.stack([sliding_window_cov(win.future, w).matrices for win in windows])


def train_jmce(train_windows: list[TimeSeriesWindow],
               val_windows: list[TimeSeriesWindow],
               config: JmceTrainConfig) -> tuple[JmceNet, nn.FitResult]:
    """Fit the estimator; returns the parameters of the best-validation epoch."""
    if not train_windows:
        raise ContractViolation("no training windows")
    hist, fut = windows_as_arrays(train_windows)
    targets = cov_targets_for(train_windows, config.cov_window)
    v_hist, v_fut = windows_as_arrays(val_windows)
    v_targets = cov_targets_for(val_windows, config.cov_window)
    d, t_h = hist.shape[1], hist.shape[2]
    t_f = fut.shape[2]

    model = JmceNet(d, t_h, t_f, rng=np.random.default_rng(config.seed),
                    enc_hidden=config.enc_hidden, hidden=config.hidden)

    def make_loss(idx):
        mu, factors = model.forward_tensors(hist[idx])
        sigma = ad.matmul(factors, ad.transpose(factors, (0, 1, 3, 2)))
        total, _ = batch_loss_tensors(mu, sigma, fut[idx], targets[idx],
                                      config.lambda_min, config.w_eigen)
        return total

    def val_loss():
        with ad.no_grad():
            mu, factors = model.forward_tensors(v_hist)
            sigma = ad.matmul(factors, ad.transpose(factors, (0, 1, 3, 2)))
            total, _ = batch_loss_tensors(mu, sigma, v_fut, v_targets,
                                          config.lambda_min, config.w_eigen)
        return float(total.data)

    fit_cfg = nn.FitConfig(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr)
    result = nn.fit(model.net, len(train_windows), make_loss, val_loss, fit_cfg,
                    np.random.default_rng(config.seed + 1))
    return model, result


def min_sigma_eigenvalue(model: JmceNet, windows: list[TimeSeriesWindow]) -> float:
    """Smallest eigenvalue over all per-step covariances on the given windows."""
    hist, _ = windows_as_arrays(windows)
    _, factors = model.forward_batch(hist)
    sigma = np.einsum("ntik,ntjk->ntij", factors, factors)
    w, _ = linalg.jacobi_eigh_stack(sigma)
    return float(w.min())
