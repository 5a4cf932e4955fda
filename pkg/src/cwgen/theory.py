"""Gaussian KL divergence and the terminal-replacement sufficient condition.

For a target distribution with mean mu and positive-definite covariance sigma,
replacing a standard-normal terminal with N(mu_hat, sigma_hat) cannot increase
the KL divergence to the target whenever

    (min eigenvalue of sigma_hat)^-1 (||mu - mu_hat||^2 + ||sigma - sigma_hat||_N)
        + sqrt(d) ||sigma - sigma_hat||_F   <=   ||mu||^2.

`theorem1_check` evaluates both sides together with the two closed-form KLDs
(for Gaussian targets), and `validate_theorem1` sweeps randomized instances
across perturbation scales, failing hard on any instance that satisfies the
condition yet violates the KLD ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ContractViolation, SingularMatrixError

ORDERING_TOL = 1e-9


class TheoremViolation(AssertionError):
    """An instance satisfied the sufficient condition but broke the KLD ordering."""


@dataclass
class GaussianSpec:
    """A multivariate normal given by mean vector and SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = linalg.check_symmetric(self.cov)
        if self.cov.shape[0] != self.mean.shape[0]:
            raise ContractViolation(
                f"mean dim {self.mean.shape[0]} != cov dim {self.cov.shape[0]}")
        w, _ = linalg.sym_eigen(self.cov)
        if w[-1] <= 0.0:
            raise SingularMatrixError(f"covariance must be SPD; min eigenvalue {w[-1]:.3e}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_kld(p: GaussianSpec, q: GaussianSpec) -> float:
    """Closed-form KL(p || q) between multivariate normals."""
    if p.dim != q.dim:
        raise ContractViolation(f"dimension mismatch: {p.dim} vs {q.dim}")
    wq, vq = linalg.sym_eigen(q.cov)
    wp, _ = linalg.sym_eigen(p.cov)
    if wq[-1] <= linalg.EIG_CLAMP:
        raise SingularMatrixError("q covariance is singular")
    q_inv = vq @ np.diag(1.0 / wq) @ vq.T
    diff = q.mean - p.mean
    trace = float((q_inv * p.cov).sum())
    maha = float(diff @ q_inv @ diff)
    logdet = float(np.log(wq).sum() - np.log(wp).sum())
    return 0.5 * (trace + maha - p.dim + logdet)


def theorem1_lhs(mu: np.ndarray, sigma: np.ndarray,
                 mu_hat: np.ndarray, sigma_hat: np.ndarray) -> float:
    """Left-hand side of the sufficient condition (the right side is ||mu||^2)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    mu_hat = np.asarray(mu_hat, dtype=np.float64).reshape(-1)
    sigma = linalg.check_symmetric(sigma)
    sigma_hat = linalg.check_symmetric(sigma_hat)
    d = mu.shape[0]
    w_hat, _ = linalg.sym_eigen(sigma_hat)
    lam_min = w_hat[-1]
    if lam_min <= 0.0:
        raise SingularMatrixError(
            f"sigma_hat must be SPD; min eigenvalue {lam_min:.3e}")
    diff = sigma - sigma_hat
    mean_err = float(((mu - mu_hat) ** 2).sum())
    return (mean_err + linalg.nuclear_norm(diff)) / lam_min \
        + np.sqrt(d) * linalg.frobenius_norm(diff)


@dataclass
class ConditionReport:
    lhs: float
    rhs: float
    holds: bool
    kld_hat: float
    kld_0: float
    ordering_ok: bool


def theorem1_check(mu, sigma, mu_hat, sigma_hat) -> ConditionReport:
    """Evaluate the condition and both KLDs for a Gaussian target N(mu, sigma)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    d = mu.shape[0]
    p = GaussianSpec(mu, sigma)
    q_hat = GaussianSpec(mu_hat, sigma_hat)
    q_0 = GaussianSpec(np.zeros(d), np.eye(d))
    lhs = theorem1_lhs(mu, sigma, mu_hat, sigma_hat)
    rhs = float((mu ** 2).sum())
    kld_hat = gaussian_kld(p, q_hat)
    kld_0 = gaussian_kld(p, q_0)
    return ConditionReport(lhs=lhs, rhs=rhs, holds=lhs <= rhs,
                           kld_hat=kld_hat, kld_0=kld_0,
                           ordering_ok=kld_hat <= kld_0 + ORDERING_TOL)


def random_spd(rng: np.random.Generator, d: int, lo: float = 0.2,
               hi: float = 3.0) -> np.ndarray:
    """Q diag(u) Q^T with Q from the QR of a Gaussian matrix, u ~ U[lo, hi]."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))  # deterministic orientation
    u = rng.uniform(lo, hi, size=d)
    m = q @ np.diag(u) @ q.T
    return 0.5 * (m + m.T)


def _clip_spd(mat: np.ndarray, floor: float) -> np.ndarray:
    w, v = linalg.sym_eigen(mat)
    w = np.maximum(w, floor)
    out = v @ np.diag(w) @ v.T
    return 0.5 * (out + out.T)


@dataclass
class ScaleRow:
    scale: float
    n: int
    n_holds: int

    @property
    def hold_rate(self) -> float:
        return self.n_holds / self.n if self.n else 0.0


@dataclass
class Theorem1Summary:
    n_instances: int
    dim: int
    rows: list            # per perturbation scale
    n_holds: int
    counterexamples: int  # always 0 on return; violations raise instead
    margin_min: float     # min of kld_0 - kld_hat among holding instances
    margin_mean: float

    @property
    def hold_rate(self) -> float:
        return self.n_holds / self.n_instances if self.n_instances else 0.0

    def format(self) -> str:
        lines = [
            f"instances: {self.n_instances} (d={self.dim})",
            f"condition hold rate: {self.hold_rate:.3f} ({self.n_holds}/{self.n_instances})",
            "counterexamples: 0",
            f"kld margin among holding instances: min={self.margin_min:.3e} "
            f"mean={self.margin_mean:.3e}",
            "per perturbation scale:",
        ]
        for row in self.rows:
            lines.append(f"  scale {row.scale:g}: hold rate {row.hold_rate:.3f} "
                         f"({row.n_holds}/{row.n})")
        return "\n".join(lines)


def draw_instances(n: int, d: int, rng: np.random.Generator, scales: tuple):
    """Randomized (mu, sigma, mu_hat, sigma_hat, scale) batches for the sweep.

    Targets use the documented SPD construction (QR orthogonal basis, spectrum
    uniform on [0.2, 3]); mean norms are uniform on [0, 5].  Estimators get
    additive Gaussian perturbations at a per-instance scale assigned round
    robin, with the perturbed covariance eigen-clipped to stay SPD.
    """
    scale_arr = np.asarray([scales[k % len(scales)] for k in range(n)])
    dirs = rng.standard_normal((n, d))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    mus = dirs / norms * rng.uniform(0.0, 5.0, size=(n, 1))
    g = rng.standard_normal((n, d, d))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.einsum("nii->ni", r))[:, None, :]
    u = rng.uniform(0.2, 3.0, size=(n, d))
    sigmas = np.einsum("nik,nk,njk->nij", q, u, q)
    sigmas = 0.5 * (sigmas + np.swapaxes(sigmas, -1, -2))
    mu_hats = mus + scale_arr[:, None] * rng.standard_normal((n, d))
    pert = rng.standard_normal((n, d, d))
    pert = 0.5 * (pert + np.swapaxes(pert, -1, -2))
    raw = sigmas + scale_arr[:, None, None] * pert
    w, v = linalg.jacobi_eigh_stack(raw)
    w = np.maximum(w, 0.05)
    sigma_hats = np.einsum("nik,nk,njk->nij", v, w, v)
    sigma_hats = 0.5 * (sigma_hats + np.swapaxes(sigma_hats, -1, -2))
    return mus, sigmas, mu_hats, sigma_hats, scale_arr


def validate_theorem1(n_instances: int, d: int, rng: np.random.Generator,
                      scales: tuple = (0.05, 0.3, 1.0)) -> Theorem1Summary:
    """Randomized sweep: every instance satisfying the condition must keep the
    KLD ordering; any violation raises TheoremViolation with the instance.

    The sweep runs vectorized over matrix stacks; the per-instance arithmetic
    is the same as `theorem1_check` (tests pin the two paths against each
    other on subsamples).
    """
    if n_instances < 1:
        raise ContractViolation("need at least one instance")
    mus, sigmas, mu_hats, sigma_hats, scale_arr = draw_instances(
        n_instances, d, rng, scales)

    w_hat, v_hat = linalg.jacobi_eigh_stack(sigma_hats)
    lam_min = w_hat[:, -1]
    diff = sigmas - sigma_hats
    wd, _ = linalg.jacobi_eigh_stack(diff)
    nuc = np.abs(wd).sum(axis=1)
    fro = np.sqrt((diff * diff).sum(axis=(1, 2)))
    mean_err = ((mus - mu_hats) ** 2).sum(axis=1)
    lhs = (mean_err + nuc) / lam_min + np.sqrt(d) * fro
    rhs = (mus ** 2).sum(axis=1)
    holds = lhs <= rhs

    w_p, _ = linalg.jacobi_eigh_stack(sigmas)
    logdet_p = np.log(w_p).sum(axis=1)
    logdet_hat = np.log(w_hat).sum(axis=1)
    q_inv = np.einsum("nik,nk,njk->nij", v_hat, 1.0 / w_hat, v_hat)
    dm = mu_hats - mus
    kld_hat = 0.5 * (np.einsum("nij,nij->n", q_inv, sigmas)
                     + np.einsum("ni,nij,nj->n", dm, q_inv, dm)
                     - d + logdet_hat - logdet_p)
    kld_0 = 0.5 * (np.einsum("nii->n", sigmas) + rhs - d - logdet_p)
    ordering_ok = kld_hat <= kld_0 + ORDERING_TOL

    violations = holds & ~ordering_ok
    if violations.any():
        k = int(np.flatnonzero(violations)[0])
        report = theorem1_check(mus[k], sigmas[k], mu_hats[k], sigma_hats[k])
        raise TheoremViolation(
            "condition held but KLD ordering failed:\n"
            f"mu={mus[k]!r}\nsigma={sigmas[k]!r}\nmu_hat={mu_hats[k]!r}\n"
            f"sigma_hat={sigma_hats[k]!r}\nreport={report!r}")

    rows = []
    for s in scales:
        sel = scale_arr == s
        rows.append(ScaleRow(scale=s, n=int(sel.sum()), n_holds=int(holds[sel].sum())))
    margins = (kld_0 - kld_hat)[holds]
    return Theorem1Summary(
        n_instances=n_instances, dim=d, rows=rows, n_holds=int(holds.sum()),
        counterexamples=0,
        margin_min=float(margins.min()) if margins.size else float("nan"),
        margin_mean=float(margins.mean()) if margins.size else float("nan"))
