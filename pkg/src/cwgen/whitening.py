"""Conditional whitening: per-step covariance stacks and the transforms on them.

A :class:`CovStack` holds the T_f per-step covariances implied by estimator
factors (with an optional diagonal jitter) together with cached signed powers.
Whitening maps a future window x to  power(-0.5) applied per step to
(x - mean); unwhitening inverts it exactly.  Terminal-noise sampling uses the
raw factors directly (one matrix-vector product per step, no decomposition).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ContractViolation
from .jmce import JmceOutput


@dataclass
class CovStack:
    """Per-step covariances with cached +/-0.5 powers."""

    sigmas: np.ndarray        # (T_f, d, d)
    pow_half: np.ndarray      # (T_f, d, d)
    pow_neg_half: np.ndarray  # (T_f, d, d)
    eigenvalues: np.ndarray   # (T_f, d), descending per step
    jitter: float

    @property
    def t_f(self) -> int:
        return self.sigmas.shape[0]

    @property
    def d(self) -> int:
        return self.sigmas.shape[1]


def build_cov_stack(output: JmceOutput, jitter: float = 1e-6) -> CovStack:
    """Assemble factor @ factor.T + jitter * I per step and cache both powers."""
    factors = np.asarray(output.factors, dtype=np.float64)
    if not np.all(np.isfinite(factors)):
        raise ContractViolation("factors contain non-finite entries")
    if jitter < 0:
        raise ContractViolation("jitter must be nonnegative")
    t_f, d = factors.shape[0], factors.shape[1]
    sigmas = np.einsum("tik,tjk->tij", factors, factors)
    if jitter:
        sigmas = sigmas + jitter * np.eye(d)
    sigmas = 0.5 * (sigmas + np.swapaxes(sigmas, -1, -2))
    eigenvalues, _ = linalg.jacobi_eigh_stack(sigmas)
    pow_half = linalg.sym_power_stack(sigmas, 0.5)
    pow_neg_half = linalg.sym_power_stack(sigmas, -0.5)  # raises if singular
    return CovStack(sigmas=sigmas, pow_half=pow_half, pow_neg_half=pow_neg_half,
                    eigenvalues=eigenvalues, jitter=float(jitter))


def apply_stack(m_stack: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Column-wise matrix application: column t of the result is m[t] @ e[:, t]."""
    m_stack = np.asarray(m_stack, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if m_stack.ndim != 3 or e.ndim != 2 or m_stack.shape[0] != e.shape[1] \
            or m_stack.shape[1] != m_stack.shape[2] or m_stack.shape[1] != e.shape[0]:
        raise ContractViolation(
            f"stack {m_stack.shape} does not match matrix {e.shape}")
    return np.einsum("tij,jt->it", m_stack, e)


def whiten(x0: np.ndarray, mu_hat: np.ndarray, stack: CovStack) -> np.ndarray:
    """Remove the conditional mean and per-step covariance structure."""
    x0 = np.asarray(x0, dtype=np.float64)
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    if x0.shape != mu_hat.shape:
        raise ContractViolation(f"shapes differ: x {x0.shape}, mean {mu_hat.shape}")
    return apply_stack(stack.pow_neg_half, x0 - mu_hat)


def unwhiten(x_cw: np.ndarray, mu_hat: np.ndarray, stack: CovStack) -> np.ndarray:
    """Exact inverse of :func:`whiten`."""
    x_cw = np.asarray(x_cw, dtype=np.float64)
    return apply_stack(stack.pow_half, x_cw) + np.asarray(mu_hat, dtype=np.float64)


def sample_cw_noise(output: JmceOutput, rng: np.random.Generator,
                    mu_hat: np.ndarray | None = None) -> np.ndarray:
    """One draw with per-step mean mu[:, t] and covariance factor_t @ factor_t.T.

    Uses the factors directly (factor @ eps + mean), so no eigendecomposition
    or inversion is needed.  Consumes exactly one (d, T_f) standard-normal
    block from the generator.
    """
    mu = np.asarray(output.mu_hat if mu_hat is None else mu_hat, dtype=np.float64)
    d, t_f = mu.shape
    eps = rng.standard_normal((d, t_f))
    return np.einsum("tij,jt->it", output.factors, eps) + mu


# ---------------------------------------------------------------------------
# batched helpers for samplers (one leading axis over windows or members)


def apply_stack_batch(m_stacks: np.ndarray, e: np.ndarray) -> np.ndarray:
    """apply_stack over a leading batch axis: (N,T_f,d,d) x (N,d,T_f) -> (N,d,T_f)."""
    return np.einsum("ntij,njt->nit", m_stacks, e)


def whiten_batch(x0: np.ndarray, mu: np.ndarray, pow_neg_half: np.ndarray) -> np.ndarray:
    return apply_stack_batch(pow_neg_half, x0 - mu)


def unwhiten_batch(x_cw: np.ndarray, mu: np.ndarray, pow_half: np.ndarray) -> np.ndarray:
    return apply_stack_batch(pow_half, x_cw) + mu


@dataclass
class WindowPriors:
    """Estimator outputs (and cached powers) for a list of windows."""

    mus: np.ndarray           # (N, d, T_f)
    factors: np.ndarray       # (N, T_f, d, d)
    pow_half: np.ndarray      # (N, T_f, d, d)
    pow_neg_half: np.ndarray  # (N, T_f, d, d)
    jitter: float

    def __len__(self) -> int:
        return self.mus.shape[0]

    def output(self, i: int) -> JmceOutput:
        return JmceOutput(mu_hat=self.mus[i], factors=self.factors[i])

    def subset(self, idx) -> "WindowPriors":
        return WindowPriors(self.mus[idx], self.factors[idx], self.pow_half[idx],
                            self.pow_neg_half[idx], self.jitter)


def priors_from_outputs(mus: np.ndarray, factors: np.ndarray,
                        jitter: float = 1e-6) -> WindowPriors:
    """Build the prior cache (covariances plus signed powers) for many windows."""
    mus = np.asarray(mus, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    d = factors.shape[-1]
    sigmas = np.einsum("ntik,ntjk->ntij", factors, factors)
    if jitter:
        sigmas = sigmas + jitter * np.eye(d)
    sigmas = 0.5 * (sigmas + np.swapaxes(sigmas, -1, -2))
    pow_half = linalg.sym_power_stack(sigmas, 0.5)
    pow_neg_half = linalg.sym_power_stack(sigmas, -0.5)
    return WindowPriors(mus=mus, factors=factors, pow_half=pow_half,
                        pow_neg_half=pow_neg_half, jitter=float(jitter))


def identity_priors(n: int, d: int, t_f: int) -> WindowPriors:
    """Zero-mean, identity-covariance priors (the neutral element of the CW map)."""
    eye = np.tile(np.eye(d), (n, t_f, 1, 1))
    return WindowPriors(mus=np.zeros((n, d, t_f)), factors=eye.copy(),
                        pow_half=eye.copy(), pow_neg_half=eye.copy(), jitter=0.0)
