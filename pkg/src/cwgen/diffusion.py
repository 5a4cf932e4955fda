"""Score-based diffusion with a variance-preserving linear-beta schedule.

The forward process has the closed-form marginal x_tau = alpha * x0 + sigma *
eps with alpha = exp(-(b0 tau + (b1-b0) tau^2 / 2)/2) and sigma^2 = 1 -
alpha^2.  The score network trains on  E || s(x_tau, c, tau) + eps/sigma ||^2
with tau uniform on (tau_floor, 1], and sampling runs an Euler-Maruyama
discretization of the reverse SDE from tau=1 down to the early stop tau_min.

The conditionally whitened variant trains the identical loop on whitened
futures and unwhitens the integrated state at the end; with a zero-mean,
identity-covariance prior (and zero jitter) it reduces bit-exactly to the raw
variant under shared seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractViolation, NumericError
from .whitening import WindowPriors, unwhiten_batch, whiten_batch

TAU_FLOOR = 1e-3
SIGMA_GUARD = 1e-6


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule beta(tau) = beta0 + tau (beta1 - beta0) on [0, 1]."""

    beta0: float = 0.1
    beta1: float = 20.0
    n_steps: int = 50
    tau_min: float = 1e-3

    def __post_init__(self):
        if not (0 < self.beta0 <= self.beta1):
            raise ContractViolation(f"need 0 < beta0 <= beta1, got {self.beta0}, {self.beta1}")
        if self.n_steps < 2:
            raise ContractViolation(f"n_steps must be >= 2, got {self.n_steps}")
        if not (0.0 < self.tau_min <= 0.1):
            raise ContractViolation(f"tau_min must lie in (0, 0.1], got {self.tau_min}")
        a1, _ = self.alpha_sigma(1.0)
        if a1 > 1e-2:
            raise ContractViolation(
                f"schedule is not close to the standard normal at tau=1: alpha_1={a1:.3e}")

    def beta(self, tau):
        return self.beta0 + np.asarray(tau, dtype=np.float64) * (self.beta1 - self.beta0)

    def alpha_sigma(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        integral = self.beta0 * tau + 0.5 * (self.beta1 - self.beta0) * tau ** 2
        alpha = np.exp(-0.5 * integral)
        sigma = np.sqrt(np.maximum(1.0 - alpha * alpha, 0.0))
        return alpha, sigma

    def grid(self) -> np.ndarray:
        """Uniform tau grid from 1 down to tau_min, n_steps + 1 points."""
        return np.linspace(1.0, self.tau_min, self.n_steps + 1)


def alpha_sigma(schedule: DiffusionSchedule, tau):
    """Closed-form (alpha, sigma) of the forward marginal at tau in [0, 1]."""
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr < 0.0) or np.any(tau_arr > 1.0):
        raise ContractViolation(f"tau must lie in [0, 1], got {tau}")
    return schedule.alpha_sigma(tau_arr)


def forward_sample(x0, schedule: DiffusionSchedule, tau, eps):
    """Draw from the forward marginal: alpha * x0 + sigma * eps."""
    a, s = alpha_sigma(schedule, tau)
    return a * np.asarray(x0, dtype=np.float64) + s * np.asarray(eps, dtype=np.float64)


def sample_training_tau(rng: np.random.Generator, n: int, schedule: DiffusionSchedule,
                        floor: float = TAU_FLOOR) -> np.ndarray:
    """tau uniform on (floor, 1]; resamples any draw with sigma below the guard."""
    tau = 1.0 - rng.random(n) * (1.0 - floor)
    for _ in range(100):
        _, sigma = schedule.alpha_sigma(tau)
        bad = sigma < SIGMA_GUARD
        if not bad.any():
            return tau
        tau[bad] = 1.0 - rng.random(int(bad.sum())) * (1.0 - floor)
    raise NumericError("could not draw tau with sigma above the guard")


def score_loss(net: nn.ConditionalStepNet, schedule: DiffusionSchedule,
               x0: np.ndarray, c: np.ndarray, tau: np.ndarray,
               eps: np.ndarray) -> ad.Tensor:
    """Batch score-matching loss  mean_b || s(x_tau, c, tau) + eps/sigma ||^2."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if x0.shape != eps.shape or tau.shape != (x0.shape[0],):
        raise ContractViolation(
            f"shape mismatch: x0 {x0.shape}, eps {eps.shape}, tau {tau.shape}")
    alpha, sigma = schedule.alpha_sigma(tau)
    if np.any(sigma < SIGMA_GUARD):
        raise ContractViolation(f"sigma below guard {SIGMA_GUARD}; resample tau upstream")
    x_tau = alpha[:, None, None] * x0 + sigma[:, None, None] * eps
    s = net.forward(x_tau, c, tau)
    target = eps / sigma[:, None, None]
    return ad.tmean(ad.sqnorm(ad.add(s, ad.Tensor(target)), axis=(1, 2)))


# ---------------------------------------------------------------------------
# training


@dataclass
class GenTrainConfig:
    """Hyperparameters shared by the score and vector-field training loops."""

    epochs: int = 12
    batch_size: int = 64
    lr: float = 1e-3
    enc_hidden: int = 48
    hidden: int = 64
    seed: int = 0
    val_draws: int = 2  # noise draws per validation window (fixed across epochs)


def train_score(train_hist: np.ndarray, train_fut: np.ndarray,
                val_hist: np.ndarray, val_fut: np.ndarray,
                schedule: DiffusionSchedule, config: GenTrainConfig
                ) -> tuple[nn.ConditionalStepNet, nn.FitResult]:
    """Fit a score network on (history, future) arrays.

    The futures may be raw or whitened; the loop is identical either way,
    which is what makes the identity-prior reduction exact.  Validation uses
    a fixed set of (tau, eps) draws so epoch scores are comparable.
    """
    n, d, t_f = train_fut.shape
    t_h = train_hist.shape[2]
    model = nn.ConditionalStepNet(d, t_h, t_f, rng=np.random.default_rng(config.seed),
                                  enc_hidden=config.enc_hidden, hidden=config.hidden)
    data_rng = np.random.default_rng(config.seed + 1)
    val_rng = np.random.default_rng(config.seed + 2)
    n_val = val_fut.shape[0]
    v_tau = sample_training_tau(val_rng, n_val * config.val_draws, schedule)
    v_eps = val_rng.standard_normal((n_val * config.val_draws, d, t_f))
    v_hist = np.repeat(val_hist, config.val_draws, axis=0)
    v_fut = np.repeat(val_fut, config.val_draws, axis=0)

    def make_loss(idx):
        tau = sample_training_tau(data_rng, len(idx), schedule)
        eps = data_rng.standard_normal((len(idx), d, t_f))
        return score_loss(model, schedule, train_fut[idx], train_hist[idx], tau, eps)

    def val_loss():
        with ad.no_grad():
            loss = score_loss(model, schedule, v_fut, v_hist, v_tau, v_eps)
        return float(loss.data)

    fit_cfg = nn.FitConfig(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr)
    result = nn.fit(model.net, n, make_loss, val_loss, fit_cfg,
                    np.random.default_rng(config.seed + 3))
    return model, result


def raw_diff_train(train_hist, train_fut, val_hist, val_fut,
                   schedule: DiffusionSchedule, config: GenTrainConfig):
    """Plain conditional diffusion on the observed futures."""
    return train_score(train_hist, train_fut, val_hist, val_fut, schedule, config)


def cw_diff_train(train_hist, train_fut, val_hist, val_fut,
                  train_priors: WindowPriors, val_priors: WindowPriors,
                  schedule: DiffusionSchedule, config: GenTrainConfig):
    """Diffusion on conditionally whitened futures (estimator frozen)."""
    x_cw = whiten_batch(train_fut, train_priors.mus, train_priors.pow_neg_half)
    v_cw = whiten_batch(val_fut, val_priors.mus, val_priors.pow_neg_half)
    return train_score(train_hist, x_cw, val_hist, v_cw, schedule, config)


# ---------------------------------------------------------------------------
# sampling


def _em_step(x, s, beta, dt, noise):
    return x + dt * (0.5 * beta * x + beta * s) + np.sqrt(beta * dt) * noise


def reverse_sample(net: nn.ConditionalStepNet, c: np.ndarray,
                   schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Integrate the reverse SDE for one window; deterministic given the rng."""
    c = np.asarray(c, dtype=np.float64)
    d, t_f = net.d, net.t_f
    with ad.no_grad():
        h = net.encode(c[None])
    x = rng.standard_normal((d, t_f))
    grid = schedule.grid()
    for k in range(schedule.n_steps):
        tau = grid[k]
        dt = grid[k] - grid[k + 1]
        beta = float(schedule.beta(tau))
        s = net.forward_np(x[None], h, c[None], np.array([tau]))[0]
        x = _em_step(x, s, beta, dt, rng.standard_normal((d, t_f)))
        if not np.all(np.isfinite(x)):
            raise NumericError(f"reverse sampler diverged at step {k} (tau={tau:.4f})")
    return x


def member_noise_block(seed: int, n_steps: int, d: int, t_f: int) -> np.ndarray:
    """All noise one ensemble member consumes: terminal plus one block per step."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_steps + 1, d, t_f))


def reverse_sample_ensemble(net: nn.ConditionalStepNet, c: np.ndarray,
                            schedule: DiffusionSchedule, m: int,
                            base_seed: int) -> np.ndarray:
    """m reverse-SDE integrations for one window, member i seeded base_seed + i.

    Members run batched through the network but consume exactly the noise
    stream a per-member :func:`reverse_sample` call would, so the ensemble is
    reproducible member by member.
    """
    c = np.asarray(c, dtype=np.float64)
    d, t_f = net.d, net.t_f
    noises = np.stack([member_noise_block(base_seed + i, schedule.n_steps, d, t_f)
                       for i in range(m)])
    with ad.no_grad():
        h1 = net.encode(c[None])
    h = ad.Tensor(np.repeat(h1.data, m, axis=0))
    c_rep = np.repeat(c[None], m, axis=0)
    x = noises[:, 0].copy()
    grid = schedule.grid()
    for k in range(schedule.n_steps):
        tau = grid[k]
        dt = grid[k] - grid[k + 1]
        beta = float(schedule.beta(tau))
        s = net.forward_np(x, h, c_rep, np.full(m, tau))
        x = _em_step(x, s, beta, dt, noises[:, k + 1])
        if not np.all(np.isfinite(x)):
            raise NumericError(f"reverse sampler diverged at step {k} (tau={tau:.4f})")
    return x


def raw_diff_sample(net, c, schedule, m, base_seed) -> np.ndarray:
    """Raw-variant ensemble for one window, shape (m, d, T_f)."""
    return reverse_sample_ensemble(net, c, schedule, m, base_seed)


def cw_diff_sample(net, c, schedule, m, base_seed, mu_hat: np.ndarray,
                   pow_half: np.ndarray) -> np.ndarray:
    """CW-variant ensemble: integrate in whitened space, then invert the CW map."""
    z = reverse_sample_ensemble(net, c, schedule, m, base_seed)
    mu = np.broadcast_to(mu_hat, z.shape)
    ph = np.broadcast_to(pow_half, (m,) + pow_half.shape)
    return unwhiten_batch(z, mu, ph)
