"""Shifted cosine variance-preserving noise schedule.

    log SNR(t) = -2 log tan(pi t / 2) + shift

All quantities are derived from the log-SNR ``lam``:
``alpha^2 = sigmoid(lam)`` and ``sigma^2 = sigmoid(-lam)``. Transition and
posterior coefficients are written in terms of ``expm1`` of log-SNR
differences so that they stay accurate when ``s`` and ``t`` are close.

Functions accept python floats or numpy arrays and broadcast elementwise.
Everything here is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, OrderingError

T_MIN = 1e-5
T_MAX = 1.0 - 1e-5


@dataclass(frozen=True)
class KernelCoeffs:
    alpha_ts: float | np.ndarray
    var_ts: float | np.ndarray
    post_coef_z: float | np.ndarray
    post_coef_x: float | np.ndarray
    post_var: float | np.ndarray


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))  # never overflows
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class Schedule:
    shift: float = 0.0
    t_min: float = T_MIN
    t_max: float = T_MAX

    def __post_init__(self):
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise ContractError(f"need 0 < t_min < t_max < 1, got {self.t_min}, {self.t_max}")

    def clamp(self, t):
        t = np.clip(np.asarray(t, dtype=np.float64), self.t_min, self.t_max)
        return t[()] if t.ndim == 0 else t

    def log_snr(self, t):
        t = self.clamp(t)
        return -2.0 * np.log(np.tan(np.pi * t / 2.0)) + self.shift

    def snr(self, t):
        return np.exp(self.log_snr(t))

    def alpha_sigma(self, t):
        """Return ``(alpha_t, sigma_t)``."""
        lam = self.log_snr(t)
        return np.sqrt(_sigmoid(lam)), np.sqrt(_sigmoid(-lam))

    def _check_order(self, s, t):
        s, t = self.clamp(s), self.clamp(t)
        if np.any(s > t):
            raise OrderingError(f"expected s <= t, got s={s}, t={t}")
        return s, t

    def transition(self, s, t):
        """Coefficients of q(z_t | z_s): ``(alpha_{t|s}, sigma^2_{t|s})``."""
        s, t = self._check_order(s, t)
        a_s, _ = self.alpha_sigma(s)
        a_t, sig_t = self.alpha_sigma(t)
        # sigma^2_{t|s} = sigma_t^2 (1 - exp(lam_t - lam_s))
        frac = -np.expm1(self.log_snr(t) - self.log_snr(s))
        return a_t / a_s, sig_t**2 * frac

    def posterior(self, s, t) -> KernelCoeffs:
        """Coefficients of q(z_s | z_t, x) = N(coef_z z_t + coef_x Psi, post_var)."""
        s, t = self._check_order(s, t)
        a_s, sig_s = self.alpha_sigma(s)
        a_t, sig_t = self.alpha_sigma(t)
        dlam = self.log_snr(t) - self.log_snr(s)
        frac = -np.expm1(dlam)  # sigma^2_{t|s} / sigma_t^2
        return KernelCoeffs(
            alpha_ts=a_t / a_s,
            var_ts=sig_t**2 * frac,
            post_coef_z=(a_s / a_t) * np.exp(dlam),
            post_coef_x=a_s * frac,
            post_var=sig_s**2 * frac,
        )

    def snr_prime(self, t):
        """d SNR / dt = SNR(t) * (-2 pi / sin(pi t))."""
        t = self.clamp(t)
        return self.snr(t) * (-2.0 * np.pi / np.sin(np.pi * t))

    def time_grid(self, n: int) -> np.ndarray:
        """``n + 1`` uniform times from ``t_min`` to ``t_max``."""
        if int(n) < 1:
            raise ContractError(f"time grid needs N >= 1, got {n}")
        return np.linspace(self.t_min, self.t_max, int(n) + 1)
