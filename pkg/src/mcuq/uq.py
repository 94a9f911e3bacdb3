"""Entrywise standard deviations, confidence intervals and diagnostics.

All variance formulas share one structure: with ``P_U = (U U^T)**2`` and
``P_V = (V V^T)**2`` (elementwise squares of the projectors) and a matrix of
per-entry noise variances ``W``,

    s^2 = (P_U @ W + W @ P_V) / p

The noise models differ only in how ``W`` is formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .estimator import DebiasedEstimate, MaskedObservations
from .matgrid import as_matrix, incoherence

log = logging.getLogger(__name__)

__all__ = [
    "NoiseModel",
    "VarianceField",
    "IntervalField",
    "normal_cdf",
    "normal_quantile",
    "oracle_variance",
    "gaussian_homogeneous_variance",
    "poisson_variance",
    "binary_variance",
    "rank1_closed_form",
    "empirical_plugin_variance",
    "empirical_residual_variance",
    "residual_variance_field",
    "intervals",
    "coverage_rate",
    "zscores",
    "ks_statistic",
    "entrywise_bound",
    "noise_scale_proxy",
    "fallback_halfwidth",
]

MODELS = ("gaussian", "poisson", "binary", "oracle", "empirical")


@dataclass(frozen=True)
class NoiseModel:
    """Noise model tag.

    ``kind`` is one of ``gaussian`` (homogeneous, needs ``sigma``),
    ``poisson``, ``binary``, ``oracle`` (heterogeneous, needs ``sigma_sq``)
    or ``empirical``.
    """

    kind: str
    sigma: Optional[float] = None
    sigma_sq: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ValueError(f"unknown noise model {self.kind!r}")
        if self.kind == "gaussian" and not (self.sigma is not None and self.sigma > 0):
            raise ValueError("homogeneous Gaussian noise needs sigma > 0")
        if self.kind == "oracle":
            if self.sigma_sq is None or np.any(np.asarray(self.sigma_sq) < 0):
                raise ValueError("oracle noise needs a nonnegative sigma_sq matrix")


@dataclass(frozen=True)
class VarianceField:
    """Per-entry standard deviations ``s`` (not variances)."""

    s: np.ndarray
    model: str
    p: float
    n_clamped: int = 0

    @property
    def var(self) -> np.ndarray:
        return self.s**2


@dataclass(frozen=True)
class IntervalField:
    lo: np.ndarray
    hi: np.ndarray
    level: float
    n_fallback: int = 0

    def __post_init__(self):
        if np.any(self.lo > self.hi):
            raise ValueError("interval with lo > hi")


def normal_cdf(x):
    return ndtr(x)


def normal_quantile(q):
    return ndtri(q)


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    return p


def _leverage_weights(U, V):
    U = as_matrix(U, "U")
    V = as_matrix(V, "V")
    if U.shape[1] != V.shape[1]:
        raise ValueError("U and V must have the same number of columns")
    return (U @ U.T) ** 2, (V @ V.T) ** 2


def _field(U, V, W, p, model, n_clamped=0) -> VarianceField:
    PU, PV = _leverage_weights(U, V)
    if W.shape != (PU.shape[0], PV.shape[0]):
        raise ValueError(f"variance matrix has shape {W.shape}, expected {(PU.shape[0], PV.shape[0])}")
    s2 = (PU @ W + W @ PV) / p
    return VarianceField(np.sqrt(np.clip(s2, 0.0, None)), model, p, n_clamped)


def oracle_variance(U, V, sigma_sq, p) -> VarianceField:
    """Entrywise standard deviations for independent heterogeneous noise.

    ``s_ij^2 = [sum_l sigma_lj^2 (U_i . U_l)^2 + sum_l sigma_il^2 (V_l . V_j)^2] / p``
    """
    p = _check_p(p)
    W = as_matrix(sigma_sq, "sigma_sq")
    if np.any(W < 0):
        raise ValueError("negative noise variance")
    return _field(U, V, W, p, "oracle")


def gaussian_homogeneous_variance(U, V, sigma, p) -> VarianceField:
    """``s_ij^2 = sigma^2 (||U_i||^2 + ||V_j||^2) / p``."""
    p = _check_p(p)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    U = as_matrix(U, "U")
    V = as_matrix(V, "V")
    ru = np.sum(U * U, axis=1)
    rv = np.sum(V * V, axis=1)
    s2 = sigma**2 * (ru[:, None] + rv[None, :]) / p
    return VarianceField(np.sqrt(s2), "gaussian", p)


def poisson_variance(M_star, U, V, p) -> VarianceField:
    """Oracle formula with ``sigma_ij^2 = M*_ij``."""
    p = _check_p(p)
    M = as_matrix(M_star, "M_star")
    if np.any(M < 0):
        raise ValueError("Poisson means must be nonnegative")
    return _field(U, V, M, p, "poisson")


def binary_variance(M_star, U, V, p) -> VarianceField:
    """Oracle formula with ``sigma_ij^2 = M*_ij (1 - M*_ij)``."""
    p = _check_p(p)
    M = as_matrix(M_star, "M_star")
    if np.any((M < 0) | (M > 1)):
        raise ValueError("Bernoulli means must lie in [0, 1]")
    return _field(U, V, M * (1.0 - M), p, "binary")


def rank1_closed_form(model: str, sigma1: float, u, v, p, noise_var: float | None = None) -> VarianceField:
    """Closed forms for a rank-one truth ``M* = sigma1 u v^T``.

    ``noise_var`` is the Gaussian noise variance and is only used by the
    ``gaussian`` row. The cubic terms use the signed sums ``sum(u**3)``,
    which equal ``||u||_3^3`` for the nonnegative vectors the Poisson and
    Binary models require.
    """
    p = _check_p(p)
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if abs(np.linalg.norm(u) - 1) > 1e-10 or abs(np.linalg.norm(v) - 1) > 1e-10:
        raise ValueError("u and v must be unit vectors")
    if not sigma1 > 0:
        raise ValueError("sigma1 must be positive")
    M = sigma1 * np.outer(u, v)
    if model == "gaussian":
        if noise_var is None or noise_var <= 0:
            raise ValueError("gaussian row needs noise_var > 0")
        s2 = noise_var * ((u**2)[:, None] + (v**2)[None, :]) / p
    elif model in ("poisson", "binary"):
        lin = u[:, None] * np.sum(u**3) + v[None, :] * np.sum(v**3)
        if model == "poisson":
            s2 = M * lin / p
        else:
            if np.any((M < 0) | (M > 1)):
                raise ValueError("Bernoulli means must lie in [0, 1]")
            s2 = M * (lin - M * np.sum(u**4) - M * np.sum(v**4)) / p
    else:
        raise ValueError(f"unknown model {model!r}")
    return VarianceField(np.sqrt(np.clip(s2, 0.0, None)), model, p)


def empirical_plugin_variance(est: DebiasedEstimate, model: str, p: float | None = None,
                              obs: MaskedObservations | None = None) -> VarianceField:
    """Plug the fitted ``(M^d, U^d, V^d)`` into a noise-model formula.

    ``M^d`` is clamped into the model's domain first (Poisson: ``>= 0``,
    Binary: ``[0, 1]``); the number of clamped entries is recorded. The
    Gaussian model estimates ``sigma^2`` as the mean squared residual on the
    observed entries and therefore needs ``obs``.
    """
    p = _check_p(est.p_used if p is None else p)
    U, V, Md = est.svd.U, est.svd.V, est.Md
    if model == "poisson":
        M = np.clip(Md, 0.0, None)
        clamped = int(np.count_nonzero(M != Md))
        W = M
    elif model == "binary":
        M = np.clip(Md, 0.0, 1.0)
        clamped = int(np.count_nonzero(M != Md))
        W = M * (1.0 - M)
    elif model == "gaussian":
        if obs is None:
            raise ValueError("gaussian plug-in needs the observations")
        res = obs.values - Md[obs.rows, obs.cols]
        sigma2 = float(res @ res) / obs.size
        ru = np.sum(U * U, axis=1)
        rv = np.sum(V * V, axis=1)
        s2 = sigma2 * (ru[:, None] + rv[None, :]) / p
        return VarianceField(np.sqrt(s2), "gaussian", p)
    else:
        raise ValueError(f"unknown model {model!r}")
    if clamped:
        log.info("clamped %d entries of M^d into the %s domain", clamped, model)
    return _field(U, V, W, p, model, clamped)


def _residual_sq(obs: MaskedObservations, est: DebiasedEstimate) -> np.ndarray:
    W = np.zeros(obs.shape)
    res = obs.values - est.Md[obs.rows, obs.cols]
    W[obs.rows, obs.cols] = res * res
    return W


def residual_variance_field(obs: MaskedObservations, est: DebiasedEstimate, p: float | None = None) -> VarianceField:
    """Residual-based estimator for every entry.

    Squared residuals on the observed entries, each weighted by ``1/p``, stand
    in for the unknown noise variances; the whole sum is divided by ``p``
    once more.
    """
    p = _check_p(obs.p if p is None else p)
    U, V = est.svd.U, est.svd.V
    W = _residual_sq(obs, est) / p
    return _field(U, V, W, p, "empirical")


def empirical_residual_variance(obs: MaskedObservations, est: DebiasedEstimate, i: int, j: int,
                                p: float | None = None) -> float:
    """Residual-based ``s_hat_ij^2`` for one entry; 0 if row i and column j are unobserved."""
    p = _check_p(obs.p if p is None else p)
    U, V = est.svd.U, est.svd.V
    res = obs.values - est.Md[obs.rows, obs.cols]
    in_col = obs.cols == j
    in_row = obs.rows == i
    if not (np.any(in_col) or np.any(in_row)):
        log.warning("row %d and column %d have no observations", i, j)
        return 0.0
    lu = obs.rows[in_col]
    lv = obs.cols[in_row]
    a = np.sum(res[in_col] ** 2 / p * (U[lu] @ U[i]) ** 2)
    b = np.sum(res[in_row] ** 2 / p * (V[lv] @ V[j]) ** 2)
    return float((a + b) / p)


def intervals(Md, s, level: float = 0.95, *, fallback: float | None = None,
              degeneracy_tol: float = 1e-8) -> IntervalField:
    """Symmetric Gaussian intervals ``Md +/- z s`` at the given level.

    When ``fallback`` is given, entries with ``s < degeneracy_tol * ||Md||_max``
    use ``fallback`` as their half-width instead.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    Md = np.asarray(Md, dtype=np.float64)
    s = s.s if isinstance(s, VarianceField) else np.asarray(s, dtype=np.float64)
    if s.shape != Md.shape:
        raise ValueError("Md and s shapes differ")
    z = float(normal_quantile((1.0 + level) / 2.0))
    half = z * s
    n_fb = 0
    if fallback is not None:
        thresh = degeneracy_tol * (np.max(np.abs(Md)) if Md.size else 0.0)
        degenerate = s < thresh
        n_fb = int(np.count_nonzero(degenerate))
        half = np.where(degenerate, fallback, half)
    return IntervalField(Md - half, Md + half, level, n_fb)


def _subset_mask(shape, subset) -> np.ndarray:
    if subset is None:
        return np.ones(shape, dtype=bool)
    if isinstance(subset, np.ndarray) and subset.dtype == bool:
        return subset
    rows, cols = subset
    mask = np.zeros(shape, dtype=bool)
    mask[np.asarray(rows), np.asarray(cols)] = True
    return mask


def coverage_rate(iv: IntervalField, truth, subset=None) -> float:
    """Fraction of entries in ``subset`` (mask or ``(rows, cols)``) whose truth is covered."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != iv.lo.shape:
        raise ValueError("truth and interval shapes differ")
    mask = _subset_mask(truth.shape, subset)
    k = int(np.count_nonzero(mask))
    if k == 0:
        raise ValueError("empty subset")
    hit = (iv.lo <= truth) & (truth <= iv.hi)
    return float(np.count_nonzero(hit & mask)) / k


def zscores(Md, truth, s, subset=None, degeneracy_tol: float = 1e-8) -> tuple[np.ndarray, int]:
    """Standardised errors ``(Md - truth) / s``.

    Returns the z values (row-major over the subset) and the number of
    entries skipped because ``s`` is degenerate, i.e. below
    ``degeneracy_tol * max|Md|`` (the same cut :func:`intervals` uses).
    """
    Md = np.asarray(Md, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    s = s.s if isinstance(s, VarianceField) else np.asarray(s, dtype=np.float64)
    mask = _subset_mask(Md.shape, subset)
    live = (s > 0) & (s >= degeneracy_tol * float(np.max(np.abs(Md), initial=0.0)))
    ok = mask & live
    excluded = int(np.count_nonzero(mask & ~live))
    return (Md[ok] - truth[ok]) / s[ok], excluded


def ks_statistic(z) -> float:
    """Two-sided one-sample Kolmogorov-Smirnov distance to the standard normal."""
    z = np.sort(np.asarray(z, dtype=np.float64).ravel())
    n = z.size
    if n == 0:
        raise ValueError("empty sample")
    cdf = normal_cdf(z)
    k = np.arange(1, n + 1)
    return float(max(np.max(k / n - cdf), np.max(cdf - (k - 1) / n)))


def entrywise_bound(est: DebiasedEstimate | tuple, L_hat: float, mu: float, r: int, kappa: float, p: float) -> float:
    """Conservative half-width ``kappa mu r L sqrt(log(n) / (m p))``, ``m <= n``.

    ``est`` may also be a plain ``(m, n)`` shape tuple.
    """
    shape = est if isinstance(est, tuple) else est.Md.shape
    m, n = min(shape), max(shape)
    return float(kappa * mu * r * L_hat * np.sqrt(np.log(n) / (m * p)))


def noise_scale_proxy(obs: MaskedObservations, est: DebiasedEstimate) -> float:
    """99th percentile of absolute residuals on the observed entries."""
    res = obs.values - est.Md[obs.rows, obs.cols]
    return float(np.percentile(np.abs(res), 99))


def fallback_halfwidth(obs: MaskedObservations, est: DebiasedEstimate) -> float:
    """:func:`entrywise_bound` with kappa, mu from the fitted SVD and the L proxy."""
    sig = est.svd.sigma
    kappa = float(sig[0] / sig[-1]) if sig[-1] > 0 else float("inf")
    mu = incoherence(est.svd.U, est.svd.V, est.rank)
    return entrywise_bound(est, noise_scale_proxy(obs, est), mu, est.rank, kappa, obs.p)
