"""Observation model and the de-biased gradient-descent estimator.

The estimator works on the factorised objective

    f(X, Y) = 1/(2p) ||P_Omega(X Y^T - O)||_F^2 + lam/(2p) (||X||_F^2 + ||Y||_F^2)

starting from a spectral initialisation, and finishes with the de-biasing
transform ``X (I + lam/p (X^T X)^-1)^(1/2)`` (likewise for ``Y``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.sparse as sp

from .matgrid import SvdTriple, as_matrix, truncated_svd

log = logging.getLogger(__name__)

__all__ = [
    "MaskedObservations",
    "FactorPair",
    "FitConfig",
    "DebiasedEstimate",
    "FitResult",
    "DivergenceError",
    "SingularGramError",
    "estimate_p",
    "spectral_init",
    "objective",
    "gradient",
    "default_lambda",
    "gd_fit",
    "debias",
    "fit",
]


class DivergenceError(RuntimeError):
    """Gradient descent blew up; ``iteration`` is where it was detected."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"objective diverged at iteration {iteration} (f={value:.6g})")
        self.iteration = iteration
        self.value = value


class SingularGramError(np.linalg.LinAlgError):
    def __init__(self, factor: str, cond: float):
        super().__init__(f"Gram matrix of factor {factor} is singular (cond={cond:.3g})")
        self.factor = factor


@dataclass(frozen=True)
class MaskedObservations:
    """Observed entries ``P_Omega(O)`` of an ``m x n`` matrix.

    Entries are kept sorted in row-major order. ``p`` is the sampling rate;
    when it was not supplied it is estimated as ``|Omega| / (m n)`` and
    ``p_estimated`` is set.
    """

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    p: float
    p_estimated: bool = False

    @classmethod
    def from_entries(cls, m, n, rows, cols, values, p=None) -> "MaskedObservations":
        m, n = int(m), int(n)
        if m <= 0 or n <= 0:
            raise ValueError("matrix dimensions must be positive")
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("rows, cols and values must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= m or cols.min() < 0 or cols.max() >= n):
            raise ValueError("entry index out of range")
        if not np.all(np.isfinite(values)):
            raise ValueError("observed values must be finite")
        flat = rows * n + cols
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        if flat.size > 1 and np.any(flat[1:] == flat[:-1]):
            raise ValueError("duplicate (i, j) entries")
        rows, cols, values = rows[order], cols[order], values[order]
        estimated = p is None
        if estimated:
            if rows.size == 0:
                raise ValueError("cannot estimate p from an empty observation set")
            p = min(max(rows.size / (m * n), 1.0 / (m * n)), 1.0)
        p = float(p)
        if not 0.0 < p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {p}")
        return cls(m, n, rows, cols, values, p, estimated)

    @classmethod
    def from_dense(cls, O, mask=None, p=None) -> "MaskedObservations":
        O = as_matrix(O, "O")
        if mask is None:
            mask = np.ones(O.shape, dtype=bool)
        rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
        return cls.from_entries(O.shape[0], O.shape[1], rows, cols, O[rows, cols], p)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.n)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def with_p(self, p: float) -> "MaskedObservations":
        return MaskedObservations.from_entries(self.m, self.n, self.rows, self.cols, self.values, p)

    def mask(self) -> np.ndarray:
        out = np.zeros((self.m, self.n), dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def dense(self) -> np.ndarray:
        """``P_Omega(O)`` with zeros off the observation set."""
        out = np.zeros((self.m, self.n))
        out[self.rows, self.cols] = self.values
        return out

    def sparse(self, data=None) -> sp.csr_matrix:
        data = self.values if data is None else data
        # Entries are already in row-major order, so indptr/indices are canonical.
        indptr = np.zeros(self.m + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rows, minlength=self.m), out=indptr[1:])
        return sp.csr_matrix((np.asarray(data, dtype=np.float64), self.cols, indptr), shape=self.shape)


@dataclass(frozen=True)
class FactorPair:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[1] != self.Y.shape[1]:
            raise ValueError("X and Y must be 2-D with the same number of columns")

    @property
    def rank(self) -> int:
        return self.X.shape[1]

    def product(self) -> np.ndarray:
        return self.X @ self.Y.T


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit`.

    ``lam=None`` selects the data-driven default (:func:`default_lambda`);
    ``eta="auto"`` selects ``0.5 / sigma_1(P_Omega(O)/p)`` with backtracking.
    ``seed`` is recorded for provenance only; the algorithm is deterministic.
    """

    r: int
    lam: Union[float, None] = None
    eta: Union[float, str] = "auto"
    max_iters: int = 2000
    grad_tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("rank must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.eta != "auto" and not (isinstance(self.eta, (int, float)) and self.eta > 0):
            raise ValueError("eta must be positive or 'auto'")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.grad_tol < 0:
            raise ValueError("grad_tol must be nonnegative")


@dataclass(frozen=True)
class FitResult:
    """Output of :func:`gd_fit` with its run log."""

    factors: FactorPair
    lam: float
    eta: float
    iters: int
    grad_norm: float
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class DebiasedEstimate:
    Xd: np.ndarray
    Yd: np.ndarray
    Md: np.ndarray
    svd: SvdTriple
    iters_used: int
    final_grad_norm: float
    config: FitConfig
    p_used: float
    lam_used: float = 0.0
    eta_used: float = 0.0

    @property
    def rank(self) -> int:
        return self.Xd.shape[1]


def estimate_p(obs: MaskedObservations) -> float:
    """``|Omega| / (m n)`` clamped to ``[1/(m n), 1]``."""
    if obs.size == 0:
        raise ValueError("empty observation set")
    mn = obs.m * obs.n
    return min(max(obs.size / mn, 1.0 / mn), 1.0)


def _check_rank(obs: MaskedObservations, r: int) -> None:
    if not 1 <= r <= min(obs.m, obs.n):
        raise ValueError(f"rank r={r} outside [1, {min(obs.m, obs.n)}]")


def _spectral(obs: MaskedObservations, r: int) -> tuple[FactorPair, float]:
    _check_rank(obs, r)
    svd = truncated_svd(obs.dense() / obs.p, r)
    root = np.sqrt(svd.sigma)
    return FactorPair(svd.U * root, svd.V * root), float(svd.sigma[0])


def spectral_init(obs: MaskedObservations, r: int) -> FactorPair:
    """``X0 = U sqrt(S)``, ``Y0 = V sqrt(S)`` from the rank-r SVD of ``P_Omega(O)/p``."""
    return _spectral(obs, r)[0]


# At or above this observed fraction a dense masked residual beats gathering.
DENSE_FRACTION = 0.05


class _Problem:
    """Objective and gradient evaluated on the observed entries only.

    The residual is either a vector over the observed entries (sparse data)
    or a dense ``m x n`` matrix that is zero off ``Omega``.
    """

    def __init__(self, obs: MaskedObservations, lam: float, dense: bool | None = None):
        self.obs = obs
        self.lam = float(lam)
        self.p = obs.p
        if dense is None:
            dense = obs.size >= DENSE_FRACTION * obs.m * obs.n
        self.dense = dense
        if dense:
            self._mask = obs.mask().astype(np.float64)
            self._O = obs.dense()
        else:
            self._S = obs.sparse()

    def residual(self, X, Y) -> np.ndarray:
        if self.dense:
            return self._mask * (X @ Y.T - self._O)
        o = self.obs
        return np.einsum("ij,ij->i", np.take(X, o.rows, 0), np.take(Y, o.cols, 0)) - o.values

    def value(self, X, Y, res) -> float:
        reg = self.lam * (np.vdot(X, X) + np.vdot(Y, Y))
        return float((np.vdot(res, res) + reg) / (2.0 * self.p))

    def grad(self, X, Y, res) -> tuple[np.ndarray, np.ndarray]:
        if self.dense:
            R = res
        else:
            R = self._S
            R.data = res
        gX = (R @ Y + self.lam * X) / self.p
        gY = (R.T @ X + self.lam * Y) / self.p
        return gX, gY

    def observed_residuals(self, res) -> np.ndarray:
        return res[self.obs.rows, self.obs.cols] if self.dense else res


def objective(F: FactorPair, obs: MaskedObservations, lam: float) -> float:
    prob = _Problem(obs, lam)
    return prob.value(F.X, F.Y, prob.residual(F.X, F.Y))


def gradient(F: FactorPair, obs: MaskedObservations, lam: float) -> FactorPair:
    prob = _Problem(obs, lam)
    return FactorPair(*prob.grad(F.X, F.Y, prob.residual(F.X, F.Y)))


def default_lambda(obs: MaskedObservations, init: FactorPair) -> float:
    """``0.1 * sigma_hat * log(n) * sqrt(n p)`` with ``n = max(m, n)``.

    ``sigma_hat`` is the standard deviation of the spectral-initialisation
    residuals on the observed entries.
    """
    prob = _Problem(obs, 0.0)
    res = prob.observed_residuals(prob.residual(init.X, init.Y))
    sigma_hat = float(np.std(res)) if res.size else 0.0
    n = max(obs.m, obs.n)
    return 0.1 * sigma_hat * np.log(n) * np.sqrt(n * obs.p)


def _gd(obs, cfg: FitConfig, init: FactorPair, lam: float, eta: float, backtrack: bool) -> FitResult:
    prob = _Problem(obs, lam)
    X, Y = init.X.copy(), init.Y.copy()
    res = prob.residual(X, Y)
    f = f0 = prob.value(X, Y, res)
    gX, gY = prob.grad(X, Y, res)
    gnorm = g0 = float(np.sqrt(np.vdot(gX, gX) + np.vdot(gY, gY)))
    history = [f0]
    stop = cfg.grad_tol * (g0 + 1.0)
    it = 0
    while it < cfg.max_iters and gnorm > stop:
        for _ in range(31 if backtrack else 1):
            Xn, Yn = X - eta * gX, Y - eta * gY
            res_n = prob.residual(Xn, Yn)
            fn = prob.value(Xn, Yn, res_n)
            if not backtrack or fn <= f:
                break
            eta *= 0.5
        else:
            log.debug("backtracking exhausted at iteration %d; stopping", it)
            break
        it += 1
        if not np.isfinite(fn) or fn > 10.0 * max(f0, np.finfo(float).tiny):
            raise DivergenceError(it, fn)
        X, Y, res, f = Xn, Yn, res_n, fn
        gX, gY = prob.grad(X, Y, res)
        gnorm = float(np.sqrt(np.vdot(gX, gX) + np.vdot(gY, gY)))
        history.append(f)
    return FitResult(FactorPair(X, Y), lam, eta, it, gnorm, history)


def gd_fit(obs: MaskedObservations, cfg: FitConfig, init: FactorPair | None = None) -> FitResult:
    """Run gradient descent from the spectral initialisation.

    With ``eta="auto"`` the step is halved (up to 30 times) whenever a step
    would increase the objective, so accepted iterates are monotone. A
    numeric ``eta`` runs plain fixed-step descent. Either way a
    :class:`DivergenceError` is raised if the objective exceeds ten times its
    initial value.
    """
    _check_rank(obs, cfg.r)
    if init is None:
        init, sigma1 = _spectral(obs, cfg.r)
    else:
        sigma1 = float(truncated_svd(obs.dense() / obs.p, 1).sigma[0])
    lam = default_lambda(obs, init) if cfg.lam is None else float(cfg.lam)
    if cfg.eta == "auto":
        eta, backtrack = (0.5 / sigma1 if sigma1 > 0 else 1.0), True
    else:
        eta, backtrack = float(cfg.eta), False
    return _gd(obs, cfg, init, lam, eta, backtrack)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, Q = np.linalg.eigh((S + S.T) / 2.0)
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


def _debias_factor(F: np.ndarray, scale: float, name: str) -> np.ndarray:
    if scale == 0.0:
        return F.copy()
    G = F.T @ F
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond >= 1e12:
        raise SingularGramError(name, cond)
    r = G.shape[0]
    return F @ _psd_sqrt(np.eye(r) + scale * np.linalg.inv(G))


def debias(F: FactorPair, lam: float, p: float, *, config: FitConfig | None = None,
           iters: int = 0, grad_norm: float = 0.0, eta: float = 0.0) -> DebiasedEstimate:
    """Undo the shrinkage introduced by the ridge penalty and assemble the estimate."""
    scale = float(lam) / float(p)
    Xd = _debias_factor(F.X, scale, "X")
    Yd = _debias_factor(F.Y, scale, "Y")
    Md = Xd @ Yd.T
    r = F.rank
    return DebiasedEstimate(
        Xd=Xd,
        Yd=Yd,
        Md=Md,
        svd=truncated_svd(Md, r),
        iters_used=iters,
        final_grad_norm=grad_norm,
        config=config if config is not None else FitConfig(r=r, lam=lam),
        p_used=float(p),
        lam_used=float(lam),
        eta_used=float(eta),
    )


def fit(obs: MaskedObservations, cfg: FitConfig) -> DebiasedEstimate:
    """Spectral initialisation, gradient descent, then de-biasing."""
    res = gd_fit(obs, cfg)
    return debias(res.factors, res.lam, obs.p, config=cfg, iters=res.iters,
                  grad_norm=res.grad_norm, eta=res.eta)
