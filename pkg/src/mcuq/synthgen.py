"""Synthetic low-rank instances and Monte-Carlo coverage experiments."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .estimator import DivergenceError, FitConfig, MaskedObservations, fit
from .matgrid import SvdTriple, truncated_svd
from .uq import (
    binary_variance,
    coverage_rate,
    empirical_plugin_variance,
    fallback_halfwidth,
    gaussian_homogeneous_variance,
    intervals,
    ks_statistic,
    poisson_variance,
    residual_variance_field,
    zscores,
)

log = logging.getLogger(__name__)

__all__ = [
    "SimConfig",
    "SimInstance",
    "CoverageReport",
    "rng_stream",
    "gen_instance",
    "oracle_field",
    "run_coverage_experiment",
    "run_distribution_check",
    "HIST_EDGES",
]

_MASK64 = (1 << 64) - 1
NOISES = ("poisson", "binary", "gaussian")
SOURCES = ("oracle", "plugin", "residual")
BINARY_MAX_MEAN = 0.95
HIST_EDGES = np.linspace(-4.0, 4.0, 33)


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, stream_id)``.

    Distinct ``stream_id`` values give independent streams, so trials can be
    generated in any order or in parallel.
    """
    key = np.array([int(seed) & _MASK64, int(stream_id) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SimConfig:
    """Parameters of a synthetic experiment.

    ``mean_target=None`` is only valid for binary noise and rescales the truth
    so that its largest entry is 0.95.
    """

    m: int = 300
    n: int = 300
    r: int = 3
    p: float = 0.6
    mean_target: Optional[float] = 20.0
    noise: str = "poisson"
    sigma: Optional[float] = None
    trials: int = 30
    seed: int = 0
    variance_source: str = "oracle"
    level: float = 0.95
    lam: Optional[float] = None
    max_iters: int = 2000
    grad_tol: float = 1e-7

    def __post_init__(self):
        def bad(name, why):
            raise ValueError(f"invalid config field {name!r}: {why}")

        if self.m < 1 or self.n < 1:
            bad("m" if self.m < 1 else "n", "must be a positive count")
        if not 1 <= self.r <= min(self.m, self.n):
            bad("r", f"must lie in [1, {min(self.m, self.n)}]")
        if not 0.0 < self.p <= 1.0:
            bad("p", "must lie in (0, 1]")
        if self.noise not in NOISES:
            bad("noise", f"must be one of {NOISES}")
        if self.mean_target is None:
            if self.noise != "binary":
                bad("mean_target", "required unless noise is binary")
        elif not self.mean_target > 0:
            bad("mean_target", "must be positive")
        if self.noise == "gaussian" and not (self.sigma is not None and self.sigma > 0):
            bad("sigma", "gaussian noise needs sigma > 0")
        if self.trials < 1:
            bad("trials", "must be >= 1")
        if self.variance_source not in SOURCES:
            bad("variance_source", f"must be one of {SOURCES}")
        if not 0.0 < self.level < 1.0:
            bad("level", "must lie in (0, 1)")
        if self.max_iters < 1:
            bad("max_iters", "must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"invalid config field {sorted(unknown)[0]!r}: unknown field")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def fit_config(self) -> FitConfig:
        return FitConfig(r=self.r, lam=self.lam, max_iters=self.max_iters,
                         grad_tol=self.grad_tol, seed=self.seed)


@dataclass(frozen=True)
class SimInstance:
    M_star: np.ndarray
    svd_star: SvdTriple
    obs: MaskedObservations
    seed: int
    trial: int
    O: np.ndarray
    mask: np.ndarray


def _gamma2(rng: np.random.Generator, shape) -> np.ndarray:
    # Gamma(2, 1) as a sum of two unit exponentials; 1 - u lies in (0, 1].
    u = rng.random((2,) + tuple(shape))
    return -np.log1p(-u[0]) - np.log1p(-u[1])


def gen_instance(cfg: SimConfig, trial: int = 0) -> SimInstance:
    """Draw ground truth, observation mask and noisy observations for one trial."""
    rng = rng_stream(cfg.seed, trial)
    U = _gamma2(rng, (cfg.m, cfg.r))
    V = _gamma2(rng, (cfg.n, cfg.r))
    base = U @ V.T
    if cfg.mean_target is None:
        M = base * (BINARY_MAX_MEAN / base.max())
    else:
        M = base * (cfg.mean_target / base.mean())
    assert np.all(M >= 0)
    if cfg.noise == "binary" and M.max() > 1.0:
        raise ValueError(
            f"binary noise needs M* <= 1 but max is {M.max():.3g}; "
            "use a smaller mean_target or mean_target=None"
        )
    mask = rng.random((cfg.m, cfg.n)) < cfg.p
    if cfg.noise == "poisson":
        O = rng.poisson(M).astype(np.float64)
    elif cfg.noise == "binary":
        O = (rng.random(M.shape) < M).astype(np.float64)
    else:
        O = M + cfg.sigma * rng.standard_normal(M.shape)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("no entries observed; increase p or the matrix size")
    obs = MaskedObservations.from_entries(cfg.m, cfg.n, rows, cols, O[rows, cols], cfg.p)
    return SimInstance(M, truncated_svd(M, cfg.r), obs, cfg.seed, trial, O, mask)


def oracle_field(cfg: SimConfig, inst: SimInstance):
    U, V = inst.svd_star.U, inst.svd_star.V
    if cfg.noise == "poisson":
        return poisson_variance(inst.M_star, U, V, cfg.p)
    if cfg.noise == "binary":
        return binary_variance(inst.M_star, U, V, cfg.p)
    return gaussian_homogeneous_variance(U, V, cfg.sigma, cfg.p)


def _variance(cfg: SimConfig, inst: SimInstance, est):
    if cfg.variance_source == "oracle":
        return oracle_field(cfg, inst)
    if cfg.variance_source == "plugin":
        return empirical_plugin_variance(est, cfg.noise, cfg.p, inst.obs)
    return residual_variance_field(inst.obs, est, cfg.p)


@dataclass
class CoverageReport:
    """Aggregated outcome of a Monte-Carlo run.

    ``coverage`` holds one rate per completed trial (in trial order);
    ``z`` holds the standardised error of the tracked entry per trial.
    Runtime is kept out of :meth:`to_dict` so reports stay byte-stable.
    """

    config: dict
    entry: tuple
    trials_run: list = field(default_factory=list)
    coverage: list = field(default_factory=list)
    p_hat: list = field(default_factory=list)
    z: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    excluded: int = 0
    n_fallback: int = 0
    runtime: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.coverage)) if self.coverage else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.coverage, ddof=1)) if len(self.coverage) > 1 else 0.0

    @property
    def std_defined(self) -> bool:
        return len(self.coverage) > 1

    @property
    def ks(self) -> float:
        return ks_statistic(self.z) if self.z else float("nan")

    def histogram(self, edges=HIST_EDGES) -> np.ndarray:
        # Values outside the edges land in the outermost bins.
        z = np.clip(np.asarray(self.z, dtype=np.float64), edges[0], edges[-1])
        return np.histogram(z, bins=edges)[0]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "entry": list(self.entry),
            "trials_completed": len(self.trials_run),
            "trials_skipped": len(self.skipped),
            "skipped": self.skipped,
            "mean_coverage": self.mean,
            "std_coverage": self.std,
            "std_defined": self.std_defined,
            "coverage": self.coverage,
            "observed_fraction": self.p_hat,
            "ks": self.ks,
            "z_excluded": self.excluded,
            "fallback_entries": self.n_fallback,
        }


def _threads(threads: Optional[int]) -> int:
    env = os.environ.get("MCUQ_THREADS")
    if env:
        return max(1, int(env))
    return max(1, threads or os.cpu_count() or 1)


def _trial(cfg: SimConfig, trial: int, entry, full: bool):
    inst = gen_instance(cfg, trial)
    try:
        est = fit(inst.obs, cfg.fit_config())
    except (DivergenceError, np.linalg.LinAlgError) as exc:
        return {"trial": trial, "error": str(exc)}
    var = _variance(cfg, inst, est)
    i, j = entry
    out = {"trial": trial, "p_hat": inst.obs.size / (cfg.m * cfg.n)}
    z, excl = zscores(est.Md, inst.M_star, var, ([i], [j]))
    out["z"] = float(z[0]) if z.size else None
    out["excluded"] = excl
    if full:
        iv = intervals(est.Md, var, cfg.level, fallback=fallback_halfwidth(inst.obs, est))
        out["coverage"] = coverage_rate(iv, inst.M_star)
        out["n_fallback"] = iv.n_fallback
    return out


def _run(cfg: SimConfig, entry, full: bool, threads: Optional[int]) -> CoverageReport:
    i, j = entry
    if not (0 <= i < cfg.m and 0 <= j < cfg.n):
        raise ValueError(f"entry {entry} outside the {cfg.m}x{cfg.n} grid")
    t0 = time.perf_counter()
    nthreads = min(_threads(threads), cfg.trials)
    work = lambda t: _trial(cfg, t, entry, full)  # noqa: E731
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            results = list(pool.map(work, range(cfg.trials)))
    else:
        results = [work(t) for t in range(cfg.trials)]
    rep = CoverageReport(config=cfg.to_dict(), entry=(int(i), int(j)))
    for res in results:  # trial-index order
        if "error" in res:
            log.warning("trial %d skipped: %s", res["trial"], res["error"])
            rep.skipped.append(res)
            continue
        rep.trials_run.append(res["trial"])
        rep.p_hat.append(res["p_hat"])
        rep.excluded += res["excluded"]
        if res["z"] is not None:
            rep.z.append(res["z"])
        if full:
            rep.coverage.append(res["coverage"])
            rep.n_fallback += res["n_fallback"]
    rep.runtime = time.perf_counter() - t0
    return rep


def run_coverage_experiment(cfg: SimConfig, entry=(0, 0), threads: Optional[int] = None) -> CoverageReport:
    """Per-trial coverage of the ``level`` intervals centred at ``M^d``.

    Failed fits void their trial and are listed in ``skipped``. The z-score
    of ``entry`` is tracked along the way.
    """
    return _run(cfg, entry, True, threads)


def run_distribution_check(cfg: SimConfig, entry=(0, 0), threads: Optional[int] = None) -> CoverageReport:
    """Collect ``(M^d_ij - M*_ij) / s_ij`` for a single entry across trials."""
    return _run(cfg, entry, False, threads)
