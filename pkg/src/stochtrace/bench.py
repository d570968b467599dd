"""Benchmark harness: RMS-error sweeps, a fixed rotation sweep, and MC checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial

import numpy as np
from joblib import Parallel, delayed

from .errors import EstimationError, InvalidInputError, RankDeficientError
from .estimators import (
    build_krylov_factors,
    girard_hutchinson,
    leave_one_out_full,
    loo_full_from_factors,
    projected_gh,
    xtrace_full,
    xtrace_full_naive,
    xtrace_naive,
)
from .kernels import sample_gaussian, sample_haar_orthogonal
from .operators import (
    MatFreeOperator,
    SpectrumSpec,
    exact_trace,
    make_diagonal_operator,
    make_identity_operator,
    make_spectrum,
)

log = logging.getLogger(__name__)

ESTIMATOR_NAMES = ("gh", "projected-gh", "xtrace", "xtrace-full", "xtrace-full-resampled")

CSV_HEADER = "spectrum,N,m,matvecs,estimator,k,trials,rms_rel_err,mean_estimate,std_error"


@dataclass(frozen=True)
class BenchConfig:
    """One spectrum's benchmark run over a sweep of test-vector counts."""

    spectrum: SpectrumSpec
    m_values: tuple[int, ...]
    trials: int = 1000
    resample_k: int = 25
    estimators: tuple[str, ...] = ESTIMATOR_NAMES
    base_seed: int = 0
    identity_override: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise InvalidInputError(f"trials must be positive, got {self.trials}")
        if not self.m_values or any(m < 2 for m in self.m_values):
            raise InvalidInputError(f"every m must be >= 2, got {self.m_values}")
        if self.resample_k < 1:
            raise InvalidInputError(f"resample_k must be positive, got {self.resample_k}")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise InvalidInputError(f"unknown estimators {sorted(unknown)}")


@dataclass(frozen=True)
class BenchRow:
    """One (spectrum, m, estimator) cell of the benchmark table.

    ``trials`` counts the trials that produced a value; ``failures`` the ones
    that raised. ``matvecs`` is the nominal per-trial budget (m for the plain
    quadratic-form estimators, 2m for the deflated ones).
    """

    spectrum: str
    dim: int
    m: int
    matvecs: int
    estimator: str
    k: int
    trials: int
    rms_rel_err: float
    mean_estimate: float
    std_error: float
    failures: int = 0


def trial_seed(base_seed: int, m: int, index: int) -> np.random.SeedSequence:
    """Stable per-trial seed, so any single trial is reproducible in isolation."""
    return np.random.SeedSequence([base_seed, m, index])


def _operator_for(eigenvalues: np.ndarray, identity_override: bool) -> MatFreeOperator:
    if identity_override:
        return make_identity_operator(len(eigenvalues))
    return make_diagonal_operator(eigenvalues)


def _run_trial(
    eigenvalues: np.ndarray,
    m: int,
    estimators: tuple[str, ...],
    resample_k: int,
    base_seed: int,
    index: int,
    identity_override: bool,
) -> dict[str, float | None]:
    """Run every requested estimator on one shared Gaussian test block."""
    rng = np.random.default_rng(trial_seed(base_seed, m, index))
    omega = sample_gaussian(rng, len(eigenvalues), m)
    out: dict[str, float | None] = {}
    for name in estimators:
        if name == "xtrace-full" and "xtrace-full-resampled" in estimators:
            continue  # recovered from the resampled run below
        # fresh operator per estimator: matvec counters stay private
        op = _operator_for(eigenvalues, identity_override)
        try:
            if name == "gh":
                out[name] = girard_hutchinson(op, omega).estimate
            elif name == "projected-gh":
                out[name] = projected_gh(op, omega).estimate
            elif name == "xtrace":
                out[name] = xtrace_naive(op, omega).estimate
            elif name == "xtrace-full":
                out[name] = xtrace_full(op, omega=omega, k=1, rng=rng).estimate
            else:  # xtrace-full-resampled
                rot_rng = np.random.default_rng(
                    np.random.SeedSequence([base_seed, m, index, 1])
                )
                rep = xtrace_full(op, omega=omega, k=resample_k, rng=rot_rng)
                out[name] = rep.estimate
                if "xtrace-full" in estimators:
                    # the first rotation is the identity, so the k=1 value is
                    # the mean of the first m samples (or the whole fallback)
                    out["xtrace-full"] = (
                        rep.estimate if rep.fallback else float(rep.samples[:m].mean())
                    )
        except EstimationError as exc:
            log.warning("trial %d (%s, m=%d) failed: %s", index, name, m, exc)
            out[name] = None
            if name == "xtrace-full-resampled" and "xtrace-full" in estimators:
                out["xtrace-full"] = None
    return out


def collect_estimates(cfg: BenchConfig) -> dict[tuple[int, str], np.ndarray]:
    """Raw per-trial estimates keyed by (m, estimator). Failed trials are dropped."""
    eigenvalues = make_spectrum(cfg.spectrum)
    out: dict[tuple[int, str], np.ndarray] = {}
    for m in cfg.m_values:
        fn = partial(
            _run_trial,
            eigenvalues,
            m,
            tuple(cfg.estimators),
            cfg.resample_k,
            cfg.base_seed,
            identity_override=cfg.identity_override,
        )
        if cfg.n_jobs == 1:
            results = [fn(index=t) for t in range(cfg.trials)]
        else:
            results = Parallel(n_jobs=cfg.n_jobs)(
                delayed(fn)(index=t) for t in range(cfg.trials)
            )
        for name in cfg.estimators:
            out[(m, name)] = np.array(
                [r[name] for r in results if r[name] is not None], dtype=float
            )
    return out


def rms_relative_error(estimates: np.ndarray, truth: float) -> tuple[float, float]:
    """RMS of (estimate - truth) over trials, relative to |truth|.

    Also returns the standard error of the RMS itself (delta method on the
    mean squared error), used by the resampling comparisons.
    """
    sq = (estimates - truth) ** 2
    mse = sq.mean()
    rms = np.sqrt(mse) / abs(truth)
    if sq.size < 2 or mse == 0.0:
        return float(rms), 0.0
    se_mse = sq.std(ddof=1) / np.sqrt(sq.size)
    return float(rms), float(rms * se_mse / (2.0 * mse))


def run_benchmark(cfg: BenchConfig) -> list[BenchRow]:
    """One row per (estimator, m): RMS relative error over shared-block trials.

    Within a trial every estimator sees the same Gaussian test block; rows
    are sorted by (spectrum, estimator, m) so output order is deterministic.
    """
    eigenvalues = make_spectrum(cfg.spectrum)
    truth = float(len(eigenvalues)) if cfg.identity_override else exact_trace(eigenvalues)
    estimates = collect_estimates(cfg)
    rows = []
    for m in cfg.m_values:
        for name in cfg.estimators:
            vals = estimates[(m, name)]
            failures = cfg.trials - vals.size
            if vals.size == 0:
                rows.append(
                    BenchRow(cfg.spectrum.family, cfg.spectrum.dim, m,
                             _nominal_matvecs(name, m), name, _row_k(name, cfg), 0,
                             float("nan"), float("nan"), float("nan"), failures)
                )
                continue
            rms, _ = rms_relative_error(vals, truth)
            mean_est = float(vals.mean())
            std_err = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
            if std_err > 0.0 and abs(mean_est - truth) > 5.0 * std_err:
                log.warning(
                    "mean of %s at m=%d is %.2f standard errors from the true trace",
                    name, m, abs(mean_est - truth) / std_err,
                )
            rows.append(
                BenchRow(cfg.spectrum.family, cfg.spectrum.dim, m,
                         _nominal_matvecs(name, m), name, _row_k(name, cfg),
                         int(vals.size), rms, mean_est, std_err, failures)
            )
    rows.sort(key=lambda r: (r.spectrum, r.estimator, r.m))
    return rows


def _nominal_matvecs(name: str, m: int) -> int:
    return m if name in ("gh", "projected-gh") else 2 * m


def _row_k(name: str, cfg: BenchConfig) -> int:
    return cfg.resample_k if name == "xtrace-full-resampled" else 1


def write_csv(rows, path) -> None:
    """Write benchmark rows as CSV: pinned header, full precision, LF endings."""
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.spectrum},{r.dim},{r.m},{r.matvecs},{r.estimator},{r.k},"
            f"{r.trials},{r.rms_rel_err:.17e},{r.mean_estimate:.17e},{r.std_error:.17e}"
        )
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def rotation_sweep(op: MatFreeOperator, omega, thetas) -> list[tuple[float, float, float]]:
    """Evaluate both one-shot estimators on the test pair rotated by each angle.

    The test block must have exactly two columns; no randomness is consumed,
    so the sweep is reproducible byte for byte.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[1] != 2:
        raise InvalidInputError(f"rotation sweep needs an N x 2 block, got {omega.shape}")
    if len(thetas) == 0:
        raise InvalidInputError("theta grid is empty")
    out = []
    for theta in thetas:
        c, s = np.cos(theta), np.sin(theta)
        block = omega @ np.array([[c, -s], [s, c]])
        out.append(
            (
                float(theta),
                xtrace_naive(op, block).estimate,
                xtrace_full_naive(op, block).estimate,
            )
        )
    return out


@dataclass(frozen=True)
class ConditionalCheckReport:
    """Monte-Carlo means (with standard errors) conditioned on a fixed basis."""

    samples: int
    gh_mc_mean: float
    gh_mc_se: float
    projected_value: float
    xfull_mc_mean: float
    xfull_mc_se: float
    loo_haar_mean: float
    loo_haar_se: float

    @property
    def combined_se(self) -> float:
        """Standard error of the difference between the two basis-fixed means."""
        return float(np.hypot(self.xfull_mc_se, self.loo_haar_se))


def _sample_upper_bartlett(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    """Upper-triangular factor with chi diagonal and Gaussian strict-upper entries.

    Together with independent Haar factors this reproduces the distribution
    of a Gaussian block conditioned on its column span.
    """
    r = np.triu(rng.standard_normal((m, m)), 1)
    r[np.diag_indices(m)] = np.sqrt(rng.chisquare(n - np.arange(m)))
    return r


def _householder_completion(u: np.ndarray) -> np.ndarray:
    """Orthogonal matrix whose last column is the given unit vector."""
    m = u.shape[0]
    e = np.zeros(m)
    e[-1] = 1.0
    v = u - e
    norm = np.linalg.norm(v)
    if norm < 1e-14:
        return np.eye(m)
    v /= norm
    return np.eye(m) - 2.0 * np.outer(v, v)


def conditional_mc_check(
    op: MatFreeOperator,
    q,
    samples: int,
    *,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> ConditionalCheckReport:
    """Monte-Carlo check of the two conditional-mean identities on a fixed span.

    Draws test blocks ``q @ U @ R`` with Haar U and a chi/Gaussian triangular
    R, and reports (a) the MC mean of the plain quadratic-form estimator next
    to its exact conditional value from :func:`projected_gh`, and (b) the MC
    mean of the Krylov-deflated mean estimator next to the mean of the
    closed-form leave-one-out value over uniform held-out directions.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    q = np.asarray(q, dtype=float)
    n, m = q.shape
    if not np.allclose(q.T @ q, np.eye(m), atol=1e-10):
        raise InvalidInputError("basis block must have orthonormal columns")
    projected = projected_gh(op, q).estimate
    try:
        factors = build_krylov_factors(op, q)
    except RankDeficientError:
        factors = None  # operator collapses the Krylov block; use the direct path
    gh_vals = np.empty(samples)
    xfull_vals = np.empty(samples)
    loo_vals = np.empty(samples)
    for i in range(samples):
        u_rot = sample_haar_orthogonal(rng, m)
        r = _sample_upper_bartlett(rng, n, m)
        block = q @ (u_rot @ r)
        gh_vals[i] = girard_hutchinson(op, block).estimate
        xfull_vals[i] = xtrace_full_naive(op, block).estimate
        u = rng.standard_normal(m)
        u /= np.linalg.norm(u)
        if factors is not None:
            loo_vals[i] = loo_full_from_factors(factors, u)
        else:
            loo_vals[i] = leave_one_out_full(op, q @ _householder_completion(u))
    return ConditionalCheckReport(
        samples=samples,
        gh_mc_mean=float(gh_vals.mean()),
        gh_mc_se=float(gh_vals.std(ddof=1) / np.sqrt(samples)),
        projected_value=projected,
        xfull_mc_mean=float(xfull_vals.mean()),
        xfull_mc_se=float(xfull_vals.std(ddof=1) / np.sqrt(samples)),
        loo_haar_mean=float(loo_vals.mean()),
        loo_haar_se=float(loo_vals.std(ddof=1) / np.sqrt(samples)),
    )


@dataclass(frozen=True)
class CorrelationReport:
    """Empirical correlations of per-column estimates; diagnostic only.

    ``within`` pools pairs of estimates sharing one rotation, ``across``
    pairs from different rotations of the same test block. ``applicable`` is
    False when the estimates carry no variance (or the factored path was
    unavailable), in which case the correlations are meaningless.
    """

    applicable: bool
    within: float
    across: float
    ci_halfwidth: float
    trials: int
    k: int
    m: int


def resampling_correlation(
    op: MatFreeOperator,
    m: int,
    k: int,
    trials: int,
    *,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> CorrelationReport:
    """Measure how per-column estimates co-vary within and across rotations.

    No assertion is attached to the sign or size of the result anywhere in
    the test suite; this exists to make the correlation observable.
    """
    if k < 2:
        raise InvalidInputError(f"need at least 2 rotations to compare, got k={k}")
    if rng is None:
        rng = np.random.default_rng(seed)
    blocks = np.empty((trials, k, m))
    for t in range(trials):
        rep = xtrace_full(op, m=m, k=k, rng=rng)
        if rep.fallback or rep.samples.size != k * m:
            return CorrelationReport(False, float("nan"), float("nan"), float("nan"),
                                     trials, k, m)
        blocks[t] = rep.samples.reshape(k, m)
    mean = blocks.mean()
    var = blocks.var()
    if var <= 1e-24 * max(1.0, mean**2):
        return CorrelationReport(False, float("nan"), float("nan"), float("nan"),
                                 trials, k, m)
    # pooled E[x y] over pairs, computed from row/plane sums
    rot_sums = blocks.sum(axis=2)
    within_pairs = (rot_sums**2 - (blocks**2).sum(axis=2)).sum()
    n_within = trials * k * m * (m - 1)
    trial_sums = rot_sums.sum(axis=1)
    across_pairs = (trial_sums**2 - (rot_sums**2).sum(axis=1)).sum()
    n_across = trials * k * (k - 1) * m * m
    within = (within_pairs / n_within - mean**2) / var
    across = (across_pairs / n_across - mean**2) / var
    ci = 1.96 / np.sqrt(max(trials - 3, 1))  # Fisher-z width, trials as effective n
    return CorrelationReport(True, float(within), float(across), float(ci), trials, k, m)
