"""Trace estimators built on leave-one-out low-rank deflation.

The one-basis-per-column estimators (``xtrace_naive``, ``xtrace_full_naive``)
factor the shared test-vector products once and recover every leave-one-out
basis in coordinates, so a full run costs 2m matvecs. ``xtrace_full`` goes
further: it caches a factorization of the degree-two Krylov block and turns
each held-out direction into a closed-form O(m^2) read, which makes averaging
over extra orthogonal resamplings free in matvecs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BasisSaturationError,
    DegeneratePairError,
    DegenerateResidualError,
    InvalidInputError,
    RankDeficientError,
)
from .kernels import (
    IDENTITY_FIRST_HAAR,
    QR_TRUST_FACTOR,
    RANK_RTOL,
    RotationStrategy,
    economy_qr,
    orth_basis,
    ql_orthonormalize_pair,
    sample_gaussian,
    solve_transposed_upper,
)
from .operators import MatFreeOperator


@dataclass(frozen=True, eq=False)
class KrylovFactors:
    """Cached factorization of ``[Q0, A Q0]`` for an orthonormalized test block.

    ``q`` is the N x 2m orthonormal basis of the Krylov block, ``r`` the
    2m x 2m block upper-triangular factor whose leading m x m block is the
    identity, and ``h = q.T @ A @ q``. Every per-direction estimate derived
    from these arrays costs no further matvecs.
    """

    q: np.ndarray
    r: np.ndarray
    h: np.ndarray
    dim: int
    num_vectors: int


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """A trace estimate with its per-sample values and cost accounting.

    ``estimate`` is the mean of ``samples``. ``fallback`` is set when the
    factored path detected a rank-deficient Krylov block and the run was
    completed by the one-basis-per-column path instead.
    """

    estimate: float
    samples: np.ndarray
    matvecs_used: int
    seed: int = 0
    fallback: bool = False


def _as_test_block(op: MatFreeOperator, omega, min_cols: int = 1) -> np.ndarray:
    x = np.asarray(omega, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != op.dim:
        raise InvalidInputError(
            f"test block must be {op.dim} x m, got shape {np.shape(omega)}"
        )
    if x.shape[1] < min_cols:
        raise InvalidInputError(f"need at least {min_cols} test vectors, got {x.shape[1]}")
    return x


def _right_solve_upper(b: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve ``X @ R = B`` for upper-triangular R."""
    return solve_transposed_upper(r, b.T).T


def _leave_out_indices(m: int, stride: int = 0) -> np.ndarray:
    """Row i lists the columns kept when entry i is left out.

    With ``stride`` given, entries i and i + stride are both dropped from a
    range of 2 * stride (the paired raw/mapped column layout).
    """
    base = np.arange(2 * stride if stride else m)
    if stride:
        return np.array([np.delete(base, (i, i + stride)) for i in range(m)])
    return np.array([np.delete(base, i) for i in range(m)])


def _leave_out_bases(parent: np.ndarray, blocks: np.ndarray, scale: float) -> np.ndarray | None:
    """Orthonormal bases for a (count, n, p) stack of leave-out slices.

    Returns the batched QR stack when every slice is certainly full rank:
    either every QR diagonal clears the roundoff band, or the parent block
    all slices are column subsets of is itself certified full column rank
    (a property subsets inherit). Returns None when some slice needs a
    truncating rank decision instead.
    """
    q, r = np.linalg.qr(blocks)
    diags = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    tol = RANK_RTOL * scale
    if (diags > QR_TRUST_FACTOR * tol).all():
        return q
    if (diags > tol).all():
        svals = np.linalg.svd(parent, compute_uv=False)
        if svals.min() > tol:
            return q
    return None


def girard_hutchinson(op: MatFreeOperator, omega, seed: int = 0) -> EstimateReport:
    """Mean of the quadratic forms w^T A w over the test-block columns."""
    omega = _as_test_block(op, omega)
    y = op.apply(omega)
    samples = np.einsum("ij,ij->j", omega, y)
    return EstimateReport(float(samples.mean()), samples, omega.shape[1], seed)


def projected_gh(op: MatFreeOperator, omega, seed: int = 0) -> EstimateReport:
    """Quadratic-form estimate on the orthonormalized block, scaled by N/m.

    Orthonormalizing first replaces the random column scales with their
    exact average, so this equals the conditional mean of
    :func:`girard_hutchinson` given the span of the test vectors.
    """
    omega = _as_test_block(op, omega)
    n, m = omega.shape
    q = economy_qr(omega).q
    val = (n / m) * float(np.einsum("ij,ij->", q, op.apply(q)))
    return EstimateReport(val, np.array([val]), m, seed)


def _residual_term(op: MatFreeOperator, w: np.ndarray, q: np.ndarray) -> float:
    """Normalized quadratic form of the held-out vector on the deflated space.

    The projected vector is rescaled to squared norm N - rank(q), which makes
    the term exact (not just unbiased) whenever the operator acts as a scalar
    on the orthogonal complement of the basis. Costs one matvec.
    """
    n = op.dim
    rank = q.shape[1]
    if rank >= n:
        return 0.0  # complement is empty; the coefficient N - rank vanishes
    mu = w - q @ (q.T @ w) if rank else w
    norm = np.linalg.norm(mu)
    if norm <= RANK_RTOL * np.linalg.norm(w):
        raise DegenerateResidualError("held-out vector lies inside the deflation basis")
    nu = np.sqrt(n - rank) * (mu / norm)
    return float(nu @ op.apply(nu))


def leave_one_out(op: MatFreeOperator, omega) -> float:
    """Deflate with a basis for ``A @ omega[:, :-1]``; hold out the last column."""
    omega = _as_test_block(op, omega, min_cols=2)
    y = op.apply(omega)
    q = orth_basis(y[:, :-1])
    tr_part = float(np.einsum("ij,ij->", q, op.apply(q))) if q.shape[1] else 0.0
    return tr_part + _residual_term(op, omega[:, -1], q)


def leave_one_out_full(op: MatFreeOperator, omega) -> float:
    """Deflate with a basis for ``[A @ omega[:, :-1], omega[:, :-1]]``.

    Keeping the unmapped columns in the basis makes the value depend on the
    leading columns only through their span, which plain
    :func:`leave_one_out` does not.
    """
    omega = _as_test_block(op, omega, min_cols=2)
    n, m = omega.shape
    if 2 * (m - 1) >= n:
        raise BasisSaturationError(
            f"deflation basis of {2 * (m - 1)} columns saturates dimension {n}"
        )
    y = op.apply(omega)
    # raw columns first: dependencies between a column and its image then
    # resolve with O(1) coefficients, keeping roundoff below the rank tolerance
    q = orth_basis(np.hstack([omega[:, :-1], y[:, :-1]]))
    tr_part = float(np.einsum("ij,ij->", q, op.apply(q))) if q.shape[1] else 0.0
    return tr_part + _residual_term(op, omega[:, -1], q)


def xtrace_naive(op: MatFreeOperator, omega, seed: int = 0) -> EstimateReport:
    """Mean of the leave-one-out estimates over every held-out column.

    One orthonormal basis for ``A @ omega`` is built and mapped through the
    operator once; each leave-one-out sub-basis is then recovered in its
    coordinates, so the whole run costs 2m matvecs no matter how many
    columns are left out.
    """
    omega = _as_test_block(op, omega, min_cols=2)
    n, m = omega.shape
    y = op.apply(omega)
    qy = orth_basis(y)
    aqy = op.apply(qy)
    h = qy.T @ aqy
    cy = qy.T @ y
    c_omega = qy.T @ omega
    scale = np.linalg.norm(y, axis=0).max()
    w_norm2 = np.einsum("ni,ni->i", omega, omega)
    bases = None
    if m - 1 <= qy.shape[1]:  # leave-one-out slices must be tall to batch
        stack = cy[:, _leave_out_indices(m)].transpose(1, 0, 2)
        bases = _leave_out_bases(cy, stack, scale)
    if bases is not None:
        tr_parts = np.einsum("irc,irc->i", bases, h @ bases)
        btw = np.einsum("irc,ri->ic", bases, c_omega)
        proj = np.einsum("irc,ic->ri", bases, btw)  # projected coordinates, per column
        mu = omega - qy @ proj
        norm2 = np.einsum("ni,ni->i", mu, mu)
        if (norm2 <= RANK_RTOL**2 * w_norm2).any():
            raise DegenerateResidualError("held-out vector lies inside the deflation basis")
        # A mu = A w - A (P w); both factors are cached products
        mu_a_mu = np.einsum("ni,ni->i", mu, y - aqy @ proj)
        samples = tr_parts + (n - (m - 1)) * mu_a_mu / norm2
    else:
        samples = np.empty(m)
        for i in range(m):
            b = orth_basis(np.delete(cy, i, axis=1), scale=scale)
            tr_part = float(np.einsum("ij,ij->", b, h @ b))
            proj = b @ (b.T @ c_omega[:, i])
            mu = omega[:, i] - qy @ proj
            norm2 = float(mu @ mu)
            if norm2 <= RANK_RTOL**2 * w_norm2[i]:
                raise DegenerateResidualError(
                    "held-out vector lies inside the deflation basis"
                )
            amu = y[:, i] - aqy @ proj
            samples[i] = tr_part + (n - b.shape[1]) * float(mu @ amu) / norm2
    return EstimateReport(float(samples.mean()), samples, m + qy.shape[1], seed)


def xtrace_full_naive(op: MatFreeOperator, omega, seed: int = 0) -> EstimateReport:
    """Mean over held-out columns of the Krylov-deflated leave-one-out estimate."""
    omega = _as_test_block(op, omega, min_cols=2)
    y = op.apply(omega)
    return _xtrace_full_naive_given_y(op, omega, y, seed=seed, matvecs_spent=omega.shape[1])


def _xtrace_full_naive_given_y(
    op: MatFreeOperator,
    omega: np.ndarray,
    y: np.ndarray,
    seed: int,
    matvecs_spent: int,
    fallback: bool = False,
) -> EstimateReport:
    """Shared-basis implementation; ``matvecs_spent`` counts the A @ omega already paid.

    The test block must have full column rank (Gaussian draws do, almost
    surely); the Krylov block ``[omega, y]`` may be rank deficient and is
    truncated to its span.
    """
    n, m = omega.shape
    if m < 2:
        raise InvalidInputError(f"need at least 2 test vectors, got {m}")
    if 2 * (m - 1) >= n:
        raise BasisSaturationError(
            f"deflation basis of {2 * (m - 1)} columns saturates dimension {n}"
        )
    f0 = economy_qr(omega)
    q0 = f0.q
    scale = max(np.linalg.norm(y, axis=0).max(), np.linalg.norm(omega, axis=0).max())
    resid = y - q0 @ (q0.T @ y)
    resid -= q0 @ (q0.T @ resid)  # second pass keeps the new block orthogonal to q0
    q1 = orth_basis(resid, scale=scale)
    q = np.hstack([q0, q1])
    # A q0 = (A omega) R0^{-1}, so only the new directions need fresh matvecs
    aq0 = _right_solve_upper(y, f0.r)
    aq = np.hstack([aq0, op.apply(q1)]) if q1.shape[1] else aq0
    h = q.T @ aq
    c_omega = q.T @ omega
    c_y = q.T @ y
    cscale = max(
        np.linalg.norm(c_y, axis=0).max(), np.linalg.norm(c_omega, axis=0).max()
    )
    w_norm2 = np.einsum("ri,ri->i", c_omega, c_omega)
    # raw columns before their images, so exact dependencies between a column
    # and its image drop cleanly at the rank tolerance
    c_all = np.hstack([c_omega, c_y])
    bases = None
    if 2 * m - 2 <= q.shape[1]:  # leave-one-out slices must be tall to batch
        stack = c_all[:, _leave_out_indices(m, stride=m)].transpose(1, 0, 2)
        bases = _leave_out_bases(c_all, stack, cscale)
    if bases is not None:
        tr_parts = np.einsum("irc,irc->i", bases, h @ bases)
        btw = np.einsum("irc,ri->ic", bases, c_omega)
        mu = c_omega.T - np.einsum("irc,ic->ir", bases, btw)
        norm2 = np.einsum("ir,ir->i", mu, mu)
        if (norm2 <= RANK_RTOL**2 * w_norm2).any():
            raise DegenerateResidualError("held-out vector lies inside the deflation basis")
        mu_h_mu = np.einsum("ir,ir->i", mu @ h, mu)
        samples = tr_parts + (n - (2 * m - 2)) * mu_h_mu / norm2
    else:
        samples = np.empty(m)
        for i in range(m):
            block = np.hstack(
                [np.delete(c_omega, i, axis=1), np.delete(c_y, i, axis=1)]
            )
            b = orth_basis(block, scale=cscale)
            tr_part = float(np.einsum("ij,ij->", b, h @ b))
            cw = c_omega[:, i]
            mu = cw - b @ (b.T @ cw)
            norm2 = float(mu @ mu)
            if norm2 <= RANK_RTOL**2 * w_norm2[i]:
                raise DegenerateResidualError(
                    "held-out vector lies inside the deflation basis"
                )
            samples[i] = tr_part + (n - b.shape[1]) * float(mu @ (h @ mu)) / norm2
    return EstimateReport(
        float(samples.mean()), samples, matvecs_spent + q1.shape[1], seed, fallback
    )


def build_krylov_factors(op: MatFreeOperator, omega) -> KrylovFactors:
    """Factor the degree-two Krylov block of a test block, spending 2m matvecs.

    Computes the QR factorization of ``[omega, A omega]`` and rescales both
    block columns by the inverse of the leading triangle, yielding the
    factorization of ``[Q0, A Q0]`` whose R has an identity leading block.
    ``h`` is completed with m further matvecs on the new basis directions.
    Raises :class:`RankDeficientError` when the Krylov block collapses
    (e.g. every test vector is mapped inside the block's own span).
    """
    omega = _as_test_block(op, omega, min_cols=1)
    y = op.apply(omega)
    return _krylov_from_blocks(op, omega, y)


def _krylov_from_blocks(op: MatFreeOperator, omega: np.ndarray, y: np.ndarray) -> KrylovFactors:
    n, m = omega.shape
    if 2 * m > n:
        raise InvalidInputError(f"need 2m <= N, got m={m}, N={n}")
    krylov = np.hstack([omega, y])
    f = economy_qr(krylov)
    # basis directions inside the roundoff band of an exact dependency make
    # the triangular solves unstable; send those to the truncating path too
    floor = QR_TRUST_FACTOR * RANK_RTOL * np.linalg.norm(krylov, axis=0).max()
    weakest = int(np.argmin(np.abs(np.diag(f.r))))
    if abs(f.r[weakest, weakest]) <= floor:
        raise RankDeficientError(
            f"column {weakest} of the Krylov block is within roundoff of a dependency",
            index=weakest,
        )
    r0 = f.r[:m, :m]
    r = np.zeros((2 * m, 2 * m))
    r[:m, :m] = np.eye(m)
    r[:, m:] = _right_solve_upper(f.r[:, m:], r0)
    aq0 = _right_solve_upper(y, r0)
    aq1 = op.apply(f.q[:, m:])
    h = f.q.T @ np.hstack([aq0, aq1])
    return KrylovFactors(q=f.q, r=r, h=h, dim=n, num_vectors=m)


def loo_full_from_factors(factors: KrylovFactors, u) -> float:
    """Closed-form Krylov-deflated leave-one-out value for one unit direction.

    ``u`` lives in the coordinates of the orthonormalized test block: the
    value equals running :func:`leave_one_out_full` on ``q0 @ [U_perp, u]``
    for any orthogonal completion ``U_perp`` of ``u``. Costs no matvecs.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    m = factors.num_vectors
    if u.shape[0] != m:
        raise InvalidInputError(f"direction must have length {m}, got {u.shape[0]}")
    if abs(np.linalg.norm(u) - 1.0) > 1e-8:
        raise InvalidInputError("direction must be a unit vector")
    rhs = np.zeros((2 * m, 2))
    rhs[:m, 0] = u
    rhs[m:, 1] = u
    s_tilde, _ = ql_orthonormalize_pair(solve_transposed_upper(factors.r, rhs))
    h = factors.h
    hs = h @ s_tilde
    d1 = float(s_tilde[:, 0] @ hs[:, 0])
    d2 = float(s_tilde[:, 1] @ hs[:, 1])
    return float(np.trace(h)) - d2 + (factors.dim - 2 * m + 1) * d1


def _loo_full_values(factors: KrylovFactors, directions: np.ndarray) -> np.ndarray:
    """Vectorized twin of :func:`loo_full_from_factors` for unit columns."""
    m = factors.num_vectors
    d = np.asarray(directions, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    c = d.shape[1]
    rhs = np.zeros((2 * m, 2 * c))
    rhs[:m, :c] = d
    rhs[m:, c:] = d
    s = solve_transposed_upper(factors.r, rhs)
    norms = np.linalg.norm(s, axis=0)
    pair_scale = np.sqrt(norms[:c] ** 2 + norms[c:] ** 2)
    if (norms[c:] <= RANK_RTOL * pair_scale).any():
        raise DegeneratePairError("second deflation direction is numerically zero")
    s /= norms
    s1, s2 = s[:, :c], s[:, c:]
    s1 -= s2 * np.einsum("ij,ij->j", s2, s1)
    n1 = np.linalg.norm(s1, axis=0)
    if (n1 <= RANK_RTOL).any():
        raise DegeneratePairError("deflation directions are numerically parallel")
    s1 /= n1
    d1 = np.einsum("ij,ij->j", s1, factors.h @ s1)
    d2 = np.einsum("ij,ij->j", s2, factors.h @ s2)
    return np.trace(factors.h) - d2 + (factors.dim - 2 * m + 1) * d1


def xtrace_full(
    op: MatFreeOperator,
    m: int | None = None,
    k: int = 1,
    strategy: str | RotationStrategy = IDENTITY_FIRST_HAAR,
    *,
    omega=None,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> EstimateReport:
    """Krylov-deflated trace estimate averaged over orthogonal resamplings.

    Draws an N x m Gaussian test block (or uses ``omega``), factors its
    degree-two Krylov block once, then averages the closed-form leave-one-out
    value over every column of every rotation the strategy emits (k draws;
    the identity-first strategy makes the first draw the identity). The
    matvec cost is 2m regardless of k.

    When the Krylov block is rank deficient (the operator maps the test
    block inside the block's own span, e.g. a multiple of the identity),
    the run is completed by the one-basis-per-column path on the same test
    block and the report's ``fallback`` flag is set.
    """
    if k < 1:
        raise InvalidInputError(f"resampling count must be positive, got {k}")
    if rng is None:
        rng = np.random.default_rng(seed)
    if omega is None:
        if m is None:
            raise InvalidInputError("either m or omega must be given")
        if m < 2:
            raise InvalidInputError(f"need at least 2 test vectors, got {m}")
        omega = sample_gaussian(rng, op.dim, m)
    else:
        omega = _as_test_block(op, omega, min_cols=2)
        m = omega.shape[1]
    y = op.apply(omega)
    try:
        factors = _krylov_from_blocks(op, omega, y)
    except RankDeficientError:
        return _xtrace_full_naive_given_y(
            op, omega, y, seed=seed, matvecs_spent=m, fallback=True
        )
    strat = RotationStrategy(strategy) if isinstance(strategy, str) else strategy
    draws = strat.draw(rng, m, k)
    if draws.ndim == 2:  # unit-vector strategy: one direction per draw
        directions = draws.T
    else:
        directions = draws.transpose(1, 0, 2).reshape(m, k * m)
    samples = _loo_full_values(factors, directions)
    return EstimateReport(float(samples.mean()), samples, 2 * m, seed)


def check_last_column_dependence(op: MatFreeOperator, omega, u1, u2, rtol: float = 1e-10) -> bool:
    """True iff both leave-one-out estimators agree on ``omega @ u1`` vs ``omega @ u2``.

    For orthogonal rotations sharing their final column the values must
    match; rotations with different final columns generically disagree.
    """
    omega = _as_test_block(op, omega, min_cols=2)

    def close(a: float, b: float) -> bool:
        return abs(a - b) <= rtol * max(abs(a), abs(b), 1.0)

    return close(
        leave_one_out_full(op, omega @ u1), leave_one_out_full(op, omega @ u2)
    ) and close(leave_one_out(op, omega @ u1), leave_one_out(op, omega @ u2))
