"""Dense linear-algebra and random-sampling primitives for the estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import (
    DegeneratePairError,
    InvalidInputError,
    RankDeficientError,
    SingularFactorError,
)

# One rank tolerance everywhere, relative to the largest column norm.
RANK_RTOL = 1e-12

# QR diagonals this close to the rank tolerance are inside the roundoff band
# that exact dependencies can smear into; rank decisions then defer to
# singular values instead of trusting the diagonal.
QR_TRUST_FACTOR = 1e4

IDENTITY_FIRST_HAAR = "identity-first-haar"
IID_UNIT_VECTORS = "iid-unit-vectors"
KAC_WALK = "kac-walk"
ROTATION_KINDS = (IDENTITY_FIRST_HAAR, IID_UNIT_VECTORS, KAC_WALK)


@dataclass(frozen=True, eq=False)
class QRFactors:
    """Economy QR factors with a positive-diagonal R."""

    q: np.ndarray
    r: np.ndarray


def economy_qr(block) -> QRFactors:
    """Householder QR of an N x p block, with the diagonal of R forced positive.

    The sign convention makes the factorization unique given its input (and,
    applied to a Gaussian block, makes Q Haar distributed). Rank deficiency
    is an error here; use :func:`orth_basis` when truncation is wanted.
    """
    m = np.asarray(block, dtype=float)
    if m.ndim != 2 or m.shape[0] < m.shape[1] or m.shape[1] == 0:
        raise InvalidInputError(f"expected a tall N x p block with p >= 1, got shape {m.shape}")
    q, r = np.linalg.qr(m)
    scale = np.linalg.norm(m, axis=0).max()
    diag = np.abs(np.diag(r))
    bad = np.flatnonzero(diag <= RANK_RTOL * scale)
    if bad.size:
        raise RankDeficientError(
            f"column {bad[0]} is numerically dependent on its predecessors",
            index=int(bad[0]),
        )
    signs = np.sign(np.diag(r))
    return QRFactors(q * signs, r * signs[:, None])


def orth_basis(block, scale: float | None = None) -> np.ndarray:
    """Orthonormal basis for the column span, truncated to the numerical rank.

    Rank decisions are relative to ``scale`` (default the largest input
    column norm). Columns whose QR diagonal falls at or below the rank
    tolerance are dropped and the factorization repeats on the survivors;
    diagonals inside the roundoff band just above the tolerance (where an
    exact dependency can smear) defer the decision to singular values.
    Returns an N x r block with r the numerical rank; r may be zero, and
    blocks wider than they are tall are allowed.
    """
    m = np.asarray(block, dtype=float)
    if m.ndim != 2:
        raise InvalidInputError(f"expected a 2-D block, got shape {m.shape}")
    if m.shape[1] == 0:
        return m
    if scale is None:
        scale = np.linalg.norm(m, axis=0).max()
    if scale <= 0.0:
        return m[:, :0]
    return _orth_span(m, float(scale))


def _orth_span(cols: np.ndarray, scale: float) -> np.ndarray:
    tol = RANK_RTOL * scale
    while cols.shape[1] > 0:
        n, p = cols.shape
        if p > n:
            # the QR diagonal only covers n columns: orthonormalize a head
            # block, then recurse on the tail's residual against it
            head = _orth_span(cols[:, :n], scale)
            if head.shape[1] == n:
                return head
            tail = cols[:, n:] - head @ (head.T @ cols[:, n:])
            tail -= head @ (head.T @ tail)  # second pass keeps blocks orthogonal
            norms = np.linalg.norm(tail, axis=0)
            if ((norms > tol) & (norms <= QR_TRUST_FACTOR * tol)).any():
                # a residual in the ambiguous band may be projection noise;
                # decide the whole block by its singular values instead
                u, s, _ = np.linalg.svd(cols, full_matrices=False)
                return u[:, : int((s > tol).sum())]
            rest = _orth_span(tail[:, norms > tol], scale)
            return head if rest.shape[1] == 0 else np.hstack([head, rest])
        q, r = np.linalg.qr(cols)
        diag = np.abs(np.diag(r))
        keep = diag > tol
        if keep.all():
            if (diag > QR_TRUST_FACTOR * tol).all():
                return q
            # a diagonal sits in the ambiguous band: certify full rank via a
            # cheap condition estimate when possible, else let singular
            # values separate a genuinely small direction from noise
            rcond, info = lapack.dtrcon(r, norm="1", uplo="U", diag="N")
            if info == 0 and rcond * np.abs(r).sum(axis=0).max() / np.sqrt(p) > tol:
                return q
            u, s, _ = np.linalg.svd(cols, full_matrices=False)
            return u[:, : int((s > tol).sum())]
        cols = cols[:, keep]
    return cols[:, :0]


def solve_transposed_upper(r, b) -> np.ndarray:
    """Solve ``R^T X = B`` for an upper-triangular R with nonzero diagonal."""
    r = np.asarray(r, dtype=float)
    b = np.asarray(b, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise InvalidInputError(f"expected a square triangular factor, got shape {r.shape}")
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_RTOL * max(diag.max(), np.abs(r).max()):
        raise SingularFactorError("triangular factor is numerically singular")
    return solve_triangular(r, b, trans="T", lower=False, check_finite=False)


def ql_orthonormalize_pair(s):
    """Orthonormalize a two-column block starting from its last column.

    Returns ``(s_tilde, l)`` with ``s = s_tilde @ l`` and ``l`` lower
    triangular: the second column keeps its direction (normalized) and the
    first is orthogonalized against it. Raises if either resulting direction
    is below the rank tolerance relative to the block norm.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[1] != 2:
        raise InvalidInputError(f"expected a p x 2 block, got shape {s.shape}")
    scale = np.linalg.norm(s)
    n2 = np.linalg.norm(s[:, 1])
    if n2 <= RANK_RTOL * scale:
        raise DegeneratePairError("second column is numerically zero")
    s2 = s[:, 1] / n2
    w = s[:, 0] - s2 * (s2 @ s[:, 0])
    n1 = np.linalg.norm(w)
    if n1 <= RANK_RTOL * scale:
        raise DegeneratePairError("columns are numerically parallel")
    s1 = w / n1
    s_tilde = np.column_stack([s1, s2])
    lower = s_tilde.T @ s
    lower[0, 1] = 0.0  # exact zero by construction; clear the roundoff
    return s_tilde, lower


def sample_gaussian(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    """An N x m block of i.i.d. standard normal entries."""
    if n < 1 or m < 1:
        raise InvalidInputError(f"block dimensions must be positive, got {n} x {m}")
    return rng.standard_normal((n, m))


def sample_haar_orthogonal(rng: np.random.Generator, m: int, *, size: int | None = None):
    """Haar-distributed orthogonal matrices via sign-corrected Gaussian QR.

    Each column of the raw Q factor is multiplied by the sign of the matching
    R diagonal entry; without that correction the QR of a Gaussian block is
    not Haar. With ``size`` given, returns a ``(size, m, m)`` stack.
    """
    if m < 1:
        raise InvalidInputError(f"matrix dimension must be positive, got {m}")
    shape = (m, m) if size is None else (size, m, m)
    q, r = np.linalg.qr(rng.standard_normal(shape))
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    signs = np.where(diag < 0.0, -1.0, 1.0)
    return q * signs[..., None, :]


class RotationStrategy:
    """Stateful source of resampling rotations for the test vectors.

    ``identity-first-haar`` emits the identity once, then fresh Haar samples.
    ``iid-unit-vectors`` emits independent uniform unit vectors instead of
    matrices. ``kac-walk`` advances an orthogonal state by ``givens_per_draw``
    random plane rotations (default m^2) per emitted matrix; the budget is a
    knob because the walk's mixing time is a heuristic.
    """

    def __init__(self, kind: str, givens_per_draw: int | None = None):
        if kind not in ROTATION_KINDS:
            raise InvalidInputError(
                f"unknown rotation strategy {kind!r}; expected one of {ROTATION_KINDS}"
            )
        self.kind = kind
        self.givens_per_draw = givens_per_draw
        self.state: np.ndarray | None = None
        self._emitted = 0

    def draw(self, rng: np.random.Generator, m: int, count: int = 1) -> np.ndarray:
        """Return a ``(count, m, m)`` stack (or ``(count, m)`` unit vectors)."""
        if m < 1 or count < 1:
            raise InvalidInputError("m and count must be positive")
        if self.kind == IID_UNIT_VECTORS:
            vecs = rng.standard_normal((count, m))
            out = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        elif self.kind == IDENTITY_FIRST_HAAR:
            out = np.empty((count, m, m))
            start = 0
            if self._emitted == 0:
                out[0] = np.eye(m)
                start = 1
            if count > start:
                out[start:] = sample_haar_orthogonal(rng, m, size=count - start)
        else:
            out = np.empty((count, m, m))
            for j in range(count):
                out[j] = self._advance_kac_walk(rng, m)
        self._emitted += count
        return out

    def _advance_kac_walk(self, rng: np.random.Generator, m: int) -> np.ndarray:
        if self.state is None:
            self.state = np.eye(m)
        elif self.state.shape[0] != m:
            raise InvalidInputError(
                f"kac-walk state has dimension {self.state.shape[0]}, requested {m}"
            )
        u = self.state
        steps = self.givens_per_draw if self.givens_per_draw is not None else m * m
        if m > 1:
            first = rng.integers(0, m, size=steps)
            second = rng.integers(0, m - 1, size=steps)
            second = np.where(second >= first, second + 1, second)
            angles = rng.uniform(0.0, 2.0 * np.pi, size=steps)
            for i, j, theta in zip(first, second, angles):
                c, s = np.cos(theta), np.sin(theta)
                row_i = u[i].copy()
                u[i] = c * row_i - s * u[j]
                u[j] = s * row_i + c * u[j]
        # re-orthonormalize so drift never accumulates across draws
        self.state = economy_qr(u).q
        return self.state.copy()


def next_rotation(strategy: RotationStrategy, rng: np.random.Generator, m: int):
    """Emit the strategy's next rotation matrix (or unit vector)."""
    return strategy.draw(rng, m, 1)[0]
