"""Matrix-free operators with matvec accounting, plus synthetic test spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError, InvalidSpecError

FAMILIES = ("flat", "poly", "inv-poly", "exp", "step", "step-decay")

# The two step families pin the leading plateau at 50 eigenvalues equal to 1
# and (for "step") the tail at 1e-3. These are constants, not parameters.
STEP_PLATEAU = 50
STEP_LEVEL = 1e-3


@dataclass(frozen=True)
class SpectrumSpec:
    """A named synthetic eigenvalue family of a given dimension."""

    family: str
    dim: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidSpecError(
                f"unknown spectrum family {self.family!r}; expected one of {FAMILIES}"
            )
        if not isinstance(self.dim, int) or self.dim < 1:
            raise InvalidSpecError(f"dimension must be a positive integer, got {self.dim!r}")
        if self.family in ("step", "step-decay") and self.dim <= STEP_PLATEAU:
            raise InvalidSpecError(
                f"{self.family!r} needs dim > {STEP_PLATEAU}, got {self.dim}"
            )

    @classmethod
    def parse(cls, text: str) -> "SpectrumSpec":
        """Parse the ``family:N`` form used on the command line."""
        family, sep, dim = text.partition(":")
        if not sep:
            raise InvalidSpecError(f"expected 'family:N', got {text!r}")
        try:
            n = int(dim)
        except ValueError:
            raise InvalidSpecError(f"dimension in {text!r} is not an integer") from None
        return cls(family, n)

    def __str__(self) -> str:
        return f"{self.family}:{self.dim}"


def make_spectrum(spec: SpectrumSpec) -> np.ndarray:
    """Return the eigenvalue sequence for a spectrum specification."""
    n = spec.dim
    i = np.arange(1, n + 1, dtype=float)
    if spec.family == "flat":
        # linear ramp from 3 down to 1; a single eigenvalue degenerates to 3
        lam = np.full(1, 3.0) if n == 1 else 3.0 - 2.0 * (i - 1.0) / (n - 1.0)
    elif spec.family == "poly":
        lam = i ** -2.0
    elif spec.family == "inv-poly":
        lam = 2.0 - i ** -2.0
    elif spec.family == "exp":
        lam = 0.7 ** (i - 1.0)
    elif spec.family == "step":
        lam = np.full(n, STEP_LEVEL)
        lam[:STEP_PLATEAU] = 1.0
    else:  # step-decay
        lam = i ** -2.0
        lam[:STEP_PLATEAU] = 1.0
    return lam


def exact_trace(eigenvalues) -> float:
    """Sum of the eigenvalues via compensated (exact) summation."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        raise InvalidInputError("eigenvalue sequence is empty")
    return math.fsum(lam.tolist())


class MatFreeOperator:
    """A square linear map accessed only through counted block products.

    The counter advances by one unit per column applied, so estimators are
    charged identically whether they batch their matvecs or loop. Instances
    are cheap; concurrent benchmark trials should each build their own so
    counters stay private.
    """

    def __init__(self, dim: int, apply_fn: Callable[[np.ndarray], np.ndarray]):
        if dim < 1:
            raise InvalidInputError(f"operator dimension must be positive, got {dim}")
        self.dim = int(dim)
        self._apply_fn = apply_fn
        self.matvec_count = 0

    def apply(self, block) -> np.ndarray:
        """Apply the operator to a vector or an N x b block of columns."""
        x = np.asarray(block, dtype=float)
        if x.ndim not in (1, 2) or x.shape[0] != self.dim:
            raise InvalidInputError(
                f"expected a vector or block with leading dimension {self.dim}, "
                f"got shape {x.shape}"
            )
        out = self._apply_fn(x)
        self.matvec_count += 1 if x.ndim == 1 else x.shape[1]
        return out


def make_diagonal_operator(eigenvalues) -> MatFreeOperator:
    """Operator that scales row i of a block by the i-th eigenvalue."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.ndim != 1 or lam.size == 0:
        raise InvalidInputError("eigenvalues must be a nonempty 1-D sequence")

    def apply_fn(x):
        return lam[:, None] * x if x.ndim == 2 else lam * x

    return MatFreeOperator(lam.size, apply_fn)


def make_dense_operator(matrix) -> MatFreeOperator:
    """Operator computing ``matrix @ block`` with matvec accounting."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
    return MatFreeOperator(a.shape[0], lambda x: a @ x)


def make_identity_operator(dim: int) -> MatFreeOperator:
    """Identity operator, used by the diagnostic override modes."""
    return make_diagonal_operator(np.ones(dim))
