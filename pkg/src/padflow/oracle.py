"""Dense brute-force reference for the convolution operators.

Materializes the matrix M of a padded convolution column by column from
unit images, so M * vec(x) = vec(conv(x)) holds by construction.  Exact
determinants, dense solves, and a triangular-structure checker give the
ground truth that every closed-form or back-substitution result is tested
against.  Never used in the training path.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .core import PadSpec, PadflowError
from .invconv import VARIANT_BLOCK, VARIANT_MASKED, _conv

MAX_DENSE_DIM = 4096


class SingularMatrixError(PadflowError):
    """A dense solve was asked to invert a singular matrix."""


class SizeGuardError(PadflowError):
    """The requested dense matrix exceeds the materialization guard."""


@dataclass
class DenseConvMatrix:
    """Matrix of a padded convolution, with the provenance that built it."""

    matrix: np.ndarray  # (out_dim, in_dim)
    height: int
    width: int
    channels: int
    pad: PadSpec

    @property
    def n(self):
        return self.matrix.shape[1]


def build_matrix(kernel, height, width, pad=None):
    """Materialize M for a kernel on H x W images; columns are the images
    of the unit basis, in the flat channel-fastest order.

    Defaults to the top-left padding (k-1, 0, k-1, 0); any other PadSpec
    (notably the symmetric same-size one) is supported so non-triangular
    configurations can be inspected too.
    """
    c = kernel.channels
    n = height * width * c
    if n > MAX_DENSE_DIM:
        raise SizeGuardError(f"n = {n} exceeds dense guard {MAX_DENSE_DIM}")
    if pad is None:
        pad = PadSpec.causal(kernel.k)
    basis = np.eye(n).reshape(n, height, width, c)
    out = _conv(basis, kernel.weights, pad)
    m = out.reshape(n, -1).T.copy()
    return DenseConvMatrix(m, height, width, c, pad)


def dense_det(m):
    """Determinant by LU with partial pivoting."""
    m = _as_square(m)
    return float(np.linalg.det(m))


def dense_slogdet(m):
    """(sign, log|det|); the scale-safe companion of :func:`dense_det`."""
    m = _as_square(m)
    sign, logabs = np.linalg.slogdet(m)
    return float(sign), float(logabs)


def dense_solve(m, y):
    """Solve M x = y by LU with partial pivoting; y may hold many columns."""
    m = _as_square(m)
    y = np.asarray(y, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(m)
    if np.abs(np.diag(lu)).min() == 0.0:
        raise SingularMatrixError("matrix is singular to working precision")
    return lu_solve((lu, piv), y)


def _as_square(m):
    if isinstance(m, DenseConvMatrix):
        m = m.matrix
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise PadflowError(f"expected a square matrix, got {m.shape}")
    return m


@dataclass
class TriangularReport:
    """Outcome of a (block) triangular structure check."""

    ok: bool
    violation: tuple | None   # (row, col, value) of the first offending entry
    diag_blocks_equal: bool
    diag_block: np.ndarray | None

    def __bool__(self):
        return self.ok


def check_triangular(m, variant, channels=1, atol=0.0):
    """Verify the zero pattern above the (block) diagonal and the constancy
    of the diagonal (blocks).

    ``masked`` expects a strictly lower triangular matrix whose diagonal
    cycles through the tap diagonal (D[0,0], ..., D[C-1,C-1]); ``block``
    expects block lower triangular with identical C x C diagonal blocks.
    Returns the first violation's coordinates if any.
    """
    m = _as_square(m)
    n = m.shape[0]
    if n % channels != 0:
        raise PadflowError(f"matrix size {n} not a multiple of {channels} channels")
    if variant == VARIANT_MASKED:
        upper = np.triu(m, k=1)
    elif variant == VARIANT_BLOCK:
        block_col = (np.arange(n) // channels)
        above = block_col[None, :] > block_col[:, None]
        upper = np.where(above, m, 0.0)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    bad = np.argwhere(np.abs(upper) > atol)
    violation = None
    if bad.size:
        r, c = bad[0]
        violation = (int(r), int(c), float(m[r, c]))
    blocks = m.reshape(n // channels, channels, n // channels, channels)
    diag_blocks = np.einsum("ipiq->ipq", blocks)
    diag_equal = bool(np.all(np.abs(diag_blocks - diag_blocks[0]) <= atol))
    ok = violation is None and diag_equal
    return TriangularReport(ok, violation, diag_equal, diag_blocks[0].copy())
