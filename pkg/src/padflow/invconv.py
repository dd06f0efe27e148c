"""Invertible padded convolutions.

A k x k convolution (odd k, equal input and output channels) applied after
top-left zero padding (k-1, 0, k-1, 0) produces an output pixel (i, j) that
depends only on input pixels at or before (i, j) in both coordinates.  In
the flat channel-fastest order its matrix is therefore (block) lower
triangular, with every diagonal block equal to the transposed bottom-right
kernel tap D = weights[k-1, k-1].  Invertibility reduces to a condition on
D alone, the determinant has a closed form, and the inverse is a single
raster-order back substitution.

Two variants are supported:

* ``masked``: within-pixel channel couplings D[ci, co] with ci > co are
  zeroed, so the matrix is literally triangular and the per-pixel solve is
  a forward substitution over channels.  Invertible iff every D[c, c] is
  nonzero; log|det| = H*W * sum_c log|D[c, c]|.
* ``block``: D is unconstrained; the matrix is block triangular and the
  per-pixel solve is a C x C LU solve.  Invertible iff det(D) is nonzero;
  log|det| = H*W * log|det D|.

The ``emerging`` functions implement the two-pass baseline: a pair of
oppositely-oriented causal convolutions, each invertible by one back
substitution, so inverting the pair costs two sequential solves.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve, solve_triangular

from .core import PadSpec, PadflowError, ShapeError, as_batch, pad

VARIANT_MASKED = "masked"
VARIANT_BLOCK = "block"
VARIANTS = (VARIANT_MASKED, VARIANT_BLOCK)

SINGULARITY_TOL = 1e-8


class SingularKernelError(PadflowError):
    """The diagonal tap fails the variant's invertibility condition."""


class KernelMaskError(PadflowError):
    """Kernel weights are nonzero at positions the variant masks out."""


def channel_mask(c, variant):
    """Allowed within-pixel couplings of the diagonal tap, as a bool (C, C).

    Masked variant: output channel co may depend on input channels ci <= co.
    Block variant: all couplings allowed.
    """
    if variant == VARIANT_MASKED:
        ci, co = np.indices((c, c))
        return ci <= co
    return np.ones((c, c), dtype=bool)


def kernel_mask(k, c, variant):
    """Allowed positions of the full (k, k, C, C) kernel, as a bool array."""
    m = np.ones((k, k, c, c), dtype=bool)
    m[k - 1, k - 1] = channel_mask(c, variant)
    return m


class ConvKernel:
    """Weights of an invertible padded convolution.

    weights has shape (k, k, C, C), indexed [a, b, ci, co]; the diagonal
    tap D = weights[k-1, k-1] couples an output pixel to the same input
    pixel.  Construction validates odd k, square channel mixing, and the
    variant's mask.
    """

    def __init__(self, weights, variant=VARIANT_MASKED):
        weights = np.asarray(weights)
        if weights.dtype != np.float32:
            weights = weights.astype(np.float64)
        if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
            raise ShapeError(f"kernel must be (k, k, C, C), got {weights.shape}")
        k = weights.shape[0]
        if k % 2 == 0:
            raise ShapeError(f"window size must be odd, got k={k}")
        if weights.shape[2] != weights.shape[3]:
            raise ShapeError(
                f"input and output channels must match, got {weights.shape[2:]}"
            )
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant == VARIANT_MASKED:
            bad = ~channel_mask(weights.shape[2], variant) & (weights[k - 1, k - 1] != 0)
            if bad.any():
                ci, co = np.argwhere(bad)[0]
                raise KernelMaskError(
                    f"masked kernel has nonzero diagonal-tap entry ci={ci} > co={co}"
                )
        self.weights = weights
        self.variant = variant

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def channels(self):
        return self.weights.shape[2]

    @property
    def diag_tap(self):
        """The bottom-right tap D, shape (C, C), indexed [ci, co]."""
        return self.weights[self.k - 1, self.k - 1]

    @classmethod
    def identity(cls, k=3, channels=1, variant=VARIANT_MASKED):
        """Kernel whose convolution is the identity map (D = I, rest 0)."""
        w = np.zeros((k, k, channels, channels))
        w[k - 1, k - 1] = np.eye(channels)
        return cls(w, variant)


@dataclass(frozen=True)
class InvertibilityReport:
    invertible: bool
    reason: str | None
    min_diag: float
    tap_det: float

    def __bool__(self):
        return self.invertible


def is_invertible(kernel, tol=SINGULARITY_TOL):
    """Apply the variant's diagonal-tap criterion with threshold tol.

    For C=1 both variants reduce to |K[k-1, k-1]| > tol.
    """
    d = kernel.diag_tap
    min_diag = float(np.min(np.abs(np.diag(d))))
    tap_det = float(np.linalg.det(d))
    if kernel.variant == VARIANT_MASKED:
        if min_diag <= tol:
            return InvertibilityReport(False, "zero diagonal tap", min_diag, tap_det)
    else:
        if abs(tap_det) <= tol:
            return InvertibilityReport(False, "singular block", min_diag, tap_det)
    return InvertibilityReport(True, None, min_diag, tap_det)


def conv_logdet(kernel, h, w):
    """log|det| of the convolution's matrix on an H x W image, closed form."""
    d = kernel.diag_tap
    if kernel.variant == VARIANT_MASKED:
        diag = np.abs(np.diag(d))
        if diag.min() <= 0.0:
            raise SingularKernelError("zero diagonal tap; log-determinant undefined")
        return h * w * float(np.sum(np.log(diag)))
    sign, logabs = np.linalg.slogdet(d)
    if sign == 0.0:
        raise SingularKernelError("singular block; log-determinant undefined")
    return h * w * float(logabs)


def _conv(x4, weights, spec):
    """Convolution of a padded batch: y[n,i,j,co] = sum pad(x)[n,i+a,j+b,ci] K[a,b,ci,co]."""
    k = weights.shape[0]
    xp = pad(x4, spec)
    h_out = xp.shape[1] - k + 1
    w_out = xp.shape[2] - k + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"padded input {xp.shape[1:3]} smaller than window {k}")
    y = np.zeros((x4.shape[0], h_out, w_out, weights.shape[3]), dtype=x4.dtype)
    for a in range(k):
        for b in range(k):
            y += xp[:, a:a + h_out, b:b + w_out, :] @ weights[a, b]
    return y


def conv_forward(x, kernel):
    """Apply the invertible convolution (implicit (k-1, 0, k-1, 0) padding)."""
    x4, batched = as_batch(x)
    if x4.shape[3] != kernel.channels:
        raise ShapeError(
            f"kernel has {kernel.channels} channels, input has {x4.shape[3]}"
        )
    y = _conv(x4, kernel.weights, PadSpec.causal(kernel.k))
    return y if batched else y[0]


def _tap_solver(d, variant, tol):
    """Solver for the per-pixel system x @ D = r with r of shape (N, C)."""
    c = d.shape[0]
    if variant == VARIANT_MASKED:
        if np.min(np.abs(np.diag(d))) <= tol:
            raise SingularKernelError("zero diagonal tap")
        if c == 1:
            inv = 1.0 / d[0, 0]
            return lambda r: r * inv
        # D is upper triangular in [ci, co]; x @ D = r is a forward
        # substitution over channels, done here as one triangular solve.
        dt = np.ascontiguousarray(d.T)
        return lambda r: solve_triangular(dt, r.T, lower=True, check_finite=False).T
    sign, logabs = np.linalg.slogdet(d)
    if sign == 0.0 or np.exp(logabs) <= tol:
        raise SingularKernelError("singular block")
    lu = lu_factor(d.T)
    return lambda r: lu_solve(lu, r.T, check_finite=False).T


def _back_substitute(y4, weights, pivot, reverse, solver):
    """Invert one causal convolution pass by back substitution.

    pivot (pa, pb) is the tap coupling an output pixel to the same input
    pixel; every other active tap must reference a pixel already solved in
    the traversal order (raster, or reverse raster when ``reverse``).
    Cross-row contributions come from rows that are fully solved when a
    row starts, so they are subtracted in one vectorized sweep per row;
    only the same-row taps are resolved pixel by pixel.
    """
    y4 = np.ascontiguousarray(y4)
    n, h, w, c = y4.shape
    k = weights.shape[0]
    pa, pb = pivot
    # zero margins: x[p, q] lives at xw[p + pa, q + pb]; unsolved and
    # out-of-range entries read as zero
    xw = np.zeros((n, h + k - 1, w + k - 1, c), dtype=y4.dtype)
    rows = range(h - 1, -1, -1) if reverse else range(h)
    cols = list(range(w - 1, -1, -1) if reverse else range(w))
    cross_row = [(a, b) for a in range(k) for b in range(k) if a != pa]
    same_row = [b for b in range(k) if b != pb]
    for i in rows:
        base = np.array(y4[:, i], dtype=y4.dtype)  # (n, w, c)
        for a, b in cross_row:
            base -= xw[:, i + a, b:b + w, :] @ weights[a, b]
        xrow = xw[:, i + pa]
        for j in cols:
            r = base[:, j]
            for b in same_row:
                r = r - xrow[:, j + b, :] @ weights[pa, b]
            xrow[:, j + pb, :] = solver(r)
    # contiguous copy: releases the margin workspace and keeps a chained
    # second pass on the same footing as a single one
    return xw[:, pa:pa + h, pb:pb + w, :].copy()


def conv_inverse(y, kernel, tol=SINGULARITY_TOL):
    """Invert :func:`conv_forward` by raster-order back substitution.

    Sequential over pixels within one image; batched across images.
    Raises SingularKernelError when the diagonal tap fails its criterion.
    """
    y4, batched = as_batch(y)
    if y4.shape[3] != kernel.channels:
        raise ShapeError(
            f"kernel has {kernel.channels} channels, input has {y4.shape[3]}"
        )
    solver = _tap_solver(kernel.diag_tap, kernel.variant, tol)
    k = kernel.k
    x4 = _back_substitute(y4, kernel.weights, (k - 1, k - 1), False, solver)
    return x4 if batched else x4[0]


# --- invertibility-preserving parameterization -------------------------

@dataclass
class InvConvParams:
    """Unconstrained parameterization of a masked invertible kernel.

    The diagonal of the diagonal tap is sign_c * exp(theta_c), which can
    never reach zero, so any parameter value yields an invertible kernel
    and log|det| = H*W * sum(theta).  Signs are frozen at initialization.
    off_weights holds every other kernel entry (masked positions and the
    tap diagonal are kept at zero).
    """

    off_weights: np.ndarray  # (k, k, C, C)
    signs: np.ndarray        # (C,), entries +-1
    theta: np.ndarray        # (C,)

    @property
    def k(self):
        return self.off_weights.shape[0]

    @property
    def channels(self):
        return self.off_weights.shape[2]


def reconstruct_kernel(params):
    """Build the masked kernel for a parameter point."""
    k, c = params.k, params.channels
    w = np.array(params.off_weights, dtype=np.float64)
    w *= kernel_mask(k, c, VARIANT_MASKED)
    diag = params.signs * np.exp(params.theta)
    w[k - 1, k - 1][np.diag_indices(c)] = diag
    return ConvKernel(w, VARIANT_MASKED)


def extract_params(kernel):
    """Inverse of :func:`reconstruct_kernel`.

    Fails on kernels that violate the mask or have a zero tap diagonal.
    """
    if kernel.variant != VARIANT_MASKED:
        raise KernelMaskError("parameterization applies to the masked variant only")
    k, c = kernel.k, kernel.channels
    diag = np.diag(kernel.diag_tap).copy()
    if np.min(np.abs(diag)) == 0.0:
        raise SingularKernelError("zero diagonal tap cannot be parameterized")
    off = kernel.weights.copy()
    off[k - 1, k - 1][np.diag_indices(c)] = 0.0
    return InvConvParams(off, np.sign(diag), np.log(np.abs(diag)))


def random_invertible_kernel(rng, k=3, channels=1, variant=VARIANT_MASKED,
                             off_scale=0.05, diag_range=(0.6, 1.4)):
    """Sample a well-conditioned invertible kernel for tests and benchmarks."""
    w = rng.normal(0.0, off_scale, size=(k, k, channels, channels))
    w *= kernel_mask(k, channels, variant)
    diag = rng.choice([-1.0, 1.0], size=channels) * rng.uniform(*diag_range, size=channels)
    w[k - 1, k - 1][np.diag_indices(channels)] = diag
    kernel = ConvKernel(w, variant)
    if variant == VARIANT_BLOCK and not is_invertible(kernel):
        return random_invertible_kernel(rng, k, channels, variant, off_scale, diag_range)
    return kernel


# --- emerging-convolution baseline --------------------------------------

ORIENT_TL = "tl"
ORIENT_BR = "br"


def causal_taps(k, orientation):
    """Bool (k, k): taps allowed for one causal orientation (center excluded)."""
    c0 = (k - 1) // 2
    a, b = np.indices((k, k))
    if orientation == ORIENT_TL:
        allowed = (a < c0) | ((a == c0) & (b < c0))
    elif orientation == ORIENT_BR:
        allowed = (a > c0) | ((a == c0) & (b > c0))
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return allowed


class CausalKernel:
    """One pass of the two-pass baseline: a symmetric-padding convolution
    whose kernel is masked so every output pixel depends only on inputs at
    or before (``tl``) / at or after (``br``) it in raster order.  The
    center tap mixes channels triangularly, which makes each pass
    invertible by one back substitution in the matching order.
    """

    def __init__(self, weights, orientation):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
            raise ShapeError(f"kernel must be (k, k, C, C), got {weights.shape}")
        k = weights.shape[0]
        if k % 2 == 0:
            raise ShapeError(f"window size must be odd, got k={k}")
        c0 = (k - 1) // 2
        spatial = causal_taps(k, orientation)
        spatial[c0, c0] = True
        if np.any(weights[~spatial] != 0):
            raise KernelMaskError(f"weights present outside {orientation} causal taps")
        ci, co = np.indices(weights.shape[2:])
        tri = ci <= co if orientation == ORIENT_TL else ci >= co
        if np.any(weights[c0, c0][~tri] != 0):
            raise KernelMaskError("center tap violates its triangular mask")
        self.weights = weights
        self.orientation = orientation

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def channels(self):
        return self.weights.shape[2]

    @property
    def center_tap(self):
        c0 = (self.k - 1) // 2
        return self.weights[c0, c0]

    @classmethod
    def identity(cls, k=3, channels=1, orientation=ORIENT_TL):
        w = np.zeros((k, k, channels, channels))
        w[(k - 1) // 2, (k - 1) // 2] = np.eye(channels)
        return cls(w, orientation)


def random_emerging_pair(rng, k=3, channels=1, off_scale=0.05, diag_range=(0.6, 1.4)):
    """Sample an invertible (tl, br) causal kernel pair."""
    pair = []
    for orientation in (ORIENT_TL, ORIENT_BR):
        c0 = (k - 1) // 2
        w = rng.normal(0.0, off_scale, size=(k, k, channels, channels))
        w *= causal_taps(k, orientation)[..., None, None]
        ci, co = np.indices((channels, channels))
        tri = ci <= co if orientation == ORIENT_TL else ci >= co
        center = rng.normal(0.0, off_scale, size=(channels, channels)) * tri
        diag = rng.choice([-1.0, 1.0], size=channels) * rng.uniform(*diag_range, size=channels)
        center[np.diag_indices(channels)] = diag
        w[c0, c0] = center
        pair.append(CausalKernel(w, orientation))
    return tuple(pair)


def _check_pair(k1, k2):
    if k1.orientation != ORIENT_TL or k2.orientation != ORIENT_BR:
        raise ValueError("expected a (tl, br) causal kernel pair")
    if k1.k != k2.k or k1.channels != k2.channels:
        raise ShapeError("causal kernel pair must share window size and channels")


def emerging_forward(x, k1, k2):
    """Two-pass baseline forward: conv(conv(x, k1), k2), symmetric padding."""
    _check_pair(k1, k2)
    x4, batched = as_batch(x)
    spec = PadSpec.symmetric(k1.k)
    y = _conv(_conv(x4, k1.weights, spec), k2.weights, spec)
    return y if batched else y[0]


def _center_solver(kern, tol):
    """Triangular solver for x @ D = r at a causal kernel's center tap."""
    d = kern.center_tap
    if np.min(np.abs(np.diag(d))) <= tol:
        raise SingularKernelError("zero diagonal on a causal center tap")
    if d.shape[0] == 1:
        inv = 1.0 / d[0, 0]
        return lambda r: r * inv
    dt = np.ascontiguousarray(d.T)
    lower = kern.orientation == ORIENT_TL
    return lambda r: solve_triangular(dt, r.T, lower=lower, check_finite=False).T


def emerging_inverse(y, k1, k2, tol=SINGULARITY_TOL):
    """Invert the two-pass baseline: one back substitution per pass."""
    _check_pair(k1, k2)
    y4, batched = as_batch(y)
    c0 = (k1.k - 1) // 2
    mid = _back_substitute(y4, k2.weights, (c0, c0), True, _center_solver(k2, tol))
    x4 = _back_substitute(mid, k1.weights, (c0, c0), False, _center_solver(k1, tol))
    return x4 if batched else x4[0]


def emerging_logdet(k1, k2, h, w):
    """log|det| of the composed two-pass map: the per-pass terms add."""
    total = 0.0
    for kern in (k1, k2):
        diag = np.abs(np.diag(kern.center_tap))
        if diag.min() <= 0.0:
            raise SingularKernelError("zero diagonal on a causal center tap")
        total += float(np.sum(np.log(diag)))
    return h * w * total
