"""Invertible flow layers and their exact analytic backward passes.

Every layer maps (N, H, W, C) -> (N, H, W, C) and reports a per-sample
log|det| of its Jacobian, so a stack of layers supports exact likelihood
evaluation.  ``backward`` propagates the gradient of any scalar loss
through both routes at once: ``grad_y`` is the upstream gradient on the
output tensor and ``grad_logdet`` (shape (N,)) is the loss gradient on
each sample's log-determinant term.  Parameter gradients accumulate into
``self.grads``; there is no autodiff anywhere, each rule is written out
and verified against central finite differences in the tests.
"""

import numpy as np

from .core import DEFAULT_DTYPE, PadSpec, PadflowError, ShapeError, pad
from .invconv import (
    ConvKernel,
    SingularKernelError,
    VARIANT_MASKED,
    _conv,
    conv_forward,
    conv_inverse,
    kernel_mask,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class Module:
    """Named parameter container with parallel gradient storage."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.children = {}

    def add_param(self, name, value):
        value = np.asarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_buffer(self, name, value):
        self.buffers[name] = np.asarray(value, dtype=self.dtype)
        return self.buffers[name]

    def add_child(self, name, module):
        self.children[name] = module
        return module

    def named_params(self, prefix=""):
        for name, value in self.params.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_params(f"{prefix}{cname}/")

    def named_grads(self, prefix=""):
        for name in self.params:
            yield prefix + name, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}/")

    def named_buffers(self, prefix=""):
        for name, value in self.buffers.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}/")

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0
        for child in self.children.values():
            child.zero_grads()

    def _resolve(self, path):
        # child names may themselves contain '/', so match greedily
        module, rest = self, path
        while rest not in module.params and rest not in module.buffers:
            for cname, child in module.children.items():
                if rest.startswith(cname + "/"):
                    module, rest = child, rest[len(cname) + 1:]
                    break
            else:
                raise KeyError(path)
        return module, rest

    def set_param(self, path, value):
        module, leaf = self._resolve(path)
        if leaf not in module.params:
            raise KeyError(path)
        target = module.params[leaf]
        if target.shape != np.shape(value):
            raise ShapeError(f"parameter {path}: expected {target.shape}, got {np.shape(value)}")
        target[...] = value

    def set_buffer(self, path, value):
        module, leaf = self._resolve(path)
        if leaf not in module.buffers:
            raise KeyError(path)
        module.buffers[leaf][...] = value


def _per_sample(value, n):
    return np.full(n, value)


def _sum_per_sample(a):
    return a.reshape(a.shape[0], -1).sum(axis=1)


# --- shared convolution gradients ---------------------------------------

def _conv_input_grad(gy, weights, top, left):
    # adjoint of a padded convolution: flip the window, swap channel axes,
    # and pad on the mirrored sides
    k = weights.shape[0]
    wflip = weights[::-1, ::-1].transpose(0, 1, 3, 2)
    spec = PadSpec(k - 1 - top, top, k - 1 - left, left)
    return _conv(gy, wflip, spec)


def _conv_weight_grad(x, gy, k, spec):
    xp = pad(x, spec)
    h, w = gy.shape[1], gy.shape[2]
    gw = np.empty((k, k, x.shape[3], gy.shape[3]), dtype=gy.dtype)
    for a in range(k):
        for b in range(k):
            gw[a, b] = np.tensordot(xp[:, a:a + h, b:b + w], gy, axes=([0, 1, 2], [0, 1, 2]))
    return gw


class PlainConv(Module):
    """Ordinary k x k convolution with bias and symmetric zero padding.

    Building block of coupling networks and split priors; it is not
    itself invertible and reports no log-determinant.
    """

    def __init__(self, c_in, c_out, k=3, rng=None, weight_scale=0.05,
                 zero_init=False, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        if k % 2 == 0:
            raise ShapeError(f"window size must be odd, got k={k}")
        self.k = k
        self.spec = PadSpec.symmetric(k)
        if zero_init:
            weight = np.zeros((k, k, c_in, c_out))
        else:
            weight = rng.normal(0.0, weight_scale, size=(k, k, c_in, c_out))
        self.add_param("weight", weight)
        self.add_param("bias", np.zeros(c_out))

    def forward(self, x):
        return _conv(x, self.params["weight"], self.spec) + self.params["bias"]

    def backward(self, x, gy):
        self.grads["weight"] += _conv_weight_grad(x, gy, self.k, self.spec)
        self.grads["bias"] += gy.sum(axis=(0, 1, 2))
        c0 = (self.k - 1) // 2
        return _conv_input_grad(gy, self.params["weight"], c0, c0)


# --- flow layers ---------------------------------------------------------

class ActNorm(Module):
    """Per-channel affine y = s * (x + b) with data-dependent init.

    The scale is stored as a frozen sign and a log-magnitude, so it can
    never cross zero during optimization and the log-determinant is
    H * W * sum(log_scale).
    """

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        self.channels = channels
        self.add_param("log_scale", np.zeros(channels))
        self.add_param("bias", np.zeros(channels))
        self.add_buffer("signs", np.ones(channels))
        self.add_buffer("initialized", np.zeros(1))

    @property
    def initialized(self):
        return bool(self.buffers["initialized"][0])

    def mark_initialized(self):
        self.buffers["initialized"][0] = 1.0

    def initialize(self, batch):
        """Set bias and scale so this batch comes out with per-channel
        mean 0 and variance 1."""
        mean = batch.mean(axis=(0, 1, 2))
        std = batch.std(axis=(0, 1, 2))
        if np.any(std == 0.0):
            dead = int(np.flatnonzero(std == 0.0)[0])
            raise PadflowError(f"channel {dead} has zero variance; cannot normalize")
        self.params["bias"][...] = -mean
        self.params["log_scale"][...] = -np.log(std)
        self.mark_initialized()

    def _require_init(self):
        if not self.initialized:
            raise PadflowError("actnorm used before initialization")

    @property
    def scale(self):
        return self.buffers["signs"] * np.exp(self.params["log_scale"])

    def forward(self, x):
        self._require_init()
        n, h, w, _ = x.shape
        y = self.scale * (x + self.params["bias"])
        return y, _per_sample(h * w * self.params["log_scale"].sum(), n)

    def inverse(self, y):
        self._require_init()
        return y / self.scale - self.params["bias"]

    def backward(self, x, grad_y, grad_logdet):
        self._require_init()
        _, h, w, _ = x.shape
        s = self.scale
        y = s * (x + self.params["bias"])
        self.grads["bias"] += (grad_y * s).sum(axis=(0, 1, 2))
        # d y / d log_scale = y, plus the log-determinant route
        self.grads["log_scale"] += (grad_y * y).sum(axis=(0, 1, 2))
        self.grads["log_scale"] += grad_logdet.sum() * h * w
        return grad_y * s


class Conv1x1(Module):
    """Per-pixel channel mixing y = W x (the one-pass baseline permutation
    layer); log-determinant is H * W * log|det W|."""

    def __init__(self, channels, rng=None, identity=False, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        self.channels = channels
        if identity or rng is None:
            weight = np.eye(channels)
        else:
            # random rotation: volume preserving at initialization
            q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
            weight = q * np.sign(np.diag(r))
        self.add_param("weight", weight)

    def _slogdet(self):
        sign, logabs = np.linalg.slogdet(self.params["weight"])
        if sign == 0.0:
            raise SingularKernelError("singular 1x1 mixing weight")
        return logabs

    def forward(self, x):
        n, h, w, _ = x.shape
        logdet = _per_sample(h * w * self._slogdet(), n)
        return x @ self.params["weight"].T, logdet

    def inverse(self, y):
        self._slogdet()
        return y @ np.linalg.inv(self.params["weight"]).T

    def backward(self, x, grad_y, grad_logdet):
        _, h, w, _ = x.shape
        weight = self.params["weight"]
        gw = np.tensordot(grad_y, x, axes=([0, 1, 2], [0, 1, 2]))
        gw += grad_logdet.sum() * h * w * np.linalg.inv(weight).T
        self.grads["weight"] += gw
        return grad_y @ weight


class InvConv(Module):
    """Invertible padded k x k convolution (masked triangular variant).

    Parameterized so every parameter point is invertible: the tap diagonal
    is sign_c * exp(theta_c) with frozen signs, hence the per-image
    log-determinant is H * W * sum(theta), exactly linear in theta.
    """

    def __init__(self, channels, k=3, rng=None, weight_scale=0.05,
                 identity=False, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        self.channels = channels
        self.k = k
        off_mask = kernel_mask(k, channels, VARIANT_MASKED)
        off_mask[k - 1, k - 1][np.diag_indices(channels)] = False
        self._off_mask = off_mask
        if identity or rng is None:
            off = np.zeros((k, k, channels, channels))
        else:
            off = rng.normal(0.0, weight_scale, size=(k, k, channels, channels)) * off_mask
        self.add_param("off_weights", off)
        self.add_param("theta", np.zeros(channels))
        self.add_buffer("signs", np.ones(channels))

    def kernel(self):
        k, c = self.k, self.channels
        w = self.params["off_weights"] * self._off_mask
        diag = self.buffers["signs"] * np.exp(self.params["theta"])
        w = np.array(w)
        w[k - 1, k - 1][np.diag_indices(c)] = diag
        return ConvKernel(w, VARIANT_MASKED)

    def forward(self, x):
        n, h, w, _ = x.shape
        y = conv_forward(x, self.kernel())
        return y, _per_sample(h * w * self.params["theta"].sum(), n)

    def inverse(self, y):
        return conv_inverse(y, self.kernel())

    def backward(self, x, grad_y, grad_logdet):
        _, h, w, _ = x.shape
        k, c = self.k, self.channels
        kernel = self.kernel()
        gk = _conv_weight_grad(x, grad_y, k, PadSpec.causal(k))
        self.grads["off_weights"] += gk * self._off_mask
        diag = self.buffers["signs"] * np.exp(self.params["theta"])
        # tap diagonal enters through the data term (chain rule of exp)
        # and through the log-determinant, whose theta-gradient is H*W
        self.grads["theta"] += gk[k - 1, k - 1][np.diag_indices(c)] * diag
        self.grads["theta"] += grad_logdet.sum() * h * w
        return _conv_input_grad(grad_y, kernel.weights, k - 1, k - 1)


class CouplingNet(Module):
    """Three-layer conv net emitting a shift and a bounded log-scale.

    conv k x k -> ReLU -> conv 1x1 -> ReLU -> conv k x k (zero-initialized)
    producing 2 * c_out channels; the raw scale half passes through
    scale_bound * tanh so the log-scale stays bounded.  Zero output at
    initialization makes the owning coupling layer start as the identity.
    """

    def __init__(self, c_in, c_out, hidden=64, rng=None, scale_bound=2.0,
                 k=3, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        self.c_out = c_out
        self.scale_bound = scale_bound
        self.add_child("conv_in", PlainConv(c_in, hidden, k, rng, dtype=dtype))
        self.add_child("conv_mid", PlainConv(hidden, hidden, 1, rng, dtype=dtype))
        self.add_child("conv_out", PlainConv(hidden, 2 * c_out, k, zero_init=True, dtype=dtype))

    def forward(self, x):
        h1 = self.children["conv_in"].forward(x)
        h2 = self.children["conv_mid"].forward(np.maximum(h1, 0.0))
        out = self.children["conv_out"].forward(np.maximum(h2, 0.0))
        shift = out[..., :self.c_out]
        logscale = self.scale_bound * np.tanh(out[..., self.c_out:])
        return shift, logscale

    def backward(self, x, grad_shift, grad_logscale):
        conv_in = self.children["conv_in"]
        conv_mid = self.children["conv_mid"]
        conv_out = self.children["conv_out"]
        h1 = conv_in.forward(x)
        a1 = np.maximum(h1, 0.0)
        h2 = conv_mid.forward(a1)
        a2 = np.maximum(h2, 0.0)
        raw = conv_out.forward(a2)[..., self.c_out:]
        t = np.tanh(raw)
        grad_out = np.concatenate(
            [grad_shift, grad_logscale * self.scale_bound * (1.0 - t * t)], axis=-1
        )
        ga2 = conv_out.backward(a2, grad_out)
        ga1 = conv_mid.backward(a1, ga2 * (h2 > 0.0))
        return conv_in.backward(x, ga1 * (h1 > 0.0))


def _coupling_transform(x2, shift, logscale):
    return (x2 + shift) * np.exp(logscale)


class AffineCoupling(Module):
    """y1 = x1, y2 = (x2 + f(x1)) * exp(g(x1)) with (f, g) one CouplingNet.

    The log-determinant is the sum of g over positions; the inverse
    re-evaluates the net on the untouched half.
    """

    def __init__(self, channels, hidden=64, rng=None, scale_bound=2.0,
                 k=3, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        if channels % 2 != 0:
            raise ShapeError(f"affine coupling needs even channels, got {channels}")
        self.channels = channels
        self.half = channels // 2
        self.add_child(
            "net", CouplingNet(self.half, channels - self.half, hidden, rng, scale_bound, k, dtype)
        )

    def forward(self, x):
        x1, x2 = x[..., :self.half], x[..., self.half:]
        shift, logscale = self.children["net"].forward(x1)
        y2 = _coupling_transform(x2, shift, logscale)
        return np.concatenate([x1, y2], axis=-1), _sum_per_sample(logscale)

    def inverse(self, y):
        y1, y2 = y[..., :self.half], y[..., self.half:]
        shift, logscale = self.children["net"].forward(y1)
        x2 = y2 * np.exp(-logscale) - shift
        return np.concatenate([y1, x2], axis=-1)

    def backward(self, x, grad_y, grad_logdet):
        x1, x2 = x[..., :self.half], x[..., self.half:]
        gy1, gy2 = grad_y[..., :self.half], grad_y[..., self.half:]
        net = self.children["net"]
        shift, logscale = net.forward(x1)
        eg = np.exp(logscale)
        y2 = (x2 + shift) * eg
        grad_shift = gy2 * eg
        grad_logscale = gy2 * y2 + grad_logdet[:, None, None, None]
        gx1 = gy1 + net.backward(x1, grad_shift, grad_logscale)
        return np.concatenate([gx1, gy2 * eg], axis=-1)


class QuadCoupling(Module):
    """Four-block autoregressive coupling.

    The channels are split into quarters; x1 passes through unchanged and
    each later block is shifted and scaled by a net of all earlier blocks:

        y1 = x1
        y2 = (x2 + f1(x1))         * exp(g1(x1))
        y3 = (x3 + f2(x1, x2))     * exp(g2(x1, x2))
        y4 = (x4 + f3(x1, x2, x3)) * exp(g3(x1, x2, x3))

    Inversion recovers x2, x3, x4 sequentially; the log-determinant is the
    sum of g1, g2, g3 over positions.
    """

    def __init__(self, channels, hidden=64, rng=None, scale_bound=2.0,
                 k=3, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        if channels % 4 != 0:
            raise ShapeError(f"quad coupling needs channels divisible by 4, got {channels}")
        self.channels = channels
        self.quarter = channels // 4
        for i in (1, 2, 3):
            self.add_child(
                f"net{i}",
                CouplingNet(i * self.quarter, self.quarter, hidden, rng, scale_bound, k, dtype),
            )

    def _blocks(self, x):
        return [x[..., i * self.quarter:(i + 1) * self.quarter] for i in range(4)]

    def forward(self, x):
        x1, x2, x3, x4 = self._blocks(x)
        logdet = 0.0
        ys = [x1]
        prefix = x1
        for i, match in ((1, x2), (2, x3), (3, x4)):
            shift, logscale = self.children[f"net{i}"].forward(prefix)
            ys.append(_coupling_transform(match, shift, logscale))
            logdet = logdet + _sum_per_sample(logscale)
            if i < 3:
                prefix = np.concatenate([prefix, match], axis=-1)
        return np.concatenate(ys, axis=-1), logdet

    def inverse(self, y):
        y1, y2, y3, y4 = self._blocks(y)
        xs = [y1]
        prefix = y1
        for i, yi in ((1, y2), (2, y3), (3, y4)):
            shift, logscale = self.children[f"net{i}"].forward(prefix)
            xi = yi * np.exp(-logscale) - shift
            xs.append(xi)
            if i < 3:
                prefix = np.concatenate([prefix, xi], axis=-1)
        return np.concatenate(xs, axis=-1)

    def backward(self, x, grad_y, grad_logdet):
        q = self.quarter
        xs = self._blocks(x)
        gys = [grad_y[..., i * q:(i + 1) * q] for i in range(4)]
        # recompute the per-block nets on the original inputs
        prefixes = [xs[0], np.concatenate(xs[:2], axis=-1), np.concatenate(xs[:3], axis=-1)]
        acc = [np.zeros_like(xs[i]) for i in range(3)]  # grads flowing into x1..x3 via the nets
        gxs = [None] * 4
        for i in (3, 2, 1):
            net = self.children[f"net{i}"]
            prefix = prefixes[i - 1]
            shift, logscale = net.forward(prefix)
            eg = np.exp(logscale)
            yi = (xs[i] + shift) * eg
            # dL/dx_i = dL/dy_i * exp(g) plus what later nets sent back
            gxs[i] = gys[i] * eg + (acc[i] if i < 3 else 0.0)
            grad_in = net.backward(prefix, gys[i] * eg, gys[i] * yi + grad_logdet[:, None, None, None])
            for j in range(i):
                acc[j] += grad_in[..., j * q:(j + 1) * q]
        gxs[0] = gys[0] + acc[0]
        return np.concatenate(gxs, axis=-1)


class Squeeze(Module):
    """2x2 space-to-depth: each input channel expands into four adjacent
    output channels ordered top-left, top-right, bottom-left, bottom-right.
    A pure permutation, so the log-determinant is zero."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)

    def forward(self, x):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"squeeze needs even spatial dims, got {h}x{w}")
        y = x.reshape(n, h // 2, 2, w // 2, 2, c)
        y = y.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, 4 * c)
        return y, np.zeros(n)

    def inverse(self, y):
        n, h, w, c4 = y.shape
        if c4 % 4:
            raise ShapeError(f"unsqueeze needs channels divisible by 4, got {c4}")
        c = c4 // 4
        x = y.reshape(n, h, w, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return x.reshape(n, 2 * h, 2 * w, c)

    def backward(self, x, grad_y, grad_logdet):
        return self.inverse(grad_y)


class Split(Module):
    """Factor out half the channels under a learned conditional Gaussian.

    forward(x) -> (kept half, factored z, per-sample log-density of z
    under N(mu, sigma^2) with (mu, log sigma) from a zero-initialized
    convolution of the kept half).  At initialization the conditional
    prior is exactly standard normal.  The channel rearrangement itself
    has zero log-determinant.
    """

    def __init__(self, channels, rng=None, k=3, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        if channels % 2 != 0:
            raise ShapeError(f"split needs even channels, got {channels}")
        self.channels = channels
        self.half = channels // 2
        self.add_child("prior", PlainConv(self.half, channels, k, zero_init=True, dtype=dtype))

    def _prior_params(self, kept):
        out = self.children["prior"].forward(kept)
        return out[..., :self.half], out[..., self.half:]

    def forward(self, x):
        kept, z = x[..., :self.half], x[..., self.half:]
        mu, logsigma = self._prior_params(kept)
        logp = _sum_per_sample(gaussian_logp(z, mu, logsigma))
        return kept, z, logp

    def inverse(self, kept, z=None, temperature=1.0, rng=None):
        mu, logsigma = self._prior_params(kept)
        if z is None:
            eps = rng.standard_normal(mu.shape)
            z = mu + np.exp(logsigma) * temperature * eps
        return np.concatenate([kept, z], axis=-1)

    def backward(self, x, grad_kept, grad_logp):
        kept, z = x[..., :self.half], x[..., self.half:]
        mu, logsigma = self._prior_params(kept)
        inv_var = np.exp(-2.0 * logsigma)
        resid = z - mu
        glp = grad_logp[:, None, None, None]
        gz = glp * (-resid * inv_var)
        gmu = glp * (resid * inv_var)
        glogsigma = glp * (resid * resid * inv_var - 1.0)
        gkept = grad_kept + self.children["prior"].backward(
            kept, np.concatenate([gmu, glogsigma], axis=-1)
        )
        return np.concatenate([gkept, gz], axis=-1)


def gaussian_logp(z, mu, logsigma):
    """Elementwise log N(z; mu, exp(logsigma)^2)."""
    return -0.5 * LOG_2PI - logsigma - 0.5 * (z - mu) ** 2 * np.exp(-2.0 * logsigma)


def standard_normal_logp(z):
    """Per-sample log-density of z under N(0, I)."""
    return _sum_per_sample(-0.5 * LOG_2PI - 0.5 * z * z)
