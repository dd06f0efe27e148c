"""Multi-scale flow model: likelihood, sampling, checkpoints.

The model stacks L levels.  Each level optionally squeezes 2x2 blocks into
channels, runs D flow steps (actnorm -> invertible convolution -> coupling),
and, on every level but the last, factors out half the channels under a
learned conditional Gaussian prior.  The remaining tensor is scored under a
standard normal.  log p(x) is the sum of all prior terms plus every layer's
log-determinant; sampling runs the whole stack backwards, inverting the
convolutions by back substitution.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .core import PadflowError, ShapeError, as_batch
from .layers import (
    ActNorm,
    AffineCoupling,
    InvConv,
    Module,
    QuadCoupling,
    Split,
    Squeeze,
    standard_normal_logp,
)
from .tensorio import TensorFormatError, read_tensor_from, tensor_bytes

COUPLINGS = ("quad", "affine", "none")

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    height: int
    width: int
    channels: int
    levels: int = 2
    depth: int = 4
    coupling: str = "quad"
    hidden: int = 64
    kernel_size: int = 3
    scale_bound: float = 2.0
    squeeze: bool = True
    init: str = "random"  # "random" starts near identity; "identity" exactly
    dtype: str = "float64"


def _coupling_layer(kind, channels, config, rng, dtype):
    if kind == "affine":
        return AffineCoupling(channels, config.hidden, rng, config.scale_bound,
                              config.kernel_size, dtype)
    if kind == "quad":
        return QuadCoupling(channels, config.hidden, rng, config.scale_bound,
                            config.kernel_size, dtype)
    raise ValueError(f"unknown coupling kind {kind!r}")


class FlowModel(Module):
    """Invertible map between images (N, H, W, C) and latent parts."""

    def __init__(self, config, rng=None):
        super().__init__(np.dtype(config.dtype))
        if config.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}, got {config.coupling!r}")
        if config.init not in ("random", "identity"):
            raise ValueError(f"init must be 'random' or 'identity', got {config.init!r}")
        if config.levels < 1 or config.depth < 1:
            raise ValueError("levels and depth must be positive")
        identity = config.init == "identity"
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.flow = []
        self.latent_shapes = []
        h, w, c = config.height, config.width, config.channels
        for lvl in range(config.levels):
            level = {"squeeze": None, "steps": [], "split": None}
            if config.squeeze:
                if h % 2 or w % 2:
                    raise ShapeError(
                        f"level {lvl}: spatial dims {h}x{w} not divisible by 2"
                    )
                h, w, c = h // 2, w // 2, 4 * c
                level["squeeze"] = self.add_child(f"level{lvl}/squeeze", Squeeze(self.dtype))
            if config.coupling == "quad" and c % 4:
                raise ShapeError(f"level {lvl}: {c} channels not divisible by 4")
            if config.coupling == "affine" and c % 2:
                raise ShapeError(f"level {lvl}: {c} channels not even")
            for d in range(config.depth):
                prefix = f"level{lvl}/step{d}"
                norm = ActNorm(c, self.dtype)
                if identity:
                    norm.mark_initialized()
                level["steps"].append(self.add_child(f"{prefix}/actnorm", norm))
                level["steps"].append(self.add_child(
                    f"{prefix}/conv",
                    InvConv(c, config.kernel_size, rng, identity=identity, dtype=self.dtype),
                ))
                if config.coupling != "none":
                    level["steps"].append(self.add_child(
                        f"{prefix}/coupling",
                        _coupling_layer(config.coupling, c, config, rng, self.dtype),
                    ))
            if lvl < config.levels - 1:
                if c % 2:
                    raise ShapeError(f"level {lvl}: cannot split {c} channels")
                level["split"] = self.add_child(
                    f"level{lvl}/split", Split(c, k=config.kernel_size, dtype=self.dtype)
                )
                self.latent_shapes.append((h, w, c - c // 2))
                c = c // 2
            self.flow.append(level)
        self.final_shape = (h, w, c)
        self.latent_shapes.append(self.final_shape)

    # --- likelihood ------------------------------------------------------

    def _check_input(self, x):
        x4, batched = as_batch(np.asarray(x, dtype=self.dtype))
        expected = (self.config.height, self.config.width, self.config.channels)
        if x4.shape[1:] != expected:
            raise ShapeError(f"model expects images of shape {expected}, got {x4.shape[1:]}")
        return x4, batched

    def logprob(self, x, trace=None):
        """log p(x) per sample, and the latent parts [z_0, ..., z_final].

        When ``trace`` is a list, (kind, layer, input) records are appended
        for :meth:`logprob_backward`.
        """
        x4, batched = self._check_input(x)
        record = trace.append if trace is not None else (lambda item: None)
        logp = np.zeros(x4.shape[0], dtype=self.dtype)
        zs = []
        h = x4
        for level in self.flow:
            if level["squeeze"] is not None:
                record(("layer", level["squeeze"], h))
                h, _ = level["squeeze"].forward(h)
            for layer in level["steps"]:
                record(("layer", layer, h))
                h, logdet = layer.forward(h)
                logp += logdet
            if level["split"] is not None:
                record(("split", level["split"], h))
                h, z, prior_logp = level["split"].forward(h)
                logp += prior_logp
                zs.append(z)
        record(("prior", None, h))
        logp += standard_normal_logp(h)
        zs.append(h)
        if not batched:
            return float(logp[0]), [z[0] for z in zs]
        return logp, zs

    def logprob_backward(self, trace, grad_logp):
        """Propagate dL/dlogp_n backwards; returns dL/dx and fills grads."""
        grad_logp = np.asarray(grad_logp, dtype=self.dtype)
        g = None
        for kind, layer, x_in in reversed(trace):
            if kind == "prior":
                g = grad_logp[:, None, None, None] * (-x_in)
            elif kind == "split":
                g = layer.backward(x_in, g, grad_logp)
            else:
                g = layer.backward(x_in, g, grad_logp)
        return g

    def nll_and_grads(self, x):
        """Mean NLL of a batch and its exact parameter gradients."""
        self.zero_grads()
        trace = []
        logp, _ = self.logprob(x, trace)
        n = x.shape[0] if np.ndim(x) == 4 else 1
        self.logprob_backward(trace, np.full(n, -1.0 / n, dtype=self.dtype))
        return float(-np.mean(logp))

    # --- initialization ---------------------------------------------------

    def initialize(self, batch):
        """Data-dependent actnorm initialization on one batch."""
        x4, _ = self._check_input(batch)
        h = x4
        for level in self.flow:
            if level["squeeze"] is not None:
                h, _ = level["squeeze"].forward(h)
            for layer in level["steps"]:
                if isinstance(layer, ActNorm) and not layer.initialized:
                    layer.initialize(h)
                h, _ = layer.forward(h)
            if level["split"] is not None:
                h, _, _ = level["split"].forward(h)
        return self

    # --- inversion and sampling -------------------------------------------

    def inverse(self, zs):
        """Reconstruct x from stored latent parts (exact inverse of logprob)."""
        zs = [np.asarray(z, dtype=self.dtype) for z in zs]
        if len(zs) != len(self.latent_shapes):
            raise ShapeError(f"expected {len(self.latent_shapes)} latent parts, got {len(zs)}")
        batched = zs[-1].ndim == 4
        zs = [as_batch(z)[0] for z in zs]
        h = zs[-1]
        idx = len(zs) - 2
        for level in reversed(self.flow):
            if level["split"] is not None:
                h = level["split"].inverse(h, z=zs[idx])
                idx -= 1
            for layer in reversed(level["steps"]):
                h = layer.inverse(h)
            if level["squeeze"] is not None:
                h = level["squeeze"].inverse(h)
        return h if batched else h[0]

    def sample(self, n, temperature=1.0, rng=None):
        """Draw n images by sampling every prior at the given temperature
        and running the stack backwards."""
        if rng is None:
            rng = np.random.default_rng()
        h = temperature * rng.standard_normal((n, *self.final_shape))
        h = h.astype(self.dtype)
        for level in reversed(self.flow):
            if level["split"] is not None:
                h = level["split"].inverse(h, z=None, temperature=temperature, rng=rng)
            for layer in reversed(level["steps"]):
                h = layer.inverse(h)
            if level["squeeze"] is not None:
                h = level["squeeze"].inverse(h)
        return h


def bits_per_dim(logp, dims):
    """Convert nats of log-density on [0, 1)^dims into bits per dimension
    of the underlying 8-bit data: (-logp + dims*ln 256) / (dims*ln 2)."""
    logp = np.asarray(logp, dtype=np.float64)
    return (-logp + dims * np.log(256.0)) / (dims * np.log(2.0))


# --- checkpoints ---------------------------------------------------------

def save_model(path, model):
    """Write config, every parameter, and every buffer; byte-exact to reload."""
    params = list(model.named_params())
    buffers = list(model.named_buffers())
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": [name for name, _ in params],
        "buffers": [name for name, _ in buffers],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, value in params + buffers:
            f.write(tensor_bytes(value))


def load_model(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise TensorFormatError(f"{path}: not a model checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise TensorFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12:12 + header_len])
        config = ModelConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise TensorFormatError(f"{path}: malformed checkpoint header") from exc
    model = FlowModel(config)
    offset = 12 + header_len
    try:
        for name in header["params"]:
            value, offset = read_tensor_from(buf, offset)
            model.set_param(name, value)
        for name in header["buffers"]:
            value, offset = read_tensor_from(buf, offset)
            model.set_buffer(name, value)
    except (KeyError, ShapeError) as exc:
        raise TensorFormatError(f"{path}: checkpoint does not match its config") from exc
    if offset != len(buf):
        raise TensorFormatError(f"{path}: trailing bytes in checkpoint")
    return model
