"""Maximum-likelihood training with exact analytic gradients.

The objective is the mean negative log-likelihood of dequantized 8-bit
data.  Every gradient comes from the layers' hand-written backward passes;
the finite-difference helpers here exist to verify them, never to train.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_DTYPE, PadflowError
from .model import bits_per_dim, save_model


class DivergenceError(PadflowError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(PadflowError):
    """A run configuration file is missing, malformed, or has unknown keys."""


# every recognized key with its default; values are parsed on demand
CONFIG_DEFAULTS = {
    # dataset
    "dataset": "checkerboard",
    "height": "8",
    "width": "8",
    "channels": "1",
    "dataset_size": "512",
    "data_seed": "7",
    "cell": "2",
    "low": "64",
    "high": "192",
    "mean": "128.0",
    "std": "32.0",
    "image_dir": "",
    # model
    "levels": "2",
    "depth": "4",
    "coupling": "quad",
    "hidden": "64",
    "kernel_size": "3",
    "scale_bound": "2.0",
    "squeeze": "1",
    "dtype": "float64",
    # training
    "epochs": "10",
    "batch_size": "64",
    "lr": "0.001",
    "seed": "0",
    "clip_norm": "50.0",
    "log_timing": "1",
    # outputs
    "checkpoint": "model.ckpt",
    "metrics": "metrics.csv",
}


def parse_config(path):
    """Read a line-oriented key=value file; '#' starts a comment.

    Unknown keys are rejected, missing keys fall back to CONFIG_DEFAULTS.
    """
    merged = dict(CONFIG_DEFAULTS)
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        merged[key] = value
    return merged


def _as_bool(value):
    return value.strip().lower() not in ("0", "false", "no", "")


def dataset_spec_from(cfg):
    from .datasets import DatasetSpec

    return DatasetSpec(
        kind=cfg["dataset"],
        height=int(cfg["height"]),
        width=int(cfg["width"]),
        channels=int(cfg["channels"]),
        size=int(cfg["dataset_size"]),
        seed=int(cfg["data_seed"]),
        cell=int(cfg["cell"]),
        low=int(cfg["low"]),
        high=int(cfg["high"]),
        mean=float(cfg["mean"]),
        std=float(cfg["std"]),
        image_dir=cfg["image_dir"],
    )


def model_config_from(cfg):
    from .model import ModelConfig

    return ModelConfig(
        height=int(cfg["height"]),
        width=int(cfg["width"]),
        channels=int(cfg["channels"]),
        levels=int(cfg["levels"]),
        depth=int(cfg["depth"]),
        coupling=cfg["coupling"],
        hidden=int(cfg["hidden"]),
        kernel_size=int(cfg["kernel_size"]),
        scale_bound=float(cfg["scale_bound"]),
        squeeze=_as_bool(cfg["squeeze"]),
        dtype=cfg["dtype"],
    )


def train_config_from(cfg, seed=None):
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        seed=int(cfg["seed"]) if seed is None else seed,
        clip_norm=float(cfg["clip_norm"]),
        log_timing=_as_bool(cfg["log_timing"]),
    )


def dequantize(pixels, rng, dtype=DEFAULT_DTYPE):
    """Map 8-bit values v to (v + u) / 256 with u ~ U[0, 1)."""
    pixels = np.asarray(pixels)
    if not np.issubdtype(pixels.dtype, np.integer):
        raise PadflowError(f"expected integer pixels, got dtype {pixels.dtype}")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise PadflowError("pixel values must lie in 0..255")
    u = rng.random(pixels.shape)
    return ((pixels + u) / 256.0).astype(dtype)


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over a model's
    named parameters."""

    def __init__(self, model, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, p in model.named_params()}

    def step(self, model):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        params = dict(model.named_params())
        for name, g in model.named_grads():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def global_grad_norm(model):
    total = 0.0
    for _, g in model.named_grads():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_gradients(model, max_norm):
    """Scale all gradients so their global norm is at most max_norm."""
    norm = global_grad_norm(model)
    if norm > max_norm:
        factor = max_norm / norm
        for _, g in model.named_grads():
            g *= factor
    return norm


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0
    clip_norm: float = 50.0
    log_timing: bool = True


@dataclass
class TrainResult:
    epoch0_nll: float
    epoch0_bpd: float
    rows: list  # one dict per epoch: epoch, nll, bpd, wall_s, grad_norm

    @property
    def final_bpd(self):
        return self.rows[-1]["bpd"]


def evaluate(model, data, seed, batch_size=256):
    """Mean NLL (nats/image) and bpd over a dataset, seeded dequantization."""
    rng = np.random.default_rng(seed)
    dims = int(np.prod(data.shape[1:]))
    total = 0.0
    for start in range(0, len(data), batch_size):
        batch = dequantize(data[start:start + batch_size], rng, model.dtype)
        logp, _ = model.logprob(batch)
        total += float(np.sum(logp))
    nll = -total / len(data)
    return nll, float(bits_per_dim(-nll, dims))


def train(model, data, config, metrics_path=None, checkpoint_path=None):
    """Maximize dataset likelihood; logs one evaluation row per epoch.

    Actnorms are data-initialized on the first batch when needed.  Metrics
    rows go to ``metrics_path`` as CSV (epoch, nll, bpd, wall_s, grad_norm);
    a checkpoint is written after every epoch, so a divergence leaves the
    last good epoch on disk before DivergenceError propagates.
    """
    rng = np.random.default_rng(config.seed)
    eval_seed = config.seed + 1  # fixed, shared with post-hoc evaluation
    dims = int(np.prod(data.shape[1:]))
    needs_init = any(
        not layer.initialized
        for _, layer in model.children.items()
        if hasattr(layer, "initialized")
    )
    if needs_init:
        first = dequantize(data[:config.batch_size], np.random.default_rng(config.seed), model.dtype)
        model.initialize(first)
    epoch0_nll, epoch0_bpd = evaluate(model, data, eval_seed)
    rows = []
    writer = _MetricsWriter(metrics_path) if metrics_path else None
    opt = Adam(model, lr=config.lr)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(data))
        norms = []
        for start in range(0, len(data), config.batch_size):
            batch = dequantize(data[order[start:start + config.batch_size]], rng, model.dtype)
            nll = model.nll_and_grads(batch)
            if not np.isfinite(nll):
                if writer:
                    writer.close()
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            norms.append(clip_gradients(model, config.clip_norm))
            opt.step(model)
        nll, bpd = evaluate(model, data, eval_seed)
        wall = time.perf_counter() - started if config.log_timing else 0.0
        row = {
            "epoch": epoch,
            "nll": nll,
            "bpd": bpd,
            "wall_s": wall,
            "grad_norm": float(np.mean(norms)),
        }
        rows.append(row)
        if writer:
            writer.write(row)
        if checkpoint_path:
            save_model(checkpoint_path, model)
    if writer:
        writer.close()
    return TrainResult(epoch0_nll, epoch0_bpd, rows)


class _MetricsWriter:
    FIELDS = ("epoch", "nll", "bpd", "wall_s", "grad_norm")

    def __init__(self, path):
        self.file = open(path, "w", newline="")
        self.writer = csv.writer(self.file)
        self.writer.writerow(self.FIELDS)

    def write(self, row):
        self.writer.writerow([
            row["epoch"],
            f"{row['nll']:.9f}",
            f"{row['bpd']:.9f}",
            f"{row['wall_s']:.6f}",
            f"{row['grad_norm']:.9f}",
        ])
        self.file.flush()

    def close(self):
        self.file.close()


# --- finite-difference verification --------------------------------------

def fd_jacobian(f, x, step=1e-5):
    """Dense Jacobian of a map between flattened tensors, by central
    differences.  Verification only: O(input size) function calls."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for q in range(flat.size):
        bump = np.zeros_like(flat)
        bump[q] = step
        yp = np.asarray(f((flat + bump).reshape(x.shape)))
        ym = np.asarray(f((flat - bump).reshape(x.shape)))
        cols.append((yp - ym).reshape(-1) / (2.0 * step))
    return np.stack(cols, axis=1)


def fd_logdet(f, x, step=1e-5):
    """log|det| of a square map's Jacobian at x, by finite differences."""
    jac = fd_jacobian(f, x, step)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0.0:
        raise PadflowError("finite-difference Jacobian is singular")
    return logabs


def fd_param_gradients(model, batch, step=1e-5):
    """Central finite differences of the mean NLL for every parameter."""
    def loss():
        logp, _ = model.logprob(batch)
        return float(-np.mean(logp))

    out = {}
    for name, p in model.named_params():
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for q in range(flat_p.size):
            orig = flat_p[q]
            flat_p[q] = orig + step
            lp = loss()
            flat_p[q] = orig - step
            lm = loss()
            flat_p[q] = orig
            flat_g[q] = (lp - lm) / (2.0 * step)
        out[name] = g
    return out


def gradient_errors(analytic, numeric, floor=1e-3):
    """Per-array relative error between two gradient dictionaries.

    The error of an array is max|a - f| scaled by the larger of the two
    gradient magnitudes (with a small floor so an all-zero gradient pair
    compares by absolute error).
    """
    errs = {}
    for name, a in analytic.items():
        f = numeric[name]
        scale = max(float(np.abs(a).max(initial=0.0)),
                    float(np.abs(f).max(initial=0.0)), floor)
        errs[name] = float(np.abs(a - f).max(initial=0.0)) / scale
    return errs
