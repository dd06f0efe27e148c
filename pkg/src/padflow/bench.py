"""CPU benchmark of inversion strategies.

For each size, one batch of latents is drawn once (hash-logged) and every
method inverts exactly those tensors, so the timings are comparable; the
shared draw is excluded from the timed region.  The first repetition of
each method is a discarded warm-up.  The single-pass padded convolution
needs one back substitution per image, the two-pass baseline needs two,
and both run through the same solver routine, so their ratio isolates the
cost of the extra pass.
"""

import hashlib
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .invconv import (
    conv_inverse,
    emerging_inverse,
    random_emerging_pair,
    random_invertible_kernel,
)
from .oracle import MAX_DENSE_DIM, build_matrix, dense_solve

DEFAULT_SIZES = ((16, 16, 4), (32, 32, 12))
METHODS = ("ours-masked", "ours-block", "emerging", "conv1x1", "dense-solve")


@dataclass(frozen=True)
class BenchRow:
    method: str
    height: int
    width: int
    channels: int
    mean_s: float
    std_s: float
    min_s: float
    ratio_vs_ours: float  # of per-method minima, the stable cost estimate


@dataclass
class BenchReport:
    rows: list
    repetitions: int
    batch: int
    input_hashes: dict  # (H, W, C) -> sha256 of the shared input batch

    def ratio(self, method, size):
        for row in self.rows:
            if row.method == method and (row.height, row.width, row.channels) == size:
                return row.ratio_vs_ours
        raise KeyError((method, size))

    def mean(self, method, size):
        for row in self.rows:
            if row.method == method and (row.height, row.width, row.channels) == size:
                return row.mean_s
        raise KeyError((method, size))


def _time_methods(methods, y, repetitions):
    """Interleave the methods round-robin so background load drift hits
    every method alike; one discarded warm-up call each.

    Means and standard deviations describe the observed repetitions; the
    minimum is the intrinsic-cost estimate (scheduler preemption only ever
    adds time), so ratios are taken over minima.
    """
    samples = {name: [] for name in methods}
    for fn in methods.values():
        fn(y)
    for _ in range(repetitions):
        for name, fn in methods.items():
            start = time.perf_counter()
            fn(y)
            samples[name].append(time.perf_counter() - start)
    return {
        name: (float(np.mean(ts)), float(np.std(ts)), float(np.min(ts)))
        for name, ts in samples.items()
    }


def run_benchmark(sizes=DEFAULT_SIZES, repetitions=5, batch=100, seed=0,
                  kernel_size=3, threads=1):
    """Time each inversion method on a shared batch of latents per size.

    Runs under a BLAS thread limit (default one thread): the per-pixel
    solves are far too small for multithreaded kernels, which only add
    scheduling noise.
    """
    if repetitions < 5:
        raise ValueError("need at least 5 repetitions")
    rng = np.random.default_rng(seed)
    rows = []
    hashes = {}
    for h, w, c in sizes:
        y = rng.standard_normal((batch, h, w, c))
        hashes[(h, w, c)] = hashlib.sha256(y.tobytes()).hexdigest()
        masked = random_invertible_kernel(rng, kernel_size, c, "masked")
        block = random_invertible_kernel(rng, kernel_size, c, "block")
        k1, k2 = random_emerging_pair(rng, kernel_size, c)
        q, r = np.linalg.qr(rng.normal(size=(c, c)))
        w1x1_inv = np.linalg.inv(q * np.sign(np.diag(r)))

        methods = {
            "ours-masked": lambda t: conv_inverse(t, masked),
            "ours-block": lambda t: conv_inverse(t, block),
            "emerging": lambda t: emerging_inverse(t, k1, k2),
            "conv1x1": lambda t: t @ w1x1_inv.T,
        }
        if h * w * c <= MAX_DENSE_DIM:
            m = build_matrix(masked, h, w).matrix
            methods["dense-solve"] = lambda t: dense_solve(
                m, t.reshape(batch, -1).T
            ).T.reshape(t.shape)

        with threadpool_limits(limits=threads):
            timings = _time_methods(methods, y, repetitions)
        ours_min = timings["ours-masked"][2]
        for name in METHODS:
            if name not in timings:
                continue
            mean_s, std_s, min_s = timings[name]
            rows.append(BenchRow(name, h, w, c, mean_s, std_s, min_s, min_s / ours_min))
    return BenchReport(rows, repetitions, batch, hashes)


def write_csv(report, path):
    with open(path, "w") as f:
        f.write("method,H,W,C,mean_s,std_s,ratio_vs_ours\n")
        for r in report.rows:
            f.write(f"{r.method},{r.height},{r.width},{r.channels},"
                    f"{r.mean_s:.6f},{r.std_s:.6f},{r.ratio_vs_ours:.4f}\n")


def format_table(report):
    lines = [
        f"batch={report.batch} images, {report.repetitions} repetitions"
        " (plus one discarded warm-up); ratio over per-method minima",
        f"{'method':<12} {'size':<10} {'mean_s':>10} {'std_s':>10} {'min_s':>10} {'ratio':>8}",
    ]
    for r in report.rows:
        size = f"{r.height}x{r.width}x{r.channels}"
        lines.append(f"{r.method:<12} {size:<10} {r.mean_s:>10.4f} "
                     f"{r.std_s:>10.4f} {r.min_s:>10.4f} {r.ratio_vs_ours:>8.2f}")
    for size, digest in report.input_hashes.items():
        lines.append(f"inputs {size[0]}x{size[1]}x{size[2]} sha256={digest[:16]}")
    return "\n".join(lines)
