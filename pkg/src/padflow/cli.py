"""Command-line interface: train, sample, eval, check, bench."""

import argparse
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as benchmod
from .core import PadflowError
from .datasets import generate
from .invconv import conv_logdet, is_invertible
from .model import FlowModel, load_model
from .oracle import MAX_DENSE_DIM, build_matrix, check_triangular, dense_slogdet
from .tensorio import load_kernel, save_tensor, write_image
from .training import (
    ConfigError,
    DivergenceError,
    dataset_spec_from,
    evaluate,
    model_config_from,
    parse_config,
    train,
    train_config_from,
)


def cmd_train(args):
    cfg = parse_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg["seed"])
    data = generate(dataset_spec_from(cfg))
    model = FlowModel(model_config_from(cfg), np.random.default_rng(seed))
    result = train(
        model,
        data,
        train_config_from(cfg, seed=seed),
        metrics_path=cfg["metrics"],
        checkpoint_path=cfg["checkpoint"],
    )
    print(f"epoch 0: bpd {result.epoch0_bpd:.4f}")
    print(f"epoch {len(result.rows)}: bpd {result.final_bpd:.4f}")
    print(f"checkpoint written to {cfg['checkpoint']}, metrics to {cfg['metrics']}")
    return 0


def cmd_sample(args):
    model = load_model(args.checkpoint)
    channels = model.config.channels
    if channels not in (1, 3):
        raise PadflowError(f"can only emit PGM/PPM for 1 or 3 channels, model has {channels}")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    start = time.perf_counter()
    images = model.sample(args.n, temperature=args.temperature, rng=rng)
    elapsed = time.perf_counter() - start
    ext = "pgm" if channels == 1 else "ppm"
    for idx in range(args.n):
        pixels = np.clip(np.rint(256.0 * images[idx]), 0, 255).astype(np.uint8)
        write_image(os.path.join(args.out, f"sample_{idx:04d}.{ext}"), pixels)
    print(f"sampled {args.n} images in {elapsed:.3f} s")
    return 0


def cmd_eval(args):
    model = load_model(args.checkpoint)
    cfg = parse_config(args.config)
    data = generate(dataset_spec_from(cfg))
    seed = args.seed if args.seed is not None else int(cfg["seed"]) + 1
    nll, bpd = evaluate(model, data, seed)
    print(f"bpd {bpd:.9f} (nll {nll:.6f} nats/image, {len(data)} images)")
    return 0


def cmd_check(args):
    kernel = load_kernel(args.kernel)
    diag = np.abs(np.diag(kernel.diag_tap))
    print(f"kernel: k={kernel.k} C={kernel.channels} variant={kernel.variant}")
    print(f"diagonal tap |entries|: {np.array2string(diag, precision=6)} (min {diag.min():.6g})")
    report = is_invertible(kernel, tol=args.tol)
    if report:
        per_pixel = conv_logdet(kernel, 1, 1)
        print(f"verdict: invertible; logdet/pixel = {per_pixel:.6g}")
    else:
        print(f"verdict: singular: {report.reason}")
    h = w = args.size
    n = h * w * kernel.channels
    if n <= MAX_DENSE_DIM:
        m = build_matrix(kernel, h, w)
        tri = check_triangular(m, kernel.variant, kernel.channels)
        state = "pass" if tri else f"fail at {tri.violation}"
        print(f"oracle ({h}x{w} image, n={n}): {kernel.variant}-triangular {state}")
        sign, logabs = dense_slogdet(m)
        if report:
            print(f"oracle log|det| = {logabs:.6g}, closed form = {conv_logdet(kernel, h, w):.6g}")
        else:
            print(f"oracle det = {sign * np.exp(logabs):.3g} (~0 expected)")
        if args.dump:
            save_tensor(args.dump, m.matrix)
            print(f"dense matrix written to {args.dump}")
    return 0


def _parse_sizes(text):
    sizes = []
    for part in text.split(","):
        dims = part.lower().split("x")
        if len(dims) != 3:
            raise PadflowError(f"bad size {part!r}; expected HxWxC")
        sizes.append(tuple(int(d) for d in dims))
    return tuple(sizes)


def cmd_bench(args):
    report = benchmod.run_benchmark(
        sizes=_parse_sizes(args.sizes),
        repetitions=args.repetitions,
        batch=args.batch,
        seed=args.seed if args.seed is not None else 0,
        threads=args.threads,
    )
    print(benchmod.format_table(report))
    if args.out:
        benchmod.write_csv(report, args.out)
        print(f"csv written to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="padflow",
        description="Normalizing flows on single-pass invertible padded convolutions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", default="samples")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="mean bits/dim of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help="config file describing the dataset")
    p.add_argument("--seed", type=int, default=None, help="dequantization seed")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="invertibility report for a kernel fixture")
    p.add_argument("kernel")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--size", type=int, default=4, help="image side for the oracle cross-check")
    p.add_argument("--dump", default=None, help="write the dense matrix to this path")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="time the inversion strategies")
    p.add_argument("--sizes", default="16x16x4,32x32x12")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="write the report as CSV")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", 1)
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PadflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
