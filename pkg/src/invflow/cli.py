"""``invflow`` command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or file-format error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import bench
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .errors import ArgumentError, DimensionError, FormatError, NonFiniteError
from .model import FlowModel, ModelConfig
from .oracle import run_oracle_check
from .pnm import tile, to_uint8, write_pnm
from .train import Trainer, TrainConfig, csv_progress, dequantize

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads (INVFLOW_THREADS overrides)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="invflow", description="Inverse-Flow normalizing flows.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", parents=[common], help="train a model by maximum likelihood")
    t.add_argument("--data", default="synth:two-gaussians",
                   help="synth:<two-gaussians|checkerboard>, idx:<path> or cifar:<path>")
    t.add_argument("--n", type=int, default=512, help="synthetic dataset size")
    t.add_argument("--shape", type=_int_list, default=[1, 8, 8], help="synthetic image shape C,H,W")
    t.add_argument("--levels", type=int, default=1)
    t.add_argument("--steps", type=int, default=2)
    t.add_argument("--coupling", choices=("affine", "quad"), default="affine")
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--kernel", type=int, default=3)
    t.add_argument("--split-prior", choices=("conditional", "standard"), default="conditional")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    t.add_argument("--metrics", help="CSV file for epoch,nll_nats,bpd,seconds")
    t.add_argument("--checkpoint", help="where to save the trained model")
    t.add_argument("--resume", help="checkpoint to continue training from")

    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--out", required=True, help="output .pgm/.ppm")

    r = sub.add_parser("reconstruct", parents=[common], help="encode/decode images and report the error")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", default="synth:two-gaussians")
    r.add_argument("--n", type=int, default=100)
    r.add_argument("--out", help="optional .pgm/.ppm of the reconstructions")

    i = sub.add_parser("interpolate", parents=[common], help="decode a latent-space interpolation")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", default="synth:two-gaussians")
    i.add_argument("--a", type=int, default=0, help="index of the first image")
    i.add_argument("--b", type=int, default=1, help="index of the second image")
    i.add_argument("--steps", type=int, default=8)
    i.add_argument("--out", required=True)

    b = sub.add_parser("bench", parents=[common], help="time the inverse against dense LU")
    b.add_argument("--sizes", type=_int_list, default=[16, 32])
    b.add_argument("--kernels", type=_int_list, default=[3])
    b.add_argument("--channels", type=_int_list, default=[1])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--csv", help="write case,m,k,C,method,median_s,checksum here")
    b.add_argument("--sampling", action="store_true", help="also time sampling vs training direction")

    o = sub.add_parser("oracle-check", parents=[common], help="randomized correctness checks")
    o.add_argument("--trials", type=int, default=200)
    p.subcommands = sub.choices
    return p


def _threads(args) -> int:
    env = os.environ.get("INVFLOW_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"INVFLOW_THREADS must be an integer, got {env!r}")
    return max(1, args.threads)


def _data_for(args, model_shape):
    C, H, W = model_shape
    ds = load_dataset(args.data, n=args.n if hasattr(args, "n") else 100, shape=(C, H, W), seed=args.seed)
    if tuple(ds.shape) != tuple(model_shape):
        raise DimensionError(f"data images {tuple(ds.shape)} do not match model input {tuple(model_shape)}")
    return ds


def cmd_train(args):
    progress = csv_progress(args.metrics) if args.metrics else None
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       seed=args.seed, dtype=args.dtype)
    try:
        if args.resume:
            ck = load_checkpoint(args.resume)
            model = ck.model
            ds = load_dataset(args.data, n=args.n, shape=model.config.input_shape, seed=args.seed)
            trainer = Trainer(model, ds, ck.train_config or tcfg, adam=ck.adam, epoch=ck.epoch,
                              rng_state=ck.rng_state)
        else:
            ds = load_dataset(args.data, n=args.n, shape=tuple(args.shape), seed=args.seed)
            cfg = ModelConfig(levels=args.levels, steps=args.steps, coupling=args.coupling,
                              hidden=args.hidden, kernel_size=args.kernel,
                              input_shape=tuple(ds.shape), split_prior=args.split_prior, seed=args.seed)
            model = FlowModel(cfg)
            trainer = Trainer(model, ds, tcfg)
        history = trainer.run(args.epochs, progress)
    finally:
        if progress is not None:
            progress.close()
    last = history[-1]
    print(f"epoch {last.epoch}: nll {last.nll:.4f} nats, {last.bpd:.4f} bpd")
    if args.checkpoint:
        save_checkpoint(args.checkpoint, trainer.model, trainer)
    return EXIT_OK


def cmd_sample(args):
    model = load_checkpoint(args.checkpoint).model
    rng = np.random.default_rng(args.seed)
    x = model.sample(rng, n=args.n, temperature=args.temperature)
    write_pnm(args.out, tile(to_uint8(x)))
    return EXIT_OK


def cmd_reconstruct(args):
    model = load_checkpoint(args.checkpoint).model
    ds = _data_for(args, model.config.input_shape)
    rng = np.random.default_rng(args.seed)
    y = dequantize(ds.images[:args.n], rng)
    rec = model.reconstruct(y)
    err = float(np.max(np.abs(rec - y)))
    print(f"images: {len(y)}  max abs reconstruction error: {err:.3e}")
    if args.out:
        write_pnm(args.out, tile(to_uint8(rec)))
    return EXIT_OK if err < 1e-5 else EXIT_DATA


def cmd_interpolate(args):
    model = load_checkpoint(args.checkpoint).model
    args.n = max(args.a, args.b) + 1
    ds = _data_for(args, model.config.input_shape)
    rng = np.random.default_rng(args.seed)
    ya = dequantize(ds.images[args.a], rng)
    yb = dequantize(ds.images[args.b], rng)
    frames = model.interpolate(ya, yb, args.steps)
    write_pnm(args.out, tile(to_uint8(np.stack(frames))))
    return EXIT_OK


def cmd_bench(args):
    report = bench.bench_inverse(args.sizes, args.kernels, args.channels, repeats=args.repeats,
                                 warmup=args.warmup, threads=_threads(args), seed=args.seed)
    print(report.table())
    for m in args.sizes:
        print(bench.stage_count_line(m))
    for r in report.records:
        if r.method == "dense-lu" and r.median_s is not None:
            print(f"{r.case}: sequential-diag speedup over dense-lu {report.speedup(r.case):.1f}x")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
    if args.sampling:
        for rec in bench.bench_sampling(bench.default_sampling_configs(), repeats=args.repeats,
                                        warmup=args.warmup, seed=args.seed):
            print(f"{rec.config}: ST {1e3 * rec.sampling_s:.3f} ms  FT {1e3 * rec.training_s:.3f} ms")
    return EXIT_OK


def cmd_oracle_check(args):
    res = run_oracle_check(args.trials, args.seed)
    print(f"max roundtrip error: {res['max_roundtrip_error']:.3e}")
    print(f"max dense-oracle error: {res['max_dense_error']:.3e}")
    print(f"max gradient error: {res['max_gradient_error']:.3e}")
    return EXIT_OK if res["ok"] else EXIT_DATA


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "bench": cmd_bench,
    "oracle-check": cmd_oracle_check,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            helptext = parser.subcommands[args.command].format_help()
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}\n\n{helptext}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"invflow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, NonFiniteError, OSError) as exc:
        print(f"invflow: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArgumentError as exc:
        print(f"invflow: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
