"""Train briefly on checkerboards, then write samples and a latent interpolation as PGM files."""
import argparse

import numpy as np

from invflow.data import synth_dataset
from invflow.model import FlowModel, ModelConfig
from invflow.pnm import tile, to_uint8, write_pnm
from invflow.train import TrainConfig, dequantize, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo")
    args = ap.parse_args()

    ds = synth_dataset("checkerboard", 128, shape=(1, 8, 8), seed=args.seed)
    model = FlowModel(ModelConfig(levels=2, steps=2, hidden=16, input_shape=(1, 8, 8), seed=args.seed))
    res = train(model, ds, TrainConfig(epochs=args.epochs, seed=args.seed))
    print(f"NLL {res.initial_nll:.2f} -> {res.metrics[-1].nll:.2f} nats")

    rng = np.random.default_rng(args.seed)
    write_pnm(f"{args.out}_samples.pgm", tile(to_uint8(model.sample(rng, n=8, temperature=0.7))))
    ya, yb = dequantize(ds.images[:2], rng)
    frames = model.interpolate(ya, yb, 8)
    write_pnm(f"{args.out}_interp.pgm", tile(to_uint8(np.stack(frames))))
    err = max(np.max(np.abs(frames[0] - ya)), np.max(np.abs(frames[-1] - yb)))
    print(f"interpolation endpoint error {err:.2e}")
    print(f"wrote {args.out}_samples.pgm and {args.out}_interp.pgm")


if __name__ == "__main__":
    main()
