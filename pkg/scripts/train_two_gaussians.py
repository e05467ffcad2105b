"""Train a small flow on the synthetic two-gaussians set and report NLL/BPD per epoch."""
import argparse

from invflow.checkpoint import save_checkpoint
from invflow.data import synth_dataset
from invflow.model import FlowModel, ModelConfig
from invflow.train import TrainConfig, csv_progress, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--levels", type=int, default=1)
    ap.add_argument("--steps", type=int, default=2)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--metrics", default="two_gaussians_metrics.csv")
    ap.add_argument("--checkpoint", default="two_gaussians.ckpt")
    args = ap.parse_args()

    ds = synth_dataset("two-gaussians", args.n, shape=(1, 8, 8), seed=args.seed)
    model = FlowModel(ModelConfig(levels=args.levels, steps=args.steps, hidden=args.hidden,
                                  input_shape=(1, 8, 8), seed=args.seed))
    sink = csv_progress(args.metrics)
    try:
        res = train(model, ds, TrainConfig(epochs=args.epochs, seed=args.seed), sink)
    finally:
        sink.close()
    print(f"parameters: {model.num_parameters()}")
    print(f"initial NLL {res.initial_nll:.3f} nats")
    n = len(res.metrics)
    for i in sorted(set(range(0, n, max(1, n // 10))) | {n - 1}):
        m = res.metrics[i]
        print(f"epoch {m.epoch:3d}  nll {m.nll:8.3f}  bpd {m.bpd:.4f}  ({m.seconds:.2f}s)")
    ratio = res.metrics[-1].nll / res.initial_nll
    print(f"final/initial NLL ratio {ratio:.3f}")
    save_checkpoint(args.checkpoint, model, res.trainer)


if __name__ == "__main__":
    main()
