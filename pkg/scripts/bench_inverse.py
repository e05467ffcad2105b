"""Inverse timing: dense LU vs diagonal schedules, sampling vs training, and m-scaling."""
import argparse

import numpy as np

from invflow.bench import bench_inverse, bench_sampling, default_sampling_configs, median_time, stage_count_line
from invflow.invconv import conv_inverse
from invflow.tensor import MaskedKernel


def scaling(sizes, k, repeats, seed):
    rng = np.random.default_rng(seed)
    K = MaskedKernel.random(1, k, rng, scale=0.2)
    times = []
    for m in sizes:
        y = rng.normal(size=(16, 1, m, m))
        times.append(median_time(lambda: conv_inverse(y, K), repeats, 2))
    return times


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="8,16,32,48")
    ap.add_argument("--kernels", default="2,3")
    ap.add_argument("--channels", default="1,2")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=2)
    ap.add_argument("--csv", default="bench_inverse.csv")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    ints = lambda s: [int(t) for t in s.split(",")]

    report = bench_inverse(ints(args.sizes), ints(args.kernels), ints(args.channels),
                           repeats=args.repeats, threads=args.threads, seed=args.seed)
    print(report.table())
    with open(args.csv, "w") as f:
        f.write(report.to_csv())
    for m in ints(args.sizes):
        print(stage_count_line(m))

    print("\nsampling (conv) vs training (inverse) per batch of 16:")
    for rec in bench_sampling(default_sampling_configs(), repeats=args.repeats, seed=args.seed):
        print(f"  {rec.config:<22} ST {1e3 * rec.sampling_s:7.3f} ms  FT {1e3 * rec.training_s:7.3f} ms"
              f"  FT/ST {rec.training_s / rec.sampling_s:.2f}")

    sizes = [16, 32, 64, 128]
    times = scaling(sizes, 3, args.repeats, args.seed)
    print("\nsequential inverse, k=3, C=1, batch 16:")
    for i, (m, t) in enumerate(zip(sizes, times)):
        growth = "" if i == 0 else f"  x{t / times[i - 1]:.2f} vs m={sizes[i - 1]}"
        print(f"  m={m:<4d} {1e3 * t:8.3f} ms{growth}")
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    print(f"  fitted exponent of m: {slope:.2f} (pure m^2 work would give 2.0)")


if __name__ == "__main__":
    main()
